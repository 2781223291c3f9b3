"""Deep-supervision loss, step learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .backbone import seeded
from .data import RgbdSample, collate, preprocess
from .errors import ConfigError, InputError, NumericalError
from .metrics import MetricReport, evaluate_dataset
from .model import MiddleFusionNet, SaliencyOutputs, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "deep_supervision_loss",
    "lr_schedule",
    "train",
    "predict_maps",
    "evaluate_model",
]


@dataclass
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 5e-4
    batch_size: int = 4
    momentum: float = 0.9
    nesterov: bool = True
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 20
    epochs: int = 1
    input_size: int = 224
    seed: int = 0
    max_iters: int | None = None
    flip: bool = False
    invert_depth: bool = False

    def __post_init__(self):
        for name in ("lr", "weight_decay", "momentum", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "lr_decay_every", "epochs", "input_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.input_size % 32:
            raise ConfigError("input_size must be a multiple of 32")
        if self.max_iters is not None and self.max_iters <= 0:
            raise ConfigError("max_iters must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    iteration_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["train_loss"]


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise InputError("epoch must be >= 0")
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def deep_supervision_loss(outputs: SaliencyOutputs, gt: Tensor) -> Tensor:
    """Unit-weight sum of nine BCE terms: the final map and the eight stage maps.

    The final term is the BCE of the probability map, evaluated from its
    logits.  Stage maps are compared with the ground truth resized by nearest
    neighbour to their own resolution.  Each term is a per-pixel mean.
    """
    if gt.dim() != 4 or gt.shape[1] != 1:
        raise InputError(f"ground truth must be (N, 1, H, W), got {tuple(gt.shape)}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise InputError("ground truth must be binary")
    if gt.shape[-2:] != outputs.final_logits.shape[-2:]:
        raise InputError("ground truth must match the input resolution")
    gt = gt.to(outputs.final_logits.dtype)
    loss = F.binary_cross_entropy_with_logits(outputs.final_logits, gt)
    for logits in outputs.intermediate_maps:
        target = F.interpolate(gt, size=logits.shape[-2:], mode="nearest")
        loss = loss + F.binary_cross_entropy_with_logits(logits, target)
    return loss


def _batches(n: int, batch_size: int, generator: torch.Generator) -> list[list[int]]:
    order = torch.randperm(n, generator=generator).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: MiddleFusionNet,
    dataset: Sequence[RgbdSample],
    config: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    val_dataset: Sequence[RgbdSample] | None = None,
) -> tuple[MiddleFusionNet, TrainHistory]:
    """SGD with Nesterov momentum and step decay.

    With ``out_dir`` set, one JSON line per epoch goes to ``history.jsonl``
    and the final weights to ``checkpoint.pt``.
    """
    config = config or TrainConfig()
    if not dataset:
        raise InputError("training set is empty")
    size = (config.input_size, config.input_size)
    cached = [preprocess(s, size, invert_depth=config.invert_depth) for s in dataset]

    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        nesterov=config.nesterov,
        weight_decay=config.weight_decay,
    )
    history = TrainHistory()
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "history.jsonl").open("w", encoding="utf-8")

    gen = torch.Generator().manual_seed(config.seed)
    iteration = 0
    try:
        with seeded(config.seed):
            for epoch in range(config.epochs):
                lr = lr_schedule(epoch, config)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                model.train()
                losses = []
                for idx in _batches(len(cached), config.batch_size, gen):
                    items = [cached[i] for i in idx]
                    if config.flip:
                        flips = torch.rand(len(items), generator=gen) < 0.5
                        items = [tuple(t.flip(-1) for t in it) if f else it for it, f in zip(items, flips)]
                    rgb, depth, gt = collate(items)
                    loss = deep_supervision_loss(model(rgb, depth), gt)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError(f"non-finite loss {value} at epoch {epoch}, iteration {iteration}")
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    losses.append(value)
                    history.iteration_losses.append(value)
                    iteration += 1
                    if config.max_iters is not None and iteration >= config.max_iters:
                        break

                record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "iterations": iteration}
                if val_dataset:
                    record["metrics"] = evaluate_model(model, val_dataset, config.input_size).scalars()
                history.epochs.append(record)
                log.info("epoch %d lr %.3g loss %.4f", epoch, lr, record["train_loss"])
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if config.max_iters is not None and iteration >= config.max_iters:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()

    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoint.pt", extra={"train_config": config.to_dict()})
    return model, history


@torch.no_grad()
def predict_maps(
    model: MiddleFusionNet,
    samples: Sequence[RgbdSample],
    input_size: int = 224,
    invert_depth: bool = False,
    batch_size: int = 4,
) -> list[np.ndarray]:
    """Saliency maps resized back to each sample's own resolution."""
    was_training = model.training
    model.eval()
    out = []
    size = (input_size, input_size)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        rgb, depth, _ = collate([preprocess(s, size, invert_depth=invert_depth) for s in chunk])
        logits = model(rgb, depth).final_logits
        for s, z in zip(chunk, logits):
            z = F.interpolate(z[None], size=s.size, mode="bilinear", align_corners=False)
            out.append(torch.sigmoid(z)[0, 0].double().numpy())
    model.train(was_training)
    return out


def evaluate_model(
    model: MiddleFusionNet, samples: Sequence[RgbdSample], input_size: int = 224, invert_depth: bool = False
) -> MetricReport:
    preds = predict_maps(model, samples, input_size, invert_depth)
    return evaluate_dataset(preds, [s.gt for s in samples])
