"""Full middle-level fusion network, parameter accounting and checkpoints.

``fusion_mode`` selects where the two modalities meet:

* ``input_concat`` - RGB and depth are stacked into a 4-channel image and a
  single extractor runs all five levels; no IMFF.
* ``levelK`` - independent RGB/depth extractors up to level K, IMFF at level
  K, one shared extractor for levels K+1..5.

The decoder always receives levels 2..5.  Levels below the fusion point are
still unimodal pairs and are merged by element-wise addition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import MAX_STRIDE, NUM_LEVELS, BackboneConfig, build_level_stack, seeded
from .errors import CheckpointError, ConfigError, InputError
from .imff import IMFF
from .lfdf import LFDF, STAGES, LfdfStageBank, fuse_level2, resize

log = logging.getLogger(__name__)

__all__ = [
    "FUSION_MODES",
    "ModelConfig",
    "SaliencyOutputs",
    "MiddleFusionNet",
    "build_model",
    "count_parameters",
    "parameter_breakdown",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

FUSION_MODES = ("input_concat", "level1", "level2", "level3", "level4", "level5")
CHECKPOINT_FORMAT = "mfsod-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion_mode: str = "level3"
    seed: int = 0
    projection_kernel: int = 1

    def __post_init__(self):
        if self.projection_kernel < 1 or self.projection_kernel % 2 == 0:
            raise ConfigError(f"projection_kernel must be a positive odd integer, got {self.projection_kernel}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}; expected one of {FUSION_MODES}")
        if not isinstance(self.backbone, BackboneConfig):
            raise ConfigError("backbone must be a BackboneConfig")

    @property
    def fusion_level(self) -> int | None:
        if self.fusion_mode == "input_concat":
            return None
        return int(self.fusion_mode[-1])

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "fusion_mode": self.fusion_mode,
            "seed": self.seed,
            "projection_kernel": self.projection_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        bb = dict(d.get("backbone") or {})
        if "input_size" in bb:
            bb["input_size"] = tuple(bb["input_size"])
        if bb.get("level_channels") is not None:
            bb["level_channels"] = tuple(bb["level_channels"])
        return cls(
            backbone=BackboneConfig(**bb),
            fusion_mode=d.get("fusion_mode", "level3"),
            seed=int(d.get("seed", 0)),
            projection_kernel=int(d.get("projection_kernel", 1)),
        )


@dataclass
class SaliencyOutputs:
    """Everything one forward pass produces.

    ``final`` is the probability map at input resolution; ``final_logits`` is
    the same map before the logistic.  Stage maps are logits at their own
    stage resolutions, listed for stages 1..4.
    """

    final: Tensor
    final_logits: Tensor
    forward_maps: list[Tensor]
    backward_maps: list[Tensor]
    bank: LfdfStageBank | None = None

    @property
    def intermediate_maps(self) -> list[Tensor]:
        return self.forward_maps + self.backward_maps

    def __len__(self) -> int:
        return 1 + len(self.forward_maps) + len(self.backward_maps)


def _xavier(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MiddleFusionNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        bb = config.backbone
        k = config.fusion_level
        if k is None:
            self.rgbd_extractor = build_level_stack(bb, 1, NUM_LEVELS, in_channels=4)
        else:
            self.rgb_extractor = build_level_stack(bb, 1, k, in_channels=3)
            self.depth_extractor = build_level_stack(bb, 1, k, in_channels=1)
            self.imff = IMFF(bb.channels(k), config.projection_kernel)
            self.shared_extractor = build_level_stack(bb, k + 1, NUM_LEVELS) if k < NUM_LEVELS else None
        self.decoder = LFDF([bb.channels(level) for level in range(2, NUM_LEVELS + 1)])
        if k is not None:
            _xavier(self.imff)
        _xavier(self.decoder)

    @property
    def fusion_level(self) -> int | None:
        return self.config.fusion_level

    def _check_inputs(self, rgb: Tensor, depth: Tensor) -> None:
        if rgb.dim() != 4 or rgb.shape[1] != 3:
            raise InputError(f"rgb must be (N, 3, H, W), got {tuple(rgb.shape)}")
        if depth.dim() != 4 or depth.shape[1] != 1:
            raise InputError(f"depth must be (N, 1, H, W), got {tuple(depth.shape)}")
        if rgb.shape[0] != depth.shape[0] or rgb.shape[-2:] != depth.shape[-2:]:
            raise InputError(f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} are not aligned")
        h, w = rgb.shape[-2:]
        if h == 0 or w == 0 or h % MAX_STRIDE or w % MAX_STRIDE:
            raise InputError(f"spatial size {h}x{w} is not divisible by {MAX_STRIDE}")

    def multimodal_features(self, rgb: Tensor, depth: Tensor) -> dict[int, Tensor]:
        """Backbone levels 2..5 as fed to the decoder."""
        k = self.fusion_level
        if k is None:
            feats = self.rgbd_extractor(torch.cat([rgb, depth], dim=1))
            return {level: feats[level] for level in range(2, NUM_LEVELS + 1)}
        fr = self.rgb_extractor(rgb)
        fd = self.depth_extractor(depth)
        fused = self.imff(fr[k], fd[k])
        out = {level: fuse_level2(fr[level], fd[level]) for level in range(2, k)}
        out[k] = fused
        if self.shared_extractor is not None:
            out.update(self.shared_extractor(fused))
        return {level: out[level] for level in range(2, NUM_LEVELS + 1)}

    def forward(self, rgb: Tensor, depth: Tensor, keep_bank: bool = False) -> SaliencyOutputs:
        self._check_inputs(rgb, depth)
        feats = self.multimodal_features(rgb, depth)
        bank = self.decoder({level - 1: f for level, f in feats.items()})
        logits = resize(bank.final_logits, rgb.shape[-2:])
        return SaliencyOutputs(
            final=torch.sigmoid(logits),
            final_logits=logits,
            forward_maps=[bank.forward_maps[j] for j in STAGES],
            backward_maps=[bank.backward_maps[j] for j in STAGES],
            bank=bank if keep_bank else None,
        )


def build_model(config: ModelConfig | None = None) -> MiddleFusionNet:
    config = config or ModelConfig()
    with seeded(config.seed):
        return MiddleFusionNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_breakdown(model: nn.Module) -> dict[str, int]:
    out = {name: count_parameters(child) for name, child in model.named_children()}
    out = {k: v for k, v in out.items() if v}
    out["total"] = count_parameters(model)
    return out


def save_checkpoint(model: MiddleFusionNet, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> MiddleFusionNet:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: not a readable weights file ({type(exc).__name__})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    try:
        cfg = dict(payload["model_config"])
        # weights come from the state dict, never from the original pretrained file
        cfg["backbone"] = {**cfg.get("backbone", {}), "pretrained_weights_path": None}
        config = ModelConfig.from_dict(cfg)
        model = build_model(config)
        model.load_state_dict(payload["state_dict"], strict=True)
    except (KeyError, TypeError, RuntimeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    model.eval()
    return model
