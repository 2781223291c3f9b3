"""Lightweight feature-level and decision-level fusion decoder.

Stage ``j`` (1..4) of the decoder sits at backbone level ``j + 1``.  All
internal features are 64 channels wide.

* reduce:   F^_j = conv1x1(F_{j+1})
* forward:  Ff_j = relu(conv3x3(cat(F^_1..F^_4 resized to j, Sf_{j-1} resized)))
            (stage 1 has no saliency input);  Sf_j = conv1x1(Ff_j)
* backward: Fb_4 = relu(conv3x3(cat(Ff_4, Sf_4)))
            Fb_j = relu(conv3x3(cat(Fb_{j+1}, Sb_{j+1} resized, Ff_j, Sf_j)))
            Sb_j = conv1x1(Fb_j)
* final:    S = conv1x1(cat(Fb_1, Sb_2, Sb_3, Sb_4, Sf_2, Sf_3, Sf_4 resized to stage 1))

Every resize is bilinear with ``align_corners=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InputError, StateError

__all__ = [
    "WIDTH",
    "STAGES",
    "LfdfStageBank",
    "LFDF",
    "resize",
    "reduce_channels",
    "fuse_level2",
]

WIDTH = 64
STAGES = (1, 2, 3, 4)


def resize(x: Tensor, size) -> Tensor:
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def reduce_channels(feat: Tensor, conv: nn.Conv2d) -> Tensor:
    if feat.dim() != 4 or feat.shape[1] != conv.in_channels:
        raise InputError(f"reduction expects {conv.in_channels} channels, got shape {tuple(feat.shape)}")
    return conv(feat)


def fuse_level2(feat_r: Tensor, feat_d: Tensor) -> Tensor:
    """Element-wise sum of two unimodal feature maps."""
    if feat_r.shape != feat_d.shape:
        raise InputError(f"shape mismatch {tuple(feat_r.shape)} vs {tuple(feat_d.shape)}")
    return feat_r + feat_d


@dataclass
class LfdfStageBank:
    reduced: dict[int, Tensor]
    forward_feats: dict[int, Tensor] = field(default_factory=dict)
    forward_maps: dict[int, Tensor] = field(default_factory=dict)
    backward_feats: dict[int, Tensor] = field(default_factory=dict)
    backward_maps: dict[int, Tensor] = field(default_factory=dict)
    final_logits: Tensor | None = None

    def size(self, stage: int) -> tuple[int, int]:
        return tuple(self.reduced[stage].shape[-2:])


def _conv_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, kernel_size=3, padding=1), nn.ReLU(inplace=True))


def _head(cin: int) -> nn.Conv2d:
    return nn.Conv2d(cin, 1, kernel_size=1)


class LFDF(nn.Module):
    def __init__(self, in_channels: Sequence[int], width: int = WIDTH):
        super().__init__()
        if len(in_channels) != len(STAGES):
            raise InputError(f"LFDF takes {len(STAGES)} input levels, got {len(in_channels)}")
        self.in_channels = tuple(in_channels)
        self.width = width
        n = len(STAGES)
        self.reduce = nn.ModuleList(nn.Conv2d(c, width, kernel_size=1) for c in in_channels)
        self.forward_convs = nn.ModuleList(
            [_conv_relu(n * width, width)] + [_conv_relu(n * width + 1, width) for _ in range(n - 1)]
        )
        self.forward_heads = nn.ModuleList(_head(width) for _ in STAGES)
        # index j-1 holds stage j; stage 4 only sees its own forward output
        self.backward_convs = nn.ModuleList(
            [_conv_relu(2 * width + 2, width) for _ in range(n - 1)] + [_conv_relu(width + 1, width)]
        )
        self.backward_heads = nn.ModuleList(_head(width) for _ in STAGES)
        self.predict = _head(width + 2 * (n - 1))

    def reduce_all(self, feats: Mapping[int, Tensor] | Sequence[Tensor]) -> LfdfStageBank:
        """Build a stage bank from the four multi-modal features (stage-indexed)."""
        if not isinstance(feats, Mapping):
            feats = {j: f for j, f in zip(STAGES, feats)}
        missing = [j for j in STAGES if j not in feats]
        if missing:
            raise StateError(f"missing LFDF input stages {missing}")
        reduced = {j: reduce_channels(feats[j], self.reduce[j - 1]) for j in STAGES}
        return LfdfStageBank(reduced)

    def forward_aggregate(self, bank: LfdfStageBank) -> LfdfStageBank:
        missing = [j for j in STAGES if j not in bank.reduced]
        if missing:
            raise StateError(f"reduced stages {missing} are missing")
        for j in STAGES:
            size = bank.size(j)
            inputs = [resize(bank.reduced[k], size) for k in STAGES]
            if j > 1:
                inputs.append(resize(bank.forward_maps[j - 1], size))
            feat = self.forward_convs[j - 1](torch.cat(inputs, dim=1))
            bank.forward_feats[j] = feat
            bank.forward_maps[j] = self.forward_heads[j - 1](feat)
        return bank

    def backward_aggregate(self, bank: LfdfStageBank) -> LfdfStageBank:
        missing = [j for j in STAGES if j not in bank.forward_feats or j not in bank.forward_maps]
        if missing:
            raise StateError(f"forward aggregation results missing for stages {missing}")
        top = STAGES[-1]
        for j in reversed(STAGES):
            if j == top:
                inputs = [bank.forward_feats[j], bank.forward_maps[j]]
            else:
                size = bank.size(j)
                inputs = [
                    resize(bank.backward_feats[j + 1], size),
                    resize(bank.backward_maps[j + 1], size),
                    bank.forward_feats[j],
                    bank.forward_maps[j],
                ]
            feat = self.backward_convs[j - 1](torch.cat(inputs, dim=1))
            bank.backward_feats[j] = feat
            bank.backward_maps[j] = self.backward_heads[j - 1](feat)
        return bank

    def final_prediction(self, bank: LfdfStageBank) -> Tensor:
        """Final saliency logits at stage-1 resolution."""
        needed = [j for j in STAGES if j not in bank.backward_feats or j not in bank.backward_maps]
        if needed or len(bank.forward_maps) != len(STAGES):
            raise StateError("both aggregation passes must run before the final prediction")
        size = bank.size(1)
        inputs = [bank.backward_feats[1]]
        inputs += [resize(bank.backward_maps[j], size) for j in STAGES[1:]]
        inputs += [resize(bank.forward_maps[j], size) for j in STAGES[1:]]
        bank.final_logits = self.predict(torch.cat(inputs, dim=1))
        return bank.final_logits

    def forward(self, feats: Mapping[int, Tensor] | Sequence[Tensor]) -> LfdfStageBank:
        bank = self.reduce_all(feats)
        self.forward_aggregate(bank)
        self.backward_aggregate(bank)
        self.final_prediction(bank)
        return bank
