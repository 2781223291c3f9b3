"""Information-aware multi-modal feature fusion.

Both unimodal feature maps pass through one shared projection conv (1x1 by
default, any odd kernel with "same" padding).  Their sum, product and
difference are concatenated and a 1x1 conv turns them into two selection
logits per location.  A two-way softmax makes the pair of weights a convex
combination, which is then applied to the *unprojected* inputs.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
from torch import Tensor

from .errors import InputError

__all__ = [
    "InteractionMaps",
    "IMFF",
    "information_projection",
    "information_interactions",
    "selection_weights",
    "weighted_fusion",
    "imff_fuse",
]


class InteractionMaps(NamedTuple):
    tot: Tensor
    sh: Tensor
    diff: Tensor


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def information_projection(feat: Tensor, projection: nn.Conv2d) -> Tensor:
    if feat.dim() != 4 or feat.shape[1] != projection.in_channels:
        raise InputError(f"projection expects {projection.in_channels} channels, got shape {tuple(feat.shape)}")
    return projection(feat)


def information_interactions(proj_r: Tensor, proj_d: Tensor) -> InteractionMaps:
    _same_shape(proj_r, proj_d, "information_interactions")
    return InteractionMaps(proj_r + proj_d, proj_r * proj_d, proj_r - proj_d)


def selection_weights(maps: InteractionMaps, selector: nn.Conv2d) -> tuple[Tensor, Tensor]:
    """Per-location weights ``(w_r, w_d)``, each (N, 1, H, W), summing to one."""
    _same_shape(maps.tot, maps.sh, "selection_weights")
    _same_shape(maps.tot, maps.diff, "selection_weights")
    stacked = torch.cat([maps.tot, maps.sh, maps.diff], dim=1)
    if stacked.shape[1] != selector.in_channels or selector.out_channels != 2:
        raise InputError(
            f"selector maps {selector.in_channels}->{selector.out_channels} channels, "
            f"got {stacked.shape[1]} input channels"
        )
    w = torch.softmax(selector(stacked), dim=1)
    return w[:, 0:1], w[:, 1:2]


def weighted_fusion(feat_r: Tensor, feat_d: Tensor, w_r: Tensor, w_d: Tensor) -> Tensor:
    _same_shape(feat_r, feat_d, "weighted_fusion")
    for w in (w_r, w_d):
        if w.dim() != 4 or w.shape[1] != 1 or w.shape[-2:] != feat_r.shape[-2:] or w.shape[0] != feat_r.shape[0]:
            raise InputError(f"weight map of shape {tuple(w.shape)} does not broadcast over {tuple(feat_r.shape)}")
    return w_r * feat_r + w_d * feat_d


def imff_fuse(feat_r: Tensor, feat_d: Tensor, module: IMFF) -> Tensor:
    return module(feat_r, feat_d)


class IMFF(nn.Module):
    def __init__(self, channels: int, projection_kernel: int = 1):
        super().__init__()
        if projection_kernel < 1 or projection_kernel % 2 == 0:
            raise InputError(f"projection kernel must be a positive odd integer, got {projection_kernel}")
        self.channels = channels
        # shared between modalities
        self.project = nn.Conv2d(channels, channels, projection_kernel, padding=projection_kernel // 2)
        self.select = nn.Conv2d(3 * channels, 2, kernel_size=1)

    def weights(self, feat_r: Tensor, feat_d: Tensor) -> tuple[Tensor, Tensor]:
        _same_shape(feat_r, feat_d, "IMFF")
        maps = information_interactions(
            information_projection(feat_r, self.project),
            information_projection(feat_d, self.project),
        )
        return selection_weights(maps, self.select)

    def forward(self, feat_r: Tensor, feat_d: Tensor) -> Tensor:
        w_r, w_d = self.weights(feat_r, feat_d)
        return weighted_fusion(feat_r, feat_d, w_r, w_d)
