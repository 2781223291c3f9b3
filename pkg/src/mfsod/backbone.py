"""Hierarchical feature extractors.

The classification backbone is cut into five levels whose strides double
(2, 4, 8, 16, 32).  A middle-level fusion network uses two independent
copies of the low levels (one per modality) and a single copy of the
remaining high levels.

Level mapping for the channel-shuffle backbone::

    level 1   stem 3x3/2 conv                      stride 2
    level 2   shuffle stage 2                      stride 4
    level 3   shuffle stage 3                      stride 8
    level 4   shuffle stage 4                      stride 16
    level 5   3x3/2 max-pool + 1x1 expansion conv  stride 32

The stock network pools right after the stem; here that pool is moved in
front of the expansion conv so that each of the five levels sits at its own
resolution.  Parameter-bearing layers are untouched, so classification
checkpoints still load.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torch import Tensor
from torchvision.models import ShuffleNetV2
from torchvision.models.vgg import make_layers

from .errors import ConfigError, InputError

__all__ = [
    "VARIANTS",
    "SHUFFLE_WIDTHS",
    "BackboneConfig",
    "FeaturePyramid",
    "LevelStack",
    "build_level_stack",
    "build_extractors",
    "extract_low_level",
    "extract_high_level",
    "seeded",
]

SHUFFLE = "lightweight-shuffle"
VGG = "vgg-style"
VARIANTS = (SHUFFLE, VGG)

# channel-shuffle widths; 1.5x reproduces the reported model sizes
SHUFFLE_WIDTHS = {
    "0.5x": (24, 48, 96, 192, 1024),
    "1.0x": (24, 116, 232, 464, 1024),
    "1.5x": (24, 176, 352, 704, 1024),
    "2.0x": (24, 244, 488, 976, 2048),
}

DEFAULT_CHANNELS = {
    SHUFFLE: SHUFFLE_WIDTHS["1.5x"],
    VGG: (64, 128, 256, 512, 512),
}

NUM_LEVELS = 5
MAX_STRIDE = 2**NUM_LEVELS


@contextlib.contextmanager
def seeded(seed: int | None):
    """Seed torch's global RNG inside the block without leaking state."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = SHUFFLE
    level_channels: tuple[int, ...] | str | None = None
    input_size: tuple[int, int] = (224, 224)
    pretrained_weights_path: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")
        channels = self.level_channels
        if channels is None:
            channels = DEFAULT_CHANNELS[self.variant]
        elif isinstance(channels, str):
            if self.variant != SHUFFLE or channels not in SHUFFLE_WIDTHS:
                raise ConfigError(f"unknown width preset {channels!r} for {self.variant!r}")
            channels = SHUFFLE_WIDTHS[channels]
        channels = tuple(int(c) for c in channels)
        if len(channels) != NUM_LEVELS or any(c <= 0 for c in channels):
            raise ConfigError(f"level_channels must be {NUM_LEVELS} positive integers, got {channels}")
        if self.variant == SHUFFLE and any(c % 2 for c in channels[1:4]):
            raise ConfigError("shuffle stage channels must be even")
        object.__setattr__(self, "level_channels", channels)

        size = tuple(int(s) for s in self.input_size)
        if len(size) != 2 or any(s <= 0 or s % MAX_STRIDE for s in size):
            raise ConfigError(f"input_size must be two positive multiples of {MAX_STRIDE}, got {size}")
        object.__setattr__(self, "input_size", size)

        if self.pretrained_weights_path is not None and not Path(self.pretrained_weights_path).is_file():
            raise ConfigError(f"pretrained weights not found: {self.pretrained_weights_path}")

    def channels(self, level: int) -> int:
        return self.level_channels[level - 1]

    @staticmethod
    def stride(level: int) -> int:
        return 2**level

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "level_channels": list(self.level_channels),
            "input_size": list(self.input_size),
            "pretrained_weights_path": self.pretrained_weights_path,
        }


@dataclass
class FeaturePyramid:
    """Feature maps keyed by level index (1..5)."""

    levels: dict[int, Tensor] = field(default_factory=dict)

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def __contains__(self, level: int) -> bool:
        return level in self.levels

    def __iter__(self):
        return iter(sorted(self.levels))

    def check(self, config: BackboneConfig, image_hw: tuple[int, int]) -> None:
        h, w = image_hw
        for level, feat in self.levels.items():
            s = config.stride(level)
            expected = (config.channels(level), h // s, w // s)
            if tuple(feat.shape[1:]) != expected:
                raise InputError(f"level {level}: expected (C,H,W)={expected}, got {tuple(feat.shape[1:])}")


class LevelStack(nn.Module):
    """A contiguous run of backbone levels, returning every level it computes."""

    def __init__(self, blocks: dict[int, nn.Module], in_channels: int):
        super().__init__()
        self.first_level = min(blocks)
        self.last_level = max(blocks)
        self.in_channels = in_channels
        self.blocks = nn.ModuleDict({f"level{i}": blocks[i] for i in sorted(blocks)})

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(range(self.first_level, self.last_level + 1))

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        out = {}
        for i in range(self.first_level, self.last_level + 1):
            x = self.blocks[f"level{i}"](x)
            out[i] = x
        return out


def _init_backbone(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _load_subset(module: nn.Module, state: dict, prefixes: tuple[str, ...], variant: str) -> None:
    subset = {k: v for k, v in state.items() if k.startswith(prefixes)}
    own = module.state_dict()
    missing = [k for k in own if k.startswith(prefixes) and k not in subset]
    if missing or not subset:
        raise ConfigError(f"weight file does not match variant {variant!r}: missing {missing[:3]}...")
    for k, v in subset.items():
        if k not in own or tuple(own[k].shape) != tuple(v.shape):
            raise ConfigError(f"weight file does not match variant {variant!r} at {k!r}")
    module.load_state_dict(subset, strict=False)


def _read_weights(path: str) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a grab-bag of types here
        raise ConfigError(f"cannot read weight file {path}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ConfigError(f"weight file {path} does not hold a state dict")
    return state


def _adapt_stem(conv: nn.Conv2d, in_channels: int) -> nn.Conv2d:
    """Rebuild a 3-channel stem conv for 1-channel (depth) or 4-channel (RGB-D) input."""
    if in_channels == conv.in_channels:
        return conv
    new = nn.Conv2d(
        in_channels,
        conv.out_channels,
        conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    )
    with torch.no_grad():
        w = conv.weight
        if in_channels == 1:
            new.weight.copy_(w.mean(dim=1, keepdim=True))
        elif in_channels == w.shape[1] + 1:
            new.weight.copy_(torch.cat([w, torch.zeros_like(w[:, :1])], dim=1))
        else:
            raise ConfigError(f"cannot adapt a {conv.in_channels}-channel stem to {in_channels} channels")
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def _shuffle_levels(config: BackboneConfig, state: dict | None) -> dict[int, nn.Module]:
    net = ShuffleNetV2([4, 8, 4], list(config.level_channels))
    if state is None:
        _init_backbone(net)
    else:
        _load_subset(net, state, ("conv1.", "stage2.", "stage3.", "stage4.", "conv5."), config.variant)
    return {
        1: net.conv1,
        2: net.stage2,
        3: net.stage3,
        4: net.stage4,
        5: nn.Sequential(nn.MaxPool2d(kernel_size=3, stride=2, padding=1), net.conv5),
    }


def _vgg_levels(config: BackboneConfig, state: dict | None) -> dict[int, nn.Module]:
    c = config.level_channels
    cfg = [c[0], c[0], "M", c[1], c[1], "M", c[2], c[2], c[2], "M", c[3], c[3], c[3], "M", c[4], c[4], c[4], "M"]
    features = make_layers(cfg, batch_norm=False)
    if state is None:
        _init_backbone(features)
    else:
        holder = nn.Module()
        holder.features = features
        _load_subset(holder, state, ("features.",), config.variant)
    layers = list(features)
    cuts = [0] + [i + 1 for i, m in enumerate(layers) if isinstance(m, nn.MaxPool2d)]
    return {level: nn.Sequential(*layers[cuts[level - 1] : cuts[level]]) for level in range(1, NUM_LEVELS + 1)}


def build_level_stack(config: BackboneConfig, first: int, last: int, in_channels: int | None = None) -> LevelStack:
    """Build backbone levels ``first..last`` as an independent module.

    ``in_channels`` only matters when ``first == 1`` (3 for RGB, 1 for depth,
    4 for concatenated RGB-D).  Pretrained stems are adapted by averaging
    over, or zero-extending, the input-channel axis.
    """
    if not 1 <= first <= last <= NUM_LEVELS:
        raise ConfigError(f"invalid level range {first}..{last}")
    state = _read_weights(config.pretrained_weights_path) if config.pretrained_weights_path else None
    builder = _shuffle_levels if config.variant == SHUFFLE else _vgg_levels
    levels = builder(config, state)
    if first == 1:
        in_channels = 3 if in_channels is None else in_channels
        stem = levels[1][0]
        levels[1][0] = _adapt_stem(stem, in_channels)
    else:
        in_channels = config.channels(first - 1)
    return LevelStack({i: levels[i] for i in range(first, last + 1)}, in_channels)


def build_extractors(
    config: BackboneConfig, split_level: int = 3, seed: int | None = None
) -> tuple[LevelStack, LevelStack, LevelStack | None]:
    """Return ``(rgb_extractor, depth_extractor, shared_extractor)``.

    The two unimodal extractors cover levels ``1..split_level`` and never
    share storage.  The shared extractor covers the remaining levels and is
    ``None`` when ``split_level == 5``.
    """
    with seeded(seed):
        rgb = build_level_stack(config, 1, split_level, in_channels=3)
        depth = build_level_stack(config, 1, split_level, in_channels=1)
        shared = build_level_stack(config, split_level + 1, NUM_LEVELS) if split_level < NUM_LEVELS else None
    return rgb, depth, shared


def _check_image(image: Tensor, in_channels: int) -> None:
    if image.dim() != 4:
        raise InputError(f"expected a (N, C, H, W) tensor, got shape {tuple(image.shape)}")
    if image.shape[1] != in_channels:
        raise InputError(f"expected {in_channels} input channels, got {image.shape[1]}")
    h, w = image.shape[-2:]
    if h % MAX_STRIDE or w % MAX_STRIDE or h == 0 or w == 0:
        raise InputError(f"spatial size {h}x{w} is not divisible by {MAX_STRIDE}")


def extract_low_level(image: Tensor, extractor: LevelStack) -> FeaturePyramid:
    if extractor.first_level != 1:
        raise InputError("extract_low_level needs an extractor starting at level 1")
    _check_image(image, extractor.in_channels)
    return FeaturePyramid(extractor(image))


def extract_high_level(fused: Tensor, shared_extractor: LevelStack) -> FeaturePyramid:
    if fused.dim() != 4 or fused.shape[1] != shared_extractor.in_channels:
        raise InputError(
            f"shared extractor expects {shared_extractor.in_channels} channels, got shape {tuple(fused.shape)}"
        )
    return FeaturePyramid(shared_extractor(fused))
