"""RGB-D sample loading, synthetic scenes and preprocessing.

On-disk layout::

    <root>/RGB/<id>.jpg|png     3-channel colour image
    <root>/depth/<id>.png       single-channel depth, larger = nearer
    <root>/GT/<id>.png          8-bit mask, >= 128 is salient

Preprocessing resizes RGB and depth bilinearly and GT by nearest neighbour,
normalises RGB with the ImageNet statistics below and min-max scales each
depth map to [0, 1].
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, InputError

__all__ = [
    "RGB_MEAN",
    "RGB_STD",
    "RgbdSample",
    "load_rgbd_dataset",
    "write_rgbd_dataset",
    "synthesize_dataset",
    "preprocess",
    "collate",
    "write_split",
    "read_split",
    "split_ids",
]

RGB_MEAN = (0.485, 0.456, 0.406)
RGB_STD = (0.229, 0.224, 0.225)
RGB_SUFFIXES = (".jpg", ".jpeg", ".png")
GT_THRESHOLD = 128


@dataclass
class RgbdSample:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W), any numeric dtype
    gt: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InputError(f"{self.id}: rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2] or self.gt.shape != self.rgb.shape[:2]:
            raise InputError(
                f"{self.id}: rgb {self.rgb.shape[:2]}, depth {self.depth.shape}, gt {self.gt.shape} disagree"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


def _read(path: Path, mode: str | None) -> np.ndarray:
    with Image.open(path) as im:
        if mode is not None:
            im = im.convert(mode)
        return np.asarray(im)


def _read_depth(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def load_rgbd_dataset(root: str | Path) -> list[RgbdSample]:
    """Load every complete (RGB, depth, GT) triplet under ``root``, sorted by id."""
    root = Path(root)
    dirs = {name: root / name for name in ("RGB", "depth", "GT")}
    for name, d in dirs.items():
        if not d.is_dir():
            raise ConfigError(f"dataset root {root} has no {name}/ directory")

    def index(d: Path, suffixes) -> dict[str, Path]:
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in suffixes}

    rgb = index(dirs["RGB"], RGB_SUFFIXES)
    depth = index(dirs["depth"], (".png",))
    gt = index(dirs["GT"], (".png",))
    ids = sorted(set(rgb) | set(depth) | set(gt))
    samples = []
    for sid in ids:
        if sid not in rgb or sid not in depth or sid not in gt:
            have = [n for n, m in (("RGB", rgb), ("depth", depth), ("GT", gt)) if sid in m]
            warnings.warn(f"skipping {sid!r}: incomplete triplet (found only {have})", stacklevel=2)
            continue
        try:
            sample = RgbdSample(
                rgb=_read(rgb[sid], "RGB"),
                depth=_read_depth(depth[sid]),
                gt=(_read(gt[sid], "L") >= GT_THRESHOLD).astype(np.uint8),
                id=sid,
            )
        except (OSError, InputError) as exc:
            warnings.warn(f"skipping {sid!r}: {exc}", stacklevel=2)
            continue
        samples.append(sample)
    return samples


def write_rgbd_dataset(samples: Sequence[RgbdSample], root: str | Path) -> Path:
    """Write samples in the on-disk layout (PNG everywhere, GT as 0/255)."""
    root = Path(root)
    for name in ("RGB", "depth", "GT"):
        (root / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.rgb).save(root / "RGB" / f"{s.id}.png")
        depth = s.depth
        if depth.dtype != np.uint8 and depth.dtype != np.uint16:
            raise InputError(f"{s.id}: depth must be uint8 or uint16 to be written as PNG")
        Image.fromarray(depth).save(root / "depth" / f"{s.id}.png")
        Image.fromarray((s.gt > 0).astype(np.uint8) * 255).save(root / "GT" / f"{s.id}.png")
    return root


def _random_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ry, rx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
        if rng.random() < 0.5:
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask |= (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return mask


def synthesize_dataset(n: int, seed: int = 0, size: tuple[int, int] = (224, 224)) -> list[RgbdSample]:
    """Random scenes of 1-3 ellipses/rectangles in front of a tilted plane.

    Objects are the salient foreground: they are nearer (higher depth) than
    every background pixel and their colour contrasts with the background.
    Foreground covers 2-60% of each image.
    """
    if n < 1:
        raise ConfigError("synthesize_dataset needs n >= 1")
    h, w = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for i in range(n):
        while True:
            mask = _random_mask(rng, h, w)
            frac = mask.mean()
            if 0.02 <= frac <= 0.6:
                break

        # background: plane in [0.05, 0.45]; objects: [0.6, 0.98]
        gy, gx = rng.uniform(-1, 1, size=2)
        plane = gy * yy / max(h - 1, 1) + gx * xx / max(w - 1, 1)
        plane = (plane - plane.min()) / (np.ptp(plane) + 1e-12)
        depth = 0.05 + 0.4 * plane
        depth[mask] = rng.uniform(0.63, 0.95) + rng.uniform(-0.03, 0.03, size=mask.sum())

        bg_color = rng.uniform(0, 255, size=3)
        fg_color = (bg_color + rng.uniform(100, 155, size=3) * rng.choice([-1, 1], size=3)) % 256
        rgb = np.empty((h, w, 3))
        shade = 0.8 + 0.2 * plane
        rgb[:] = bg_color * shade[..., None]
        rgb[mask] = fg_color
        rgb += rng.normal(0, 8, size=rgb.shape)

        samples.append(
            RgbdSample(
                rgb=np.clip(rgb, 0, 255).astype(np.uint8),
                depth=np.clip(depth * 255, 0, 255).astype(np.uint8),
                gt=mask.astype(np.uint8),
                id=f"syn_{seed}_{i:05d}",
            )
        )
    return samples


def preprocess(
    sample: RgbdSample,
    target: tuple[int, int] = (224, 224),
    invert_depth: bool = False,
    flip: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return float32 ``(rgb, depth, gt)`` tensors shaped (1, C, H, W)."""
    target = tuple(int(t) for t in target)
    rgb = torch.from_numpy(np.ascontiguousarray(sample.rgb, dtype=np.float32) / 255.0).permute(2, 0, 1)[None]
    depth = torch.from_numpy(np.ascontiguousarray(sample.depth, dtype=np.float32))[None, None]
    gt = torch.from_numpy(np.ascontiguousarray(sample.gt > 0, dtype=np.float32))[None, None]

    if tuple(rgb.shape[-2:]) != target:
        rgb = F.interpolate(rgb, size=target, mode="bilinear", align_corners=False)
        depth = F.interpolate(depth, size=target, mode="bilinear", align_corners=False)
        gt = F.interpolate(gt, size=target, mode="nearest")

    mean = torch.tensor(RGB_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(RGB_STD).view(1, 3, 1, 1)
    rgb = (rgb - mean) / std

    lo, hi = depth.min(), depth.max()
    if hi > lo:
        depth = (depth - lo) / (hi - lo)
    else:
        warnings.warn(f"{sample.id}: constant depth map, using 0.5", stacklevel=2)
        depth = torch.full_like(depth, 0.5)
    if invert_depth:
        depth = 1.0 - depth

    if flip:
        rgb, depth, gt = (t.flip(-1) for t in (rgb, depth, gt))
    return rgb, depth, gt


def collate(items: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]):
    rgb, depth, gt = zip(*items)
    return torch.cat(rgb), torch.cat(depth), torch.cat(gt)


def split_ids(ids: Sequence[str], n_train: int, seed: int = 0) -> tuple[list[str], list[str]]:
    """Seeded random train/test split of sample ids."""
    ids = sorted(ids)
    if not 0 <= n_train <= len(ids):
        raise ConfigError(f"cannot take {n_train} training ids from {len(ids)}")
    shuffled = ids[:]
    random.Random(seed).shuffle(shuffled)
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])


def write_split(ids: Sequence[str], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    return path


def read_split(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
