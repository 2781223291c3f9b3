"""Saliency evaluation: MAE, PR curve, adaptive F-measure, S-measure, E-measure.

All functions take a saliency map ``S`` with values in [0, 1] and a binary
ground truth ``Y`` of the same 2-D shape (numpy arrays or anything
``np.asarray`` accepts).  No min-max rescaling of ``S`` is applied.

Conventions:

* adaptive threshold ``t = clip(2 * mean(S), eps, 1 - eps)``; a pixel is
  predicted salient when ``S >= t``.  The lower clip keeps an all-zero map
  from being binarised as all-foreground.
* precision at a threshold with no predicted positives is 1.
* an all-zero ground truth makes recall undefined; PR and F return NaN with
  a :class:`DegenerateSampleWarning` and dataset averaging skips the sample.
* S-measure follows the structure measure with ``alpha = 0.5``: object-aware
  term plus region-aware term over the four quadrants split at the ground
  truth centroid (1-based, rounded half up).  Variances use ``n - 1``
  (floored at 1).
* E-measure is the enhanced-alignment mean over pixels of the binarised map
  (denominator ``W * H``, so a perfect map scores exactly 1).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

__all__ = [
    "EPS",
    "N_THRESHOLDS",
    "DegenerateSampleWarning",
    "MetricReport",
    "thresholds",
    "adaptive_threshold",
    "mae",
    "pr_curve",
    "f_beta",
    "f_measure",
    "s_measure",
    "e_measure",
    "evaluate_dataset",
    "write_report",
]

EPS = float(np.finfo(np.float64).eps)
N_THRESHOLDS = 256


class DegenerateSampleWarning(UserWarning):
    """Ground truth with no foreground; recall-based metrics are undefined."""


def _prepare(S, Y) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=np.float64)
    Y = np.asarray(Y)
    if S.shape != Y.shape:
        raise InputError(f"saliency map {S.shape} and ground truth {Y.shape} differ in shape")
    if S.ndim != 2 or S.size == 0:
        raise InputError(f"expected non-empty 2-D maps, got shape {S.shape}")
    if not np.all((S >= 0) & (S <= 1)):
        raise InputError("saliency values must lie in [0, 1]")
    return S, (Y > 0.5).astype(np.float64)


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    """``n`` evenly spaced thresholds in [0, 1): k / n."""
    return np.arange(n, dtype=np.float64) / n


def adaptive_threshold(S) -> float:
    return float(np.clip(2.0 * np.mean(S), EPS, 1.0 - EPS))


def mae(S, Y) -> float:
    S, Y = _prepare(S, Y)
    return float(np.mean(np.abs(S - Y)))


def pr_curve(S, Y, n_thresholds: int = N_THRESHOLDS) -> np.ndarray:
    """Array of shape (n_thresholds, 2) holding (precision, recall) per threshold."""
    S, Y = _prepare(S, Y)
    n_pos = Y.sum()
    if n_pos == 0:
        warnings.warn("ground truth has no foreground; PR curve undefined", DegenerateSampleWarning, stacklevel=2)
        return np.full((n_thresholds, 2), np.nan)
    # histogram counts of S per bin -> cumulative counts of S >= t
    edges = thresholds(n_thresholds)
    bins = np.searchsorted(edges, S.ravel(), side="right") - 1
    fg = np.bincount(bins, weights=Y.ravel(), minlength=n_thresholds)
    allc = np.bincount(bins, minlength=n_thresholds).astype(np.float64)
    tp = np.cumsum(fg[::-1])[::-1]
    pp = np.cumsum(allc[::-1])[::-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pp > 0, tp / pp, 1.0)
    recall = tp / n_pos
    return np.stack([precision, recall], axis=1)


def f_beta(precision, recall, beta2: float = 0.3):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, 0.0)
    return out if out.ndim else float(out)


def f_measure(S, Y, beta2: float = 0.3) -> float:
    """F-beta at the per-image adaptive threshold."""
    S, Y = _prepare(S, Y)
    n_pos = Y.sum()
    if n_pos == 0:
        warnings.warn("ground truth has no foreground; F-measure undefined", DegenerateSampleWarning, stacklevel=2)
        return float("nan")
    pred = S >= adaptive_threshold(S)
    tp = float(np.sum(pred * Y))
    n_pred = float(pred.sum())
    precision = tp / n_pred if n_pred > 0 else 1.0
    recall = tp / n_pos
    return float(f_beta(precision, recall, beta2))


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def _s_object(S: np.ndarray, Y: np.ndarray) -> float:
    u = Y.mean()
    fg = S * Y
    bg = (1.0 - S) * (1.0 - Y)
    o_fg = _object_score(fg[Y == 1])
    o_bg = _object_score(bg[Y == 0])
    return float(u * o_fg + (1.0 - u) * o_bg)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def _centroid(Y: np.ndarray) -> tuple[int, int]:
    """1-based (row, col) split point; quadrants are [:r, :c], [:r, c:], ..."""
    h, w = Y.shape
    if Y.sum() == 0:
        return _round_half_up(h / 2), _round_half_up(w / 2)
    rows, cols = np.nonzero(Y)
    return _round_half_up(rows.mean()) + 1, _round_half_up(cols.mean()) + 1


def _ssim(S: np.ndarray, Y: np.ndarray) -> float:
    n = S.size
    if n == 0:
        return 0.0
    x, y = S.mean(), Y.mean()
    denom = max(n - 1, 1)
    sx = np.sum((S - x) ** 2) / denom
    sy = np.sum((Y - y) ** 2) / denom
    sxy = np.sum((S - x) * (Y - y)) / denom
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    return 1.0 if beta == 0 else 0.0


def _s_region(S: np.ndarray, Y: np.ndarray) -> float:
    h, w = Y.shape
    r, c = _centroid(Y)
    total = 0.0
    for rs in (slice(0, r), slice(r, h)):
        for cs in (slice(0, c), slice(c, w)):
            ys = Y[rs, cs]
            if ys.size:
                total += ys.size / Y.size * _ssim(S[rs, cs], ys)
    return total


def s_measure(S, Y, alpha: float = 0.5) -> float:
    S, Y = _prepare(S, Y)
    y = Y.mean()
    if y == 0:
        return float(1.0 - S.mean())
    if y == 1:
        return float(S.mean())
    q = alpha * _s_object(S, Y) + (1.0 - alpha) * _s_region(S, Y)
    return float(max(q, 0.0))


def e_measure(S, Y) -> float:
    S, Y = _prepare(S, Y)
    fm = (S >= adaptive_threshold(S)).astype(np.float64)
    if Y.sum() == 0:
        enhanced = 1.0 - fm
    elif Y.sum() == Y.size:
        enhanced = fm
    else:
        a = fm - fm.mean()
        b = Y - Y.mean()
        align = 2.0 * a * b / (a * a + b * b + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


@dataclass
class MetricReport:
    mae: float
    f_beta: float
    s_measure: float
    e_measure: float
    pr_curve: np.ndarray = field(repr=False)
    n_images: int = 0
    n_degenerate: int = 0

    def scalars(self) -> dict[str, float]:
        return {"mae": self.mae, "f_beta": self.f_beta, "s_measure": self.s_measure, "e_measure": self.e_measure}


def evaluate_dataset(predictions: Sequence, ground_truths: Sequence, beta2: float = 0.3) -> MetricReport:
    """Average per-image metrics; PR curves are averaged per threshold.

    Samples with an empty ground truth still count toward MAE, S and E but are
    skipped for F and PR.
    """
    if len(predictions) != len(ground_truths):
        raise InputError(f"{len(predictions)} predictions vs {len(ground_truths)} ground truths")
    if not predictions:
        raise InputError("nothing to evaluate")
    maes, fs, ss, es, prs = [], [], [], [], []
    degenerate = 0
    for S, Y in zip(predictions, ground_truths):
        S, Y = _prepare(S, Y)
        maes.append(mae(S, Y))
        ss.append(s_measure(S, Y))
        es.append(e_measure(S, Y))
        if Y.sum() == 0:
            degenerate += 1
            continue
        fs.append(f_measure(S, Y, beta2))
        prs.append(pr_curve(S, Y))
    if degenerate:
        warnings.warn(
            f"{degenerate} sample(s) with empty ground truth excluded from F/PR averaging",
            DegenerateSampleWarning,
            stacklevel=2,
        )
    pr = np.mean(prs, axis=0) if prs else np.full((N_THRESHOLDS, 2), np.nan)
    return MetricReport(
        mae=float(np.mean(maes)),
        f_beta=float(np.mean(fs)) if fs else float("nan"),
        s_measure=float(np.mean(ss)),
        e_measure=float(np.mean(es)),
        pr_curve=pr,
        n_images=len(maes),
        n_degenerate=degenerate,
    )


def write_report(report: MetricReport, out_dir: str | Path, stem: str = "metrics") -> dict[str, Path]:
    """Write ``<stem>.json``, ``<stem>.csv`` and ``pr_curve.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scalars = report.scalars()
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "pr_curve": out_dir / "pr_curve.csv",
    }
    payload = {**scalars, "n_images": report.n_images, "n_degenerate": report.n_degenerate}
    paths["json"].write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(scalars))
        writer.writeheader()
        writer.writerow(scalars)
    with paths["pr_curve"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, (p, r) in zip(thresholds(len(report.pr_curve)), report.pr_curve):
            writer.writerow([f"{t:.8f}", repr(float(p)), repr(float(r))])
    return paths
