"""Correct-keypoint-rate scoring, aggregation tables, and curve output.

A keypoint counts as correct when its predicted position lies within
alpha * normalizer of the ground truth (inclusive), the normalizer being the
larger side of either the image or the annotated object box. Per-keypoint
scores pool counts across everything scored; per-image scores average the
per-image fractions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

IMAGE = "image"
BBOX = "bbox"
PER_IMAGE = "per_image"
PER_KEYPOINT = "per_keypoint"


@dataclass
class EvalRecord:
    """Scored predictions of one image pair."""

    pair_id: str
    category: str
    predicted: np.ndarray  # (K, 2) target-frame pixels
    truth: np.ndarray  # (K, 2)
    visible: np.ndarray  # (K,) bool; only visible keypoints are scored
    image_norm: float  # max(w, h) of the target image
    bbox_norm: float | None = None  # max(w, h) of the target object box
    skipped: int = 0  # annotated keypoints excluded before scoring

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1, 2)
        self.truth = np.asarray(self.truth, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if not (len(self.predicted) == len(self.truth) == len(self.visible)):
            raise InputError(f"pair {self.pair_id}: keypoint arrays differ in length")
        if not self.category:
            raise InputError(f"pair {self.pair_id}: empty category label")
        if self.image_norm <= 0 or (self.bbox_norm is not None and self.bbox_norm <= 0):
            raise InputError(f"pair {self.pair_id}: normalizer must be positive")

    def normalizer(self, norm_source: str) -> float:
        if norm_source == IMAGE:
            return self.image_norm
        if norm_source == BBOX:
            if self.bbox_norm is None:
                raise InputError(
                    f"pair {self.pair_id}: bbox normalization requested but no box"
                )
            return self.bbox_norm
        raise InputError(f"unknown normalization source {norm_source!r}")

    def counts(self, alpha: float, norm_source: str) -> tuple[int, int]:
        """(correct, total) over the visible keypoints."""
        radius = alpha * self.normalizer(norm_source)
        d = np.linalg.norm(self.predicted - self.truth, axis=1)
        ok = (d <= radius) & self.visible & np.isfinite(d)
        return int(ok.sum()), int(self.visible.sum())


def _validate_common(records: list[EvalRecord], alpha: float, mode: str) -> None:
    if not records:
        raise InputError("no evaluation records")
    if not (0 <= alpha <= 1):
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    if mode not in (PER_IMAGE, PER_KEYPOINT):
        raise InputError(f"unknown mode {mode!r}")


def pck(
    records: list[EvalRecord],
    alpha: float,
    norm_source: str = BBOX,
    mode: str = PER_KEYPOINT,
) -> float:
    """Fraction of correct keypoints at threshold alpha."""
    _validate_common(records, alpha, mode)
    if mode == PER_KEYPOINT:
        correct = total = 0
        for r in records:
            c, t = r.counts(alpha, norm_source)
            correct += c
            total += t
        if total == 0:
            raise InputError("no visible keypoints to score")
        return correct / total
    fractions = []
    for r in records:
        c, t = r.counts(alpha, norm_source)
        if t > 0:
            fractions.append(c / t)
    if not fractions:
        raise InputError("no visible keypoints to score")
    return float(np.mean(fractions))


def pck_curve(
    records: list[EvalRecord],
    alphas: list[float],
    norm_source: str = BBOX,
    mode: str = PER_KEYPOINT,
) -> list[tuple[float, float]]:
    """Scores along an increasing threshold grid; nondecreasing by design."""
    if not alphas or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise InputError("alpha grid must be strictly increasing")
    if not (0 < alphas[0] and alphas[-1] <= 1):
        raise InputError("alpha grid must lie in (0, 1]")
    return [(a, pck(records, a, norm_source, mode)) for a in alphas]


def aggregate(
    records: list[EvalRecord],
    group_by: str = "category",
    alpha: float = 0.1,
    norm_source: str = BBOX,
    mode: str = PER_KEYPOINT,
) -> list[dict]:
    """Score table with one row per group plus a pooled "All" row.

    Under per-keypoint mode "All" pools counts across categories rather than
    averaging category scores; under per-image mode it averages over every
    image regardless of category.
    """
    _validate_common(records, alpha, mode)
    if group_by not in ("category", "all"):
        raise InputError(f"unknown grouping {group_by!r}")
    rows = []
    if group_by == "category":
        by_cat: dict[str, list[EvalRecord]] = {}
        for r in records:
            by_cat.setdefault(r.category, []).append(r)
        for cat in sorted(by_cat):
            subset = by_cat[cat]
            rows.append(
                {
                    "group": cat,
                    "alpha": alpha,
                    "mode": mode,
                    "score": pck(subset, alpha, norm_source, mode),
                    "n_keypoints": sum(int(r.visible.sum()) for r in subset),
                }
            )
    rows.append(
        {
            "group": "All",
            "alpha": alpha,
            "mode": mode,
            "score": pck(records, alpha, norm_source, mode),
            "n_keypoints": sum(int(r.visible.sum()) for r in records),
        }
    )
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["group", "alpha", "mode", "score", "n_keypoints"])
        writer.writeheader()
        writer.writerows(rows)


def write_curve_svg(
    curves: dict[str, list[tuple[float, float]]],
    path: str | Path,
    title: str = "PCK curve",
) -> None:
    """Minimal self-contained SVG line plot of score-versus-threshold curves."""
    width, height, margin = 640, 420, 50
    xs = [a for pts in curves.values() for a, _ in pts]
    if not xs:
        raise InputError("nothing to plot")
    x_lo, x_hi = min(xs), max(xs)
    span = (x_hi - x_lo) or 1.0

    def sx(a):
        return margin + (a - x_lo) / span * (width - 2 * margin)

    def sy(v):
        return height - margin - v * (height - 2 * margin)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(
            f'<line x1="{margin}" y1="{y}" x2="{width - margin}" y2="{y}" stroke="#ddd"/>'
        )
        parts.append(
            f'<text x="{margin - 6}" y="{y + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{frac:.2f}</text>'
        )
    ticks = sorted(set(round(x, 6) for x in xs))
    stride = max(1, len(ticks) // 10)
    for a in ticks[::stride]:
        parts.append(
            f'<text x="{sx(a)}" y="{height - margin + 16}" text-anchor="middle" font-family="sans-serif" font-size="9">{a:g}</text>'
        )
    for k, (label, pts) in enumerate(sorted(curves.items())):
        color = palette[k % len(palette)]
        coords = " ".join(f"{sx(a):.1f},{sy(v):.1f}" for a, v in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{width - margin + 4}" y="{sy(pts[-1][1]) + 4}" font-family="sans-serif" font-size="10" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
