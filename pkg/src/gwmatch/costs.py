"""Ground cost and the binary disk structure kernels.

Structure costs are never materialized as dense N x N masks; a DiskKernel
stores the integer lattice offsets of a disc and the convolution module
applies them directly on the flattened grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .grid import FeatureMap

STRICT = "strict"  # membership: dx^2 + dy^2 <  radius^2
INCLUSIVE = "inclusive"  # membership: dx^2 + dy^2 <= radius^2


@dataclass(frozen=True)
class GroundCost:
    """Dense feature dissimilarity matrix, C = 1 - cosine similarity."""

    matrix: np.ndarray  # (N_src, N_tgt), values in [0, 2]


@dataclass(frozen=True)
class DiskKernel:
    """Integer offsets of a lattice disc, in lexicographic (dx, dy) order."""

    radius: float
    mode: str
    offsets: np.ndarray  # (M, 2) int, columns (dx, dy)

    @property
    def size(self) -> int:
        return self.offsets.shape[0]

    def offset_set(self) -> set[tuple[int, int]]:
        return {(int(dx), int(dy)) for dx, dy in self.offsets}

    def runs(self) -> np.ndarray:
        """Per-row decomposition: rows (dy, xlo, xhi) with contiguous dx runs.

        Valid because a disc's intersection with each lattice row is a single
        interval; the convolution kernels rely on this.
        """
        out = []
        by_dy: dict[int, list[int]] = {}
        for dx, dy in self.offsets:
            by_dy.setdefault(int(dy), []).append(int(dx))
        for dy in sorted(by_dy):
            xs = sorted(by_dy[dy])
            assert xs == list(range(xs[0], xs[-1] + 1))
            out.append((dy, xs[0], xs[-1]))
        return np.asarray(out, dtype=np.int64)


def disk_kernel(radius: float, mode: str = STRICT) -> DiskKernel:
    """Enumerate the integer offsets within a disc of the given radius."""
    if radius <= 0:
        raise InputError(f"disk radius must be positive, got {radius}")
    if mode not in (STRICT, INCLUSIVE):
        raise InputError(f"unknown disk mode {mode!r}")
    r2 = radius * radius
    reach = int(np.ceil(radius))
    offsets = []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            d2 = dx * dx + dy * dy
            if (d2 < r2) if mode == STRICT else (d2 <= r2):
                offsets.append((dx, dy))
    return DiskKernel(radius, mode, np.asarray(offsets, dtype=np.int64))


def ground_cost(source: FeatureMap, target: FeatureMap) -> GroundCost:
    """C[i, j] = 1 - <y_i, yhat_j> for unit-norm descriptor rows."""
    if source.dim != target.dim:
        raise InputError(
            f"descriptor dims differ: {source.dim} vs {target.dim}"
        )
    c = 1.0 - source.descriptors @ target.descriptors.T
    return GroundCost(np.ascontiguousarray(c, dtype=np.float64))
