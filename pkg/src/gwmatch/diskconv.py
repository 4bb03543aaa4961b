"""Disc convolutions on flattened patch lattices.

A coupling row/column index enumerates a (h, w) lattice row-major. Summing a
sparse disc structure matrix against a coupling is a 2D convolution over one
of the two lattices; these kernels run it directly on the flat matrix using
the disc's per-row run decomposition (cumulative sums along x, so cost is
O(runs) per element instead of O(offsets)). Off-lattice neighbors contribute
zero, matching the pairwise-sum definition of the structure costs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .costs import DiskKernel
from .errors import InputError
from .grid import PatchGrid


@njit(cache=True)
def _conv_rows(M, h, w, runs, out, block):
    # out[s, :] = sum over lattice offsets o of M[s + o, :], with row index s
    # read as (y, x) on an (h, w) lattice. Columns are processed in blocks so
    # every inner operation runs on contiguous vectors.
    n_cols = M.shape[1]
    nruns = runs.shape[0]
    P = np.empty((h, w + 1, block))
    for c0 in range(0, n_cols, block):
        c1 = min(c0 + block, n_cols)
        cl = c1 - c0
        for y in range(h):
            for t in range(cl):
                P[y, 0, t] = 0.0
            for x in range(w):
                src = (y * w + x)
                for t in range(cl):
                    P[y, x + 1, t] = P[y, x, t] + M[src, c0 + t]
        for y in range(h):
            for x in range(w):
                row = y * w + x
                for t in range(cl):
                    out[row, c0 + t] = 0.0
                for r in range(nruns):
                    yy = y + runs[r, 0]
                    if yy < 0 or yy >= h:
                        continue
                    a = x + runs[r, 1]
                    b = x + runs[r, 2] + 1
                    if a < 0:
                        a = 0
                    if b > w:
                        b = w
                    if a < b:
                        for t in range(cl):
                            out[row, c0 + t] += P[yy, b, t] - P[yy, a, t]


@njit(cache=True)
def _conv_columns(M, h, w, runs, out):
    # out[s, j] = sum over lattice offsets o of M[s, j + o],
    # with column index j read as (y, x) on an (h, w) lattice.
    n_rows = M.shape[0]
    nruns = runs.shape[0]
    cum = np.empty((h, w + 1), dtype=M.dtype)
    for s in range(n_rows):
        for y in range(h):
            acc = 0.0
            cum[y, 0] = 0.0
            base = y * w
            for x in range(w):
                acc += M[s, base + x]
                cum[y, x + 1] = acc
        for y in range(h):
            base = y * w
            for x in range(w):
                out[s, base + x] = 0.0
            for r in range(nruns):
                yy = y + runs[r, 0]
                if yy < 0 or yy >= h:
                    continue
                xlo = runs[r, 1]
                xhi = runs[r, 2]
                for x in range(w):
                    a = x + xlo
                    b = x + xhi + 1
                    if a < 0:
                        a = 0
                    if b > w:
                        b = w
                    if a < b:
                        out[s, base + x] += cum[yy, b] - cum[yy, a]


@njit(cache=True)
def _complement_inplace(M, out):
    # out <- rowsum(M) - out, the disc-complement structure product
    for s in range(M.shape[0]):
        acc = 0.0
        for j in range(M.shape[1]):
            acc += M[s, j]
        for j in range(M.shape[1]):
            out[s, j] = acc - out[s, j]


@njit(cache=True)
def _half_dot_scale(G, plan, scale):
    # value of <G, plan> accumulated while G is scaled in place
    acc = 0.0
    for s in range(G.shape[0]):
        for j in range(G.shape[1]):
            acc += G[s, j] * plan[s, j]
            G[s, j] *= scale
    return acc


def convolve_target_axis(M: np.ndarray, grid: PatchGrid, kernel: DiskKernel) -> np.ndarray:
    """Convolve each row of M over the target lattice its columns enumerate.

    Equivalent to ``M @ S.T`` for the dense disc structure matrix S.
    """
    h, w = grid.height_patches, grid.width_patches
    if M.shape[1] != h * w:
        raise InputError(
            f"matrix has {M.shape[1]} columns, lattice has {h * w} sites"
        )
    M = np.ascontiguousarray(M, dtype=np.float64)
    out = np.empty_like(M)
    _conv_columns(M, h, w, kernel.runs(), out)
    return out


def convolve_source_axis(M: np.ndarray, grid: PatchGrid, kernel: DiskKernel) -> np.ndarray:
    """Convolve each column of M over the source lattice its rows enumerate.

    Equivalent to ``S @ M`` for the dense disc structure matrix S.
    """
    h, w = grid.height_patches, grid.width_patches
    if M.shape[0] != h * w:
        raise InputError(
            f"matrix has {M.shape[0]} rows, lattice has {h * w} sites"
        )
    M = np.ascontiguousarray(M, dtype=np.float64)
    out = np.empty_like(M)
    _conv_rows(M, h, w, kernel.runs(), out, min(512, M.shape[1]))
    return out


def convolve_lattice_vector(v: np.ndarray, grid: PatchGrid, kernel: DiskKernel) -> np.ndarray:
    """Convolve a single flattened lattice function: returns S @ v."""
    return convolve_target_axis(v.reshape(1, -1), grid, kernel)[0]


def materialize_structure_matrix(grid: PatchGrid, kernel: DiskKernel) -> np.ndarray:
    """Dense disc structure matrix S[i, k] = 1 iff coord_k - coord_i is a
    kernel offset. Quadratic in lattice size; for tests and benchmarks only.
    """
    h, w = grid.height_patches, grid.width_patches
    n = h * w
    S = np.zeros((n, n))
    for i in range(n):
        iy, ix = divmod(i, w)
        for dx, dy in kernel.offsets:
            ky, kx = iy + dy, ix + dx
            if 0 <= ky < h and 0 <= kx < w:
                S[i, ky * w + kx] = 1.0
    return S
