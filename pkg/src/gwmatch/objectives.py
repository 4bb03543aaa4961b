"""Objective terms: value and gradient of each component of the matching cost.

All terms accept a plain plan matrix (couplings under optimization are not
required to satisfy marginal constraints mid-iteration) and return
``(value, gradient)`` with the gradient taken entry-wise in the plan.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .costs import INCLUSIVE, STRICT, GroundCost, disk_kernel
from .diskconv import _complement_inplace, _conv_columns, _conv_rows, _half_dot_scale
from .errors import InputError, NumericalError
from .grid import PatchGrid

KL_LOG_FLOOR = 1e-12  # columns may legitimately drain to zero mass
BRUTEFORCE_MAX_N = 256


@dataclass(frozen=True)
class ObjectiveWeights:
    """Nonnegative weights of the four objective terms."""

    lambda_cost: float = 1.0
    lambda_gw: float = 0.0
    lambda_sym: float = 0.0
    lambda_ub: float = 0.0

    def __post_init__(self):
        vals = (self.lambda_cost, self.lambda_gw, self.lambda_sym, self.lambda_ub)
        if any(v < 0 for v in vals):
            raise InputError("objective weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise InputError("at least one objective weight must be positive")


@dataclass(frozen=True)
class SymmetryStructure:
    """Ordered source patch-index pairs whose horizontal order the matching
    should preserve, with the per-pair source-side order sign and the
    horizontal lattice coordinate of every target patch.
    """

    pair_rows: np.ndarray  # (M, 2) int source patch indices (a, b)
    pair_signs: np.ndarray  # (M,) int in {-1, 0, +1}: sign(x_a - x_b)
    target_cols: np.ndarray  # (N_tgt,) int horizontal coordinate per patch

    def __post_init__(self):
        if self.pair_rows.ndim != 2 or self.pair_rows.shape[1] != 2:
            raise InputError("pair_rows must have shape (M, 2)")
        if self.pair_signs.shape != (self.pair_rows.shape[0],):
            raise InputError("one sign per pair required")
        seen = set()
        for a, b in self.pair_rows:
            key = frozenset((int(a), int(b)))
            if key in seen:
                raise InputError(f"duplicate symmetric pair {{{a}, {b}}}")
            seen.add(key)

    @property
    def n_pairs(self) -> int:
        return self.pair_rows.shape[0]


def symmetry_structure(
    pairs: list[tuple[int, int]], source_grid: PatchGrid, target_grid: PatchGrid
) -> SymmetryStructure:
    """Build the structure from source patch-index pairs; signs come from the
    horizontal lattice coordinates of the two source patches."""
    n_src = source_grid.n_patches
    rows = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if rows.size and (rows.min() < 0 or rows.max() >= n_src):
        raise InputError("symmetric pair indexes a patch outside the source grid")
    ax = rows[:, 0] % source_grid.width_patches
    bx = rows[:, 1] % source_grid.width_patches
    signs = np.sign(ax - bx).astype(np.int64)
    cols = np.arange(target_grid.n_patches, dtype=np.int64) % target_grid.width_patches
    return SymmetryStructure(rows, signs, cols)


def linear_term(cost: GroundCost, plan: np.ndarray) -> tuple[float, np.ndarray]:
    """Kantorovich term <C, T>; gradient is C itself."""
    C = cost.matrix
    if C.shape != plan.shape:
        raise InputError(f"cost {C.shape} and plan {plan.shape} shapes differ")
    return float(np.vdot(C, plan)), C.copy()


def gw_term(
    plan: np.ndarray,
    source_grid: PatchGrid,
    target_grid: PatchGrid,
    delta_min: float,
    delta_max: float,
) -> tuple[float, np.ndarray]:
    """Spatial-smoothness quadratic term and its gradient.

    Pairs closer than delta_min on the source lattice pay for landing further
    apart than delta_max on the target lattice. Computed convolutionally:
    the target-side structure is the complement of an inclusive disc, so
    ``T @ Cq.T`` is the row mass minus a disc convolution, and the source
    side is a strict-disc convolution of the result. Gradient is
    ``2 * Cp @ T @ Cq.T`` (both structure matrices are symmetric).
    """
    if plan.shape != (source_grid.n_patches, target_grid.n_patches):
        raise InputError(
            f"plan shape {plan.shape} does not match lattices "
            f"({source_grid.n_patches}, {target_grid.n_patches})"
        )
    if delta_min > delta_max:
        warnings.warn(
            f"delta_min={delta_min} exceeds delta_max={delta_max}; the "
            "smoothness term is well-defined but penalizes nearly everything",
            stacklevel=2,
        )
    src_kernel = disk_kernel(delta_min, STRICT)
    tgt_kernel = disk_kernel(delta_max, INCLUSIVE)
    plan = np.ascontiguousarray(plan, dtype=np.float64)
    B = np.empty_like(plan)
    _conv_columns(
        plan, target_grid.height_patches, target_grid.width_patches,
        tgt_kernel.runs(), B,
    )
    _complement_inplace(plan, B)
    G = np.empty_like(plan)
    _conv_rows(
        B, source_grid.height_patches, source_grid.width_patches,
        src_kernel.runs(), G, min(256, plan.shape[1]),
    )
    value = _half_dot_scale(G, plan, 2.0)
    # the term is a sum of nonnegative products; cancellation in the
    # complement form may leave machine-scale crumbs of either sign
    return max(float(value), 0.0), G


@njit(cache=True)
def _gw_quad_sum(plan, hs, ws, ht, wt, dmin2, dmax2):
    n_src = hs * ws
    n_tgt = ht * wt
    total = 0.0
    for i in range(n_src):
        iy, ix = divmod(i, ws)
        for k in range(n_src):
            ky, kx = divmod(k, ws)
            d2 = (iy - ky) ** 2 + (ix - kx) ** 2
            if d2 >= dmin2:
                continue
            for j in range(n_tgt):
                jy, jx = divmod(j, wt)
                tij = plan[i, j]
                if tij == 0.0:
                    continue
                for l in range(n_tgt):
                    ly, lx = divmod(l, wt)
                    e2 = (jy - ly) ** 2 + (jx - lx) ** 2
                    if e2 > dmax2:
                        total += tij * plan[k, l]
    return total


def gw_bruteforce(
    plan: np.ndarray,
    source_grid: PatchGrid,
    target_grid: PatchGrid,
    delta_min: float,
    delta_max: float,
) -> float:
    """Literal quadruple sum over patch pairs; testing oracle, O(N^4)."""
    n = max(source_grid.n_patches, target_grid.n_patches)
    if n > BRUTEFORCE_MAX_N:
        raise InputError(f"brute-force term limited to N <= {BRUTEFORCE_MAX_N}")
    return float(
        _gw_quad_sum(
            np.ascontiguousarray(plan, dtype=np.float64),
            source_grid.height_patches,
            source_grid.width_patches,
            target_grid.height_patches,
            target_grid.width_patches,
            float(delta_min) ** 2,
            float(delta_max) ** 2,
        )
    )


def sym_term(plan: np.ndarray, sym: SymmetryStructure) -> tuple[float, np.ndarray]:
    """Horizontal order-consistency term for annotated symmetric pairs.

    For each source pair (a, b) the term rewards couplings whose target
    columns reproduce the pair's horizontal order and penalizes invertals,
    summed over all target column combinations via prefix sums (O(N) per
    affected row). Rows not referenced by any pair have zero gradient.
    """
    value = 0.0
    grad = np.zeros_like(plan)
    cols = sym.target_cols
    n_cols = int(cols.max()) + 1 if cols.size else 0
    for (a, b), s in zip(sym.pair_rows, sym.pair_signs):
        if s == 0:
            continue
        u = np.bincount(cols, weights=plan[a], minlength=n_cols)
        v = np.bincount(cols, weights=plan[b], minlength=n_cols)
        cu, cv = np.cumsum(u), np.cumsum(v)
        # mass strictly left minus strictly right of each column coordinate
        wu = (cu - u) - (cu[-1] - cu)
        wv = (cv - v) - (cv[-1] - cv)
        value -= s * float(u @ wv)
        grad[a] -= s * wv[cols]
        grad[b] += s * wu[cols]
    return value, grad


def kl_term(plan: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """Generalized KL divergence of the column marginal from its target.

    value = sum_j m_j log(m_j / q_j) - m_j + q_j with m = plan^T 1 and
    0 log 0 := 0; the gradient is log(m_j / q_j) broadcast down column j,
    with m floored to keep empty columns finite.
    """
    if (q <= 0).any():
        raise InputError("target marginal must be strictly positive")
    m = plan.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(m > 0, m * np.log(m / q), 0.0)
    value = float(ent.sum() - m.sum() + q.sum())
    log_ratio = np.log(np.maximum(m, KL_LOG_FLOOR) / q)
    grad = np.broadcast_to(log_ratio, plan.shape).copy()
    return value, grad


def total_objective(
    plan: np.ndarray,
    cost: GroundCost,
    sym: SymmetryStructure | None,
    source_grid: PatchGrid,
    target_grid: PatchGrid,
    weights: ObjectiveWeights,
    delta_min: float,
    delta_max: float,
    q: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Weighted sum of the active terms; inactive terms are never evaluated."""
    value = 0.0
    grad = np.zeros_like(plan)
    if weights.lambda_cost > 0:
        v, g = linear_term(cost, plan)
        value += weights.lambda_cost * v
        grad += weights.lambda_cost * g
    if weights.lambda_gw > 0:
        v, g = gw_term(plan, source_grid, target_grid, delta_min, delta_max)
        value += weights.lambda_gw * v
        grad += weights.lambda_gw * g
    if weights.lambda_sym > 0 and sym is not None and sym.n_pairs > 0:
        v, g = sym_term(plan, sym)
        value += weights.lambda_sym * v
        grad += weights.lambda_sym * g
    if weights.lambda_ub > 0:
        v, g = kl_term(plan, q)
        value += weights.lambda_ub * v
        grad += weights.lambda_ub * g
    if not np.isfinite(value) or not np.isfinite(grad).all():
        raise NumericalError("objective value or gradient is non-finite")
    return value, grad
