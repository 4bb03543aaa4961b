"""Projected gradient descent over row-constrained couplings.

Minimizes the weighted objective over {T >= 0, T 1 = p}. Each iterate is the
Euclidean projection of a gradient step; with the default backtracking rule
the objective trace is non-increasing. The constraint set is a product of
scaled simplices, one per row, so the projection decomposes row-wise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .costs import INCLUSIVE, STRICT, GroundCost, disk_kernel
from .diskconv import convolve_lattice_vector
from .errors import InputError, NumericalError
from .grid import Coupling, PatchGrid, uniform_marginal
from .objectives import ObjectiveWeights, SymmetryStructure

BACKTRACKING = "backtracking"
FIXED = "fixed"

ARMIJO_DECREASE = 1e-4
ARMIJO_FACTOR = 0.5
MAX_HALVINGS = 20

_INITIAL_CAPACITY = 64


@dataclass(frozen=True)
class SolverConfig:
    """Iteration schedule. tolerance=0 disables early stopping."""

    steps: int = 50
    step_rule: str = BACKTRACKING
    initial_step: float = 1.0
    tolerance: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise InputError("solver needs at least one step")
        if self.initial_step <= 0:
            raise InputError("initial step size must be positive")
        if self.step_rule not in (BACKTRACKING, FIXED):
            raise InputError(f"unknown step rule {self.step_rule!r}")
        if self.tolerance < 0:
            raise InputError("tolerance must be nonnegative")


@dataclass
class SolveReport:
    """Diagnostics of one solve."""

    objective_trace: list[float]
    final_terms: dict[str, float]
    iterations: int
    projection_residual: float
    step_sizes: list[float] = field(default_factory=list)
    line_search_exhausted: bool = False


@dataclass
class MatchProblem:
    """Everything a solve needs besides weights and schedule."""

    cost: GroundCost
    source_grid: PatchGrid
    target_grid: PatchGrid
    delta_min: float = 3.0
    delta_max: float = 5.0
    sym: SymmetryStructure | None = None
    row_marginal: np.ndarray | None = None
    target_marginal: np.ndarray | None = None

    def __post_init__(self):
        n_s, n_t = self.source_grid.n_patches, self.target_grid.n_patches
        if self.cost.matrix.shape != (n_s, n_t):
            raise InputError(
                f"cost shape {self.cost.matrix.shape} does not match lattices "
                f"({n_s}, {n_t})"
            )
        if not np.isfinite(self.cost.matrix).all():
            raise InputError("ground cost contains non-finite entries")
        if self.row_marginal is None:
            self.row_marginal = uniform_marginal(n_s)
        if self.target_marginal is None:
            self.target_marginal = uniform_marginal(n_t)
        if self.row_marginal.shape != (n_s,) or (self.row_marginal <= 0).any():
            raise InputError("row marginal must be strictly positive, length N_src")
        if self.target_marginal.shape != (n_t,) or (self.target_marginal <= 0).any():
            raise InputError("target marginal must be strictly positive, length N_tgt")
        if self.sym is not None and self.sym.pair_rows.size:
            if self.sym.pair_rows.max() >= n_s:
                raise InputError("symmetry pair references a row outside the grid")
            if self.sym.target_cols.shape != (n_t,):
                raise InputError("symmetry target columns do not match the grid")


def project_rows_to_scaled_simplex(matrix: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto {t >= 0, sum t = p_i}.

    Sort-and-threshold rule: with the row sorted descending, the threshold
    tau is the largest prefix average (cumsum - p)/k that stays below the
    prefix's last element; surviving entries shift down uniformly by tau
    (the KKT conditions of the row subproblem).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise InputError("expected a matrix of rows to project")
    if not np.isfinite(matrix).all():
        raise InputError("cannot project non-finite rows")
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (matrix.shape[0],) or (p <= 0).any():
        raise InputError("row budgets must be strictly positive, one per row")
    n = matrix.shape[1]
    already = (matrix >= 0).all(axis=1) & (matrix.sum(axis=1) == p)
    U = np.sort(matrix, axis=1)[:, ::-1]
    cs = np.cumsum(U, axis=1)
    ranks = np.arange(1, n + 1)
    feasible = U - (cs - p[:, None]) / ranks > 0
    rho = n - 1 - np.argmax(feasible[:, ::-1], axis=1)
    tau = (cs[np.arange(matrix.shape[0]), rho] - p) / (rho + 1)
    out = np.maximum(matrix - tau[:, None], 0.0)
    # Land row sums exactly on p (absorb the rounding residual into the
    # largest entry) so that projected rows are exact fixed points.
    for _ in range(4):
        resid = p - out.sum(axis=1)
        rows = np.nonzero(resid)[0]
        if rows.size == 0:
            break
        tops = out[rows].argmax(axis=1)
        out[rows, tops] += resid[rows]
    out[already] = matrix[already]
    return out


def _weighted_total(weights: ObjectiveWeights, terms: tuple[float, float, float, float]) -> float:
    lin, gw, kl, sym = terms
    return (
        weights.lambda_cost * lin
        + weights.lambda_gw * gw
        + weights.lambda_ub * kl
        + weights.lambda_sym * sym
    )


class _SparseState:
    """Compressed-row coupling buffers with grow-on-overflow capacity."""

    def __init__(self, n_s: int, n_t: int, capacity: int):
        self.n_s, self.n_t = n_s, n_t
        self.capacity = min(capacity, n_t)
        self._alloc()

    def _alloc(self):
        self.idx = np.zeros((self.n_s, self.capacity), dtype=np.int64)
        self.val = np.zeros((self.n_s, self.capacity))
        self.nnz = np.zeros(self.n_s, dtype=np.int64)

    def grow(self):
        if self.capacity >= self.n_t:
            raise NumericalError("projection support exceeded full row capacity")
        self.capacity = min(self.capacity * 4, self.n_t)
        self._alloc()

    def densify(self) -> np.ndarray:
        return _accel._densify(self.idx, self.val, self.nnz, self.n_t)


def _sym_arrays(problem: MatchProblem, active: bool):
    n_s = problem.source_grid.n_patches
    n_t = problem.target_grid.n_patches
    slots = np.full(n_s, -1, dtype=np.int64)
    if not active:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, np.zeros(0, dtype=np.int64), slots, np.zeros((1, n_t)), np.zeros(n_t, dtype=np.int64), 1
    sym = problem.sym
    rows = sorted({int(r) for pair in sym.pair_rows for r in pair})
    for slot, r in enumerate(rows):
        slots[r] = slot
    grad = np.zeros((max(len(rows), 1), n_t))
    n_cols = int(sym.target_cols.max()) + 1 if sym.target_cols.size else 1
    return (
        sym.pair_rows.astype(np.int64),
        sym.pair_signs.astype(np.int64),
        slots,
        grad,
        sym.target_cols.astype(np.int64),
        n_cols,
    )


def _sym_value_rank1(p, q, pairs, signs, tgt_cols, n_cols) -> float:
    """Order-consistency value at the outer-product plan p q^T."""
    colq = np.bincount(tgt_cols, weights=q, minlength=n_cols)
    cq = np.cumsum(colq)
    w = (cq - colq) - (cq[-1] - cq)  # left minus right mass of the profile
    value = 0.0
    for (a, b), s in zip(pairs, signs):
        if s == 0:
            continue
        # rows a and b are p_a * colq and p_b * colq
        value -= s * p[a] * p[b] * float(colq @ w)
    return value


def _sym_grad_rank1(p, q, pairs, signs, slots, tgt_cols, n_cols, out) -> None:
    colq = np.bincount(tgt_cols, weights=q, minlength=n_cols)
    cq = np.cumsum(colq)
    w = (cq - colq) - (cq[-1] - cq)
    out[:] = 0.0
    for (a, b), s in zip(pairs, signs):
        if s == 0:
            continue
        out[slots[a]] -= s * p[b] * w[tgt_cols]
        out[slots[b]] += s * p[a] * w[tgt_cols]


def solve(
    problem: MatchProblem,
    weights: ObjectiveWeights,
    config: SolverConfig = SolverConfig(),
) -> tuple[Coupling, SolveReport]:
    """Run projected gradient descent from the uniform outer-product plan.

    Returns the final coupling and a report whose objective trace has one
    entry per iterate (initial plan included). With backtracking the trace is
    non-increasing; a step that cannot make progress within the halving
    budget ends the solve early.
    """
    C = np.ascontiguousarray(problem.cost.matrix, dtype=np.float64)
    p = np.asarray(problem.row_marginal, dtype=np.float64)
    q = np.asarray(problem.target_marginal, dtype=np.float64)
    n_s, n_t = C.shape
    src_grid, tgt_grid = problem.source_grid, problem.target_grid

    use_cost = weights.lambda_cost > 0
    use_gw = weights.lambda_gw > 0
    use_kl = weights.lambda_ub > 0
    sym_active = (
        weights.lambda_sym > 0
        and problem.sym is not None
        and problem.sym.n_pairs > 0
    )
    if use_gw and problem.delta_min > problem.delta_max:
        warnings.warn(
            f"delta_min={problem.delta_min} exceeds delta_max={problem.delta_max}",
            stacklevel=2,
        )

    src_kernel = disk_kernel(problem.delta_min, STRICT)
    tgt_kernel = disk_kernel(problem.delta_max, INCLUSIVE)
    tgt_runs = tgt_kernel.runs()
    src_offs = src_kernel.offsets
    src_reach = int(math.ceil(problem.delta_min))
    src_r2 = float(problem.delta_min) ** 2
    dmax2 = float(problem.delta_max) ** 2
    cp_row_mass = convolve_lattice_vector(p, src_grid, src_kernel)
    cq_q = float(q.sum()) - convolve_lattice_vector(q, tgt_grid, tgt_kernel)

    # chunk-level bounds used by the kernels to skip provably inactive blocks
    chunk = _accel.chunk_columns(n_t, tgt_grid.width_patches)
    n_chunks = (n_t + chunk - 1) // chunk
    cmin = _accel._chunk_minima(C, chunk) if use_cost else np.zeros((n_s, n_chunks))
    _, q_chunk_max = _accel._vector_chunk_extrema(q, chunk)
    cq_chunk_min, _ = _accel._vector_chunk_extrema(cq_q, chunk)
    # float32 shadow of the cost for the screening pass
    C32 = C.astype(np.float32) if use_cost else np.zeros((1, 1), dtype=np.float32)

    pairs, signs, slots, sym_grad, tgt_cols, n_cols = _sym_arrays(problem, sym_active)

    def eval_state(state: _SparseState) -> tuple[float, tuple[float, float, float, float]]:
        lin, gw, kl, sym = _accel._sparse_terms(
            state.idx, state.val, state.nnz, C, use_cost, q, use_kl,
            src_offs, tgt_grid.height_patches, tgt_grid.width_patches, dmax2, use_gw,
            pairs, signs, tgt_cols, n_cols, sym_active,
            src_grid.height_patches, src_grid.width_patches,
        )
        total = _weighted_total(weights, (lin, gw, kl, sym))
        if not np.isfinite(total):
            raise NumericalError("objective diverged to a non-finite value")
        return total, (lin, gw, kl, sym)

    # objective at the rank-1 initial plan, without materializing it
    cq_row = C @ q if use_cost else np.zeros(n_s)
    lin0 = float(p @ cq_row) if use_cost else 0.0
    gw0 = float((p @ cp_row_mass) * (q @ cq_q)) if use_gw else 0.0
    m0 = q * p.sum()
    kl0 = float(np.sum(m0 * np.log(m0 / q) - m0 + q)) if use_kl else 0.0
    sym0 = (
        _sym_value_rank1(p, q, pairs, signs, tgt_cols, n_cols) if sym_active else 0.0
    )
    f_cur = _weighted_total(weights, (lin0, gw0, kl0, sym0))

    trace = [f_cur]
    step_sizes: list[float] = []
    backtracking = config.step_rule == BACKTRACKING
    eta_accepted = config.initial_step
    exhausted = False
    residual = 0.0

    cur = _SparseState(n_s, n_t, _INITIAL_CAPACITY)
    nxt = _SparseState(n_s, n_t, _INITIAL_CAPACITY)
    iterations = 0
    stationary = False
    if backtracking:
        # halving retries rescale a stored gradient instead of rebuilding it
        G_cache = np.empty((n_s, n_t))
        gmin_cache = np.empty((n_s, n_chunks))

    for it in range(config.steps):
        first = it == 0
        if first:
            m = m0
        else:
            m = _accel._col_sums(cur.idx, cur.val, cur.nnz, n_t)
        logm = np.log(np.maximum(m, 1e-12) / q) if use_kl else np.zeros(n_t)

        if sym_active:
            if first:
                _sym_grad_rank1(p, q, pairs, signs, slots, tgt_cols, n_cols, sym_grad)
            else:
                _accel._sym_gradient_rows(
                    cur.idx, cur.val, cur.nnz, pairs, signs, tgt_cols, n_cols,
                    slots, sym_grad,
                )

        if first:
            # <grad, T0> is analytic for the outer-product plan
            sym_dot = 0.0
            if sym_active:
                slotted = np.nonzero(slots >= 0)[0]
                sym_dot = float(p[slotted] @ (sym_grad[slots[slotted]] @ q))
            gd_old_rank1 = (
                weights.lambda_cost * float(p @ cq_row)
                + 2.0 * weights.lambda_gw * float(p @ cp_row_mass) * float(cq_q @ q)
                + weights.lambda_ub * float(q @ logm) * float(p.sum())
                + weights.lambda_sym * sym_dot
            )

        if backtracking and not first:
            klv_g = weights.lambda_ub * logm
            _accel._gradient_dense(
                C, use_cost, weights.lambda_cost,
                cur.idx, cur.val, cur.nnz,
                tgt_runs, 2.0 * weights.lambda_gw, cp_row_mass,
                klv_g, slots, sym_grad, weights.lambda_sym,
                src_reach, src_r2,
                src_grid.height_patches, src_grid.width_patches,
                tgt_grid.height_patches, tgt_grid.width_patches, chunk,
                G_cache, gmin_cache,
            )

        if backtracking:
            eta = min(eta_accepted * 2.0, config.initial_step)
        else:
            eta = config.initial_step
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            a_cost = -eta * weights.lambda_cost
            klv = -eta * weights.lambda_ub * logm
            b_sym = -eta * weights.lambda_sym
            while True:
                if first:
                    _, klv_chunk_max = _accel._vector_chunk_extrema(klv, chunk)
                    b_rows = -eta * 2.0 * weights.lambda_gw * cp_row_mass
                    ok, gd_new, delta, resid = _accel._step_rank1(
                        C, use_cost, a_cost, cmin, p, q, q_chunk_max,
                        nxt.idx, nxt.val, nxt.nnz, p, eta,
                        cq_q, cq_chunk_min, b_rows,
                        klv, klv_chunk_max, slots, sym_grad, b_sym, chunk,
                    )
                    gd_old = gd_old_rank1
                elif backtracking:
                    ok, gd_new, gd_old, delta, resid = _accel._step_cached(
                        G_cache, gmin_cache,
                        cur.idx, cur.val, cur.nnz,
                        nxt.idx, nxt.val, nxt.nnz,
                        p, eta, chunk,
                    )
                else:
                    _, klv_chunk_max = _accel._vector_chunk_extrema(klv, chunk)
                    cp_const = -eta * 2.0 * weights.lambda_gw * cp_row_mass
                    guard = 1e-5 * (1.0 + 2.0 * abs(a_cost) + float(np.abs(klv).max()))
                    ok, gd_new, gd_old, delta, resid = _accel._step_sparse(
                        C, C32, use_cost, a_cost, cmin,
                        cur.idx, cur.val, cur.nnz,
                        nxt.idx, nxt.val, nxt.nnz,
                        p, eta,
                        tgt_runs, eta * 2.0 * weights.lambda_gw, cp_const,
                        cp_row_mass,
                        klv, klv.astype(np.float32), klv_chunk_max, guard,
                        slots, sym_grad, b_sym,
                        src_reach, src_r2,
                        src_grid.height_patches, src_grid.width_patches,
                        tgt_grid.height_patches, tgt_grid.width_patches, chunk,
                    )
                if ok:
                    break
                nxt.grow()
            f_new, _ = eval_state(nxt)
            pred = gd_new - gd_old  # <grad, T_new - T_cur>, <= 0 in exact math
            if not backtracking or f_new <= f_cur + ARMIJO_DECREASE * pred:
                accepted = True
                break
            if ARMIJO_DECREASE * abs(pred) < 1e-14 * max(abs(f_cur), 1e-300):
                # predicted decrease is below evaluation precision: accept a
                # non-increasing value, otherwise the solve has converged
                if f_new <= f_cur:
                    accepted = True
                else:
                    stationary = True
                break
            eta *= ARMIJO_FACTOR
        if not accepted:
            exhausted = not stationary
            break
        cur, nxt = nxt, cur
        if nxt.capacity < cur.capacity:
            nxt.capacity = cur.capacity
            nxt._alloc()
        f_prev = f_cur
        f_cur = f_new
        trace.append(f_cur)
        step_sizes.append(eta)
        eta_accepted = eta
        residual = max(residual, resid)
        iterations += 1
        if not first and delta == 0.0:
            break  # iterate is a fixed point of the projected step
        if config.tolerance > 0:
            rel = (f_prev - f_cur) / max(abs(f_prev), abs(f_cur), 1e-12)
            if rel < config.tolerance:
                break

    if iterations == 0:
        if not stationary:
            raise NumericalError("line search failed on the first step")
        # the uniform outer-product start is already stationary (e.g. a
        # divergence-only objective whose column sums equal the target)
        coupling = Coupling(np.outer(p, q), p, q)
        return coupling, SolveReport(
            objective_trace=trace,
            final_terms={"linear": lin0, "gw": gw0, "kl": kl0, "sym": sym0},
            iterations=0,
            projection_residual=0.0,
        )
    _, final_terms = eval_state(cur)
    plan = cur.densify()
    coupling = Coupling(plan, p, q)
    report = SolveReport(
        objective_trace=trace,
        final_terms={
            "linear": final_terms[0],
            "gw": final_terms[1],
            "kl": final_terms[2],
            "sym": final_terms[3],
        },
        iterations=iterations,
        projection_residual=residual,
        step_sizes=step_sizes,
        line_search_exhausted=exhausted,
    )
    return coupling, report
