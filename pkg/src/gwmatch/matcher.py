"""End-to-end matching: feature maps in, patch correspondences out."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .costs import ground_cost
from .errors import InputError
from .grid import FeatureMap, Keypoint, PatchGrid, patch_center_pixel, patch_index_of_pixel
from .objectives import ObjectiveWeights, SymmetryStructure, symmetry_structure
from .solver import Coupling, MatchProblem, SolverConfig, SolveReport, solve


@dataclass(frozen=True)
class MatchConfig:
    """Objective weights, structure radii, and solver schedule."""

    weights: ObjectiveWeights
    delta_min: float = 3.0
    delta_max: float = 5.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    use_symmetry: bool = False

    def __post_init__(self):
        if self.delta_min <= 0 or self.delta_max <= 0:
            raise InputError("structure radii must be positive")


# Per-dataset hyperparameter presets; 50 backtracking steps by default, with
# the fixed-rate schedule available through SolverConfig for timing runs.
PRESETS: dict[str, MatchConfig] = {
    "tss": MatchConfig(weights=ObjectiveWeights(0.2, 0.2, 0.0, 0.05)),
    "pf-pascal": MatchConfig(weights=ObjectiveWeights(0.2, 0.2, 0.0, 0.05)),
    "spair": MatchConfig(weights=ObjectiveWeights(0.6, 0.1, 0.1, 0.01), use_symmetry=True),
}


def preset(name: str) -> MatchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None


@dataclass
class CorrespondenceMap:
    """Best target patch per source patch, with its strength."""

    target_index: np.ndarray  # (N_src,) int
    weight: np.ndarray  # (N_src,) float, plan mass or cosine similarity
    coupling: Coupling | None = None

    def __post_init__(self):
        if self.target_index.shape != self.weight.shape:
            raise InputError("index and weight arrays must align")
        if (self.weight < 0).any():
            raise InputError("correspondence weights must be nonnegative")


def nn_baseline(source: FeatureMap, target: FeatureMap) -> CorrespondenceMap:
    """Per source patch, the target patch of highest cosine similarity
    (ties to the lowest index)."""
    if source.dim != target.dim:
        raise InputError(f"descriptor dims differ: {source.dim} vs {target.dim}")
    sim = source.descriptors @ target.descriptors.T
    best = sim.argmax(axis=1)
    return CorrespondenceMap(best, sim[np.arange(sim.shape[0]), best])


def build_symmetry(
    src_keypoints: list[Keypoint],
    pairs: list[tuple[int, int]],
    source_grid: PatchGrid,
    target_grid: PatchGrid,
) -> SymmetryStructure | None:
    """Map annotated symmetric keypoint pairs to source patch-index pairs.

    Pairs with an occluded member are dropped; pairs collapsing to a single
    patch carry no ordering information and are dropped too.
    """
    patch_pairs: list[tuple[int, int]] = []
    seen: set[frozenset[int]] = set()
    for i, j in pairs:
        if not (0 <= i < len(src_keypoints) and 0 <= j < len(src_keypoints)):
            raise InputError(f"symmetric pair ({i}, {j}) indexes beyond keypoints")
        a_kp, b_kp = src_keypoints[i], src_keypoints[j]
        if not (a_kp.visible and b_kp.visible):
            continue
        a = patch_index_of_pixel(
            source_grid, (a_kp.x * source_grid.scale_x, a_kp.y * source_grid.scale_y)
        )
        b = patch_index_of_pixel(
            source_grid, (b_kp.x * source_grid.scale_x, b_kp.y * source_grid.scale_y)
        )
        key = frozenset((a, b))
        if a == b or key in seen:
            continue
        seen.add(key)
        patch_pairs.append((a, b))
    if not patch_pairs:
        return None
    return symmetry_structure(patch_pairs, source_grid, target_grid)


def match_pair(
    source: FeatureMap,
    target: FeatureMap,
    sym: SymmetryStructure | None,
    config: MatchConfig,
) -> tuple[CorrespondenceMap, SolveReport]:
    """Solve the transport problem for one image pair and read off the
    per-source-patch argmax correspondences."""
    if source.grid.n_patches != target.grid.n_patches:
        raise InputError(
            f"patch counts differ: {source.grid.n_patches} vs "
            f"{target.grid.n_patches}"
        )
    cost = ground_cost(source, target)
    problem = MatchProblem(
        cost,
        source.grid,
        target.grid,
        delta_min=config.delta_min,
        delta_max=config.delta_max,
        sym=sym if config.use_symmetry else None,
    )
    coupling, report = solve(problem, config.weights, config.solver)
    best = coupling.plan.argmax(axis=1)
    weight = coupling.plan[np.arange(best.size), best]
    return CorrespondenceMap(best, weight, coupling), report


def transfer_keypoints(
    cmap: CorrespondenceMap,
    src_keypoints: list[Keypoint],
    source_grid: PatchGrid,
    target_grid: PatchGrid,
) -> list[Keypoint]:
    """Carry source keypoints through the correspondence map.

    Route: original frame -> model frame -> containing patch -> matched
    patch -> patch center -> target original frame. Non-visible inputs come
    back flagged non-visible.
    """
    out = []
    for kp in src_keypoints:
        if not kp.visible:
            out.append(Keypoint(float("nan"), float("nan"), visible=False))
            continue
        model_xy = (kp.x * source_grid.scale_x, kp.y * source_grid.scale_y)
        patch = patch_index_of_pixel(source_grid, model_xy)
        matched = int(cmap.target_index[patch])
        cx, cy = patch_center_pixel(target_grid, matched)
        out.append(
            Keypoint(cx / target_grid.scale_x, cy / target_grid.scale_y, visible=True)
        )
    return out


def config_without_structure(config: MatchConfig) -> MatchConfig:
    """The same configuration with every structural term disabled."""
    return replace(
        config,
        weights=ObjectiveWeights(config.weights.lambda_cost, 0.0, 0.0, 0.0),
        use_symmetry=False,
    )
