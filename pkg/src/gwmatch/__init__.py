"""Optimal-transport semantic correspondence matching."""

from .costs import DiskKernel, GroundCost, disk_kernel, ground_cost
from .errors import InputError, NumericalError
from .grid import (
    Coupling,
    FeatureMap,
    Keypoint,
    PatchGrid,
    patch_center_pixel,
    patch_index_of_pixel,
)
from .objectives import (
    ObjectiveWeights,
    SymmetryStructure,
    gw_bruteforce,
    gw_term,
    kl_term,
    linear_term,
    sym_term,
    symmetry_structure,
    total_objective,
)

__version__ = "0.1.0"

__all__ = [
    "Coupling",
    "DiskKernel",
    "FeatureMap",
    "GroundCost",
    "InputError",
    "Keypoint",
    "NumericalError",
    "ObjectiveWeights",
    "PatchGrid",
    "SymmetryStructure",
    "disk_kernel",
    "ground_cost",
    "gw_bruteforce",
    "gw_term",
    "kl_term",
    "linear_term",
    "patch_center_pixel",
    "patch_index_of_pixel",
    "sym_term",
    "symmetry_structure",
    "total_objective",
]
