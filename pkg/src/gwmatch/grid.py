"""Patch lattices, feature grids, couplings, and keypoints.

Conventions used everywhere in this package:

* Patch indices are 0-based and flattened row-major (y-major): the patch at
  column ``ix``, row ``iy`` has flat index ``iy * width_patches + ix``.
* Pixel coordinates are ``(x, y)`` tuples in the model-input frame unless a
  function says otherwise; conversion to/from original image frames happens
  only at dataset I/O boundaries via the stored scale factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

ROW_SUM_TOL = 1e-6
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class PatchGrid:
    """Integer patch lattice of a square-patchified model input.

    ``scale_x`` / ``scale_y`` map original-image pixels to model-input
    pixels (model = original * scale).
    """

    width_patches: int
    height_patches: int
    patch_size: int
    image_width: int
    image_height: int
    scale_x: float = 1.0
    scale_y: float = 1.0

    def __post_init__(self):
        if self.width_patches < 1 or self.height_patches < 1:
            raise InputError("patch grid must contain at least one patch")
        if self.patch_size < 1:
            raise InputError("patch_size must be positive")
        if self.patch_size * self.width_patches > self.image_width:
            raise InputError(
                f"patch columns exceed image width: "
                f"{self.patch_size}*{self.width_patches} > {self.image_width}"
            )
        if self.patch_size * self.height_patches > self.image_height:
            raise InputError(
                f"patch rows exceed image height: "
                f"{self.patch_size}*{self.height_patches} > {self.image_height}"
            )
        if not (self.scale_x > 0 and self.scale_y > 0):
            raise InputError("scale factors must be strictly positive")

    @property
    def n_patches(self) -> int:
        return self.width_patches * self.height_patches

    def flat_index(self, ix: int, iy: int) -> int:
        return iy * self.width_patches + ix

    def patch_xy(self, index: int) -> tuple[int, int]:
        """Inverse of flat_index: flat index -> (ix, iy)."""
        return index % self.width_patches, index // self.width_patches


def patch_index_of_pixel(grid: PatchGrid, px: tuple[float, float]) -> int:
    """Flat index of the patch containing a model-input pixel.

    Uses floor division to the patch of containment; pixels in the slack
    strip beyond the last full patch clamp to the last patch.
    """
    x, y = px
    if not (0 <= x <= grid.image_width and 0 <= y <= grid.image_height):
        raise InputError(
            f"pixel ({x}, {y}) outside model input "
            f"{grid.image_width}x{grid.image_height}"
        )
    ix = min(int(math.floor(x / grid.patch_size)), grid.width_patches - 1)
    iy = min(int(math.floor(y / grid.patch_size)), grid.height_patches - 1)
    return grid.flat_index(ix, iy)


def patch_center_pixel(grid: PatchGrid, index: int) -> tuple[float, float]:
    """Model-input pixel coordinates of a patch center."""
    if not (0 <= index < grid.n_patches):
        raise InputError(f"patch index {index} out of range [0, {grid.n_patches})")
    ix, iy = grid.patch_xy(index)
    return (ix + 0.5) * grid.patch_size, (iy + 0.5) * grid.patch_size


@dataclass(frozen=True)
class FeatureMap:
    """Per-patch descriptor grid; rows are unit-norm feature vectors."""

    grid: PatchGrid
    descriptors: np.ndarray  # (N, D) float

    def __post_init__(self):
        d = self.descriptors
        if d.ndim != 2 or d.shape[0] != self.grid.n_patches:
            raise InputError(
                f"descriptors shape {d.shape} does not match "
                f"{self.grid.n_patches} patches"
            )
        if d.shape[1] < 1:
            raise InputError("descriptor dimension must be positive")
        if not np.isfinite(d).all():
            raise InputError("descriptors contain non-finite entries")
        norms = np.linalg.norm(d, axis=1)
        bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
        if bad.any():
            raise InputError(
                f"{int(bad.sum())} descriptor rows deviate from unit norm "
                f"(max |norm-1| = {np.abs(norms - 1.0).max():.2e})"
            )

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def uniform_marginal(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass
class Coupling:
    """Nonnegative transport plan whose rows sum to the row marginal.

    The row constraint ``plan @ 1 = row_marginal`` is hard (enforced within
    ROW_SUM_TOL); the column marginal ``target_marginal`` is only a target,
    softly encouraged by the objective.
    """

    plan: np.ndarray  # (N_src, N_tgt), >= 0
    row_marginal: np.ndarray = field(default=None)  # p, defaults to uniform
    target_marginal: np.ndarray = field(default=None)  # q, defaults to uniform

    def __post_init__(self):
        if self.plan.ndim != 2:
            raise InputError("coupling plan must be a matrix")
        n_src, n_tgt = self.plan.shape
        if self.row_marginal is None:
            self.row_marginal = uniform_marginal(n_src)
        if self.target_marginal is None:
            self.target_marginal = uniform_marginal(n_tgt)
        if self.row_marginal.shape != (n_src,):
            raise InputError("row marginal length does not match plan rows")
        if self.target_marginal.shape != (n_tgt,):
            raise InputError("target marginal length does not match plan columns")
        if (self.plan < 0).any():
            raise InputError("coupling plan has negative entries")
        dev = np.abs(self.plan.sum(axis=1) - self.row_marginal).max()
        if dev > ROW_SUM_TOL:
            raise InputError(f"row sums deviate from marginal by {dev:.2e}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    @classmethod
    def uniform(cls, n_src: int, n_tgt: int | None = None) -> "Coupling":
        """Outer-product coupling p q^T with uniform marginals."""
        n_tgt = n_src if n_tgt is None else n_tgt
        p = uniform_marginal(n_src)
        q = uniform_marginal(n_tgt)
        return cls(np.outer(p, q), p, q)


@dataclass(frozen=True)
class Keypoint:
    """Annotated point in original-image pixel coordinates."""

    x: float
    y: float
    visible: bool = True

    def validate_in(self, width: float, height: float) -> None:
        if self.visible and not (0 <= self.x < width and 0 <= self.y < height):
            raise InputError(
                f"visible keypoint ({self.x}, {self.y}) outside {width}x{height}"
            )
