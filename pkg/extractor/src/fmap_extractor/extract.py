"""Image to feature-file extraction."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .fmapio import write_feature_file


def load_image(path: str | Path, resolution: int) -> tuple[np.ndarray, tuple[int, int]]:
    """RGB image resized (not cropped) to a square model input.

    Aspect distortion is intentional: keypoint scale factors are stored per
    axis in the feature file, so evaluation in original frames stays exact.
    Returns (image float32 in [0, 1], (original_w, original_h)).
    """
    with Image.open(path) as img:
        original = img.size  # (w, h)
        resized = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0, original


def extract_tokens(image: np.ndarray, backbone) -> np.ndarray:
    """Unit-norm patch descriptors of one preprocessed image."""
    tokens = backbone(image[None])[0]
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    if (norms == 0).any():
        raise RuntimeError("backbone produced a zero token; cannot normalize")
    return tokens / norms


def extract_to_file(
    image_path: str | Path,
    out_path: str | Path,
    backbone,
    resolution: int = 840,
) -> None:
    """Extract one image and store it in the matcher's container format."""
    if resolution % backbone.patch_size != 0:
        raise ValueError(
            f"resolution {resolution} not divisible by patch size "
            f"{backbone.patch_size}"
        )
    image, (original_w, original_h) = load_image(image_path, resolution)
    tokens = extract_tokens(image, backbone)
    grid = resolution // backbone.patch_size
    if tokens.shape != (grid * grid, backbone.dim):
        raise RuntimeError(
            f"backbone returned {tokens.shape}, expected "
            f"({grid * grid}, {backbone.dim})"
        )
    write_feature_file(
        tokens, grid, grid, backbone.patch_size, resolution,
        original_w, original_h, out_path,
    )
