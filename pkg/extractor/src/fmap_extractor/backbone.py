"""Patch-token backbones.

A backbone maps a batch of RGB images (B, H, W, 3) float32 in [0, 1] to
patch tokens (B, H/P * W/P, D), row-major over the patch grid. The default
is the self-supervised ViT-B/14 loaded through torch.hub (needs network
access and a weight download on first use); a deterministic stub computing
projected local pixel statistics stands in for tests and offline runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_HUB_VARIANTS = {
    "vitb14": ("dinov2_vitb14", 14, 768),
    "vits14": ("dinov2_vits14", 14, 384),
    "vitl14": ("dinov2_vitl14", 14, 1024),
}


@dataclass
class StubBackbone:
    """Deterministic stand-in: per-patch pixel statistics through a fixed
    random projection. Same image bytes always produce identical tokens."""

    patch_size: int = 14
    dim: int = 768
    seed: int = 0
    _proj: np.ndarray = field(init=False, repr=False)
    _bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._proj = rng.standard_normal((12, self.dim)).astype(np.float32)
        self._bias = rng.standard_normal(self.dim).astype(np.float32) * 0.05

    def __call__(self, images: np.ndarray) -> np.ndarray:
        b, height, width, _ = images.shape
        p = self.patch_size
        gh, gw = height // p, width // p
        blocks = images[:, : gh * p, : gw * p].reshape(b, gh, p, gw, p, 3)
        stats = [
            blocks.mean(axis=(2, 4)),
            blocks.std(axis=(2, 4)),
            np.abs(np.diff(blocks, axis=4)).mean(axis=(2, 4)),
            np.abs(np.diff(blocks, axis=2)).mean(axis=(2, 4)),
        ]
        feats = np.concatenate(stats, axis=-1).astype(np.float32)  # (b, gh, gw, 12)
        tokens = feats.reshape(b, gh * gw, 12) @ self._proj + self._bias
        return tokens


class HubBackbone:
    """Pretrained vision transformer fetched through torch.hub."""

    def __init__(self, variant: str):
        hub_name, self.patch_size, self.dim = _HUB_VARIANTS[variant]
        import torch

        self._torch = torch
        try:
            self.model = torch.hub.load("facebookresearch/dinov2", hub_name)
        except Exception as exc:
            raise RuntimeError(
                f"could not fetch pretrained weights for {variant!r} "
                f"(torch.hub needs network access): {exc}"
            ) from exc
        self.model.eval()

    def __call__(self, images: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = (images - IMAGENET_MEAN) / IMAGENET_STD
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        with torch.no_grad():
            out = self.model.forward_features(x)
        # all patch tokens from the last layer; the class token is excluded
        return out["x_norm_patchtokens"].cpu().numpy()


def load_backbone(spec: str):
    """"vitb14" (and friends) via torch.hub, or "stub[:seed]"."""
    if spec.startswith("stub"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return StubBackbone(seed=seed)
    if spec in _HUB_VARIANTS:
        return HubBackbone(spec)
    raise ValueError(
        f"unknown backbone {spec!r}; expected one of "
        f"{sorted(_HUB_VARIANTS)} or 'stub[:seed]'"
    )
