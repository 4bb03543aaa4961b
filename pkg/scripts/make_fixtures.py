#!/usr/bin/env python3
"""Generate the committed desk-scale fixture set.

Each pair is a synthetic object with known dense correspondence: a lattice
object in the source image maps to the target through a similarity transform
plus a smooth wiggle. Descriptors encode the true correspondence plus three
recoverable error modes:

* additive noise, which scatters nearest-neighbour matches;
* "magnet" contamination, which collapses several source patches onto one
  attractive target patch (mass spreading fixes this);
* mirrored-appearance blending, which makes left/right object halves nearly
  interchangeable (only the order-consistency term resolves this).

Keypoints sit on the object with annotated left/right symmetric pairs, and
ground truth follows the continuous warp, so correct matches survive patch
quantization at PCK 0.1 while the planted error modes do not.
"""

from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np

import sys

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gwmatch.fmap import write_fmap
from gwmatch.grid import FeatureMap, PatchGrid

PATCH = 14
GRID = 30  # patches per side
MODEL = PATCH * GRID
DIM = 64

CATEGORIES = ["cat", "dog", "cow", "horse", "aeroplane", "chair"]


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def lattice_centers():
    ys, xs = np.mgrid[0:GRID, 0:GRID]
    return np.stack([(xs + 0.5) * PATCH, (ys + 0.5) * PATCH], axis=-1).reshape(-1, 2)


def make_pair(rng, pair_id, category, params):
    centers = lattice_centers()
    n = GRID * GRID

    src_c = np.array([MODEL / 2, MODEL / 2]) + rng.uniform(-10, 10, size=2)
    tgt_c = np.array([MODEL / 2, MODEL / 2]) + rng.uniform(-10, 10, size=2)
    radius = rng.uniform(9.0, 11.5) * PATCH
    rho = rng.uniform(*params["scale_range"])
    theta = math.radians(rng.uniform(-params["max_rot_deg"], params["max_rot_deg"]))
    R = np.array([[math.cos(theta), -math.sin(theta)],
                  [math.sin(theta), math.cos(theta)]])
    amp = params["wiggle_amp"] * PATCH
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(1.0, 2.0, size=2) * 2 * np.pi / MODEL

    def warp(xy):
        rel = (xy - src_c) @ R.T * rho
        wiggle = amp * np.stack(
            [np.sin(freq[0] * xy[..., 1] + phase[0]),
             np.sin(freq[1] * xy[..., 0] + phase[1])],
            axis=-1,
        )
        return tgt_c + rel + wiggle

    # latent identity per target patch; object patches get exactly
    # mirror-symmetric appearance (the unordered pair of latents), so
    # left/right is a pure tie that only ordering information can resolve
    latents = unit(rng.standard_normal((n, DIM)))
    tgt_obj = np.linalg.norm(centers - tgt_c, axis=1) <= rho * radius

    def nearest_patch(xy):
        d = np.linalg.norm(centers - xy, axis=1)
        return int(d.argmin())

    mirrored = np.empty((n, DIM))
    for t in range(n):
        mx = np.array([2 * tgt_c[0] - centers[t, 0], centers[t, 1]])
        tm = nearest_patch(mx)
        if tgt_obj[t] and tgt_obj[tm] and tm != t:
            a, b = (t, tm) if t < tm else (tm, t)
            mirrored[t] = unit(latents[a] + latents[b])
        else:
            mirrored[t] = latents[t]

    # target descriptors stay noise-free so mirrored pairs tie exactly
    tgt_desc = mirrored.copy()

    # distractors: background patches far from an object patch echo its
    # appearance closely, creating spatially incoherent near-ties
    bg_idx = np.nonzero(~tgt_obj)[0]
    obj_tgt_idx = np.nonzero(tgt_obj)[0]
    n_distract = int(params["distractor_frac"] * len(obj_tgt_idx))
    eps = params["distractor_eps"]
    chosen_bg = rng.choice(bg_idx, size=min(n_distract, len(bg_idx)), replace=False)
    for d in chosen_bg:
        for _ in range(20):
            t = obj_tgt_idx[rng.integers(len(obj_tgt_idx))]
            if np.linalg.norm(centers[d] - centers[t]) > (params["delta_max"] + 2) * PATCH:
                tgt_desc[d] = unit(mirrored[t] + eps * unit(rng.standard_normal(DIM)))
                break

    src_obj = np.linalg.norm(centers - src_c, axis=1) <= radius
    tau = np.array([nearest_patch(warp(centers[s])) for s in range(n)])
    sigma = params["src_noise"]
    src_desc = np.empty((n, DIM))
    background = unit(rng.standard_normal((n, DIM)))
    for s in range(n):
        if src_obj[s]:
            src_desc[s] = unit(mirrored[tau[s]] + sigma * unit(rng.standard_normal(DIM)))
        else:
            src_desc[s] = background[s]

    # magnet contamination: a few target patches attract extra source patches
    obj_idx = np.nonzero(src_obj)[0]
    magnets = rng.choice(obj_tgt_idx, size=params["n_magnets"], replace=False)
    n_pull = int(params["magnet_frac"] * len(obj_idx))
    pulled = rng.choice(obj_idx, size=n_pull, replace=False)
    for s in pulled:
        m = magnets[rng.integers(len(magnets))]
        src_desc[s] = src_desc[s] + params["magnet_pull"] * tgt_desc[m]
    src_desc = unit(src_desc)

    # original image sizes differ per side; keypoints live in original frames
    src_size = (int(rng.integers(440, 640)), int(rng.integers(400, 560)))
    tgt_size = (int(rng.integers(440, 640)), int(rng.integers(400, 560)))
    src_grid = PatchGrid(GRID, GRID, PATCH, MODEL, MODEL,
                         scale_x=MODEL / src_size[0], scale_y=MODEL / src_size[1])
    tgt_grid = PatchGrid(GRID, GRID, PATCH, MODEL, MODEL,
                         scale_x=MODEL / tgt_size[0], scale_y=MODEL / tgt_size[1])

    # keypoints: symmetric pairs mirrored about the object's vertical axis,
    # plus spine points on the axis
    kp_model = []
    sym_pairs = []
    for k in range(params["n_sym_pairs"]):
        dy = rng.uniform(-0.72, 0.72) * radius
        dx = rng.uniform(0.35, 0.82) * math.sqrt(max(radius**2 - dy**2, 1.0))
        jitter = rng.uniform(-3, 3, size=2)
        left = src_c + np.array([-dx, dy]) + jitter
        right = src_c + np.array([dx, dy]) + jitter
        sym_pairs.append([len(kp_model), len(kp_model) + 1])
        kp_model.append(left)
        kp_model.append(right)
    for k in range(params["n_spine"]):
        dy = rng.uniform(-0.8, 0.8) * radius
        kp_model.append(src_c + np.array([rng.uniform(-2, 2), dy]))
    kp_model = np.array(kp_model)
    kp_model = np.clip(kp_model, 1.0, MODEL - 1.0)

    src_kps = [
        [float(x / src_grid.scale_x), float(y / src_grid.scale_y), 1]
        for x, y in kp_model
    ]
    tgt_model = np.clip(np.array([warp(p) for p in kp_model]), 1.0, MODEL - 1.0)
    tgt_kps = [
        [float(x / tgt_grid.scale_x), float(y / tgt_grid.scale_y), 1]
        for x, y in tgt_model
    ]

    # object bounding box in the target original frame
    obj_pts = centers[tgt_obj] / np.array([tgt_grid.scale_x, tgt_grid.scale_y])
    pad = PATCH / tgt_grid.scale_x
    bbox = [
        float(obj_pts[:, 0].min() - pad), float(obj_pts[:, 1].min() - pad),
        float(obj_pts[:, 0].max() + pad), float(obj_pts[:, 1].max() + pad),
    ]

    return (
        FeatureMap(src_grid, unit(src_desc)),
        FeatureMap(tgt_grid, tgt_desc),
        {
            "pair_id": pair_id,
            "category": category,
            "source_fmap": f"{pair_id}_src.fmap",
            "target_fmap": f"{pair_id}_tgt.fmap",
            "source_size": list(src_size),
            "target_size": list(tgt_size),
            "target_bbox": bbox,
            "source_keypoints": src_kps,
            "target_keypoints": tgt_kps,
            "symmetric_pairs": sym_pairs,
        },
    )


DEFAULTS = {
    "scale_range": (0.88, 1.10),
    "max_rot_deg": 8.0,
    "wiggle_amp": 0.5,
    "src_noise": 0.17,
    "distractor_frac": 0.6,
    "distractor_eps": 0.17,
    "delta_max": 5,
    "n_magnets": 4,
    "magnet_frac": 0.20,
    "magnet_pull": 1.08,
    "n_sym_pairs": 3,
    "n_spine": 4,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--pairs", type=int, default=24)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    entries = []
    for i in range(args.pairs):
        category = CATEGORIES[i % len(CATEGORIES)]
        pair_id = f"{category}_{i:03d}"
        src, tgt, entry = make_pair(rng, pair_id, category, DEFAULTS)
        write_fmap(src, out / entry["source_fmap"])
        write_fmap(tgt, out / entry["target_fmap"])
        entries.append(entry)
    manifest = {"dataset": "spair-fixtures", "normalization": "bbox", "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {len(entries)} pairs to {out}")


if __name__ == "__main__":
    main()
