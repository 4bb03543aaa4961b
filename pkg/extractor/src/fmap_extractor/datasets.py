"""Manifest builders for the published dataset layouts.

Each builder walks a dataset root in its published directory structure and
returns ``(manifest, images)`` where ``manifest`` is the matcher's JSON
manifest document (feature paths are relative names, to be produced by the
extraction step) and ``images`` maps each referenced feature name to the
source image path. Keypoints stay in original-image coordinates. A pair
count differing from the published total triggers a warning, not an error,
so partial downloads and custom splits remain usable.
"""

from __future__ import annotations

import csv
import json
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

PUBLISHED_COUNTS = {"spair": 70_958, "pf-pascal": 1_351, "tss": 400}


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size  # (w, h)


def _check_count(dataset: str, n_pairs: int) -> None:
    expected = PUBLISHED_COUNTS[dataset]
    if n_pairs != expected:
        warnings.warn(
            f"{dataset}: built {n_pairs} pairs, published total is {expected} "
            "(partial download or custom split?)",
            stacklevel=3,
        )


def build_spair_manifest(
    root: str | Path,
    split: str = "all",
    sym_pairs_table: dict[str, list[list[int]]] | None = None,
):
    """SPair-71k layout: JPEGImages/<category>/<name>.jpg plus
    PairAnnotation/<split>/*.json carrying src_imname, trg_imname, category,
    src_kps, trg_kps (mutually visible keypoints) and both bounding boxes.

    sym_pairs_table maps category names to keypoint-index pairs (the
    left/right annotations published separately); omitted categories get
    empty lists.
    """
    root = Path(root)
    ann_root = root / "PairAnnotation"
    if not ann_root.is_dir():
        raise FileNotFoundError(f"{ann_root} missing: not an SPair-71k root")
    splits = ["trn", "val", "test"] if split == "all" else [split]
    pairs = []
    images: dict[str, Path] = {}
    for part in splits:
        part_dir = ann_root / part
        if not part_dir.is_dir():
            continue
        for ann_path in sorted(part_dir.glob("*.json")):
            ann = json.loads(ann_path.read_text())
            category = ann["category"]
            entry_id = f"{part}_{ann_path.stem.split(':')[0]}"
            names = {}
            for role in ("src", "trg"):
                img = root / "JPEGImages" / category / ann[f"{role}_imname"]
                fmap = f"{category}_{img.stem}.fmap"
                images.setdefault(fmap, img)
                names[role] = (img, fmap)
            src_kps = [[float(x), float(y), 1] for x, y in ann["src_kps"]]
            trg_kps = [[float(x), float(y), 1] for x, y in ann["trg_kps"]]
            sym = []
            if sym_pairs_table:
                n = len(src_kps)
                sym = [
                    [int(a), int(b)]
                    for a, b in sym_pairs_table.get(category, [])
                    if a < n and b < n
                ]
            pairs.append(
                {
                    "pair_id": entry_id,
                    "category": category,
                    "source_fmap": names["src"][1],
                    "target_fmap": names["trg"][1],
                    "source_size": list(_image_size(names["src"][0])),
                    "target_size": list(_image_size(names["trg"][0])),
                    "source_bbox": [float(v) for v in ann["src_bndbox"]],
                    "target_bbox": [float(v) for v in ann["trg_bndbox"]],
                    "source_keypoints": src_kps,
                    "target_keypoints": trg_kps,
                    "symmetric_pairs": sym,
                }
            )
    _check_count("spair", len(pairs))
    manifest = {"dataset": "spair", "normalization": "bbox", "pairs": pairs}
    return manifest, images


def _load_pf_keypoints(mat_path: Path):
    from scipy.io import loadmat

    mat = loadmat(mat_path)
    kps = np.asarray(mat["kps"], dtype=np.float64)
    if kps.shape[0] == 2 and kps.shape[1] != 2:
        kps = kps.T
    out = []
    for x, y in kps:
        visible = bool(np.isfinite(x) and np.isfinite(y))
        out.append([float(x) if visible else 0.0, float(y) if visible else 0.0,
                    1 if visible else 0])
    return out


def build_pfpascal_manifest(root: str | Path, pairs_csv: str = "test_pairs.csv"):
    """PF-PASCAL layout: PF-dataset-PASCAL/{JPEGImages,Annotations/<class>}
    plus a pair list CSV with source_image, target_image and class columns
    (image fields may carry a JPEGImages/ prefix). Keypoints come from the
    per-image MATLAB annotations; non-finite entries are occlusions.
    """
    root = Path(root)
    base = root / "PF-dataset-PASCAL"
    if not base.is_dir():
        base = root
    csv_path = root / pairs_csv
    if not csv_path.is_file():
        csv_path = base / pairs_csv
    if not csv_path.is_file():
        raise FileNotFoundError(f"pair list {pairs_csv} not found under {root}")
    pairs = []
    images: dict[str, Path] = {}
    with csv_path.open() as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            cls = row.get("class") or row.get("category")
            entry = {}
            for role, key in (("src", "source_image"), ("trg", "target_image")):
                rel = Path(row[key]).name
                img = base / "JPEGImages" / rel
                fmap = f"{img.stem}.fmap"
                images.setdefault(fmap, img)
                mat = base / "Annotations" / cls / f"{img.stem}.mat"
                entry[role] = (img, fmap, _load_pf_keypoints(mat))
            src_kps, trg_kps = entry["src"][2], entry["trg"][2]
            k = min(len(src_kps), len(trg_kps))
            pairs.append(
                {
                    "pair_id": f"{i:04d}_{entry['src'][0].stem}_{entry['trg'][0].stem}",
                    "category": cls,
                    "source_fmap": entry["src"][1],
                    "target_fmap": entry["trg"][1],
                    "source_size": list(_image_size(entry["src"][0])),
                    "target_size": list(_image_size(entry["trg"][0])),
                    "source_keypoints": src_kps[:k],
                    "target_keypoints": trg_kps[:k],
                    "symmetric_pairs": [],
                }
            )
    _check_count("pf-pascal", len(pairs))
    manifest = {"dataset": "pf-pascal", "normalization": "image", "pairs": pairs}
    return manifest, images


TSS_GROUPS = ("FG3DCar", "JODS", "PASCAL")


def build_tss_manifest(
    root: str | Path,
    resolution: int = 840,
    patch_size: int = 14,
    stride: int = 1,
):
    """TSS layout: <group>/<pair_dir>/{image1.png, image2.png, flow2.mat}.

    The dense ground truth (flow2.mat key "flow", shape (H, W, 2), per-pixel
    displacement from image2 to image1) is reduced to keypoints by sampling
    at the model grid's patch centers of image2: each sampled source point
    (in image2) gets its flow-displaced match in image1 as the target
    keypoint. Samples whose flow is non-finite or lands outside image1 are
    dropped. `stride` subsamples the patch-center grid.
    """
    from scipy.io import loadmat

    root = Path(root)
    grid = resolution // patch_size
    pairs = []
    images: dict[str, Path] = {}
    for group in TSS_GROUPS:
        group_dir = root / group
        if not group_dir.is_dir():
            continue
        for pair_dir in sorted(p for p in group_dir.iterdir() if p.is_dir()):
            img2 = pair_dir / "image2.png"
            img1 = pair_dir / "image1.png"
            flow_path = pair_dir / "flow2.mat"
            if not (img1.is_file() and img2.is_file() and flow_path.is_file()):
                continue
            flow = np.asarray(loadmat(flow_path)["flow"], dtype=np.float64)
            h2, w2 = flow.shape[:2]
            w1, h1 = _image_size(img1)
            src_kps, trg_kps = [], []
            scale_x, scale_y = resolution / w2, resolution / h2
            for iy in range(0, grid, stride):
                for ix in range(0, grid, stride):
                    x = (ix + 0.5) * patch_size / scale_x
                    y = (iy + 0.5) * patch_size / scale_y
                    px, py = min(int(x), w2 - 1), min(int(y), h2 - 1)
                    u, v = flow[py, px]
                    if not (np.isfinite(u) and np.isfinite(v)):
                        continue
                    tx, ty = x + float(u), y + float(v)
                    if not (0 <= tx < w1 and 0 <= ty < h1):
                        continue
                    src_kps.append([x, y, 1])
                    trg_kps.append([tx, ty, 1])
            if not src_kps:
                continue
            fmap2 = f"{group}_{pair_dir.name}_image2.fmap"
            fmap1 = f"{group}_{pair_dir.name}_image1.fmap"
            images.setdefault(fmap2, img2)
            images.setdefault(fmap1, img1)
            pairs.append(
                {
                    "pair_id": f"{group}_{pair_dir.name}",
                    "category": group,
                    "source_fmap": fmap2,
                    "target_fmap": fmap1,
                    "source_size": [w2, h2],
                    "target_size": [w1, h1],
                    "source_keypoints": src_kps,
                    "target_keypoints": trg_kps,
                    "symmetric_pairs": [],
                }
            )
    _check_count("tss", len(pairs))
    manifest = {"dataset": "tss", "normalization": "image", "pairs": pairs}
    return manifest, images


BUILDERS = {
    "spair": build_spair_manifest,
    "pf-pascal": build_pfpascal_manifest,
    "tss": build_tss_manifest,
}
