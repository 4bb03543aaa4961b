import json

import numpy as np
import pytest
from PIL import Image
from scipy.io import savemat


def save_image(path, w=96, h=72, seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture
def spair_tree(tmp_path):
    root = tmp_path / "SPair-71k"
    for i, name in enumerate(["im_a", "im_b", "im_c"]):
        save_image(root / "JPEGImages" / "cat" / f"{name}.jpg", seed=i)
    ann_dir = root / "PairAnnotation" / "test"
    ann_dir.mkdir(parents=True)
    for i, (src, trg) in enumerate([("im_a", "im_b"), ("im_b", "im_c")]):
        ann = {
            "category": "cat",
            "src_imname": f"{src}.jpg",
            "trg_imname": f"{trg}.jpg",
            "src_kps": [[10, 12], [30, 40], [50, 20]],
            "trg_kps": [[12, 13], [28, 42], [52, 18]],
            "src_bndbox": [5, 5, 80, 60],
            "trg_bndbox": [6, 4, 82, 58],
        }
        (ann_dir / f"{i:06d}-{src}-{trg}:cat.json").write_text(json.dumps(ann))
    return root


@pytest.fixture
def pf_tree(tmp_path):
    root = tmp_path / "pf"
    base = root / "PF-dataset-PASCAL"
    for i, name in enumerate(["2008_a", "2008_b"]):
        save_image(base / "JPEGImages" / f"{name}.jpg", seed=10 + i)
        kps = np.array([[10.0, 12.0], [30.0, 40.0], [np.nan, np.nan]])
        p = base / "Annotations" / "aeroplane" / f"{name}.mat"
        p.parent.mkdir(parents=True, exist_ok=True)
        savemat(p, {"kps": kps})
    (root / "test_pairs.csv").write_text(
        "source_image,target_image,class\n"
        "JPEGImages/2008_a.jpg,JPEGImages/2008_b.jpg,aeroplane\n"
    )
    return root


@pytest.fixture
def tss_tree(tmp_path):
    root = tmp_path / "tss"
    pair = root / "FG3DCar" / "pair01"
    save_image(pair / "image1.png", w=90, h=60, seed=20)
    save_image(pair / "image2.png", w=80, h=64, seed=21)
    flow = np.zeros((64, 80, 2))
    flow[..., 0] = 2.0  # constant shift toward image1
    flow[..., 1] = -1.0
    flow[:8] = np.nan  # invalid strip
    savemat(pair / "flow2.mat", {"flow": flow})
    return root
