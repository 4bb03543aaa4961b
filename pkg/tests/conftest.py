import json
from pathlib import Path

import numpy as np
import pytest

from gwmatch.fmap import write_fmap
from gwmatch.grid import FeatureMap, PatchGrid

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@pytest.fixture
def mini_dataset(tmp_path):
    """Two identity pairs (source features == target features) on 6x6 grids;
    every keypoint sits on a patch center so correct transfer is exact."""
    rng = np.random.default_rng(11)
    grid = PatchGrid(6, 6, 14, 84, 84)  # original frame == model frame
    pairs = []
    for i, category in enumerate(["cat", "dog"]):
        desc = unit_rows(rng, 36, 16)
        fm = FeatureMap(grid, desc)
        src_name, tgt_name = f"p{i}_src.fmap", f"p{i}_tgt.fmap"
        write_fmap(fm, tmp_path / src_name)
        write_fmap(fm, tmp_path / tgt_name)
        kps = [[21.0, 35.0, 1], [63.0, 7.0, 1], [35.0, 63.0, 1], [49.0, 63.0, 0]]
        pairs.append(
            {
                "pair_id": f"p{i}",
                "category": category,
                "source_fmap": src_name,
                "target_fmap": tgt_name,
                "source_size": [84, 84],
                "target_size": [84, 84],
                "target_bbox": [0, 0, 84, 84],
                "source_keypoints": kps,
                "target_keypoints": kps,
                "symmetric_pairs": [[0, 1]],
            }
        )
    manifest = tmp_path / "manifest.json"
    manifest.write_text(
        json.dumps({"dataset": "mini", "normalization": "bbox", "pairs": pairs})
    )
    return manifest
