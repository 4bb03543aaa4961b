import numpy as np
import pytest

from fmap_extractor.datasets import (
    build_pfpascal_manifest,
    build_spair_manifest,
    build_tss_manifest,
)


def test_spair_builder(spair_tree):
    with pytest.warns(UserWarning, match="published total"):
        manifest, images = build_spair_manifest(spair_tree, split="test")
    assert manifest["dataset"] == "spair"
    assert manifest["normalization"] == "bbox"
    assert len(manifest["pairs"]) == 2
    assert len(images) == 3  # three distinct images referenced
    p = manifest["pairs"][0]
    assert p["category"] == "cat"
    assert p["source_size"] == [96, 72]
    assert p["source_keypoints"][0] == [10.0, 12.0, 1]
    assert p["target_bbox"] == [6.0, 4.0, 82.0, 58.0]
    assert p["symmetric_pairs"] == []


def test_spair_builder_with_sym_table(spair_tree):
    table = {"cat": [[0, 2], [0, 9]]}  # second pair is out of range, dropped
    with pytest.warns(UserWarning):
        manifest, _ = build_spair_manifest(
            spair_tree, split="test", sym_pairs_table=table
        )
    assert manifest["pairs"][0]["symmetric_pairs"] == [[0, 2]]


def test_spair_missing_root_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_spair_manifest(tmp_path)


def test_pfpascal_builder(pf_tree):
    with pytest.warns(UserWarning, match="published total"):
        manifest, images = build_pfpascal_manifest(pf_tree)
    assert manifest["normalization"] == "image"
    assert len(manifest["pairs"]) == 1
    p = manifest["pairs"][0]
    assert p["category"] == "aeroplane"
    kps = p["source_keypoints"]
    assert kps[0][2] == 1 and kps[2][2] == 0  # NaN keypoint marked occluded
    assert len(images) == 2


def test_tss_builder_samples_flow_at_patch_centers(tss_tree):
    with pytest.warns(UserWarning, match="published total"):
        manifest, images = build_tss_manifest(tss_tree, resolution=140, patch_size=14)
    assert len(manifest["pairs"]) == 1
    p = manifest["pairs"][0]
    assert p["category"] == "FG3DCar"
    assert p["source_size"] == [80, 64]  # image2 is the flow's domain
    assert p["target_size"] == [90, 60]
    src = np.array([k[:2] for k in p["source_keypoints"]])
    trg = np.array([k[:2] for k in p["target_keypoints"]])
    # constant (2, -1) flow everywhere valid
    assert np.allclose(trg - src, [2.0, -1.0])
    # the NaN strip at the top of the flow must be excluded
    assert (src[:, 1] >= 8).all()
    assert len(images) == 2


def test_tss_stride_subsamples(tss_tree):
    with pytest.warns(UserWarning):
        dense, _ = build_tss_manifest(tss_tree, resolution=140, patch_size=14)
    with pytest.warns(UserWarning):
        sparse, _ = build_tss_manifest(tss_tree, resolution=140, patch_size=14, stride=2)
    n_dense = len(dense["pairs"][0]["source_keypoints"])
    n_sparse = len(sparse["pairs"][0]["source_keypoints"])
    assert 0 < n_sparse < n_dense
