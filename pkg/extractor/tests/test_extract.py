import numpy as np
import pytest

from fmap_extractor.backbone import StubBackbone, load_backbone
from fmap_extractor.extract import extract_to_file, load_image

from conftest import save_image


def test_stub_backbone_shapes_and_determinism():
    bb = StubBackbone(seed=3)
    rng = np.random.default_rng(0)
    img = rng.random((1, 140, 140, 3)).astype(np.float32)
    t1, t2 = bb(img), bb(img)
    assert t1.shape == (1, 100, 768)
    assert np.array_equal(t1, t2)
    assert np.array_equal(bb(img), StubBackbone(seed=3)(img))


def test_load_backbone_specs():
    assert load_backbone("stub").seed == 0
    assert load_backbone("stub:7").seed == 7
    with pytest.raises(ValueError):
        load_backbone("resnet50")


def test_load_image_resizes_and_reports_original(tmp_path):
    path = save_image(tmp_path / "img.png", w=100, h=60)
    arr, original = load_image(path, 140)
    assert arr.shape == (140, 140, 3)
    assert arr.dtype == np.float32
    assert 0.0 <= arr.min() and arr.max() <= 1.0
    assert original == (100, 60)


def test_extract_writes_valid_file_deterministically(tmp_path):
    path = save_image(tmp_path / "img.png", w=100, h=60, seed=4)
    bb = StubBackbone(seed=0, dim=32)
    f1, f2 = tmp_path / "a.fmap", tmp_path / "b.fmap"
    extract_to_file(path, f1, bb, resolution=140)
    extract_to_file(path, f2, bb, resolution=140)
    assert f1.read_bytes() == f2.read_bytes()


def test_extract_rejects_indivisible_resolution(tmp_path):
    path = save_image(tmp_path / "img.png")
    with pytest.raises(ValueError):
        extract_to_file(path, tmp_path / "x.fmap", StubBackbone(), resolution=100)


def test_default_resolution_gives_60x60x768_header(tmp_path):
    import struct

    path = save_image(tmp_path / "img.png", w=200, h=150, seed=5)
    out = tmp_path / "full.fmap"
    extract_to_file(path, out, StubBackbone(), resolution=840)
    magic, version, gh, gw, dim, dtype = struct.unpack_from(
        "<4sIIIII", out.read_bytes()
    )
    assert (magic, version, dtype) == (b"FMAP", 1, 0)
    assert (gh, gw, dim) == (60, 60, 768)
