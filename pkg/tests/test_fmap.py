import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwmatch import PatchGrid
from gwmatch.fmap import (
    FmapDtypeError,
    FmapMagicError,
    FmapSizeError,
    FmapTruncatedError,
    FmapVersionError,
    read_fmap,
    write_fmap,
)
from gwmatch.grid import FeatureMap


def make_fmap(rng, grid_w=4, grid_h=3, dim=8, original=(56, 42), model=56, patch=14):
    grid = PatchGrid(grid_w, grid_h, patch, model, model,
                     scale_x=model / original[0], scale_y=model / original[1])
    d = rng.standard_normal((grid_w * grid_h, dim)).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return FeatureMap(grid, d.astype(np.float64))


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    fm = make_fmap(rng)
    p1, p2 = tmp_path / "a.fmap", tmp_path / "b.fmap"
    write_fmap(fm, p1)
    back = read_fmap(p1)
    write_fmap(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(back.descriptors, fm.descriptors)
    assert back.grid == fm.grid


def test_payload_size_60x60x768():
    assert 60 * 60 * 768 * 4 == 11_059_200


def test_truncation_raises_typed_error(tmp_path):
    rng = np.random.default_rng(1)
    fm = make_fmap(rng)
    p = tmp_path / "a.fmap"
    write_fmap(fm, p)
    data = p.read_bytes()
    p.write_bytes(data[:-1])
    with pytest.raises(FmapTruncatedError):
        read_fmap(p)
    p.write_bytes(data[:10])
    with pytest.raises(FmapTruncatedError):
        read_fmap(p)


def test_trailing_garbage_is_a_size_error(tmp_path):
    rng = np.random.default_rng(2)
    fm = make_fmap(rng)
    p = tmp_path / "a.fmap"
    write_fmap(fm, p)
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(FmapSizeError):
        read_fmap(p)


def test_bad_magic_version_dtype(tmp_path):
    rng = np.random.default_rng(3)
    fm = make_fmap(rng)
    p = tmp_path / "a.fmap"
    write_fmap(fm, p)
    data = bytearray(p.read_bytes())

    bad = bytearray(data)
    bad[:4] = b"PAMF"
    p.write_bytes(bytes(bad))
    with pytest.raises(FmapMagicError):
        read_fmap(p)

    bad = bytearray(data)
    bad[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(bad))
    with pytest.raises(FmapVersionError):
        read_fmap(p)

    bad = bytearray(data)
    bad[20:24] = struct.pack("<I", 7)
    p.write_bytes(bytes(bad))
    with pytest.raises(FmapDtypeError):
        read_fmap(p)


def test_non_unit_rows_rejected(tmp_path):
    grid = PatchGrid(2, 2, 14, 28, 28)
    d = np.full((4, 4), 0.5)  # unit rows
    fm = FeatureMap(grid, d)
    p = tmp_path / "a.fmap"
    write_fmap(fm, p)
    raw = bytearray(p.read_bytes())
    # scale one payload float by 2: row norm becomes ~1.22
    (v,) = struct.unpack_from("<f", raw, 24)
    struct.pack_into("<f", raw, 24, v * 2)
    p.write_bytes(bytes(raw))
    with pytest.raises(Exception) as err:
        read_fmap(p)
    assert "unit norm" in str(err.value)


@settings(max_examples=25, deadline=None)
@given(
    grid_w=st.integers(1, 6),
    grid_h=st.integers(1, 6),
    dim=st.integers(1, 16),
    seed=st.integers(0, 2**31),
)
def test_roundtrip_property(tmp_path_factory, grid_w, grid_h, dim, seed):
    rng = np.random.default_rng(seed)
    model = 14 * max(grid_w, grid_h)
    grid = PatchGrid(grid_w, grid_h, 14, model, model,
                     scale_x=model / 100, scale_y=model / 80)
    d = rng.standard_normal((grid_w * grid_h, dim)).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    fm = FeatureMap(grid, d.astype(np.float64))
    p = tmp_path_factory.mktemp("fm") / "x.fmap"
    write_fmap(fm, p)
    back = read_fmap(p)
    assert np.array_equal(back.descriptors, fm.descriptors)
    assert back.grid.width_patches == grid_w and back.grid.height_patches == grid_h


def test_reader_total_under_random_corruption(tmp_path):
    # every malformed input yields a typed error, never a crash
    from gwmatch.errors import InputError

    rng = np.random.default_rng(9)
    fm = make_fmap(rng)
    p = tmp_path / "a.fmap"
    write_fmap(fm, p)
    data = bytearray(p.read_bytes())
    for trial in range(60):
        bad = bytearray(data)
        mode = trial % 3
        if mode == 0:  # flip random bytes
            for _ in range(rng.integers(1, 6)):
                bad[rng.integers(len(bad))] = rng.integers(256)
        elif mode == 1:  # truncate
            bad = bad[: rng.integers(1, len(bad))]
        else:  # append garbage
            bad.extend(rng.integers(0, 256, size=rng.integers(1, 64), dtype=np.uint8).tobytes())
        p.write_bytes(bytes(bad))
        try:
            out = read_fmap(p)
        except InputError:
            continue
        # corruption confined to the payload can still decode; the result
        # must then be a structurally valid map
        assert out.descriptors.shape[0] == out.grid.n_patches
