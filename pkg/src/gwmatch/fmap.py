"""Binary feature-map container.

Layout (all integers little-endian unsigned 32-bit):

    bytes 0..3    magic "FMAP"
    bytes 4..7    version (1)
    bytes 8..19   grid_h, grid_w, dim
    bytes 20..23  dtype code (0 = IEEE float32 little-endian)
    payload       grid_h * grid_w * dim float32 values, ordered y, x, channel
    trailer       u32 length + UTF-8 JSON
                  {original_w, original_h, model_input, patch_size}

The file ends exactly after the trailer; readers validate all header
arithmetic against the real file size before touching the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError
from .grid import FeatureMap, PatchGrid

MAGIC = b"FMAP"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIII")
READER_NORM_TOL = 1e-4


class FmapFormatError(InputError):
    """Base for malformed feature-map files."""


class FmapMagicError(FmapFormatError):
    pass


class FmapVersionError(FmapFormatError):
    pass


class FmapDtypeError(FmapFormatError):
    pass


class FmapTruncatedError(FmapFormatError):
    pass


class FmapSizeError(FmapFormatError):
    """Header arithmetic disagrees with the actual file size."""


def write_fmap(fmap: FeatureMap, path: str | Path) -> None:
    """Serialize a feature map; descriptors are stored as float32.

    Writes to a temporary file in the destination directory and renames, so
    concurrent readers never observe a partial file.
    """
    grid = fmap.grid
    if grid.image_width != grid.image_height:
        raise InputError("the container assumes a square model input")
    original_w = round(grid.image_width / grid.scale_x)
    original_h = round(grid.image_height / grid.scale_y)
    meta = {
        "original_w": original_w,
        "original_h": original_h,
        "model_input": grid.image_width,
        "patch_size": grid.patch_size,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(fmap.descriptors, dtype="<f4")
    header = _HEADER.pack(
        MAGIC, VERSION, grid.height_patches, grid.width_patches, fmap.dim, DTYPE_F32
    )
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".fmap.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
            fh.write(struct.pack("<I", len(meta_bytes)))
            fh.write(meta_bytes)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_fmap(path: str | Path) -> FeatureMap:
    """Parse and validate a feature-map file.

    Every malformed input raises a typed error; no partially constructed map
    escapes. Rows whose norm drifted past the in-memory tolerance (but within
    the file tolerance) are renormalized.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FmapTruncatedError(f"{path}: file shorter than the fixed header")
    magic, version, grid_h, grid_w, dim, dtype = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FmapMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FmapVersionError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FmapDtypeError(f"{path}: unsupported dtype code {dtype}")
    if grid_h < 1 or grid_w < 1 or dim < 1:
        raise FmapSizeError(f"{path}: degenerate dimensions {(grid_h, grid_w, dim)}")
    n_values = grid_h * grid_w * dim
    payload_bytes = n_values * 4
    meta_len_at = _HEADER.size + payload_bytes
    if len(data) < meta_len_at + 4:
        raise FmapTruncatedError(
            f"{path}: expected {payload_bytes} payload bytes plus trailer"
        )
    (meta_len,) = struct.unpack_from("<I", data, meta_len_at)
    expected = meta_len_at + 4 + meta_len
    if len(data) < expected:
        raise FmapTruncatedError(f"{path}: trailer shorter than declared")
    if len(data) != expected:
        raise FmapSizeError(
            f"{path}: file is {len(data)} bytes, header arithmetic gives {expected}"
        )
    try:
        meta = json.loads(data[meta_len_at + 4 : expected].decode("utf-8"))
        original_w = int(meta["original_w"])
        original_h = int(meta["original_h"])
        model_input = int(meta["model_input"])
        patch_size = int(meta["patch_size"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FmapFormatError(f"{path}: bad metadata trailer ({exc})") from None
    if original_w < 1 or original_h < 1:
        raise FmapFormatError(f"{path}: nonpositive original size in metadata")
    descriptors = (
        np.frombuffer(data, dtype="<f4", count=n_values, offset=_HEADER.size)
        .astype(np.float64)
        .reshape(grid_h * grid_w, dim)
    )
    if not np.isfinite(descriptors).all():
        raise FmapFormatError(f"{path}: non-finite descriptor values")
    norms = np.linalg.norm(descriptors, axis=1)
    off = np.abs(norms - 1.0)
    if off.max() > READER_NORM_TOL:
        raise FmapFormatError(
            f"{path}: descriptor rows are not unit norm (max drift {off.max():.2e})"
        )
    loose = off > 1e-5
    if loose.any():
        descriptors[loose] /= norms[loose, None]
    grid = PatchGrid(
        width_patches=grid_w,
        height_patches=grid_h,
        patch_size=patch_size,
        image_width=model_input,
        image_height=model_input,
        scale_x=model_input / original_w,
        scale_y=model_input / original_h,
    )
    return FeatureMap(grid, descriptors)
