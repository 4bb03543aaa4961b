"""Writer for the matcher's feature-file container.

Byte layout (all integers little-endian unsigned 32-bit): magic "FMAP",
version (1), grid_h, grid_w, dim, dtype code (0 = float32), then the
row-major float32 payload ordered y, x, channel, then a u32-length-prefixed
UTF-8 JSON trailer {original_w, original_h, model_input, patch_size}.
This is an independent implementation of the documented format; the matcher
package is the reference reader.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FMAP"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIII")


def write_feature_file(
    descriptors: np.ndarray,
    grid_h: int,
    grid_w: int,
    patch_size: int,
    model_input: int,
    original_w: int,
    original_h: int,
    path: str | Path,
) -> None:
    """Serialize a (grid_h * grid_w, dim) unit-row descriptor matrix.

    Writes via a temporary file in the target directory and renames, so a
    concurrently running matcher never sees a partial file.
    """
    descriptors = np.ascontiguousarray(descriptors, dtype="<f4")
    n, dim = descriptors.shape
    if n != grid_h * grid_w:
        raise ValueError(f"{n} rows do not fill a {grid_h}x{grid_w} grid")
    meta = {
        "original_w": int(original_w),
        "original_h": int(original_h),
        "model_input": int(model_input),
        "patch_size": int(patch_size),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".fmap.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, grid_h, grid_w, dim, DTYPE_F32))
            fh.write(descriptors.tobytes())
            fh.write(struct.pack("<I", len(meta_bytes)))
            fh.write(meta_bytes)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
