"""Dataset pair manifests: the JSON inventory the CLI drives from."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import InputError
from .grid import Keypoint

_KEYPOINT = {
    "type": "array",
    "minItems": 3,
    "maxItems": 3,
    "items": {"type": "number"},
}
_BBOX = {
    "type": "array",
    "minItems": 4,
    "maxItems": 4,
    "items": {"type": "number"},
}
MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["dataset", "normalization", "pairs"],
    "properties": {
        "dataset": {"type": "string", "minLength": 1},
        "normalization": {"enum": ["image", "bbox"]},
        "pairs": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": [
                    "pair_id",
                    "category",
                    "source_fmap",
                    "target_fmap",
                    "source_size",
                    "target_size",
                    "source_keypoints",
                    "target_keypoints",
                ],
                "properties": {
                    "pair_id": {"type": "string", "minLength": 1},
                    "category": {"type": "string", "minLength": 1},
                    "source_fmap": {"type": "string"},
                    "target_fmap": {"type": "string"},
                    "source_size": {
                        "type": "array",
                        "minItems": 2,
                        "maxItems": 2,
                        "items": {"type": "integer", "minimum": 1},
                    },
                    "target_size": {
                        "type": "array",
                        "minItems": 2,
                        "maxItems": 2,
                        "items": {"type": "integer", "minimum": 1},
                    },
                    "source_bbox": _BBOX,
                    "target_bbox": _BBOX,
                    "source_keypoints": {"type": "array", "items": _KEYPOINT},
                    "target_keypoints": {"type": "array", "items": _KEYPOINT},
                    "symmetric_pairs": {
                        "type": "array",
                        "items": {
                            "type": "array",
                            "minItems": 2,
                            "maxItems": 2,
                            "items": {"type": "integer", "minimum": 0},
                        },
                    },
                },
            },
        },
    },
}


@dataclass
class PairEntry:
    pair_id: str
    category: str
    source_fmap: Path
    target_fmap: Path
    source_size: tuple[int, int]  # (w, h) original frame
    target_size: tuple[int, int]
    source_keypoints: list[Keypoint]
    target_keypoints: list[Keypoint]
    symmetric_pairs: list[tuple[int, int]]
    source_bbox: tuple[float, float, float, float] | None = None
    target_bbox: tuple[float, float, float, float] | None = None


@dataclass
class PairManifest:
    dataset: str
    normalization: str  # default PCK normalizer: "image" or "bbox"
    pairs: list[PairEntry]

    @property
    def categories(self) -> list[str]:
        return sorted({p.category for p in self.pairs})


def _keypoints(raw: list, where: str) -> list[Keypoint]:
    kps = []
    for k, (x, y, vis) in enumerate(raw):
        if vis not in (0, 1, True, False):
            raise InputError(f"{where}[{k}]: visibility must be 0 or 1")
        kps.append(Keypoint(float(x), float(y), bool(vis)))
    return kps


def _bbox(raw, where: str):
    if raw is None:
        return None
    x0, y0, x1, y1 = (float(v) for v in raw)
    if not (x1 > x0 and y1 > y0):
        raise InputError(f"{where}: degenerate box {raw}")
    return (x0, y0, x1, y1)


def load_manifest(path: str | Path, check_files: bool = True) -> PairManifest:
    """Load and fully validate a manifest; errors carry the JSON path of the
    offending field. Referenced feature files are resolved relative to the
    manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot parse manifest ({exc})") from None
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in exc.absolute_path
        )
        raise InputError(f"{path}: schema violation at {where}: {exc.message}") from None

    root = path.parent
    entries = []
    seen_ids: set[str] = set()
    for i, p in enumerate(doc["pairs"]):
        where = f"pairs[{i}] (id {p['pair_id']!r})"
        if p["pair_id"] in seen_ids:
            raise InputError(f"{path}: duplicate pair id {p['pair_id']!r}")
        seen_ids.add(p["pair_id"])
        src_kps = _keypoints(p["source_keypoints"], f"{where}.source_keypoints")
        tgt_kps = _keypoints(p["target_keypoints"], f"{where}.target_keypoints")
        if len(src_kps) != len(tgt_kps):
            raise InputError(
                f"{path}: {where}: {len(src_kps)} source vs "
                f"{len(tgt_kps)} target keypoints"
            )
        sym = [tuple(sp) for sp in p.get("symmetric_pairs", [])]
        for a, b in sym:
            if a >= len(src_kps) or b >= len(src_kps):
                raise InputError(
                    f"{path}: {where}: symmetric pair ({a}, {b}) outside the "
                    f"{len(src_kps)}-keypoint range"
                )
        src_fmap = root / p["source_fmap"]
        tgt_fmap = root / p["target_fmap"]
        if check_files:
            for f in (src_fmap, tgt_fmap):
                if not f.is_file():
                    raise InputError(f"{path}: {where}: missing feature file {f}")
        entries.append(
            PairEntry(
                pair_id=p["pair_id"],
                category=p["category"],
                source_fmap=src_fmap,
                target_fmap=tgt_fmap,
                source_size=tuple(p["source_size"]),
                target_size=tuple(p["target_size"]),
                source_keypoints=src_kps,
                target_keypoints=tgt_kps,
                symmetric_pairs=sym,
                source_bbox=_bbox(p.get("source_bbox"), f"{where}.source_bbox"),
                target_bbox=_bbox(p.get("target_bbox"), f"{where}.target_bbox"),
            )
        )
    return PairManifest(doc["dataset"], doc["normalization"], entries)
