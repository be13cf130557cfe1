"""Persistence for clouds, labels, OOD object databases, manifests and feature dumps.

Formats
-------
cloud (``.bin``)
    Consecutive 16-byte records of four little-endian float32 values
    ``x, y, z, intensity``; identical to KITTI velodyne files.
labels (``.txt``)
    One object per line: ``class l w h x y z yaw is_ood category``;
    ``#`` starts a comment. Floats are written with 9 significant digits.
manifest / OOD database (``manifest.txt``)
    One record per line of whitespace-separated ``key=value`` pairs.
    Relative paths resolve against the manifest's directory.
feature dump
    Header ``<4s magic, u32 version, u32 n, u32 d, 16s layer, u32 n_classes>``
    followed by ``n`` rows ``<i4 class_label, u1 is_ood, d x f4>``.

Readers are safe to run concurrently on distinct files. A file must never be
written by two writers at once; that coordination is the caller's job.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .core import Box3D, LabeledObject, OodCategory, PointCloud
from .errors import (DimensionMismatch, NonFiniteValue, ParseError, TruncatedFile,
                     UnknownCategory)

log = logging.getLogger(__name__)

CLOUD_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16

DUMP_MAGIC = b"OODF"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sII I16sI")

# Number of out-of-range intensities clamped by read_cloud since import.
clamped_intensity_count = 0


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


# ---------------------------------------------------------------------------
# point clouds

def decode_cloud(raw: bytes, frame_id: str = "", path=None) -> PointCloud:
    global clamped_intensity_count
    if len(raw) % RECORD_BYTES:
        raise TruncatedFile(
            f"{path or '<bytes>'}: length {len(raw)} is not a multiple of {RECORD_BYTES}"
            f" (trailing record starts at byte {len(raw) - len(raw) % RECORD_BYTES})")
    arr = np.frombuffer(raw, dtype=CLOUD_DTYPE).reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise NonFiniteValue(f"{path or '<bytes>'}: non-finite value at byte {row * RECORD_BYTES}")
    out_of_range = (arr[:, 3] < 0.0) | (arr[:, 3] > 1.0)
    if out_of_range.any():
        n = int(out_of_range.sum())
        clamped_intensity_count += n
        log.warning("%s: clamped %d intensities to [0, 1]", path or "<bytes>", n)
        arr[:, 3] = np.clip(arr[:, 3], 0.0, 1.0)
    return PointCloud(arr, frame_id)


def encode_cloud(pc: PointCloud) -> bytes:
    return np.ascontiguousarray(pc.points, dtype=CLOUD_DTYPE).tobytes()


def read_cloud(path, frame_id: Optional[str] = None) -> PointCloud:
    path = Path(path)
    return decode_cloud(path.read_bytes(), frame_id if frame_id is not None else path.stem, path)


def write_cloud(pc: PointCloud, path) -> None:
    Path(path).write_bytes(encode_cloud(pc))


# ---------------------------------------------------------------------------
# labels

def format_label(obj: LabeledObject) -> str:
    b = obj.box
    fields = [obj.class_name, *map(_fmt, b.size), *map(_fmt, b.center), _fmt(b.yaw),
              str(int(obj.is_ood)), str(int(obj.category))]
    return " ".join(fields)


def parse_label_line(line: str, lineno: int = 0, path=None) -> Optional[LabeledObject]:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    tok = text.split()
    if len(tok) != 10:
        raise ParseError(f"expected 10 fields, found {len(tok)}", lineno, path)
    try:
        l, w, h, x, y, z, yaw = (float(t) for t in tok[1:8])
        is_ood = int(tok[8])
        cat = int(tok[9])
    except ValueError as exc:
        raise ParseError(str(exc), lineno, path) from None
    if is_ood not in (0, 1):
        raise ParseError(f"is_ood must be 0 or 1, got {tok[8]}", lineno, path)
    if cat not in OodCategory._value2member_map_:
        raise UnknownCategory(f"unknown category {tok[9]}", lineno, path)
    try:
        return LabeledObject(Box3D((x, y, z), (l, w, h), yaw), tok[0], bool(is_ood),
                             OodCategory(cat))
    except ValueError as exc:
        raise ParseError(str(exc), lineno, path) from None


def parse_labels(text: str, path=None) -> List[LabeledObject]:
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        obj = parse_label_line(line, i, path)
        if obj is not None:
            out.append(obj)
    return out


def read_labels(path) -> List[LabeledObject]:
    return parse_labels(Path(path).read_text(), path)


def write_labels(objects: Sequence[LabeledObject], path) -> None:
    Path(path).write_text("".join(format_label(o) + "\n" for o in objects))


# ---------------------------------------------------------------------------
# key=value records

def parse_kv_line(line: str, lineno: int = 0, path=None) -> Optional[dict]:
    text = line.strip()
    if not text or text.startswith("#"):
        return None
    rec = {}
    for tok in text.split():
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ParseError(f"malformed key=value token {tok!r}", lineno, path)
        rec[key] = value
    return rec


def format_kv(rec: dict) -> str:
    for k, v in rec.items():
        if any(c.isspace() for c in str(v)) or any(c.isspace() for c in k):
            raise ValueError(f"whitespace not allowed in key=value record: {k}={v!r}")
    return " ".join(f"{k}={v}" for k, v in rec.items())


def _require(rec, key, lineno, path):
    if key not in rec:
        raise ParseError(f"missing field {key!r}", lineno, path)
    return rec[key]


# ---------------------------------------------------------------------------
# OOD object database

SOURCES = ("synthetic", "real")


@dataclass(frozen=True)
class OodObjectRecord:
    object_id: str
    class_name: str
    source: str
    category: OodCategory
    original_range: float
    original_azimuth: float
    cloud_path: str

    def __post_init__(self):
        object.__setattr__(self, "category", OodCategory(self.category))
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if not self.category.in_scope():
            raise ValueError(f"category {int(self.category)} is not an in-scope OOD type")
        if not self.original_range > 0:
            raise ValueError("original_range must be positive")

    def to_kv(self) -> dict:
        return {"object_id": self.object_id, "class_name": self.class_name,
                "source": self.source, "category": str(int(self.category)),
                "original_range": _fmt(self.original_range),
                "original_azimuth": _fmt(self.original_azimuth),
                "cloud_path": self.cloud_path}


def _record_from_kv(rec, lineno, path) -> OodObjectRecord:
    cat = _require(rec, "category", lineno, path)
    try:
        cat_i = int(cat)
    except ValueError:
        raise UnknownCategory(f"unknown category {cat!r}", lineno, path) from None
    if cat_i not in OodCategory._value2member_map_:
        raise UnknownCategory(f"unknown category {cat!r}", lineno, path)
    try:
        return OodObjectRecord(
            object_id=_require(rec, "object_id", lineno, path),
            class_name=_require(rec, "class_name", lineno, path),
            source=_require(rec, "source", lineno, path),
            category=OodCategory(cat_i),
            original_range=float(_require(rec, "original_range", lineno, path)),
            original_azimuth=float(_require(rec, "original_azimuth", lineno, path)),
            cloud_path=_require(rec, "cloud_path", lineno, path),
        )
    except ValueError as exc:
        raise ParseError(str(exc), lineno, path) from None


def read_ood_db(directory) -> List[OodObjectRecord]:
    """Read ``<directory>/manifest.txt``; record order follows the file."""
    path = Path(directory) / "manifest.txt"
    out = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        rec = parse_kv_line(line, i, path)
        if rec is not None:
            out.append(_record_from_kv(rec, i, path))
    return out


def write_ood_db(records: Sequence[OodObjectRecord], directory, clouds=None) -> None:
    """Write the database manifest and, if given, each record's cloud."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if clouds is not None:
        for rec, pc in zip(records, clouds):
            target = directory / rec.cloud_path
            target.parent.mkdir(parents=True, exist_ok=True)
            write_cloud(pc, target)
    lines = [format_kv(r.to_kv()) for r in records]
    (directory / "manifest.txt").write_text("".join(l + "\n" for l in lines))


@dataclass(frozen=True, eq=False)
class OodObject:
    """A database record together with its point snippet (in the original pose)."""

    record: OodObjectRecord
    cloud: PointCloud

    @property
    def class_name(self) -> str:
        return self.record.class_name


def load_ood_objects(directory) -> List[OodObject]:
    directory = Path(directory)
    return [OodObject(r, read_cloud(directory / r.cloud_path, r.object_id))
            for r in read_ood_db(directory)]


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class DatasetManifest:
    frames: tuple  # of (frame_id, cloud_path, label_path)
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(tuple(f) for f in self.frames))
        object.__setattr__(self, "classes", tuple(self.classes))
        ids = [f[0] for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    classes, frames = None, []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        rec = parse_kv_line(line, i, path)
        if rec is None:
            continue
        if "classes" in rec:
            classes = tuple(c for c in rec["classes"].split(",") if c)
            continue
        frames.append((_require(rec, "frame_id", i, path), _require(rec, "cloud", i, path),
                       _require(rec, "labels", i, path)))
    if classes is None:
        raise ParseError("manifest has no classes= line", None, path)
    try:
        return DatasetManifest(tuple(frames), classes)
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [format_kv({"classes": ",".join(manifest.classes)})]
    for fid, cloud, labels in manifest.frames:
        lines.append(format_kv({"frame_id": fid, "cloud": cloud, "labels": labels}))
    Path(path).write_text("".join(l + "\n" for l in lines))


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    cloud: PointCloud
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.cloud == other.cloud
                and self.labels == other.labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """In-memory ID dataset: ordered frames plus FG class names."""

    frames: tuple
    classes: tuple

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "classes", tuple(self.classes))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.classes == other.classes and self.frames == other.frames

    def __len__(self):
        return len(self.frames)


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    root = manifest_path.parent
    frames = [Frame(fid, read_cloud(root / cp, fid), read_labels(root / lp))
              for fid, cp, lp in m.frames]
    return Dataset(frames, m.classes)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write clouds/, labels/ and manifest.txt under ``directory``; return the manifest path."""
    directory = Path(directory)
    (directory / "clouds").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for fr in dataset.frames:
        cp, lp = f"clouds/{fr.frame_id}.bin", f"labels/{fr.frame_id}.txt"
        write_cloud(fr.cloud, directory / cp)
        write_labels(fr.labels, directory / lp)
        entries.append((fr.frame_id, cp, lp))
    manifest = directory / "manifest.txt"
    write_manifest(DatasetManifest(tuple(entries), dataset.classes), manifest)
    return manifest


# ---------------------------------------------------------------------------
# feature dumps

@dataclass(frozen=True, eq=False)
class FeatureSample:
    vector: np.ndarray
    class_label: int
    is_ood: bool = False
    source: str = "gt_anchor"
    frame_id: str = ""
    layer: str = "backbone"

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float32).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def __eq__(self, other):
        if not isinstance(other, FeatureSample):
            return NotImplemented
        return (np.array_equal(self.vector, other.vector)
                and self.class_label == other.class_label and self.is_ood == other.is_ood
                and self.source == other.source and self.frame_id == other.frame_id
                and self.layer == other.layer)


def write_feature_dump(samples: Sequence[FeatureSample], path, layer: Optional[str] = None,
                       n_classes: int = 0, dim: Optional[int] = None) -> None:
    samples = list(samples)
    if layer is None:
        layer = samples[0].layer if samples else ""
    if dim is None:
        dim = samples[0].vector.size if samples else 0
    for i, s in enumerate(samples):
        if s.vector.size != dim:
            raise DimensionMismatch(f"sample {i} has dimension {s.vector.size}, expected {dim}")
    tag = layer.encode("ascii")
    if len(tag) > 16:
        raise ValueError("layer tag longer than 16 bytes")
    row = np.dtype([("cls", "<i4"), ("ood", "u1"), ("vec", "<f4", (dim,))])
    rows = np.zeros(len(samples), dtype=row)
    for i, s in enumerate(samples):
        rows[i] = (s.class_label, int(s.is_ood), s.vector)
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, len(samples), dim,
                                   tag.ljust(16, b"\0"), int(n_classes)))
        fh.write(rows.tobytes())


@dataclass(frozen=True)
class FeatureDumpHeader:
    count: int
    dim: int
    layer: str
    n_classes: int


def read_feature_dump(path, source: str = "gt_anchor"):
    """Return ``(samples, header)``. Only the dumped fields are recovered."""
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise TruncatedFile(f"{path}: header needs {_DUMP_HEADER.size} bytes, file has {len(raw)}")
    magic, version, n, d, tag, n_classes = _DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte 0", None, path)
    if version != DUMP_VERSION:
        raise ParseError(f"unsupported dump version {version} at byte 4", None, path)
    row = np.dtype([("cls", "<i4"), ("ood", "u1"), ("vec", "<f4", (d,))])
    need = _DUMP_HEADER.size + n * row.itemsize
    if len(raw) != need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)} "
                            f"(rows start at byte {_DUMP_HEADER.size})")
    rows = np.frombuffer(raw, dtype=row, count=n, offset=_DUMP_HEADER.size)
    layer = tag.rstrip(b"\0").decode("ascii")
    samples = [FeatureSample(r["vec"].copy(), int(r["cls"]), bool(r["ood"]), source, "", layer)
               for r in rows]
    return samples, FeatureDumpHeader(n, d, layer, n_classes)
