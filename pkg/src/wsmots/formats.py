"""Readers and writers: KITTI MOTS text, tensor blobs, detection JSONL."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .masks import BBox, RleError, RleMask, rle_decode
from .metrics import IGNORE_CLASS, FrameAnnotations, Instance
from .tracking import TrackObservation

__all__ = [
    "FormatError",
    "atomic_write",
    "parse_kitti",
    "parse_kitti_text",
    "format_kitti",
    "write_kitti",
    "BLOB_MAGIC",
    "BLOB_VERSION",
    "encode_blob",
    "decode_blob",
    "read_blob",
    "write_blob",
    "read_detections",
    "write_detections",
    "detection_to_dict",
]


class FormatError(ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# -- KITTI MOTS ----------------------------------------------------------------

def parse_kitti_text(text, path=None, check_masks=True):
    """Parse ``frame obj_id class_id img_h img_w rle`` lines into frames."""
    frames: dict[int, FrameAnnotations] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 6:
            raise FormatError(f"expected 6 fields, found {len(parts)}", path, lineno)
        try:
            frame, obj_id, class_id, h, w = (int(x) for x in parts[:5])
        except ValueError:
            raise FormatError("non-integer header field", path, lineno) from None
        if frame < 0 or h <= 0 or w <= 0:
            raise FormatError("negative frame or non-positive image size", path, lineno)
        rle = RleMask(h, w, parts[5])
        if check_masks:
            try:
                rle_decode(rle)
            except (RleError, UnicodeEncodeError) as exc:
                raise FormatError(f"bad mask: {exc}", path, lineno) from None
        if class_id != IGNORE_CLASS and obj_id // 1000 != class_id:
            raise FormatError(f"object id {obj_id} inconsistent with class {class_id}", path, lineno)
        fa = frames.setdefault(frame, FrameAnnotations(frame))
        if class_id == IGNORE_CLASS:
            fa.ignore_regions.append(rle)
        else:
            fa.instances.append(Instance(obj_id, class_id, rle))
    return frames


def parse_kitti(path, check_masks=True):
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise FormatError("file is not text", path) from None
    return parse_kitti_text(text, path, check_masks)


def format_kitti(frames, ignore_id=10000) -> str:
    """Serialize frames; lines are sorted by (frame, obj_id)."""
    rows = []
    for f, fa in frames.items():
        for inst in fa.instances:
            rows.append((f, inst.track_id, inst.class_id, inst.mask))
        for region in fa.ignore_regions:
            rows.append((f, ignore_id, IGNORE_CLASS, region))
    rows.sort(key=lambda r: (r[0], r[1]))
    return "".join(f"{f} {oid} {cid} {m.height} {m.width} {m.counts}\n" for f, oid, cid, m in rows)


def write_kitti(frames, path):
    with atomic_write(path) as fh:
        fh.write(format_kitti(frames))


# -- tensor blobs ----------------------------------------------------------------

BLOB_MAGIC = b"MOTK"
BLOB_VERSION = 1
_DTYPES = {0: np.dtype("<f4")}
_HEADER = struct.Struct("<4sHBB")


def encode_blob(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    head = _HEADER.pack(BLOB_MAGIC, BLOB_VERSION, 0, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr).tobytes()


def decode_blob(data: bytes, path=None) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", path)
    magic, version, dtype, ndim = _HEADER.unpack_from(data)
    if magic != BLOB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    if version != BLOB_VERSION:
        raise FormatError(f"unsupported version {version}", path)
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}", path)
    off = _HEADER.size
    if len(data) < off + 4 * ndim:
        raise FormatError("truncated dimensions", path)
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    dt = _DTYPES[dtype]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(data) - off != need:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {need}", path)
    return np.frombuffer(data, dtype=dt, offset=off).reshape(dims).astype(np.float32)


def read_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes(), path)


def write_blob(array, path):
    with atomic_write(path, "wb") as fh:
        fh.write(encode_blob(array))


# -- detections JSONL ----------------------------------------------------------------

def detection_to_dict(obs: TrackObservation) -> dict:
    rec = {
        "frame": obs.frame,
        "class_id": obs.class_id,
        "score": obs.score,
        "bbox": obs.bbox.as_list(),
        "embedding": obs.embedding.tolist(),
    }
    if obs.identity is not None:
        rec["track_id"] = obs.identity
    if obs.mask is not None:
        rec["mask"] = {"h": obs.mask.height, "w": obs.mask.width, "counts": obs.mask.counts}
    return rec


def _detection_from_dict(rec, path, lineno):
    try:
        mask = rec.get("mask")
        if mask is not None:
            mask = RleMask(int(mask["h"]), int(mask["w"]), str(mask["counts"]))
            rle_decode(mask)
        identity = rec.get("track_id")
        emb = np.asarray(rec["embedding"], dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise ValueError("embedding must be a non-empty list of numbers")
        score = float(rec["score"])
        if not 0.0 <= score <= 1.0:
            raise ValueError("score outside [0, 1]")
        return TrackObservation(
            frame=int(rec["frame"]),
            bbox=BBox.from_list(rec["bbox"]),
            class_id=int(rec["class_id"]),
            score=score,
            embedding=emb,
            identity=None if identity is None else int(identity),
            mask=mask,
        )
    except (KeyError, TypeError, ValueError, RleError) as exc:
        raise FormatError(f"invalid detection: {exc}", path, lineno) from None


def read_detections(path_or_lines, path=None):
    """Parse detections, one JSON object per line; blank lines are skipped."""
    if isinstance(path_or_lines, (str, os.PathLike)):
        path = Path(path_or_lines)
        lines = path.read_text().splitlines()
    else:
        lines = list(path_or_lines)
    out = []
    dim = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", path, lineno) from None
        if not isinstance(rec, dict):
            raise FormatError("expected a JSON object", path, lineno)
        obs = _detection_from_dict(rec, path, lineno)
        if dim is None:
            dim = obs.embedding.size
        elif obs.embedding.size != dim:
            raise FormatError(f"embedding length {obs.embedding.size}, expected {dim}", path, lineno)
        out.append(obs)
    return out


def write_detections(detections, stream):
    """Write detections as JSONL to a text stream."""
    for obs in detections:
        stream.write(json.dumps(detection_to_dict(obs), separators=(",", ":")) + "\n")
