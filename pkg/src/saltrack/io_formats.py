"""Tensor file format, sequence manifests, track-record CSV, and PGM dumps.

The tensor container is deliberately dumb: one line of JSON, then the raw
little-endian scalars in row-major order.  Anything can parse it and round
trips are bit-exact by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class FormatError(Exception):
    """Base for all file-format problems."""


class HeaderError(FormatError):
    """Header line is missing, not JSON, or lacks required keys."""


class DtypeError(FormatError):
    """Header names a dtype this reader does not understand."""


class TruncationError(FormatError):
    """Payload byte count disagrees with the header shape."""


class ResolutionError(FormatError):
    """Manifest references a file that does not exist."""


class ValidationError(FormatError):
    """Manifest content violates its own invariants."""


_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def write_tensor(path, t) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    name = _DTYPE_NAMES.get(np.dtype(data.dtype))
    if name is None:
        data = data.astype(np.float32)
        name = "f32"
    header = {
        "dtype": name,
        "shape": list(data.shape),
        "layout": "row-major",
        "endian": "little",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("ascii"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(data, dtype=_DTYPES[name]).tobytes())


def _read_header(fh):
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise HeaderError("missing newline-terminated header line")
    try:
        header = json.loads(line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not single-line JSON: {exc}") from exc
    for key in ("dtype", "shape", "layout", "endian"):
        if key not in header:
            raise HeaderError(f"header missing key {key!r}")
    if header["dtype"] not in _DTYPES:
        raise DtypeError(f"unsupported dtype {header['dtype']!r}")
    if header["layout"] != "row-major" or header["endian"] != "little":
        raise HeaderError("only row-major little-endian payloads are supported")
    shape = tuple(int(s) for s in header["shape"])
    if any(s < 0 for s in shape):
        raise HeaderError(f"negative dimension in shape {shape}")
    return header["dtype"], shape


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        dtype_name, shape = _read_header(fh)
        payload = fh.read()
    dtype = _DTYPES[dtype_name]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: expected {expected} payload bytes for shape {shape}, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor(data.copy(), requires_grad=False)


def read_tensor_shape(path):
    """Header-only peek, used by manifest validation to avoid loading payloads."""
    with open(path, "rb") as fh:
        _, shape = _read_header(fh)
    return shape


@dataclass
class SequenceManifest:
    frames: list
    exemplar_frame_index: int
    exemplar_box: tuple
    gt_boxes: list | None = None
    meta: dict = field(default_factory=dict)

    def frame_count(self) -> int:
        return len(self.frames)


def write_manifest(path, manifest: SequenceManifest) -> None:
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "frames": [os.path.relpath(f, base) for f in manifest.frames],
        "exemplar_frame_index": int(manifest.exemplar_frame_index),
        "exemplar_box": [float(v) for v in manifest.exemplar_box],
        "meta": manifest.meta,
    }
    if manifest.gt_boxes is not None:
        doc["gt_boxes"] = [[float(v) for v in b] for b in manifest.gt_boxes]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> SequenceManifest:
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    frames = [os.path.join(base, f) for f in doc["frames"]]
    if not frames:
        raise ValidationError("manifest lists no frames")
    for f in frames:
        if not os.path.exists(f):
            raise ResolutionError(f"frame file not found: {f}")
    idx = int(doc["exemplar_frame_index"])
    if not 0 <= idx < len(frames):
        raise ValidationError(f"exemplar_frame_index {idx} out of range")
    box = tuple(float(v) for v in doc["exemplar_box"])
    if len(box) != 4:
        raise ValidationError("exemplar_box must be (x, y, w, h)")
    shape = read_tensor_shape(frames[idx])
    if len(shape) != 3:
        raise ValidationError(f"frame tensors must be h×w×c, got shape {shape}")
    h, w = shape[0], shape[1]
    x, y, bw, bh = box
    if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w or y + bh > h:
        raise ValidationError(f"exemplar_box {box} exceeds frame extent {w}×{h}")
    gt = doc.get("gt_boxes")
    if gt is not None:
        if len(gt) != len(frames):
            raise ValidationError(
                f"gt_boxes has {len(gt)} entries for {len(frames)} frames"
            )
        gt = [tuple(float(v) for v in b) for b in gt]
    return SequenceManifest(frames, idx, box, gt, doc.get("meta", {}))


@dataclass
class TrackRecord:
    frame_index: int
    box: tuple
    confidence: float
    saliency: list  # K entries of (x, y, value)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_track_csv(path, records) -> None:
    if not records:
        raise ValidationError("no records to write")
    k = len(records[0].saliency)
    cols = ["frame", "x", "y", "w", "h", "conf"]
    for i in range(k):
        cols += [f"sx_{i}", f"sy_{i}", f"sval_{i}"]
    lines = [",".join(cols)]
    for rec in records:
        if len(rec.saliency) != k:
            raise ValidationError("records disagree on saliency count K")
        vals = [str(rec.frame_index)] + [_fmt(v) for v in rec.box] + [_fmt(rec.confidence)]
        for sx, sy, sv in rec.saliency:
            vals += [_fmt(sx), _fmt(sy), _fmt(sv)]
        lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_track_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    header = lines[0].split(",")
    if header[:6] != ["frame", "x", "y", "w", "h", "conf"]:
        raise HeaderError(f"unexpected track CSV columns: {header[:6]}")
    k = (len(header) - 6) // 3
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 6 + 3 * k:
            raise TruncationError(f"row has {len(parts)} fields, expected {6 + 3 * k}")
        sal = [
            (float(parts[6 + 3 * i]), float(parts[7 + 3 * i]), float(parts[8 + 3 * i]))
            for i in range(k)
        ]
        records.append(
            TrackRecord(
                frame_index=int(parts[0]),
                box=tuple(float(v) for v in parts[1:5]),
                confidence=float(parts[5]),
                saliency=sal,
            )
        )
    return records


def dump_pgm(map_2d, path) -> None:
    data = map_2d.data if isinstance(map_2d, Tensor) else np.asarray(map_2d)
    if data.ndim != 2:
        raise ValidationError(f"PGM dump needs a 2-D map, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("PGM dump needs finite values")
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        pixels = np.round((data - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full(data.shape, 128, dtype=np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_csv(path, header, rows) -> None:
    """Small helper for loss curves and metric tables."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) if isinstance(v, (int, str)) else _fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
