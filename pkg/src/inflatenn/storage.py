"""Binary packs for frames and weights, plus the CSV exchange formats.

FramePack (little-endian)::

    b"FPK1"  u32 frame_count  u32 height  u32 width  u32 channels
    validity bitmap, ceil(frame_count / 8) bytes, bit f at byte f // 8, LSB first
    float32 frame data [frame_count, height, width, channels], row-major

WeightPack (little-endian)::

    b"WPK1"  u32 entry_count
    per entry: u32 name_len, UTF-8 name, u32 rank, rank x u32 extents, float32 payload

Entries are written in sorted name order so identical weights give identical
bytes.  Every write goes to a temporary file in the target directory and is
renamed into place.
"""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile

import numpy as np

from .errors import DataError, FormatError, LengthError, NonFiniteError

FRAME_MAGIC = b"FPK1"
WEIGHT_MAGIC = b"WPK1"
_F32 = np.dtype("<f4")

ANNOTATION_HEADER = ["frame_index", "timestamp_ms", "valence", "arousal", "valid"]
PREDICTION_HEADER = ["frame_index", "valence_pred", "arousal_pred"]


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_finite(arr, what, allow_nan):
    if not allow_nan and not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteError(f"{what} contains a non-finite value at element {bad}")


# --------------------------------------------------------------------------
# FramePack


def encode_framepack(frames, valid) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise DataError(f"frames must be [count, height, width, channels], got {frames.shape}")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (frames.shape[0],):
        raise DataError("validity flags must have one entry per frame")
    header = FRAME_MAGIC + struct.pack("<4I", *frames.shape)
    bitmap = np.packbits(valid, bitorder="little").tobytes()
    return header + bitmap + np.ascontiguousarray(frames, dtype=_F32).tobytes()


def decode_framepack(data: bytes, allow_nan=False):
    if len(data) < 4 or data[:4] != FRAME_MAGIC:
        raise FormatError("not a FramePack: bad magic", offset=0)
    if len(data) < 20:
        raise LengthError("FramePack header truncated", offset=len(data))
    count, h, w, c = struct.unpack_from("<4I", data, 4)
    nbits = (count + 7) // 8
    payload = count * h * w * c * 4
    expected = 20 + nbits + payload
    if len(data) != expected:
        raise LengthError(f"FramePack payload length {len(data)} != expected {expected}",
                          offset=min(len(data), expected))
    valid = np.unpackbits(np.frombuffer(data, np.uint8, nbits, 20), bitorder="little")[:count].astype(bool)
    frames = np.frombuffer(data, _F32, count * h * w * c, 20 + nbits).astype(np.float32).reshape(count, h, w, c)
    _check_finite(frames, "FramePack payload", allow_nan)
    return frames, valid


def write_framepack(path, frames, valid):
    atomic_write_bytes(path, encode_framepack(frames, valid))


def read_framepack(path, allow_nan=False):
    with open(path, "rb") as fh:
        return decode_framepack(fh.read(), allow_nan)


# --------------------------------------------------------------------------
# WeightPack


def encode_weightpack(weights: dict) -> bytes:
    out = [WEIGHT_MAGIC, struct.pack("<I", len(weights))]
    for name in sorted(weights):
        arr = np.asarray(weights[name])
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(out)


def decode_weightpack(data: bytes, allow_nan=False) -> dict:
    if len(data) < 4 or data[:4] != WEIGHT_MAGIC:
        raise FormatError("not a WeightPack: bad magic", offset=0)

    def need(offset, n, what):
        if offset + n > len(data):
            raise LengthError(f"WeightPack truncated while reading {what}", offset=offset)

    need(4, 4, "entry count")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    weights = {}
    for _ in range(count):
        need(off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, nlen, "name")
        try:
            name = data[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", offset=off) from None
        off += nlen
        if name in weights:
            raise FormatError(f"duplicate entry {name!r}", offset=off)
        need(off, 4, "rank")
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, 4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        need(off, 4 * size, f"payload of {name!r}")
        arr = np.frombuffer(data, _F32, size, off).astype(np.float32).reshape(shape)
        off += 4 * size
        _check_finite(arr, f"WeightPack entry {name!r}", allow_nan)
        weights[name] = arr
    if off != len(data):
        raise LengthError(f"{len(data) - off} trailing bytes after last entry", offset=off)
    return weights


def write_weightpack(path, weights: dict):
    atomic_write_bytes(path, encode_weightpack(weights))


def read_weightpack(path, allow_nan=False) -> dict:
    with open(path, "rb") as fh:
        return decode_weightpack(fh.read(), allow_nan)


def save_model(path, model):
    """WeightPack at ``path`` plus its architecture manifest at ``path + '.arch'``."""
    from .graph import describe

    write_weightpack(path, model.weights)
    atomic_write_text(os.fspath(path) + ".arch", describe(model))


def load_model(path, allow_nan=False):
    from .graph import parse_manifest

    weights = read_weightpack(path, allow_nan)
    arch_path = os.fspath(path) + ".arch"
    if not os.path.exists(arch_path):
        raise FormatError(f"missing architecture manifest {arch_path}")
    with open(arch_path, encoding="utf-8") as fh:
        model = parse_manifest(fh.read(), weights)
    for name in model.param_names(trainable=False):
        if name not in weights:
            raise FormatError(f"WeightPack lacks entry {name!r} required by the manifest")
    return model


# --------------------------------------------------------------------------
# CSV formats


def write_annotation_csv(path, frame_index, timestamp_ms, valence, arousal, valid):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_HEADER)
    for row in zip(frame_index, timestamp_ms, valence, arousal, valid):
        f, t, v, a, ok = row
        w.writerow([int(f), f"{float(t):.3f}", f"{float(v):.17g}", f"{float(a):.17g}", int(bool(ok))])
    atomic_write_text(path, buf.getvalue())


def read_annotation_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise DataError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}, got {header}")
        rows = list(reader)
    try:
        cols = list(zip(*rows)) if rows else [()] * 5
        out = {
            "frame_index": np.array([int(v) for v in cols[0]], dtype=np.int64),
            "timestamp_ms": np.array([float(v) for v in cols[1]]),
            "valence": np.array([float(v) for v in cols[2]]),
            "arousal": np.array([float(v) for v in cols[3]]),
            "valid": np.array([v.strip() not in ("0", "false", "False") for v in cols[4]], dtype=bool),
        }
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed annotation row ({exc})") from None
    for key in ("valence", "arousal"):
        if not np.all(np.isfinite(out[key])):
            raise NonFiniteError(f"{path}: non-finite {key}")
    return out


def write_predictions_csv(path, frame_index, valence_pred, arousal_pred):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for f, v, a in zip(frame_index, valence_pred, arousal_pred):
        w.writerow([int(f), f"{float(v):.9g}", f"{float(a):.9g}"])
    atomic_write_text(path, buf.getvalue())


def read_predictions_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_HEADER:
            raise DataError(f"{path}: expected header {','.join(PREDICTION_HEADER)}, got {header}")
        rows = list(reader)
    try:
        out = {
            "frame_index": np.array([int(r[0]) for r in rows], dtype=np.int64),
            "valence_pred": np.array([float(r[1]) for r in rows]),
            "arousal_pred": np.array([float(r[2]) for r in rows]),
        }
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed prediction row ({exc})") from None
    for key in ("valence_pred", "arousal_pred"):
        if not np.all(np.isfinite(out[key])):
            raise NonFiniteError(f"{path}: non-finite {key}")
    return out
