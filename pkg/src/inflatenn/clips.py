"""Annotation resampling, overlapped clip windowing and label fusion."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError

FPS_CHOICES = (10, 50)
SEQ_LENS = (16, 32, 64)
OVERLAPS = (0.2, 0.5, 0.8)
FUSIONS = ("mean", "extremum")


@dataclass
class FrameRecord:
    frame_index: int
    timestamp_ms: float
    face: np.ndarray | None
    valid: bool

    def __post_init__(self):
        if not self.valid and self.face is not None:
            raise DomainError(f"frame {self.frame_index} is invalid but carries a face")


@dataclass
class AnnotationTrack:
    valence: np.ndarray
    arousal: np.ndarray
    rate_fps: int

    def __post_init__(self):
        self.valence = np.asarray(self.valence, dtype=np.float64)
        self.arousal = np.asarray(self.arousal, dtype=np.float64)
        if self.valence.shape != self.arousal.shape or self.valence.ndim != 1:
            raise DimensionError("valence and arousal tracks must be equal-length vectors")
        for series in (self.valence, self.arousal):
            if series.size and (series.min() < -1.0 or series.max() > 1.0):
                raise DomainError("annotation values must lie in [-1, 1]")

    def __len__(self):
        return self.valence.size


@dataclass(frozen=True)
class WindowConfig:
    fps: int = 10
    seq_len: int = 16
    overlap_ratio: float = 0.5
    fusion: str = "mean"
    gap_tolerance: int | None = None  # source-frame units; None -> 2 nominal steps
    nominal_step: int = 1  # source frames between consecutive frames at this fps

    def __post_init__(self):
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be positive, got {self.seq_len}")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ConfigError(f"overlap ratio must lie in [0, 1), got {self.overlap_ratio}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.nominal_step < 1:
            raise ConfigError("nominal step must be >= 1")
        if self.gap_tolerance is not None and self.gap_tolerance < self.nominal_step:
            raise ConfigError(
                f"gap tolerance {self.gap_tolerance} is below the nominal step {self.nominal_step}")

    @property
    def stride(self) -> int:
        return max(1, int(math.floor(self.seq_len * (1.0 - self.overlap_ratio) + 0.5 + 1e-9)))

    @property
    def tolerance(self) -> int:
        return self.gap_tolerance if self.gap_tolerance is not None else 2 * self.nominal_step


@dataclass(frozen=True)
class Clip:
    source: str
    indices: tuple
    fused_valence: float
    fused_arousal: float
    positions: tuple = field(default=(), compare=False)  # row positions in the source stream


def resample_annotations(track: AnnotationTrack, to_fps: int) -> AnnotationTrack:
    src = track.rate_fps
    if src == to_fps:
        return AnnotationTrack(track.valence.copy(), track.arousal.copy(), src)
    if (src, to_fps) == (10, 50):
        return AnnotationTrack(np.repeat(track.valence, 5), np.repeat(track.arousal, 5), 50)
    if (src, to_fps) == (50, 10):
        return AnnotationTrack(track.valence[::5].copy(), track.arousal[::5].copy(), 10)
    raise ConfigError(f"unsupported annotation resampling {src} -> {to_fps} fps")


def fuse_labels(values, mode: str) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("cannot fuse an empty label list")
    if mode == "mean":
        return float(v.mean())
    if mode == "extremum":
        # argmax returns the earliest index on ties
        return float(v[int(np.argmax(np.abs(v)))])
    raise ConfigError(f"unknown fusion mode {mode!r}")


def window_positions(frame_index: Sequence[int], valid: Sequence[bool], cfg: WindowConfig) -> list:
    """Row positions of every emitted window.

    Windows of ``seq_len`` consecutive valid frames start every ``stride``
    valid frames; a window is kept only if each gap between neighbouring
    frame indices is within the tolerance.
    """
    frame_index = np.asarray(frame_index, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    if frame_index.shape != valid.shape:
        raise DimensionError("frame_index and valid flags differ in length")
    if frame_index.size > 1 and np.any(np.diff(frame_index) <= 0):
        raise DomainError("frame indices must be strictly increasing")
    kept = np.flatnonzero(valid)
    n = cfg.seq_len
    if kept.size < n:
        return []
    gaps_ok = np.diff(frame_index[kept]) <= cfg.tolerance
    # bad[k] = number of oversize gaps among the first k gaps
    bad = np.concatenate([[0], np.cumsum(~gaps_ok)])
    out = []
    for start in range(0, kept.size - n + 1, cfg.stride):
        if bad[start + n - 1] - bad[start] == 0:
            out.append(kept[start:start + n])
    return out


def window_clips(records, track: AnnotationTrack, cfg: WindowConfig, source: str = "") -> list:
    """Cut one annotated stream into fused-label clips."""
    if len(records) != len(track):
        raise DimensionError(f"{len(records)} frames but {len(track)} annotations")
    if track.rate_fps != cfg.fps:
        raise ConfigError(f"track is at {track.rate_fps} fps, window config expects {cfg.fps}")
    frame_index = [r.frame_index for r in records]
    valid = [r.valid for r in records]
    return clips_from_arrays(frame_index, valid, track.valence, track.arousal, cfg, source)


def clips_from_arrays(frame_index, valid, valence, arousal, cfg: WindowConfig, source=""):
    frame_index = np.asarray(frame_index, dtype=np.int64)
    out = []
    for pos in window_positions(frame_index, valid, cfg):
        out.append(Clip(
            source=source,
            indices=tuple(int(i) for i in frame_index[pos]),
            fused_valence=fuse_labels(valence[pos], cfg.fusion),
            fused_arousal=fuse_labels(arousal[pos], cfg.fusion),
            positions=tuple(int(p) for p in pos),
        ))
    return out


def expected_clip_count(length: int, cfg: WindowConfig) -> int:
    """Closed-form count over a fully valid run of ``length`` frames."""
    if length < cfg.seq_len:
        return 0
    return (length - cfg.seq_len) // cfg.stride + 1


# --------------------------------------------------------------------------
# manifest


def write_clip_manifest(path, clips: list, cfg: WindowConfig, splits: dict | None = None):
    from .storage import atomic_write_bytes

    doc = {
        "format": "clip-manifest/1",
        "window": {"fps": cfg.fps, "seq_len": cfg.seq_len, "overlap_ratio": cfg.overlap_ratio,
                   "fusion": cfg.fusion, "gap_tolerance": cfg.tolerance, "stride": cfg.stride},
        "clips": [
            {"source": c.source, "split": (splits or {}).get(c.source, ""),
             "indices": list(c.indices), "positions": list(c.positions),
             "valence": c.fused_valence, "arousal": c.fused_arousal}
            for c in clips
        ],
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=1) + "\n").encode("utf-8"))


def read_clip_manifest(path):
    """Returns (window settings dict, list of (Clip, split))."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "clip-manifest/1":
        raise ConfigError(f"{path} is not a clip manifest")
    clips = [(Clip(c["source"], tuple(c["indices"]), float(c["valence"]), float(c["arousal"]),
                   tuple(c.get("positions", ()))), c.get("split", ""))
             for c in doc["clips"]]
    return doc["window"], clips
