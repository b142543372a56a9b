"""Deterministic synthetic "face" videos whose labels are functionals of the pixels.

Each video is a flat background whose level drifts slowly, plus a soft
bright blob that wanders around at a time-varying speed.  The blob gets
brighter as it speeds up.  Labels:

* valence(f) = 2 * mean(frame f) - 1
* arousal(f) = clamp(kappa * mean|frame f - frame f-1| - 1, -1, 1), with
  ``kappa = 10 * fps`` so the scale is per second of motion; frame 0 reuses
  the motion of frame 1.

Brightness therefore drives valence and blob motion drives arousal.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .tensor import STORAGE_DTYPE, RngStream

BLOB_SIGMA = 4.0
BLOB_AMPLITUDE = 0.5
# blob contrast at zero speed, as a fraction of BLOB_AMPLITUDE
BLOB_MIN_CONTRAST = 0.1
BACKGROUND_FREQS_HZ = (0.002, 0.01)
MAX_SPEED_PX_PER_S = 30.0
NUM_CLASSES = 7


def kappa_for(fps: int) -> float:
    return 10.0 * fps


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int = 50
    frames_per_video: int = 300
    height: int = 32
    width: int = 24
    fps: int = 10
    seed: int = 0
    dropout_rate: float = 0.0
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("num_videos", "frames_per_video", "height", "width", "fps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.fps not in (10, 50):
            raise ConfigError(f"fps must be 10 or 50, got {self.fps}")
        if not 0.0 <= self.dropout_rate <= 0.3:
            raise ConfigError(f"dropout_rate must lie in [0, 0.3], got {self.dropout_rate}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class Video:
    source: str
    split: str
    frames: np.ndarray  # [F, H, W, 3] float32; invalid frames are zeros
    valid: np.ndarray  # [F] bool
    valence: np.ndarray  # [F] float64
    arousal: np.ndarray
    frame_index: np.ndarray = None
    fps: int = 10

    def __post_init__(self):
        if self.frame_index is None:
            self.frame_index = np.arange(len(self.frames), dtype=np.int64)

    @property
    def timestamps_ms(self):
        return self.frame_index * (1000.0 / self.fps)


@dataclass
class Corpus:
    spec: SynthSpec
    videos: list = field(default_factory=list)

    def split(self, name):
        return [v for v in self.videos if v.split == name]


def label_functionals(frames, fps: int = 10):
    """(valence, arousal) per frame, exactly as the generator defines them."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[0] < 2:
        raise DomainError("label functionals need at least 2 frames")
    axes = tuple(range(1, frames.ndim))
    valence = 2.0 * frames.mean(axis=axes) - 1.0
    motion = np.abs(np.diff(frames, axis=0)).mean(axis=axes)
    motion = np.concatenate([motion[:1], motion])
    arousal = np.clip(kappa_for(fps) * motion - 1.0, -1.0, 1.0)
    return np.clip(valence, -1.0, 1.0), arousal


def _smooth_signal(rng, t_s, freqs=(0.01, 0.05), terms=3):
    """Sum of low-frequency sinusoids, normalized to [-1, 1]."""
    f = rng.uniform(terms, *freqs)
    phase = rng.uniform(terms, 0.0, 2 * np.pi)
    amp = rng.uniform(terms, 0.5, 1.0)
    s = (amp[:, None] * np.sin(2 * np.pi * f[:, None] * t_s[None, :] + phase[:, None])).sum(axis=0)
    return s / amp.sum()


def _reflect(v, lo, hi):
    while v < lo or v > hi:
        v = 2 * lo - v if v < lo else 2 * hi - v
    return v


def render_video(spec: SynthSpec, rng: RngStream):
    """Rendered frames [F, H, W, 3] in [0, 1] (before any frame dropout)."""
    n, h, w = spec.frames_per_video, spec.height, spec.width
    t_s = np.arange(n) / spec.fps
    background = 0.35 + 0.25 * _smooth_signal(rng, t_s, freqs=BACKGROUND_FREQS_HZ)
    drive = 0.5 + 0.5 * _smooth_signal(rng, t_s, freqs=(0.03, 0.12))
    speed = MAX_SPEED_PX_PER_S * drive / spec.fps
    # a faster blob is also a brighter one, so motion is visible in single frames
    contrast = BLOB_AMPLITUDE * (BLOB_MIN_CONTRAST + (1 - BLOB_MIN_CONTRAST) * drive)
    heading = rng.uniform((), 0, 2 * np.pi) + np.cumsum(rng.normal(n, 0.15))
    margin = BLOB_SIGMA
    pos = np.empty((n, 2))
    y, x = rng.uniform((), margin, h - margin), rng.uniform((), margin, w - margin)
    for f in range(n):
        y = _reflect(y + speed[f] * np.sin(heading[f]), margin, h - margin)
        x = _reflect(x + speed[f] * np.cos(heading[f]), margin, w - margin)
        pos[f] = (y, x)
    yy = np.arange(h)[None, :, None]
    xx = np.arange(w)[None, None, :]
    blob = np.exp(-((yy - pos[:, 0, None, None]) ** 2 + (xx - pos[:, 1, None, None]) ** 2)
                  / (2 * BLOB_SIGMA ** 2))
    gray = background[:, None, None] + contrast[:, None, None] * blob
    tint = np.array([1.0, 0.95, 0.9])
    frames = np.clip(gray[..., None] * tint, 0.0, 1.0)
    return frames.astype(STORAGE_DTYPE)


def generate_corpus(spec: SynthSpec) -> Corpus:
    root = RngStream(spec.seed)
    n_val = int(round(spec.num_videos * spec.val_fraction))
    videos = []
    for v in range(spec.num_videos):
        rng = root.split(v)
        frames = render_video(spec, rng)
        valence, arousal = label_functionals(frames, spec.fps)
        valid = ~rng.bernoulli(spec.frames_per_video, spec.dropout_rate) if spec.dropout_rate > 0 \
            else np.ones(spec.frames_per_video, dtype=bool)
        frames[~valid] = 0.0
        split = "val" if v >= spec.num_videos - n_val else "train"
        videos.append(Video(f"video{v:03d}", split, frames, valid, valence, arousal, fps=spec.fps))
    return Corpus(spec, videos)


def frame_classes(valence, lo=-1.0, hi=1.0, k=NUM_CLASSES):
    """Toy categorical labels: equal-width valence bins over [lo, hi]."""
    edges = np.linspace(lo, hi, k + 1)[1:-1]
    return np.digitize(np.asarray(valence), edges).astype(np.int64)


# --------------------------------------------------------------------------
# on-disk corpus: one FramePack + one annotation CSV per video, plus a manifest


def write_corpus(corpus: Corpus, out_dir):
    from .storage import atomic_write_text, write_annotation_csv, write_framepack

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for v in corpus.videos:
        write_framepack(os.path.join(out_dir, f"{v.source}.fpk"), v.frames, v.valid)
        write_annotation_csv(os.path.join(out_dir, f"{v.source}.csv"), v.frame_index,
                             v.timestamps_ms, v.valence, v.arousal, v.valid)
        entries.append({"source": v.source, "split": v.split,
                        "frames": f"{v.source}.fpk", "annotations": f"{v.source}.csv"})
    manifest = {"format": "synth-corpus/1", "spec": asdict(corpus.spec),
                "kappa": kappa_for(corpus.spec.fps), "videos": entries}
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=1) + "\n")


def read_corpus(corpus_dir, allow_nan=False) -> Corpus:
    from .storage import read_annotation_csv, read_framepack

    path = os.path.join(corpus_dir, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no corpus manifest at {path}") from None
    if manifest.get("format") != "synth-corpus/1":
        raise ConfigError(f"{path} is not a corpus manifest")
    spec = SynthSpec(**manifest["spec"])
    videos = []
    for e in manifest["videos"]:
        frames, valid = read_framepack(os.path.join(corpus_dir, e["frames"]), allow_nan=allow_nan)
        ann = read_annotation_csv(os.path.join(corpus_dir, e["annotations"]))
        videos.append(Video(e["source"], e["split"], frames, valid, ann["valence"], ann["arousal"],
                            ann["frame_index"], fps=spec.fps))
    return Corpus(spec, videos)
