"""The end-to-end synthetic comparison: pre-train a 2D classifier, then fine-tune
a CNN-LSTM cascade and an inflated 3D network on valence/arousal regression.

Everything runs from one seed; the calibrated floors live in ``FLOORS``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .clips import WindowConfig, clips_from_arrays
from .datagen import NUM_CLASSES, Corpus, SynthSpec, frame_classes, generate_corpus
from .graph import ClassificationHead, build_cnn_lstm, build_i3d, build_vgg_mini, strip_head
from .inflation import InflationConfig, build_gradient_mask
from .metrics import evaluate
from .training import ArrayDataset, ClipDataset, TrainConfig, class_weights_from_counts, fit, predict

# acceptance floors, confirmed by the calibration run recorded in CALIBRATION.md
FLOORS = {"cnn_lstm_valence": 0.5, "cnn_lstm_arousal": 0.5, "i3d_arousal": 0.3}


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(num_videos=50, frames_per_video=300,
                                                               dropout_rate=0.05))
    window: WindowConfig = field(default_factory=lambda: WindowConfig(fps=10, seq_len=16, overlap_ratio=0.2))
    learning_rate: float = 1e-3
    pretrain_epochs: int = 3
    pretrain_frame_step: int = 4
    cascade_epochs: int = 10
    i3d_epochs: int = 10
    i3d_batch: int = 8
    inflation: InflationConfig = field(default_factory=lambda: InflationConfig("centered", "random"))


@dataclass
class ExperimentResult:
    ccc: dict
    reports: dict
    logs: dict
    seconds: dict

    def passed(self, floors=None):
        floors = floors or FLOORS
        return {k: self.ccc[k] >= v for k, v in floors.items()}


def corpus_clips(corpus: Corpus, cfg: WindowConfig):
    """Clips per split plus the per-video frame arrays they index into."""
    frames, clips = {}, {"train": [], "val": []}
    for v in corpus.videos:
        frames[v.source] = v.frames
        clips[v.split] += clips_from_arrays(v.frame_index, v.valid, v.valence, v.arousal, cfg, v.source)
    return frames, clips


def pretrain_2d(corpus: Corpus, cfg: ExperimentConfig, log=None):
    """Toy categorical pre-training: valence bins of single valid frames, class-weighted."""
    train = corpus.split("train")
    x = np.concatenate([v.frames[v.valid][::cfg.pretrain_frame_step] for v in train])
    val = np.concatenate([v.valence[v.valid][::cfg.pretrain_frame_step] for v in train])
    y = frame_classes(val, val.min(), val.max() + 1e-9, NUM_CLASSES)
    weights = class_weights_from_counts(np.maximum(np.bincount(y, minlength=NUM_CLASSES), 1))
    model = build_vgg_mini("desk", ClassificationHead(fc=(32, 16), classes=NUM_CLASSES), seed=cfg.seed)
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=16, loss="weighted_cross_entropy",
                       epochs=cfg.pretrain_epochs, seed=cfg.seed, class_weights=weights)
    res = fit(model, ArrayDataset(x.transpose(0, 3, 1, 2), y), tcfg, progress=log)
    model.weights = res.best_weights
    return model, res


def _regress(model, frames, clips, tcfg, log=None):
    layout = model.arch
    train = ClipDataset(frames, clips["train"], layout)
    val = ClipDataset(frames, clips["val"], layout)
    res = fit(model, train, tcfg, val, progress=log)
    model.weights = res.best_weights
    p = predict(model, val, tcfg)
    reports = {t: evaluate(val.y[:, i], p[:, i], t) for i, t in enumerate(("valence", "arousal"))}
    return res, reports


def run_experiment(cfg: ExperimentConfig | None = None, log=None) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    seconds = {}
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.synth)
    frames, clips = corpus_clips(corpus, cfg.window)
    seconds["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    base, pre = pretrain_2d(corpus, cfg, log)
    trunk = strip_head(base)
    seconds["pretrain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cascade = build_cnn_lstm(trunk, seed=cfg.seed)
    ccfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=16, epochs=cfg.cascade_epochs,
                       seed=cfg.seed)
    cres, crep = _regress(cascade, frames, clips, ccfg, log)
    seconds["cnn_lstm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    i3d = build_i3d(trunk, cfg.inflation, seed=cfg.seed)
    icfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.i3d_batch, epochs=cfg.i3d_epochs,
                       seed=cfg.seed, target_multiplier=cfg.inflation.target_multiplier,
                       gradient_mask=build_gradient_mask(i3d, cfg.inflation) if cfg.inflation.masking else None)
    ires, irep = _regress(i3d, frames, clips, icfg, log)
    seconds["i3d"] = time.perf_counter() - t0

    ccc = {"cnn_lstm_valence": crep["valence"].ccc, "cnn_lstm_arousal": crep["arousal"].ccc,
           "i3d_valence": irep["valence"].ccc, "i3d_arousal": irep["arousal"].ccc}
    return ExperimentResult(ccc, {"cnn_lstm": crep, "i3d": irep},
                            {"pretrain": pre.log_csv(), "cnn_lstm": cres.log_csv(), "i3d": ires.log_csv()},
                            seconds)


def config_summary(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
