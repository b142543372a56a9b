"""Command-line entry point: ``inflatenn <command> [flags]``.

Exit codes: 0 success, 2 configuration error (including bad flags),
3 data error (bad files, corrupt packs, non-finite values), 1 anything else
raised by the package.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .clips import AnnotationTrack, WindowConfig, clips_from_arrays, read_clip_manifest, \
    resample_annotations, write_clip_manifest
from .datagen import NUM_CLASSES, SynthSpec, frame_classes, generate_corpus, read_corpus, write_corpus
from .errors import ConfigError, DataError, InflateNNError
from .graph import SCALES, ClassificationHead, build_cnn_lstm, build_i3d, build_vgg_mini, describe, \
    strip_head
from .inflation import InflationConfig, build_gradient_mask, freeze_blocks_mask
from .metrics import evaluate, report_csv, report_table
from .postprocess import STEPS, apply_chain, fit_train_stats, read_stats_csv, write_stats_csv
from .storage import atomic_write_text, load_model, read_annotation_csv, read_predictions_csv, save_model, \
    write_annotation_csv, write_predictions_csv
from .training import ArrayDataset, ClipDataset, TrainConfig, class_weights_from_counts, fit, predict

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
TARGETS = ("valence", "arousal")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# run-config


_SECTIONS = {
    "data": {"corpus": str, "clips": str},
    "model": {"arch": str, "scale": str, "base": str, "seed": int, "freeze_blocks": int},
    "train": {"learning_rate": float, "batch_size": int, "epochs": int, "seed": int, "loss": str,
              "target_multiplier": float, "select": str},
    "window": {"fps": int, "seq_len": int, "overlap_ratio": float, "fusion": str, "gap_tolerance": int},
    "inflation": {"mode": str, "off_center_init": str, "masking": bool, "dilation_schedule": _int_list,
                  "target_multiplier": float, "temporal_extent": int, "copied_rescale": bool},
}


def read_run_config(path) -> dict:
    """INI-style run-config; unknown sections or keys are configuration errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"run-config {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {name: {} for name in _SECTIONS}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            conv = _SECTIONS[section].get(key)
            if conv is None:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = cp.getboolean(section, key) if conv is bool else conv(raw)
            except ValueError:
                raise ConfigError(f"{path}: bad value {raw!r} for {section}.{key}") from None
    return out


# --------------------------------------------------------------------------
# shared helpers


def _window_config(fps, corpus_fps, seq_len, overlap, fusion, gap_tolerance):
    if fps not in (10, 50):
        raise ConfigError(f"fps must be 10 or 50, got {fps}")
    if (corpus_fps, fps) not in ((10, 10), (50, 50), (50, 10)):
        raise ConfigError(f"cannot window a {corpus_fps} fps corpus at {fps} fps (no frames to replicate)")
    step = corpus_fps // fps
    return WindowConfig(fps=fps, seq_len=seq_len, overlap_ratio=overlap, fusion=fusion,
                        gap_tolerance=gap_tolerance, nominal_step=step), step


def _video_clips(video, cfg: WindowConfig, step: int):
    """Clips of one video at ``cfg.fps``; positions index the full-rate frame array."""
    if step == 1:
        return clips_from_arrays(video.frame_index, video.valid, video.valence, video.arousal, cfg,
                                 video.source)
    track = resample_annotations(AnnotationTrack(video.valence, video.arousal, video.fps), cfg.fps)
    rows = np.arange(0, len(video.frame_index), step)
    clips = clips_from_arrays(video.frame_index[rows], video.valid[rows], track.valence, track.arousal,
                              cfg, video.source)
    return [replace(c, positions=tuple(int(rows[p]) for p in c.positions)) for c in clips]


def _locate(corpus, clips):
    """Recompute row positions from frame indices (manifests store both)."""
    by_source = {v.source: v for v in corpus.videos}
    out = []
    for clip in clips:
        video = by_source.get(clip.source)
        if video is None:
            raise DataError(f"clip refers to unknown video {clip.source!r}")
        pos = np.searchsorted(video.frame_index, clip.indices)
        if np.any(pos >= len(video.frame_index)) or np.any(video.frame_index[pos] != clip.indices):
            raise DataError(f"clip of {clip.source!r} names frames absent from the corpus")
        if not np.all(video.valid[pos]):
            raise DataError(f"clip of {clip.source!r} contains invalid frames")
        out.append(replace(clip, positions=tuple(int(p) for p in pos)))
    return out


def _load_clips(corpus, manifest_path):
    _, entries = read_clip_manifest(manifest_path)
    splits = {"train": [], "val": []}
    for clip, split in entries:
        splits.setdefault(split or "train", []).append(clip)
    return {k: _locate(corpus, v) for k, v in splits.items()}


def _clip_splits(corpus, window: dict, clips_path=None):
    if clips_path:
        return _load_clips(corpus, clips_path)
    cfg, step = _window_config(window.get("fps", corpus.spec.fps), corpus.spec.fps,
                               window.get("seq_len", 16), window.get("overlap_ratio", 0.5),
                               window.get("fusion", "mean"), window.get("gap_tolerance"))
    splits = {"train": [], "val": []}
    for v in corpus.videos:
        splits[v.split] += _video_clips(v, cfg, step)
    return splits


def _frames(corpus):
    return {v.source: v.frames for v in corpus.videos}


def _inflation_config(section: dict) -> InflationConfig:
    return InflationConfig(**section)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    spec = SynthSpec(num_videos=args.videos, frames_per_video=args.frames, height=args.height,
                     width=args.width, fps=args.fps, seed=args.seed, dropout_rate=args.dropout,
                     val_fraction=args.val_fraction)
    corpus = generate_corpus(spec)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.videos)} videos to {args.out}")
    return EXIT_OK


def cmd_window(args):
    corpus = read_corpus(args.corpus, allow_nan=args.allow_nan)
    cfg, step = _window_config(args.fps, corpus.spec.fps, args.seq_len, args.overlap, args.fusion,
                               args.gap_tolerance)
    all_clips, splits = [], {}
    rows = []
    for v in corpus.videos:
        clips = _video_clips(v, cfg, step)
        all_clips += clips
        splits[v.source] = v.split
        rows.append((v.source, v.split, int(v.valid[::step].sum()), len(clips)))
    if args.out:
        write_clip_manifest(args.out, all_clips, cfg, splits)
    print(f"{'source':<12}{'split':<7}{'valid':>7}{'clips':>7}   seq_len={cfg.seq_len} "
          f"overlap={cfg.overlap_ratio} fps={cfg.fps} stride={cfg.stride}")
    for source, split, valid, count in rows:
        print(f"{source:<12}{split:<7}{valid:>7}{count:>7}")
    print(f"{'total':<12}{'':<7}{sum(r[2] for r in rows):>7}{len(all_clips):>7}")
    return EXIT_OK


def cmd_inflate(args):
    base = load_model(args.base, allow_nan=args.allow_nan)
    cfg = InflationConfig(mode=args.inflate_mode, off_center_init=args.init, masking=args.masking,
                          dilation_schedule=_int_list(args.dilation), target_multiplier=args.target_multiplier,
                          temporal_extent=args.temporal_extent, copied_rescale=args.rescale)
    model = build_i3d(strip_head(base), cfg, scale=args.scale, seed=args.seed)
    save_model(args.out, model)
    print(f"inflated {sum(l.kind == 'conv3d' for l in model.layers)} conv layers -> {args.out}")
    return EXIT_OK


def _build_model(conf: dict):
    m = conf["model"]
    arch = m.get("arch", "cnn_lstm")
    scale = m.get("scale", "desk")
    if scale not in SCALES:
        raise ConfigError(f"unknown scale {scale!r}")
    seed = m.get("seed", conf["train"].get("seed", 0))
    base = load_model(m["base"]) if m.get("base") else None
    if arch == "2d":
        if base is not None:
            return base
        return build_vgg_mini(scale, ClassificationHead(fc=SCALES[scale]["cls_fc"], classes=NUM_CLASSES), seed=seed)
    if arch == "cnn_lstm":
        if base is not None and base.arch == "cnn_lstm":
            return base
        trunk = strip_head(base) if base is not None else build_vgg_mini(scale, seed=seed)
        return build_cnn_lstm(trunk, scale=scale, seed=seed)
    if arch == "i3d":
        if base is not None and base.arch == "i3d":
            return base
        trunk = strip_head(base) if base is not None else build_vgg_mini(scale, seed=seed)
        return build_i3d(trunk, _inflation_config(conf["inflation"]), scale=scale, seed=seed)
    raise ConfigError(f"unknown model arch {arch!r}")


def _frame_dataset(videos, step=1):
    x = np.concatenate([v.frames[v.valid][::step] for v in videos]).transpose(0, 3, 1, 2)
    val = np.concatenate([v.valence[v.valid][::step] for v in videos])
    return x, val


def cmd_train(args):
    conf = read_run_config(args.config)
    corpus_dir = args.corpus or conf["data"].get("corpus")
    if not corpus_dir:
        raise ConfigError("no corpus given (--corpus or [data] corpus)")
    corpus = read_corpus(corpus_dir, allow_nan=args.allow_nan)
    model = _build_model(conf)
    t = dict(conf["train"])
    if model.arch == "i3d":
        t.setdefault("batch_size", 8)
        t.setdefault("target_multiplier", conf["inflation"].get("target_multiplier", 1.0))
    mask = None
    if model.arch == "i3d" and conf["inflation"].get("masking"):
        mask = build_gradient_mask(model, _inflation_config(conf["inflation"]))
    if conf["model"].get("freeze_blocks"):
        mask = freeze_blocks_mask(model, conf["model"]["freeze_blocks"], mask)
    os.makedirs(args.out, exist_ok=True)
    progress = (lambda row: _log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                          for k, v in row.items())))
    if model.arch == "2d":
        x, val = _frame_dataset(corpus.split("train"))
        lo, hi = val.min(), val.max() + 1e-9
        y = frame_classes(val, lo, hi, NUM_CLASSES)
        xv, vv = _frame_dataset(corpus.split("val"))
        counts = np.bincount(y, minlength=NUM_CLASSES)
        t.setdefault("loss", "weighted_cross_entropy")
        cfg = TrainConfig(class_weights=class_weights_from_counts(np.maximum(counts, 1)), gradient_mask=mask, **t)
        evald = ArrayDataset(xv, frame_classes(vv, lo, hi, NUM_CLASSES)) if len(xv) else None
        res = fit(model, ArrayDataset(x, y), cfg, evald, progress=progress)
    else:
        splits = _clip_splits(corpus, conf["window"], args.clips or conf["data"].get("clips"))
        frames = _frames(corpus)
        cfg = TrainConfig(gradient_mask=mask, **t)
        res = fit(model, ClipDataset(frames, splits["train"], model.arch),
                  cfg, ClipDataset(frames, splits["val"], model.arch) if splits["val"] else None,
                  progress=progress)
    model.weights = res.best_weights
    atomic_write_text(os.path.join(args.out, "log.csv"), res.log_csv())
    save_model(os.path.join(args.out, "best.wpk"), model)
    _log(f"best epoch {res.best_epoch} score {res.best_score:.6g}; wrote {args.out}/best.wpk")
    return EXIT_OK


def cmd_eval(args):
    corpus = read_corpus(args.corpus, allow_nan=args.allow_nan)
    model = load_model(args.model, allow_nan=args.allow_nan)
    if model.arch not in ("cnn_lstm", "i3d"):
        raise ConfigError(f"eval needs a regression model (cnn_lstm or i3d), got {model.arch!r}")
    splits = _load_clips(corpus, args.clips)
    if not splits.get(args.split):
        raise DataError(f"no clips in split {args.split!r}")
    cfg = TrainConfig(target_multiplier=args.target_multiplier)
    frames = _frames(corpus)
    data = ClipDataset(frames, splits[args.split], model.arch)
    preds = predict(model, data, cfg)
    train_clips = splits.get("train") or splits[args.split]
    train = ClipDataset(frames, train_clips, model.arch)
    train_preds = predict(model, train, cfg)
    reports = [evaluate(data.y[:, i], preds[:, i], t) for i, t in enumerate(TARGETS)]
    stats = {t: fit_train_stats(train.y[:, i], train_preds[:, i]) for i, t in enumerate(TARGETS)}
    os.makedirs(args.out, exist_ok=True)
    # one row per clip, keyed by the clip's last frame
    idx = [c.indices[-1] for c in data.clips]
    write_predictions_csv(os.path.join(args.out, "predictions.csv"), idx, preds[:, 0], preds[:, 1])
    write_annotation_csv(os.path.join(args.out, "labels.csv"), idx,
                         np.asarray(idx) * (1000.0 / corpus.spec.fps), data.y[:, 0], data.y[:, 1],
                         np.ones(len(idx), dtype=bool))
    write_stats_csv(os.path.join(args.out, "stats.csv"), stats)
    atomic_write_text(os.path.join(args.out, "report.csv"), report_csv(reports))
    print(report_table(reports), end="")
    return EXIT_OK


def cmd_postprocess(args):
    steps = tuple(s for s in args.steps.split(",") if s)
    unknown = set(steps) - set(STEPS)
    if unknown:
        raise ConfigError(f"unknown steps {sorted(unknown)}; choose from {','.join(STEPS)}")
    preds = read_predictions_csv(args.predictions)
    labels = read_annotation_csv(args.labels) if args.labels else None
    stats = read_stats_csv(args.stats) if args.stats else {}
    if labels is not None and not np.array_equal(labels["frame_index"], preds["frame_index"]):
        raise DataError("labels and predictions have different frame indices")
    repaired, delays, reports = {}, {}, []
    for t in TARGETS:
        if ("sn" in steps or "mf" in steps) and t not in stats:
            raise ConfigError(f"stats file lacks target {t!r}")
        y = None if labels is None else labels[t]
        p, y2, delay = apply_chain(preds[f"{t}_pred"], stats.get(t), steps, y, args.swapped_mean,
                                   (args.t_min, args.t_max))
        t_shift = delay.best_t if delay else 0
        repaired[t] = (p, t_shift)
        delays[t] = delay
        if y2 is not None:
            reports.append(evaluate(y2, p, t))
    # rows kept by every target's alignment: labels[f] paired with the shifted prediction
    n = len(preds["frame_index"])
    lo = max(max(0, -s) for _, s in repaired.values())
    hi = min(min(n, n - s) for _, s in repaired.values())
    cols = {}
    for t, (p, s) in repaired.items():
        start = max(0, -s)
        cols[t] = p[lo - start:hi - start]
    os.makedirs(args.out, exist_ok=True)
    write_predictions_csv(os.path.join(args.out, "predictions.csv"), preds["frame_index"][lo:hi],
                          cols["valence"], cols["arousal"])
    lines = ["target,best_t,aligned_length,ccc_at_best"]
    for t, d in delays.items():
        if d is not None:
            lines.append(f"{t},{d.best_t},{d.aligned_length},{d.ccc_at_best:.9g}")
    atomic_write_text(os.path.join(args.out, "delay.csv"), "\n".join(lines) + "\n")
    if reports:
        atomic_write_text(os.path.join(args.out, "report.csv"), report_csv(reports))
        print(report_table(reports), end="")
    for t, d in delays.items():
        if d is not None:
            print(f"{t}: best_t={d.best_t} aligned_length={d.aligned_length} ccc={d.ccc_at_best:.4f}")
    return EXIT_OK


def cmd_describe(args):
    model = load_model(args.model, allow_nan=args.allow_nan)
    print(describe(model), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="inflatenn", description="Inflated 3D and CNN-LSTM valence/arousal toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--allow-nan", action="store_true", help="accept non-finite values in packs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic annotated corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=50)
    g.add_argument("--frames", type=int, default=300)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=24)
    g.add_argument("--fps", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dropout", type=float, default=0.0, help="fraction of frames marked invalid")
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    w = sub.add_parser("window", help="cut the corpus into clips and print the count table")
    w.add_argument("--corpus", required=True)
    w.add_argument("--out", help="clip manifest to write")
    w.add_argument("--fps", type=int, default=10)
    w.add_argument("--seq-len", type=int, default=16)
    w.add_argument("--overlap", type=float, default=0.5)
    w.add_argument("--fusion", default="mean")
    w.add_argument("--gap-tolerance", type=int, default=None)
    w.set_defaults(func=cmd_window)

    i = sub.add_parser("inflate", help="inflate a 2D model into an i3D regression model")
    i.add_argument("--base", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--inflate-mode", default="centered")
    i.add_argument("--init", default="zero")
    i.add_argument("--mask", "--masking", dest="masking", action="store_true")
    i.add_argument("--dilation", default="1,1,1,1")
    i.add_argument("--multiplier", "--target-multiplier", dest="target_multiplier", type=float, default=1.0)
    i.add_argument("--temporal-extent", type=int, default=3)
    i.add_argument("--rescale", action="store_true", help="divide copied kernels by the extent")
    i.add_argument("--scale", default="desk")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inflate)

    t = sub.add_parser("train", help="train from a run-config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--corpus")
    t.add_argument("--clips")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model on a clip split")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--clips", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--target-multiplier", type=float, default=1.0)
    e.set_defaults(func=cmd_eval)

    pp = sub.add_parser("postprocess", help="repair predictions: sn, mf, td")
    pp.add_argument("--predictions", required=True)
    pp.add_argument("--labels")
    pp.add_argument("--stats")
    pp.add_argument("--steps", default="sn,mf,td")
    pp.add_argument("--swapped-mean", action="store_true", help="shift by label_mean - pred_mean instead")
    pp.add_argument("--t-min", type=int, default=-10)
    pp.add_argument("--t-max", type=int, default=10)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_postprocess)

    d = sub.add_parser("describe", help="print a model manifest")
    d.add_argument("--model", required=True)
    d.set_defaults(func=cmd_describe)
    return p


def _apply_thread_cap():
    raw = os.environ.get("INFLATENN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"INFLATENN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("INFLATENN_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limiter = _apply_thread_cap()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except InflateNNError as exc:
        _log(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
