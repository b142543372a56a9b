"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line through the pytest
terminal reporter, so the lines show up even with output capture on.
Run as a script for just this suite: ``python3 tests/test_acceptance.py``.
"""
import os
import shutil
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gradsuite import TOLERANCE, run_suite  # noqa: E402
from oracles import ccc_direct, conv3d_frames, enumerate_windows, mae_direct, mape_direct, pcc_direct, zero_stuff  # noqa: E402
from pipeline import full_pipeline  # noqa: E402

from inflatenn.cli import main  # noqa: E402
from inflatenn.clips import FPS_CHOICES, OVERLAPS, SEQ_LENS, WindowConfig, expected_clip_count, window_positions  # noqa: E402
from inflatenn.errors import FormatError, LengthError, NonFiniteError  # noqa: E402
from inflatenn.experiment import FLOORS, ExperimentConfig, run_experiment  # noqa: E402
from inflatenn.graph import build_i3d, build_vgg_mini, forward_pass, model_backward  # noqa: E402
from inflatenn.inflation import C2, InflationConfig, build_gradient_mask, inflate_model, scale_targets  # noqa: E402
from inflatenn.layers import Conv3DLayer, conv3d_forward  # noqa: E402
from inflatenn.metrics import compute_ccc, compute_mae, compute_mape, compute_pcc  # noqa: E402
from inflatenn.postprocess import TrainStats, fit_train_stats, mean_filter, scale_normalize, time_delay_align  # noqa: E402
from inflatenn.storage import decode_framepack, decode_weightpack, encode_framepack, encode_weightpack, save_model  # noqa: E402
from inflatenn.tensor import RngStream  # noqa: E402
from inflatenn.training import OptimizerState, TrainConfig, adam_step, mse_loss  # noqa: E402


_terminal = None


@pytest.fixture(autouse=True)
def _reporter(request):
    global _terminal
    _terminal = request.config.pluginmanager.get_plugin("terminalreporter")
    yield


def report(n, ok, detail=""):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line)
    assert ok, line


# --------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.process_time()
    errs = run_suite()
    cpu = time.process_time() - t0
    worst = max(errs, key=errs.get)
    report(1, errs[worst] <= TOLERANCE and cpu < 60,
           f"{len(errs)} cases, max rel err {errs[worst]:.2e} ({worst}), {cpu:.1f}s CPU")


def _per_frame(trunk, clip):
    n, c, t, h, w = clip.shape
    out = forward_pass(trunk, clip.transpose(0, 2, 1, 3, 4).reshape(n * t, c, h, w))[0]
    return out.reshape((n, t) + out.shape[1:]).transpose(0, 2, 1, 3, 4)


def test_criterion_2_inflation_equivalence():
    trunk = build_vgg_mini("desk", None, seed=20)
    centered = inflate_model(trunk, InflationConfig("centered", "zero"))
    root = RngStream(21)
    err_c = max(float(np.max(np.abs(forward_pass(centered, clip)[0] - _per_frame(trunk, clip)))) for clip in
                (root.split(k).uniform((1, 3, 6, 32, 24)) for k in range(20)))

    copied = inflate_model(trunk, InflationConfig("copied", copied_rescale=True))
    err_s = 0.0
    for k in range(5):
        frame = root.split(100 + k).uniform((1, 3, 32, 24))
        y3 = forward_pass(copied, np.repeat(frame[:, :, None], 12, axis=2))[0]
        # four stacked kt=3 convs: positions 4..7 see no temporal padding
        err_s = max(err_s, float(np.max(np.abs(y3[:, :, 4:8] - forward_pass(trunk, frame)[0][:, :, None]))))

    model = build_i3d(trunk, C2, seed=22)
    mask = build_gradient_mask(model, C2)
    centers = {n: model.weights[n][:, :, 1].tobytes() for n in mask if mask[n].ndim == 5}
    state, cfg, rng = OptimizerState(), TrainConfig(learning_rate=1e-2), RngStream(23)
    for step in range(50):
        out, tape = forward_pass(model, rng.uniform((2, 3, 4, 32, 24)), train_mode=True, rng=rng.split(step))
        _, grads, _ = model_backward(model, tape, mse_loss(out, scale_targets(rng.uniform((2, 2), -1, 1), C2))[1])
        adam_step(model.weights, grads, state, cfg, mask)
    frozen = all(model.weights[n][:, :, 1].tobytes() == b for n, b in centers.items())
    report(2, err_c <= 1e-6 and err_s <= 1e-5 and frozen,
           f"centered {err_c:.1e}, copied static {err_s:.1e}, centers bit-identical={frozen}")


def test_criterion_3_dilation_equivalence():
    errs = {}
    for d in (2, 4, 8):
        r = RngStream(300 + d)
        w, b = r.uniform((3, 2, 3, 3, 3), -1, 1), r.uniform(3, -1, 1)
        x = r.uniform((2, 2, 2 * d + 5, 5, 4), -1, 1)
        got = conv3d_forward(Conv3DLayer(w, b, temporal_dilation=d), x)
        errs[d] = float(np.max(np.abs(got - conv3d_frames(x, zero_stuff(w, d), b))))
    report(3, max(errs.values()) <= 1e-6, ", ".join(f"d={d}: {e:.1e}" for d, e in errs.items()))


def test_criterion_4_metric_oracles():
    root = RngStream(400)
    worst, bound_ok = 0.0, True
    for k in range(1000):
        r = root.split(k)
        n = 3 + int(r.uniform((), 0, 50))
        y = r.uniform(n, -1, 1)
        p = r.uniform((), -1, 1) * y + r.uniform(n, -0.5, 0.5) + r.uniform((), -0.3, 0.3)
        yl, pl = list(y), list(p)
        pcc, ccc = compute_pcc(y, p), compute_ccc(y, p)
        mape = compute_mape(y, p)[0]
        worst = max(worst, abs(compute_mae(y, p) - mae_direct(yl, pl)), abs(pcc - pcc_direct(yl, pl)),
                    abs(ccc - ccc_direct(yl, pl)), abs(mape - mape_direct(yl, pl)) / max(1.0, abs(mape)))
        bound_ok &= abs(ccc) <= abs(pcc) + 1e-12
    exact = compute_ccc([-1, 1], [0, 2]) == 2 / 3
    report(4, worst <= 1e-9 and exact and bound_ok,
           f"max deviation {worst:.1e}, CCC([-1,1],[0,2])==2/3: {exact}, |CCC|<=|PCC|: {bound_ok}")


def test_criterion_5_windowing_oracle():
    mismatches, combos = 0, 0
    for fps in FPS_CHOICES:
        for seq_len in SEQ_LENS:
            for overlap in OVERLAPS:
                combos += 1
                step = 1 if fps == 50 else 5
                cfg = WindowConfig(fps=fps, seq_len=seq_len, overlap_ratio=overlap, nominal_step=step)
                r = RngStream(hash((fps, seq_len, overlap)) % 2 ** 32)
                for trial in range(4):
                    n = 500
                    valid = r.uniform(n) > r.uniform((), 0.0, 0.2)
                    idx = np.arange(n) * step
                    got = [list(p) for p in window_positions(idx, valid, cfg)]
                    want = [list(w) for w in enumerate_windows(idx, valid, seq_len, cfg.stride, cfg.tolerance)]
                    mismatches += got != want
    monotone = True
    for seq_len in SEQ_LENS:
        for fps in FPS_CHOICES:
            c = [expected_clip_count(120 * fps, WindowConfig(fps=fps, seq_len=seq_len, overlap_ratio=o))
                 for o in OVERLAPS]
            monotone &= c == sorted(c)
        for o in OVERLAPS:
            monotone &= (expected_clip_count(1200, WindowConfig(fps=10, seq_len=seq_len, overlap_ratio=o))
                         <= expected_clip_count(6000, WindowConfig(fps=50, seq_len=seq_len, overlap_ratio=o)))
    report(5, combos == 18 and mismatches == 0 and monotone,
           f"{combos} grid configs, {mismatches} mismatching streams, monotone={monotone}")


def test_criterion_6_postprocessing():
    r = RngStream(600)
    walk = np.convolve(np.cumsum(r.normal(400, 0.1)), np.ones(5) / 5, mode="valid")
    walk += r.normal(walk.size, 0.02)
    labels = walk[30:330]
    recovered = sum(time_delay_align(labels, walk[30 - t:330 - t]).best_t == t for t in range(-10, 11))
    train = r.uniform(500, -0.6, 0.4)
    z = scale_normalize(train, fit_train_stats(train, train))
    sn_ok = abs(z.mean()) <= 1e-6 and abs(z.std() - 1) <= 1e-6
    p = labels + r.normal(labels.size, 0.3)
    drift = abs(compute_pcc(labels, mean_filter(p, TrainStats(0.3, 1.0, -0.2))) - compute_pcc(labels, p))
    report(6, recovered == 21 and sn_ok and drift <= 1e-9,
           f"shifts recovered {recovered}/21, sn standardized={sn_ok}, mf PCC drift {drift:.1e}")


@pytest.mark.slow
def test_criterion_7_end_to_end_experiment():
    t0 = time.perf_counter()
    result = run_experiment(ExperimentConfig())
    wall = time.perf_counter() - t0
    passed = result.passed()
    detail = ", ".join(f"{k} {result.ccc[k]:.3f} (floor {FLOORS[k]})" for k in FLOORS)
    detail += f", i3d_valence {result.ccc['i3d_valence']:.3f}, {wall / 60:.1f} min"
    report(7, all(passed.values()) and wall < 15 * 60, detail)


def test_criterion_8_determinism():
    roots = [tempfile.mkdtemp(prefix="inflatenn-det-") for _ in range(2)]
    try:
        a, b = (full_pipeline(r) for r in roots)
        differing = [k for k in a if open(a[k], "rb").read() != open(b[k], "rb").read()]
    finally:
        for r in roots:
            shutil.rmtree(r, ignore_errors=True)
    n_packs = sum(k.endswith(".wpk") for k in a)
    report(8, not differing, f"{len(a)} artifacts ({n_packs} WeightPacks) compared, differing: {differing}")


def test_criterion_9_format_robustness(tmp_path):
    w = {"conv.weight": RngStream(900).uniform((2, 3)).astype(np.float32)}
    wp = encode_weightpack(w)
    fp = encode_framepack(np.zeros((3, 2, 2, 3), np.float32), [1, 0, 1])
    nan_w = dict(w)
    nan_w["conv.weight"] = w["conv.weight"].copy()
    nan_w["conv.weight"][0, 1] = np.nan
    nan_frames = np.zeros((3, 2, 2, 3), np.float32)
    nan_frames[2, 1, 1, 2] = np.nan
    cases = [
        ("weight magic", decode_weightpack, b"WPK2" + wp[4:], FormatError),
        ("weight truncated", decode_weightpack, wp[:-3], LengthError),
        ("weight NaN", decode_weightpack, encode_weightpack(nan_w), NonFiniteError),
        ("frame magic", decode_framepack, b"XPK1" + fp[4:], FormatError),
        ("frame truncated", decode_framepack, fp[:-1], LengthError),
        ("frame NaN", decode_framepack, encode_framepack(nan_frames, [1, 1, 1]), NonFiniteError),
    ]
    failures = []
    for name, decode, data, err in cases:
        try:
            decode(data)
            failures.append(f"{name}: accepted")
        except err:
            pass
        except Exception as exc:  # wrong class
            failures.append(f"{name}: {type(exc).__name__}")
    # the same corruptions through the CLI give a nonzero exit
    from inflatenn.graph import build_vgg_mini as _b
    model_path = tmp_path / "m.wpk"
    save_model(model_path, _b("desk", None))
    good = model_path.read_bytes()
    codes = {}
    for name, data in (("magic", b"ZZZZ" + good[4:]), ("truncated", good[:len(good) // 2]),
                       ("nan", encode_weightpack({**decode_weightpack(good),
                                                  "conv1_1.bias": np.full(8, np.nan, np.float32)}))):
        model_path.write_bytes(data)
        codes[name] = main(["describe", "--model", str(model_path)])
    bad_exit = {k: c for k, c in codes.items() if c == 0}
    report(9, not failures and not bad_exit,
           f"{len(cases)} decoder cases, CLI exit codes {codes}" + (f", failures {failures}" if failures else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
