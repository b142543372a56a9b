import numpy as np
import pytest

from inflatenn.datagen import (NUM_CLASSES, SynthSpec, frame_classes, generate_corpus, kappa_for, label_functionals,
                               read_corpus, write_corpus)
from inflatenn.errors import ConfigError, DomainError

SMALL = SynthSpec(num_videos=4, frames_per_video=40, seed=3, dropout_rate=0.1)


def _tree_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


def test_spec_validation():
    for kw in ({"num_videos": 0}, {"fps": 25}, {"dropout_rate": 0.5}, {"height": -1}):
        with pytest.raises(ConfigError):
            SynthSpec(**kw)


def test_same_seed_byte_identical(tmp_path):
    write_corpus(generate_corpus(SMALL), tmp_path / "a")
    write_corpus(generate_corpus(SMALL), tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    write_corpus(generate_corpus(SynthSpec(num_videos=4, frames_per_video=40, seed=4)), tmp_path / "c")
    assert _tree_bytes(tmp_path / "a") != _tree_bytes(tmp_path / "c")


def test_labels_in_range_and_splits():
    corpus = generate_corpus(SynthSpec(num_videos=10, frames_per_video=60, dropout_rate=0.2))
    for v in corpus.videos:
        assert np.all(np.abs(v.valence) <= 1) and np.all(np.abs(v.arousal) <= 1)
        assert not np.any(v.frames[~v.valid])
    assert len(corpus.split("val")) == 2 and len(corpus.split("train")) == 8
    assert 0 < sum((~v.valid).sum() for v in corpus.videos) < 0.4 * 600


def test_functionals_reproduce_labels():
    spec = SynthSpec(num_videos=3, frames_per_video=80, seed=5)
    for v in generate_corpus(spec).videos:
        valence, arousal = label_functionals(v.frames, spec.fps)
        assert np.max(np.abs(valence - v.valence)) <= 1e-5
        assert np.max(np.abs(arousal - v.arousal)) <= 1e-5


def test_functional_boundaries():
    black = np.zeros((6, 4, 4, 3))
    valence, arousal = label_functionals(black)
    assert np.all(valence == -1) and np.all(arousal == -1)
    gray = np.full((6, 4, 4, 3), 0.5)
    valence, arousal = label_functionals(gray)
    assert np.allclose(valence, 0) and np.all(arousal == -1)
    flicker = np.zeros((6, 4, 4, 3))
    flicker[1::2] = 1.0
    _, arousal = label_functionals(flicker)
    # mean |diff| is 1, so kappa - 1 saturates at the upper clamp
    assert kappa_for(10) - 1 > 1 and np.all(arousal == 1)
    with pytest.raises(DomainError):
        label_functionals(np.zeros((1, 4, 4, 3)))


def test_label_stats_stable_across_seeds():
    stats = []
    for seed in (0, 1):
        corpus = generate_corpus(SynthSpec(num_videos=50, frames_per_video=60, seed=seed, height=16, width=12))
        val = np.concatenate([v.valence for v in corpus.videos])
        aro = np.concatenate([v.arousal for v in corpus.videos])
        stats.append(np.array([val.mean(), val.std(), aro.mean(), aro.std()]))
    assert np.max(np.abs(stats[0] - stats[1])) <= 0.1


def test_frame_classes():
    assert list(frame_classes([-1.0, -0.99, 0.0, 0.99, 1.0])) == [0, 0, 3, 6, 6]
    assert frame_classes(np.linspace(-1, 1, 100)).max() == NUM_CLASSES - 1


def test_corpus_round_trip(tmp_path):
    corpus = generate_corpus(SMALL)
    write_corpus(corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.spec == corpus.spec
    for a, b in zip(corpus.videos, back.videos):
        assert a.source == b.source and a.split == b.split
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.valid, b.valid)
        assert np.array_equal(a.valence, b.valence) and np.array_equal(a.arousal, b.arousal)
    with pytest.raises(ConfigError):
        read_corpus(tmp_path / "missing")
