import filecmp
from dataclasses import replace

import numpy as np
import pytest

from rxeend import simulator as sim
from rxeend.metrics import overlap_ratio
from rxeend.simulator import DialogueSpec


def test_target_overlap_is_met():
    for seed in range(20):
        lab = sim.gen_labels(DialogueSpec(seed=seed))
        assert 0.29 <= overlap_ratio(lab) <= 0.39
        assert lab.shape == (200, 2) and set(np.unique(lab)) <= {0, 1}


@pytest.mark.parametrize("target", [0.05, 0.2, 0.5])
def test_other_targets(target):
    lab = sim.gen_labels(DialogueSpec(seed=3, target_overlap=target, total_frames=400))
    assert abs(overlap_ratio(lab) - target) <= sim.OVERLAP_TOL


def test_unattainable_target():
    with pytest.raises(sim.TuningError):
        sim.gen_labels(DialogueSpec(target_overlap=0.95))


def test_vanishing_pauses_mean_near_total_overlap():
    rng = np.random.default_rng(0)
    u = [(0.0, rng.random(201), rng.random(201)) for _ in range(2)]
    lab = sim._labels_for(u, 200, 20.0, 1e-3)
    assert overlap_ratio(lab) > 0.95


def test_geometric_mean():
    u = np.random.default_rng(1).random(200_000)
    assert sim._geometric(u, 20.0, 1).mean() == pytest.approx(20.0, rel=0.02)
    assert sim._geometric(u, 10.0, 0).mean() == pytest.approx(10.0, rel=0.02)


def test_determinism():
    a, b = sim.gen_dialogue(DialogueSpec(seed=11)), sim.gen_dialogue(DialogueSpec(seed=11))
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.features, b.features)
    assert a.measured_overlap == overlap_ratio(a.labels)
    c = sim.gen_dialogue(DialogueSpec(seed=12))
    assert not np.array_equal(a.features, c.features)


def test_noise_free_features_are_signature_sums():
    spec = DialogueSpec(seed=4, noise_std=0.0)
    d = sim.gen_dialogue(spec)
    mu = sim.speaker_signatures(spec).astype(np.float32)
    for t in range(d.T):
        expected = np.zeros(spec.feat_dim, np.float64)
        for s in range(2):
            if d.labels[t, s]:
                expected += mu[s].astype(np.float64)
        np.testing.assert_allclose(d.features[t], expected, atol=1e-6)
    solo = np.where((d.labels[:, 0] == 1) & (d.labels[:, 1] == 0))[0]
    assert len(solo) and np.allclose(d.features[solo[0]], mu[0], atol=1e-6)


def test_class_separability():
    d = sim.gen_dialogue(DialogueSpec(seed=5))
    X, Y = d.features[:100].astype(np.float64), d.labels[:100]
    cls = Y[:, 0] + 2 * Y[:, 1]
    dist = np.linalg.norm(X[:, None] - X[None], axis=-1)
    same = cls[:, None] == cls[None]
    off_diag = ~np.eye(len(X), dtype=bool)
    assert dist[same & off_diag].mean() < dist[~same].mean()


def test_noise_free_nearest_signature_is_exact():
    """Bayes-optimal decoding on noise-free data recovers the labels exactly."""
    spec = DialogueSpec(seed=6, noise_std=0.0)
    d = sim.gen_dialogue(spec)
    mu = sim.speaker_signatures(spec)
    patterns = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    centers = patterns @ mu
    idx = np.argmin(np.linalg.norm(d.features[:, None] - centers[None], axis=-1), axis=1)
    assert np.array_equal(patterns[idx], d.labels)


def test_corpus_roundtrip_and_regeneration(tmp_path):
    spec = DialogueSpec(seed=21)
    sim.gen_corpus(5, spec, tmp_path / "a")
    got_spec, rows = sim.read_manifest(tmp_path / "a")
    assert got_spec == spec and len(rows) == 5
    assert [r[1] for r in rows] == [21, 22, 23, 24, 25]
    loaded = sim.load_corpus(tmp_path / "a")
    fresh = sim.make_dialogues(5, spec)
    for a, b in zip(loaded, fresh):
        assert np.array_equal(a.labels, b.labels)
        np.testing.assert_allclose(a.features, b.features, rtol=1e-5, atol=1e-5)
    sim.gen_corpus(5, got_spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


def test_spec_validation():
    with pytest.raises(ValueError):
        DialogueSpec(target_overlap=1.5)
    with pytest.raises(ValueError):
        sim.make_dialogues(0, DialogueSpec())
    with pytest.raises(ValueError):
        replace(DialogueSpec(), total_frames=10)
