"""Residual-AAE tests: kind separation in loss and embedding space, drift rule."""

import numpy as np
import pytest

from spectrum_sentinel import anomaly_feature as af
from spectrum_sentinel.autoencoder import TrainConfig
from spectrum_sentinel.errors import InsufficientData, InvalidState


def wpulse_like(rng, amp=1.0):
    r = rng.normal(0, 0.05, (6, 300)).astype(np.float32)
    rows = rng.choice(6, size=2, replace=False)
    r[rows, :] += amp
    return r


def scont_like(rng, amp=1.0):
    r = rng.normal(0, 0.05, (6, 300)).astype(np.float32)
    c = int(rng.integers(30, 250))
    r[:, c:c + 20] += amp
    return r


def randpulse_like(rng, amp=1.0):
    r = rng.normal(0, 0.05, (6, 300)).astype(np.float32)
    for _ in range(4):
        t = int(rng.integers(0, 5))
        f = int(rng.integers(0, 280))
        r[t:t + 2, f:f + 15] += amp
    return r


@pytest.fixture(scope="module")
def wpulse_model():
    rng = np.random.default_rng(0)
    train = np.stack([wpulse_like(rng) for _ in range(110)])
    return af.train_anomaly_model(train, TrainConfig(epochs=6, seed=1))


@pytest.fixture(scope="module")
def mixed_model():
    rng = np.random.default_rng(2)
    train = np.stack([wpulse_like(rng) for _ in range(60)]
                     + [scont_like(rng) for _ in range(60)]
                     + [randpulse_like(rng) for _ in range(60)])
    return af.train_anomaly_model(train, TrainConfig(epochs=6, seed=3))


class TestTraining:
    def test_too_few_residuals_deferred(self):
        rng = np.random.default_rng(4)
        small = np.stack([wpulse_like(rng) for _ in range(40)])
        with pytest.raises(InsufficientData):
            af.train_anomaly_model(small, TrainConfig(epochs=1))

    def test_seen_kind_reconstructs_better_than_unseen(self, wpulse_model):
        rng = np.random.default_rng(5)
        seen = np.stack([wpulse_like(rng) for _ in range(50)])
        unseen = np.stack([scont_like(rng) for _ in range(50)])
        r_seen = wpulse_model.reconstruction_losses(seen)
        r_unseen = wpulse_model.reconstruction_losses(unseen)
        assert r_seen.mean() < r_unseen.mean()

    def test_determinism(self):
        rng = np.random.default_rng(6)
        train = np.stack([wpulse_like(rng) for _ in range(100)])
        m1 = af.train_anomaly_model(train, TrainConfig(epochs=2, seed=7))
        m2 = af.train_anomaly_model(train, TrainConfig(epochs=2, seed=7))
        for a, b in zip(m1.encoder_tensors(), m2.encoder_tensors()):
            assert np.array_equal(a, b)

    def test_encoder_output_dimension_50(self, wpulse_model):
        rng = np.random.default_rng(8)
        f = wpulse_model.extract(wpulse_like(rng))
        assert f.shape == (1, 50)


class TestExtract:
    def test_same_residual_identical_features(self, mixed_model):
        rng = np.random.default_rng(9)
        r = scont_like(rng)
        a = af.extract(mixed_model, r)
        b = af.extract(mixed_model, r)
        assert np.array_equal(a, b)

    def test_zero_residual_fixed_finite_vector(self, mixed_model):
        z = np.zeros((6, 300), dtype=np.float32)
        f = af.extract(mixed_model, z)
        assert f.shape == (50,)
        assert np.all(np.isfinite(f))
        assert np.array_equal(f, af.extract(mixed_model, z))

    def test_same_kind_closer_than_cross_kind(self, mixed_model):
        rng = np.random.default_rng(10)
        w = mixed_model.extract(np.stack([wpulse_like(rng) for _ in range(60)]))
        s = mixed_model.extract(np.stack([scont_like(rng) for _ in range(60)]))
        within, across = [], []
        for i in range(0, 60, 2):
            within.append(np.linalg.norm(w[i] - w[i + 1]))
            across.append(np.linalg.norm(w[i] - s[i]))
        assert np.mean(within) < np.mean(across)

    def test_extraction_does_not_mutate_parameters(self, mixed_model):
        before = [t.copy() for t in mixed_model.encoder_tensors()]
        rng = np.random.default_rng(11)
        mixed_model.extract(np.stack([randpulse_like(rng) for _ in range(10)]))
        for a, b in zip(before, mixed_model.encoder_tensors()):
            assert np.array_equal(a, b)


class TestDrift:
    def test_at_mean_no_drift(self):
        stats = af.DriftStats.fit(np.array([1.0, 1.2, 0.8, 1.1, 0.9]))
        assert af.drift_check(stats, stats.mu_rla) is False

    def test_three_sigma_drifts(self):
        stats = af.DriftStats.fit(np.array([1.0, 1.2, 0.8, 1.1, 0.9]))
        assert af.drift_check(stats, stats.mu_rla + 3 * stats.sigma_rla) is True

    def test_degenerate_sigma_any_excess_drifts(self):
        stats = af.DriftStats.fit(np.array([1.0, 1.0, 1.0]))
        assert stats.sigma_rla == 0.0
        assert af.drift_check(stats, 1.0 + 1e-9) is True
        assert af.drift_check(stats, 1.0) is False

    def test_uncalibrated_raises(self):
        stats = af.DriftStats(mu_rla=0.0, sigma_rla=1.0)
        with pytest.raises(InvalidState):
            af.drift_check(stats, 5.0)

    def test_window_records_observations(self):
        stats = af.DriftStats.fit(np.array([1.0, 1.1]))
        af.drift_check(stats, 1.05)
        af.drift_check(stats, 2.0)
        assert list(stats.window) == [1.05, 2.0]
