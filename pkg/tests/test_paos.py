import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apex_ood.embeddings import EmbeddingSet
from apex_ood.errors import NumericalError
from apex_ood.paos import (
    PaosStats,
    class_confidence,
    fit_gaussian_stats,
    gibbs_weights,
    load_stats,
    mahalanobis,
    min_mahalanobis,
    paos_score,
    prototype_energy,
    save_stats,
    score_batch,
)

import oracles

qualities = arrays(np.float64, st.integers(1, 6), elements=st.floats(-1.0, 3.0))


def _spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


class TestEnergyAndGibbs:
    @pytest.mark.parametrize("q,e", [(2.0, -2.0), (0.0, 0.0), (-0.3, 0.3)])
    def test_energy(self, q, e):
        assert prototype_energy(q) == e

    def test_uniform(self):
        np.testing.assert_allclose(gibbs_weights([0.7, 0.7, 0.7]), 1 / 3, rtol=1e-15)

    def test_two_point(self):
        e = math.e
        np.testing.assert_allclose(gibbs_weights([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], rtol=1e-15)

    def test_oracle(self):
        np.testing.assert_allclose(gibbs_weights([2.0, 1.0, 0.0], 0.5), oracles.gibbs([2, 1, 0], 0.5), rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(qualities, st.floats(-5, 5), st.floats(0.05, 5))
    def test_sum_and_shift(self, q, shift, tau):
        w = gibbs_weights(q, tau)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(gibbs_weights(q + shift, tau), w, atol=1e-10)


class TestConfidence:
    def test_single(self):
        assert class_confidence([1.37]) == 1.37

    def test_pair(self):
        assert class_confidence([0.4, 0.4], 0.5) == pytest.approx(0.4 + 0.5 * math.log(2), abs=1e-15)

    def test_oracle(self):
        assert class_confidence([1.5, 0.5, 0.2]) == pytest.approx(oracles.conf([1.5, 0.5, 0.2], 1.0), rel=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(qualities, st.integers(0, 5), st.floats(0.01, 1.0))
    def test_monotone(self, q, idx, bump):
        idx = idx % q.size
        up = q.copy()
        up[idx] += bump
        assert class_confidence(up) > class_confidence(q)

    @settings(max_examples=60, deadline=None)
    @given(qualities)
    def test_zero_temperature_limit(self, q):
        assert abs(class_confidence(q, 1e-4) - q.max()) <= 1e-3


class TestFit:
    def test_basis_vectors(self):
        d = 4
        data = EmbeddingSet(np.eye(d), np.zeros(d, dtype=int), 1)
        st_ = fit_gaussian_stats(data, [0.0], shrinkage=1e-3)
        mu = np.full(d, 1 / d)
        np.testing.assert_allclose(st_.means[0], mu, atol=1e-15)
        s = (np.eye(d) - mu).T @ (np.eye(d) - mu) / d
        reg = s + (1e-3 * np.trace(s) / d + 1e-8) * np.eye(d)
        np.testing.assert_allclose(st_.precision @ reg, np.eye(d), atol=1e-8)

    def test_identical_points_need_floor(self):
        data = EmbeddingSet([[1.0, 0.0], [0.0, 1.0]], [0, 1], 2)
        st_ = fit_gaussian_stats(data, [0.0, 0.0])
        np.testing.assert_allclose(st_.precision, 1e8 * np.eye(2), rtol=1e-12)
        with pytest.raises(NumericalError, match="shrinkage"):
            fit_gaussian_stats(data, [0.0, 0.0], shrinkage=0.0, floor=0.0)

    def test_inverse_residual(self, rng):
        x = rng.standard_normal((300, 5))
        y = rng.integers(0, 3, 300)
        data = EmbeddingSet(x, y, 3)
        st_ = fit_gaussian_stats(data, np.zeros(3), shrinkage=0.0, floor=0.0)
        means = np.vstack([x[y == c].mean(0) for c in range(3)])
        r = x - means[y]
        np.testing.assert_allclose(st_.precision @ (r.T @ r / 300), np.eye(5), atol=1e-8)

    def test_precision_spd(self, rng):
        data = EmbeddingSet(rng.standard_normal((50, 6)), rng.integers(0, 2, 50), 2)
        st_ = fit_gaussian_stats(data, [0.1, 0.2])
        np.testing.assert_allclose(st_.precision, st_.precision.T, atol=1e-9)
        assert np.linalg.eigvalsh(st_.precision).min() > 0

    def test_negative_conf_clamped(self, rng):
        data = EmbeddingSet(rng.standard_normal((20, 2)), np.zeros(20, dtype=int), 1)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            st_ = fit_gaussian_stats(data, [-3.0], alpha=0.5)
        assert caught and st_.warnings
        assert st_.denominators()[0] == 0.1


class TestScore:
    def test_mahalanobis(self, rng):
        assert mahalanobis([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0
        assert mahalanobis([3.0, 4.0], [0.0, 0.0], np.eye(2)) == 25.0
        for _ in range(5):
            p = _spd(rng, 4)
            h, mu = rng.standard_normal(4), rng.standard_normal(4)
            assert mahalanobis(h, mu, p) == pytest.approx(oracles.mahalanobis(h, mu, p.tolist()), rel=1e-10)

    def test_alpha_zero_is_plain_min(self, rng):
        st_ = PaosStats(rng.standard_normal((3, 4)), _spd(rng, 4), [0.5, 1.5, 2.0], alpha=0.0)
        h = rng.standard_normal((25, 4))
        s, _ = score_batch(h, st_)
        np.testing.assert_array_equal(s, min_mahalanobis(h, st_))

    def test_at_class_mean(self, rng):
        st_ = PaosStats(rng.standard_normal((3, 4)), _spd(rng, 4), [0.5, 1.5, 2.0])
        assert paos_score(st_.means[1], st_)[0] == 0.0
        s, a = score_batch(st_.means[:1], st_)
        assert s.tolist() == [0.0] and a.tolist() == [0]

    def test_equal_distance_confidence_wins(self):
        st_ = PaosStats([[1.0, 0.0], [-1.0, 0.0]], np.eye(2), [1.0, 0.0], alpha=0.5)
        s, c = paos_score(np.array([0.0, 2.0]), st_)
        assert s == pytest.approx(5.0 / 1.5, rel=1e-15)
        assert c == 0

    def test_batch_matches_elementwise_oracle(self, rng):
        st_ = PaosStats(rng.standard_normal((3, 4)), _spd(rng, 4), [0.3, -0.2, 1.1], alpha=0.7)
        h = rng.standard_normal((100, 4))
        s, a = score_batch(h, st_)
        for i in range(100):
            want, arg = oracles.paos(h[i], st_.means, st_.precision, st_.conf, 0.7)
            assert s[i] == pytest.approx(want, rel=1e-12)
            assert a[i] == arg

    def test_empty(self, rng):
        st_ = PaosStats(np.zeros((1, 3)), np.eye(3), [0.0])
        s, a = score_batch(np.empty((0, 3)), st_)
        assert s.size == 0 and a.size == 0

    def test_identity_unit_norm_is_euclidean(self, rng):
        means = rng.standard_normal((3, 5))
        st_ = PaosStats(means, np.eye(5), [1.0, 2.0, 3.0], alpha=0.0)
        h = rng.standard_normal((10, 5))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        s, _ = score_batch(h, st_)
        want = ((h[:, None, :] - means[None]) ** 2).sum(-1).min(1)
        np.testing.assert_allclose(s, want, rtol=1e-12)

    def test_calibration_monotone(self, rng):
        means = rng.standard_normal((2, 3))
        h = rng.standard_normal(3)
        base = PaosStats(means, np.eye(3), [0.5, 0.5], alpha=0.5)
        s0, c = paos_score(h, base)
        conf = base.conf.copy()
        conf[c] += 1.0
        s1, _ = paos_score(h, PaosStats(means, np.eye(3), conf, alpha=0.5))
        assert s1 <= s0

    def test_checkpoint_round_trip(self, tmp_path, rng):
        st_ = PaosStats(rng.standard_normal((2, 3)), _spd(rng, 3), [0.2, 0.9], alpha=0.3, tau_q=0.5)
        save_stats(st_, tmp_path / "s.json")
        back = load_stats(tmp_path / "s.json")
        np.testing.assert_array_equal(back.means, st_.means)
        np.testing.assert_array_equal(back.precision, st_.precision)
        np.testing.assert_array_equal(back.conf, st_.conf)
        assert (back.alpha, back.tau_q) == (0.3, 0.5)
