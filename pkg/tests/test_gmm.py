import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermode import gmm
from intermode.gmm import GmmModel


def planted(seed=0, n=500):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(-5, 1, (n, 1)), rng.normal(5, 1, (n, 1))])


def test_single_component_is_mle():
    data = np.random.default_rng(0).normal(size=(200, 3)) * [1, 2, 3] + [1, 0, -1]
    m = gmm.fit_em(data, 1)
    assert np.allclose(m.means[0], data.mean(0))
    assert np.allclose(m.variances[0], data.var(0) + gmm.RIDGE)
    assert m.weights[0] == pytest.approx(1.0)


def test_planted_means_recovered():
    m = gmm.fit_em(planted(), 2, seed=1)
    assert np.allclose(np.sort(m.means[:, 0]), [-5, 5], atol=0.2)


def test_em_monotone():
    m = gmm.fit_em(planted(), 2, seed=1)
    assert np.all(np.diff(m.ll_history) >= -1e-9)


def test_duplicated_data_same_fit():
    data = planted(2, 100)
    a = gmm.fit_em(data, 2, seed=4)
    b = gmm.fit_em(np.concatenate([data, data]), 2, seed=4)
    order_a, order_b = np.argsort(a.means[:, 0]), np.argsort(b.means[:, 0])
    assert np.allclose(a.means[order_a], b.means[order_b], atol=1e-4)
    assert np.allclose(a.weights[order_a], b.weights[order_b], atol=1e-4)


def test_midpoint_responsibility_symmetric():
    m = GmmModel(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.ones((2, 1)))
    assert np.allclose(gmm.responsibilities(m, np.zeros((1, 1))), [[0.5, 0.5]])


def test_responsibility_at_mean_dominates():
    m = GmmModel(np.array([0.5, 0.5]), np.array([[-5.0], [5.0]]), np.ones((2, 1)))
    r = gmm.responsibilities(m, np.array([[-5.0]]))
    # oracle: density ratio exp(-50) / (1 + exp(-50))
    assert r[0, 0] > 0.99 and r[0, 0] == pytest.approx(1 / (1 + np.exp(-50.0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_responsibility_rows_sum_to_one(seed, K):
    rng = np.random.default_rng(seed)
    m = GmmModel(rng.dirichlet(np.ones(K)), rng.normal(size=(K, 3)) * 3, rng.uniform(0.1, 2, (K, 3)))
    r = gmm.responsibilities(m, rng.normal(size=(20, 3)) * 4)
    assert np.allclose(r.sum(1), 1, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    m = GmmModel(rng.dirichlet(np.ones(3)), rng.normal(size=(3, 2)), rng.uniform(0.2, 2, (3, 2)))
    perm = rng.permutation(3)
    p = GmmModel(m.weights[perm], m.means[perm], m.variances[perm])
    x = rng.normal(size=(40, 2))
    assert gmm.log_likelihood(m, x) == pytest.approx(gmm.log_likelihood(p, x))
    assert np.array_equal(perm[gmm.predict(p, x)], gmm.predict(m, x))


def test_degenerate_sample_at_mean():
    m = GmmModel(np.ones(1), np.array([[1.0, 2.0]]), np.full((1, 2), 1e-12))
    assert np.allclose(gmm.sample(m, 10, seed=0), [1.0, 2.0], atol=1e-4)


def test_sample_frequencies_within_ci():
    w = np.array([0.2, 0.3, 0.5])
    m = GmmModel(w, np.array([[-10.0], [0.0], [10.0]]), np.full((3, 1), 0.01))
    x = gmm.sample(m, 10_000, seed=3)
    freq = np.bincount(gmm.predict(m, x), minlength=3) / 10_000
    sd = np.sqrt(w * (1 - w) / 10_000)
    assert np.all(np.abs(freq - w) < 3 * sd)


def test_own_fit_beats_shuffled_means():
    data = np.concatenate([planted(5, 200), planted(6, 200) * 0.3])
    data = np.hstack([data, np.random.default_rng(0).normal(size=(800, 1))])
    m = gmm.fit_em(data, 3, seed=2)
    shuffled = GmmModel(m.weights, np.roll(m.means, 1, axis=1), m.variances)
    assert gmm.log_likelihood(m, data) >= gmm.log_likelihood(shuffled, data)


def test_empty_component_reseeded_without_crash():
    data = np.concatenate([np.zeros((30, 2)), np.ones((30, 2))])
    m = gmm.fit_em(data, 5, seed=0)
    assert np.all(np.isfinite(m.means)) and m.weights.sum() == pytest.approx(1.0)
    assert np.all(m.variances >= gmm.RIDGE)


def test_too_few_points_raises():
    with pytest.raises(ValueError):
        gmm.fit_em(np.zeros((2, 1)), 3)


def test_serialization_round_trip():
    m = gmm.fit_em(planted(), 2, seed=0)
    back = GmmModel.from_bytes(m.to_bytes())
    assert np.allclose(back.means, m.means, atol=1e-5)
    assert back.to_bytes() == m.to_bytes()
