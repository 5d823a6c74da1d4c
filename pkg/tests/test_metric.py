from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mahafsl import autodiff as ad
from mahafsl import kernels, metric
from mahafsl.errors import ConfigError, ContractError, NotPositiveDefiniteError
from oracles import brute_force_stats


def random_task(rng, N, M, d):
    labels = np.repeat(np.arange(N), M)
    X = rng.standard_normal((N * M, d)) + np.repeat(rng.standard_normal((N, d)) * 3, M, axis=0)
    return X, labels


@pytest.mark.parametrize("m, lam", [(1, Fraction(1, 2)), (2, Fraction(2, 3)), (5, Fraction(5, 6)), (10, Fraction(10, 11))])
def test_blend_weight(m, lam):
    assert metric.blend_weight(m) == float(lam)
    X, labels = random_task(np.random.default_rng(m), 2, m, 3)
    assert metric.estimate_statistics(X, labels).lambda_blend[0] == float(lam)


def test_single_shot_statistics(rng):
    X = rng.standard_normal((4, 5))
    stats = metric.estimate_statistics(X, np.arange(4), beta=0.7)
    np.testing.assert_array_equal(stats.sigma_task.value, np.zeros((5, 5)))
    for s, q in zip(stats.sigma_class, stats.q_reg):
        np.testing.assert_array_equal(s.value, np.zeros((5, 5)))
        np.testing.assert_array_equal(q.value, 0.7 * np.eye(5))
    np.testing.assert_array_equal(stats.mu.value, X)


def test_against_brute_force(rng):
    X, labels = random_task(rng, 2, 3, 4)
    stats = metric.estimate_statistics(X, labels, beta=1.0)
    mu, sig_n, pooled, qs = brute_force_stats(X, labels, 1.0)
    np.testing.assert_allclose(stats.mu.value, mu, atol=1e-10)
    np.testing.assert_allclose(stats.sigma_task.value, pooled, atol=1e-10)
    for n in range(2):
        np.testing.assert_allclose(stats.sigma_class[n].value, sig_n[n], atol=1e-10)
        np.testing.assert_allclose(stats.q_reg[n].value, qs[n], atol=1e-10)


def test_unequal_shots_against_brute_force(rng):
    labels = np.array([0, 0, 0, 1, 2, 2, 1, 0])
    X = rng.standard_normal((8, 3))
    stats = metric.estimate_statistics(X, labels, beta=0.3)
    _, sig_n, pooled, qs = brute_force_stats(X, labels, 0.3)
    np.testing.assert_allclose(stats.sigma_task.value, pooled, atol=1e-10)
    for n in range(3):
        np.testing.assert_allclose(stats.q_reg[n].value, qs[n], atol=1e-10)
    np.testing.assert_array_equal(stats.counts, [4, 2, 2])


def test_global_centering_switch(rng):
    X, labels = random_task(rng, 3, 4, 2)
    stats = metric.estimate_statistics(X, labels, task_center="global")
    dev = X - X.mean(axis=0)
    np.testing.assert_allclose(stats.sigma_task.value, dev.T @ dev / len(X), atol=1e-12)


def test_mahalanobis_examples(rng):
    x, mu = rng.standard_normal(4), rng.standard_normal(4)
    assert float(metric.mahalanobis_sq(x, mu, np.eye(4)).value) == pytest.approx(0.5 * np.sum((x - mu) ** 2), rel=1e-12)
    assert float(metric.mahalanobis_sq(x, x, np.eye(4)).value) == 0.0
    d = metric.mahalanobis_sq([2.0, 0.0], [0.0, 0.0], np.diag([4.0, 1.0]))
    assert float(d.value) == pytest.approx(0.5)


def test_classify_examples():
    mu = np.array([[10.0, 0.0], [0.0, 10.0], [1.0, 1.0]])
    stats = metric.estimate_statistics(mu, np.arange(3), beta=1.0)
    pred = metric.classify(mu[2], stats)
    assert pred.argmax == 2
    np.testing.assert_allclose(pred.probabilities.sum(), 1.0, atol=1e-12)

    sym = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    stats = metric.estimate_statistics(sym, np.arange(4), beta=1.0)
    pred = metric.classify([0.0, 0.0], stats)
    np.testing.assert_allclose(pred.probabilities, 0.25, rtol=1e-15)
    assert pred.argmax == 0  # ties go to the lowest index


def test_classify_matches_direct_recomputation(rng):
    X, labels = random_task(rng, 3, 4, 5)
    stats = metric.estimate_statistics(X, labels)
    q = rng.standard_normal(5)
    pred = metric.classify(q, stats)
    d = np.array(
        [0.5 * (q - stats.mu.value[n]) @ np.linalg.solve(stats.q_reg[n].value, q - stats.mu.value[n]) for n in range(3)]
    )
    e = np.exp(-d)
    np.testing.assert_allclose(pred.distances, d, rtol=1e-10)
    np.testing.assert_allclose(pred.probabilities, e / e.sum(), rtol=1e-10)
    assert np.all(pred.distances >= 0)
    assert pred.argmax == int(np.argmin(d))


def test_euclidean_reduction(rng):
    X, labels = random_task(rng, 4, 3, 6)
    stats = metric.estimate_statistics(X, labels)
    Q = rng.standard_normal((7, 6))
    d = metric.distances(Q, stats, "euclidean").value
    want = 0.5 * ((Q[:, None, :] - stats.mu.value[None]) ** 2).sum(-1)
    np.testing.assert_allclose(d, want, atol=1e-10)
    ident = metric.TaskStatistics(
        stats.mu, stats.sigma_class, stats.sigma_task, stats.lambda_blend, [ad.Tensor(np.eye(6))] * 4, 1.0, stats.counts
    )
    np.testing.assert_allclose(metric.distances(Q, ident).value, want, atol=1e-10)


def test_probabilities_invariant_to_distance_shift(rng):
    X, labels = random_task(rng, 3, 2, 3)
    stats = metric.estimate_statistics(X, labels)
    logits = metric.logits(rng.standard_normal((5, 3)), stats)
    p1 = ad.softmax_rows(logits).value
    p2 = ad.softmax_rows(logits.value - 17.0).value
    np.testing.assert_allclose(p1, p2, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 6),
    st.integers(1, 8),
    st.floats(1e-6, 10.0),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**32 - 1),
)
def test_regularised_covariances_factorise(N, M, d, beta, spread, seed):
    rng = np.random.default_rng(seed)
    X = spread * rng.standard_normal((N * M, d))
    X[: M] = X[0]  # include a fully degenerate class
    stats = metric.estimate_statistics(X, np.repeat(np.arange(N), M), beta=beta)
    for q in stats.q_reg:
        np.testing.assert_allclose(q.value, q.value.T, atol=1e-10 * max(1.0, np.abs(q.value).max()))
        kernels.cholesky(q.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_statistics_permutation_invariant(N, M, d, seed):
    rng = np.random.default_rng(seed)
    X, labels = random_task(rng, N, M, d)
    perm = rng.permutation(len(labels))
    a = metric.estimate_statistics(X, labels)
    b = metric.estimate_statistics(X[perm], labels[perm])
    np.testing.assert_allclose(a.mu.value, b.mu.value, atol=1e-12)
    np.testing.assert_allclose(a.sigma_task.value, b.sigma_task.value, atol=1e-12)
    for qa, qb in zip(a.q_reg, b.q_reg):
        np.testing.assert_allclose(qa.value, qb.value, atol=1e-12)


def test_jitter_rescues_near_singular():
    Q = ad.Tensor(np.diag([1.0, 0.0]))
    fixed = metric.ensure_positive_definite(Q)
    assert fixed.value[1, 1] > 0
    assert fixed.value[1, 1] == pytest.approx(1e-8 * 1.0 / 2)


def test_jitter_gives_up():
    with pytest.raises(NotPositiveDefiniteError):
        metric.ensure_positive_definite(ad.Tensor(np.diag([1.0, -1.0])))


def test_contract_errors(rng):
    with pytest.raises(ConfigError):
        metric.estimate_statistics(rng.standard_normal((2, 2)), [0, 1], beta=0.0)
    with pytest.raises(ContractError):
        metric.estimate_statistics(rng.standard_normal((2, 2)), [0, 2])
    with pytest.raises(ContractError):
        metric.estimate_statistics(rng.standard_normal((3, 2)), [0, 1])
