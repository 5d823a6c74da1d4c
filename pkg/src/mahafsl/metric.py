"""Class-covariance (Mahalanobis) classification head.

For each class ``n`` in an episode the head blends the class covariance with
the task covariance and a ridge,

    Q_n = lam_n * Sigma_n + (1 - lam_n) * Sigma_task + beta * I,   lam_n = m_n / (m_n + 1)

and scores a query by ``d_n = 1/2 (x - mu_n)ᵀ Q_n⁻¹ (x - mu_n)``; class
probabilities are ``softmax(-d)``. Covariances use the biased 1/m
normalisation, so a single-sample class has a zero covariance.
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, ContractError, NotPositiveDefiniteError

JITTER_RETRIES = 3
JITTER_FACTOR = 1e-8
METRICS = ("mahalanobis", "euclidean")


@dataclass
class TaskStatistics:
    mu: ad.Tensor
    sigma_class: List[ad.Tensor]
    sigma_task: ad.Tensor
    lambda_blend: np.ndarray
    q_reg: List[ad.Tensor]
    beta: float
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]


@dataclass
class Prediction:
    probabilities: np.ndarray
    distances: np.ndarray
    argmax: int


def blend_weight(count: int) -> float:
    return count / (count + 1)


def ensure_positive_definite(Q: ad.Tensor) -> ad.Tensor:
    """Return ``Q``, or ``Q`` plus diagonal jitter if its factorisation fails.

    Each retry adds ``1e-8 * trace(Q) / d`` to the diagonal; after three failed
    retries the last :class:`NotPositiveDefiniteError` propagates.
    """
    d = Q.shape[0]
    step = JITTER_FACTOR * abs(float(np.trace(Q.value))) / d
    current = Q
    for attempt in range(JITTER_RETRIES + 1):
        try:
            kernels.cholesky(current.value)
            return current
        except NotPositiveDefiniteError:
            if attempt == JITTER_RETRIES or step == 0.0:
                raise NotPositiveDefiniteError(
                    f"regularised covariance not positive definite after {attempt} jitter retries"
                ) from None
            current = current + ad.Tensor(np.eye(d) * step)
    raise AssertionError("unreachable")


def estimate_statistics(
    support,
    labels,
    beta: float = 1.0,
    n_classes: Optional[int] = None,
    task_center: str = "class",
) -> TaskStatistics:
    """Per-class means and regularised covariances from labelled support rows.

    ``task_center="class"`` pools deviations from each row's own class mean;
    ``"global"`` centres every support row on the overall support mean instead.
    """
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    if task_center not in ("class", "global"):
        raise ConfigError(f"task_center must be 'class' or 'global', got {task_center!r}")
    X = ad.as_tensor(support)
    labels = np.asarray(labels, dtype=np.intp)
    S, d = X.shape
    if labels.shape != (S,):
        raise ContractError(f"{len(labels)} labels for {S} support rows")
    N = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    onehot = np.zeros((S, N))
    onehot[np.arange(S), labels] = 1.0
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        raise ContractError(f"classes {np.flatnonzero(counts == 0).tolist()} have no support samples")

    mu = ad.matmul(ad.Tensor((onehot / counts).T), X)
    dev = X - ad.matmul(ad.Tensor(onehot), mu)
    if task_center == "class":
        task_dev = dev
    else:
        task_dev = X - ad.mean(X, axis=0, keepdims=True)
    sigma_task = ad.scale(ad.matmul(ad.transpose(task_dev), task_dev), 1.0 / S)

    ridge = ad.Tensor(beta * np.eye(d))
    sigma_class, q_reg = [], []
    lam = np.empty(N)
    for n in range(N):
        idx = np.flatnonzero(labels == n)
        dn = ad.gather_rows(dev, idx)
        sn = ad.scale(ad.matmul(ad.transpose(dn), dn), 1.0 / len(idx))
        lam[n] = blend_weight(len(idx))
        q = ad.scale(sn, lam[n]) + ad.scale(sigma_task, 1.0 - lam[n]) + ridge
        sigma_class.append(sn)
        q_reg.append(ensure_positive_definite(q))
    return TaskStatistics(mu, sigma_class, sigma_task, lam, q_reg, float(beta), counts)


def mahalanobis_sq(x, mu, Q) -> ad.Tensor:
    """Half squared Mahalanobis distance between two d-vectors (a scalar tensor)."""
    diff = ad.reshape(ad.as_tensor(x) - ad.as_tensor(mu), (-1, 1))
    z = ad.cholesky_solve(ensure_positive_definite(ad.as_tensor(Q)), diff)
    return ad.scale(ad.sum_(diff * z), 0.5)


def distances(queries, stats: TaskStatistics, metric: str = "mahalanobis") -> ad.Tensor:
    """Matrix ``[n_queries, n_classes]`` of half squared distances.

    ``metric="euclidean"`` replaces every ``Q_n`` by the identity.
    """
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
    Xq = ad.as_tensor(queries)
    cols = []
    for n in range(stats.n_classes):
        diff = Xq - ad.gather_rows(stats.mu, [n])
        if metric == "euclidean":
            dn = ad.sum_(diff * diff, axis=1)
        else:
            diff_t = ad.transpose(diff)
            dn = ad.sum_(diff_t * ad.cholesky_solve(stats.q_reg[n], diff_t), axis=0)
        cols.append(ad.reshape(ad.scale(dn, 0.5), (1, -1)))
    return ad.transpose(ad.concat_rows(cols))


def logits(queries, stats: TaskStatistics, metric: str = "mahalanobis") -> ad.Tensor:
    return -distances(queries, stats, metric)


def predict(queries, stats: TaskStatistics, metric: str = "mahalanobis"):
    """Probabilities ``[Q, N]`` and predicted labels (ties -> lowest index)."""
    dist = distances(queries, stats, metric).value
    z = -dist
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return p, np.argmin(dist, axis=1)


def classify(query, stats: TaskStatistics, metric: str = "mahalanobis") -> Prediction:
    q = ad.as_tensor(query).value.reshape(1, -1)
    dist = distances(q, stats, metric).value[0]
    z = -dist
    p = np.exp(z - z.max())
    p /= p.sum()
    return Prediction(p, dist, int(np.argmin(dist)))
