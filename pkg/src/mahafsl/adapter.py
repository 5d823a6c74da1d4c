"""Set-to-set adaptation of episode embeddings by single-head attention.

Every row (support or query) is updated as

    out_i = x_i + sum_j a_ij * V(s_j),   a_i = softmax_j(Q(x_i) . K(s_j) / sqrt(d))

where ``s_j`` ranges over the support rows only. Support rows attend to all
support rows including themselves; query rows attend to the support set and
never to other queries, so a query's output is independent of its batch mates.

Row-vector convention: a projection is ``x @ W (+ b)``.
"""
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError

PARAM_NAMES = ("adapter.wq", "adapter.wk", "adapter.wv")
BIAS_NAMES = ("adapter.bq", "adapter.bk", "adapter.bv")


@dataclass
class AdaptedSet:
    support: ad.Tensor
    queries: ad.Tensor


def init_adapter(d: int, rng: np.random.Generator, bias: bool = False, value_scale: float = 1.0) -> Dict[str, np.ndarray]:
    std = np.sqrt(1.0 / d)
    params = {
        "adapter.wq": rng.normal(0.0, std, (d, d)),
        "adapter.wk": rng.normal(0.0, std, (d, d)),
        "adapter.wv": rng.normal(0.0, std * value_scale, (d, d)),
    }
    if bias:
        for name in BIAS_NAMES:
            params[name] = np.zeros(d)
    return params


def _project(x, params, w, b):
    out = ad.matmul(x, params[w])
    if b in params:
        out = out + params[b]
    return out


def attention_weights(rows, support, params: Mapping) -> ad.Tensor:
    d = support.shape[1]
    q = _project(rows, params, "adapter.wq", "adapter.bq")
    k = _project(support, params, "adapter.wk", "adapter.bk")
    return ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d)))


def adapt(support, queries, params: Mapping) -> AdaptedSet:
    """Adapt support and query embeddings against the support set.

    ``queries`` may have zero rows. ``params`` values may be arrays or tensors.
    """
    support, queries = ad.as_tensor(support), ad.as_tensor(queries)
    if support.ndim != 2 or support.shape[0] == 0:
        raise ContractError(f"adapt needs a nonempty support set, got shape {support.shape}")
    d = support.shape[1]
    if queries.ndim != 2 or queries.shape[1] != d:
        raise DimensionError(f"query embeddings {queries.shape} do not match support dimension {d}")
    for name in PARAM_NAMES:
        if ad.as_tensor(params[name]).shape != (d, d):
            raise DimensionError(f"{name} has shape {ad.as_tensor(params[name]).shape}, expected {(d, d)}")

    n_s = support.shape[0]
    rows = ad.concat_rows([support, queries]) if queries.shape[0] else support
    attn = attention_weights(rows, support, params)
    values = _project(support, params, "adapter.wv", "adapter.bv")
    out = rows + ad.matmul(attn, values)
    if queries.shape[0] == 0:
        return AdaptedSet(out, ad.Tensor(np.zeros((0, d))))
    n_all = rows.shape[0]
    return AdaptedSet(
        ad.gather_rows(out, np.arange(n_s)),
        ad.gather_rows(out, np.arange(n_s, n_all)),
    )
