"""Central finite-difference checks for every differentiable operation."""
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import metric
from .adapter import adapt, init_adapter
from .backbone import BackboneConfig, ConvBackbone, PrecomputedBackbone, PrecomputedEmbeddingStore
from .episodes import Episode
from .model import FewShotModel
from .trainer import TrainConfig, episode_loss

STEP = 1e-5
TOLERANCE = 1e-4

Case = Tuple[Callable[[Dict[str, ad.Tensor]], ad.Tensor], Dict[str, np.ndarray]]


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(num / den)


def check_case(fn, inputs: Dict[str, np.ndarray], step: float = STEP) -> float:
    """Largest relative error over all inputs of ``fn`` (a map of tensors to a scalar)."""
    leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    with ad.GradTape() as tape:
        out = fn(leaves)
    grads = ad.backward(tape, out, wrt=leaves.values())
    worst = 0.0
    for name, value in inputs.items():
        def f(x, name=name):
            vals = {k: ad.Tensor(x if k == name else v) for k, v in inputs.items()}
            return float(fn(vals).value)

        worst = max(worst, relative_error(grads[leaves[name]], numerical_gradient(f, value, step)))
    return worst


# --------------------------------------------------------------------------
# case builders: rng -> (fn, inputs)
# --------------------------------------------------------------------------


def _dims(rng, lo=1, hi=5, n=2):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def case_add(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_((t["a"] + t["b"]) * w)), {
        "a": rng.standard_normal((m, n)),
        "b": rng.standard_normal((1, n)),
    }


def case_sub(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_((t["a"] - t["b"]) * w)), {"a": rng.standard_normal((m, n)), "b": rng.standard_normal((m, 1))}


def case_mul(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(t["a"] * t["b"] * w)), {"a": rng.standard_normal((m, n)), "b": rng.standard_normal((m, n))}


def case_scale(rng):
    m, n = _dims(rng)
    c = float(rng.standard_normal())
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.scale(t["a"], c) * w)), {"a": rng.standard_normal((m, n))}


def case_transpose(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((n, m))
    return (lambda t: ad.sum_(ad.transpose(t["a"]) * w)), {"a": rng.standard_normal((m, n))}


def case_matmul(rng):
    m, k, n = _dims(rng, n=3)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.matmul(t["a"], t["b"]) * w)), {
        "a": rng.standard_normal((m, k)),
        "b": rng.standard_normal((k, n)),
    }


def case_mean(rng):
    m, n = _dims(rng)
    axis = int(rng.integers(0, 2))
    w = rng.standard_normal(n if axis == 0 else m)
    return (lambda t: ad.sum_(ad.mean(t["a"], axis=axis) * w)), {"a": rng.standard_normal((m, n))}


def case_log(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.log(t["a"]) * w)), {"a": rng.uniform(0.5, 3.0, (m, n))}


def case_exp(rng):
    m, n = _dims(rng)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.exp(t["a"]) * w)), {"a": rng.standard_normal((m, n))}


def case_relu(rng):
    m, n = _dims(rng)
    a = rng.standard_normal((m, n))
    a += np.sign(a) * 0.1  # stay off the kink
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.relu(t["a"]) * w)), {"a": a}


def case_gather_rows(rng):
    m, n = _dims(rng)
    idx = rng.integers(0, m, size=m + 2)
    w = rng.standard_normal((len(idx), n))
    return (lambda t: ad.sum_(ad.gather_rows(t["a"], idx) * w)), {"a": rng.standard_normal((m, n))}


def case_concat_rows(rng):
    m1, m2, n = _dims(rng, n=3)
    w = rng.standard_normal((m1 + m2, n))
    return (lambda t: ad.sum_(ad.concat_rows([t["a"], t["b"]]) * w)), {
        "a": rng.standard_normal((m1, n)),
        "b": rng.standard_normal((m2, n)),
    }


def case_softmax_rows(rng):
    m, n = _dims(rng, lo=2)
    w = rng.standard_normal((m, n))
    return (lambda t: ad.sum_(ad.softmax_rows(t["a"]) * w)), {"a": 2 * rng.standard_normal((m, n))}


def case_cross_entropy(rng):
    m, n = _dims(rng, lo=2)
    labels = rng.integers(0, n, size=m)
    return (lambda t: ad.cross_entropy(t["a"], labels)), {"a": 2 * rng.standard_normal((m, n))}


def case_cholesky_solve(rng):
    d, k = _dims(rng, hi=6)
    w = rng.standard_normal((d, k))

    def fn(t):
        A = ad.matmul(ad.transpose(t["g"]), t["g"]) + ad.Tensor(np.eye(d))
        return ad.sum_(ad.cholesky_solve(A, t["b"]) * w)

    return fn, {"g": rng.standard_normal((d, d)), "b": rng.standard_normal((d, k))}


def case_conv2d(rng):
    b, c, f = _dims(rng, hi=3, n=3)
    h, wd = _dims(rng, lo=3, hi=6)
    w = rng.standard_normal((b, f, h, wd))
    return (lambda t: ad.sum_(ad.conv2d(t["x"], t["w"], t["b"], pad=1) * w)), {
        "x": rng.standard_normal((b, c, h, wd)),
        "w": rng.standard_normal((f, c, 3, 3)),
        "b": rng.standard_normal(f),
    }


def case_maxpool(rng):
    b, c = _dims(rng, hi=3)
    h, wd = _dims(rng, lo=2, hi=7)
    # distinct, well-separated values keep the argmax stable under perturbation
    x = rng.permutation(b * c * h * wd).reshape(b, c, h, wd) * 0.01
    w = rng.standard_normal((b, c, h // 2, wd // 2))
    return (lambda t: ad.sum_(ad.maxpool2x2(t["x"]) * w)), {"x": x}


def case_adapter(rng):
    d = int(rng.integers(2, 6))
    s, q = _dims(rng, hi=4)
    params = init_adapter(d, rng)
    inputs = {"support": rng.standard_normal((s, d)), "queries": rng.standard_normal((q, d)), **params}
    ws, wq = rng.standard_normal((s, d)), rng.standard_normal((q, d))

    def fn(t):
        out = adapt(t["support"], t["queries"], t)
        return ad.sum_(out.support * ws) + ad.sum_(out.queries * wq)

    return fn, inputs


def case_metric_head(rng):
    d, n_way, shots = 4, 2, 2
    labels = np.repeat(np.arange(n_way), shots)
    q = 3
    w = rng.standard_normal((q, n_way))

    def fn(t):
        stats = metric.estimate_statistics(t["support"], labels, beta=1.0)
        return ad.sum_(metric.distances(t["queries"], stats) * w)

    return fn, {"support": rng.standard_normal((n_way * shots, d)), "queries": rng.standard_normal((q, d))}


def _toy_episode(n_way=2, shots=2, queries=2) -> Episode:
    support = [(f"c{c}/{i}", c) for c in range(n_way) for i in range(shots)]
    query = [(f"c{c}/{shots + i}", c) for c in range(n_way) for i in range(queries)]
    return Episode(n_way, shots, queries, [f"c{c}" for c in range(n_way)], support, query, 0)


def case_episode_loss(rng):
    """Full training loss, 2-way 2-shot, d=4, w.r.t. adapter weights."""
    d = 4
    ep = _toy_episode()
    ids = ep.support_ids + ep.query_ids
    vecs = rng.standard_normal((len(ids), d)) + np.repeat(rng.standard_normal((2, d)) * 2, 4, axis=0)
    bb = PrecomputedBackbone(BackboneConfig(embed_dim=d), PrecomputedEmbeddingStore(ids, vecs))
    params = init_adapter(d, rng)
    model = FewShotModel(bb, params, beta=1.0)
    cfg = TrainConfig(loss_lambda=0.1)
    return (lambda t: episode_loss(ep, model, t, cfg).loss), params


def case_episode_loss_conv(rng):
    """Full training loss through a tiny conv backbone."""
    ep = _toy_episode()
    ids = ep.support_ids + ep.query_ids
    imgs = {sid: rng.standard_normal((3, 8, 8)) for sid in ids}
    cfg_bb = BackboneConfig(kind="conv-small", embed_dim=4, input_size=8, channels_per_block=[3, 3])
    bb = ConvBackbone(cfg_bb, loader=lambda batch: np.stack([imgs[i] for i in batch]))
    params = bb.init_params(rng)
    params.update(init_adapter(4, rng))
    model = FewShotModel(bb, params, beta=1.0)
    cfg = TrainConfig(loss_lambda=0.1)
    return (lambda t: episode_loss(ep, model, t, cfg).loss), params


PRIMITIVES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "scale": case_scale,
    "transpose": case_transpose,
    "matmul": case_matmul,
    "mean": case_mean,
    "log": case_log,
    "exp": case_exp,
    "relu": case_relu,
    "gather_rows": case_gather_rows,
    "concat_rows": case_concat_rows,
    "softmax_rows": case_softmax_rows,
    "cross_entropy": case_cross_entropy,
    "cholesky_solve": case_cholesky_solve,
    "conv2d": case_conv2d,
    "maxpool2x2": case_maxpool,
}

COMPOSITES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "adapter": case_adapter,
    "metric_head": case_metric_head,
    "episode_loss": case_episode_loss,
    "episode_loss_conv": case_episode_loss_conv,
}


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def run_suite(trials: int = 20, composite_trials: int = 5, seed: int = 0) -> List[CheckResult]:
    results = []
    for group, n in ((PRIMITIVES, trials), (COMPOSITES, composite_trials)):
        for name, build in group.items():
            rng = np.random.default_rng([seed, len(results)])
            t0 = time.perf_counter()
            worst = max(check_case(*build(rng)) for _ in range(n))
            results.append(CheckResult(name, n, worst, time.perf_counter() - t0))
    return results
