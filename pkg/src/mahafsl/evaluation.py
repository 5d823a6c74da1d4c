"""Episode-averaged accuracy with a 95% confidence interval, and head comparisons."""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .episodes import DatasetManifest, Episode, sample_episode, worker_count
from .errors import ContractError
from .model import FewShotModel

Predictor = Callable[[Episode], np.ndarray]

CSV_FIELDS = ("split", "n_way", "m_shot", "query_per_class", "n_episodes", "seed", "metric", "mean", "ci95")


def confidence_halfwidth(accuracies: Sequence[float]) -> float:
    """1.96 * sample standard deviation / sqrt(n)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return 0.0
    return float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


@dataclass
class EvalReport:
    n_episodes: int
    accuracies: List[float]
    mean: float
    ci95: float
    config: dict
    stream_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_FIELDS)

    def csv_row(self) -> str:
        row = dict(self.config, mean=repr(self.mean), ci95=repr(self.ci95), n_episodes=self.n_episodes)
        return ",".join(str(row.get(k, "")) for k in CSV_FIELDS)


def _episode_accuracy(predictor: Predictor, episode: Episode) -> float:
    pred = np.asarray(predictor(episode))
    truth = episode.query_labels
    if pred.shape != truth.shape:
        raise ContractError(f"predictor returned {pred.shape} labels for {truth.shape} queries")
    return float(np.mean(pred == truth))


def evaluate(
    model: Union[FewShotModel, Predictor],
    manifest: DatasetManifest,
    n_way: int,
    m_shot: int,
    query_per_class: Union[int, str] = 15,
    n_episodes: int = 600,
    seed: int = 0,
    split: str = "meta_test",
    metric: str = "mahalanobis",
    use_adapter: bool = True,
    threads: Optional[int] = None,
) -> EvalReport:
    """Mean over episodes of per-episode query accuracy.

    Episode ``i`` is sampled with seed ``seed + i``. ``model`` is either a
    :class:`FewShotModel` or any callable mapping an episode to predicted
    local labels for its queries.
    """
    if n_episodes < 1:
        raise ContractError(f"n_episodes must be >= 1, got {n_episodes}")
    if isinstance(model, FewShotModel):
        predictor = lambda ep: model.predict(ep, metric, use_adapter)  # noqa: E731
    else:
        predictor = model

    def run(i: int) -> Tuple[float, str]:
        ep = sample_episode(manifest, split, n_way, m_shot, query_per_class, seed + i)
        return _episode_accuracy(predictor, ep), ep.digest()

    workers = threads or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(n_episodes)))
    else:
        results = [run(i) for i in range(n_episodes)]
    accs = [r[0] for r in results]
    stream = hashlib.sha256("".join(r[1] for r in results).encode()).hexdigest()
    config = {
        "split": split,
        "n_way": n_way,
        "m_shot": m_shot,
        "query_per_class": query_per_class,
        "seed": seed,
        "metric": metric,
    }
    return EvalReport(n_episodes, accs, float(np.mean(accs)), confidence_halfwidth(accs), config, stream)


@dataclass
class HeadComparison:
    n_way: int
    m_shot: int
    query_per_class: Union[int, str]
    euclidean: EvalReport = field(repr=False)
    mahalanobis: EvalReport = field(repr=False)

    def row(self) -> dict:
        return {
            "n_way": self.n_way,
            "m_shot": self.m_shot,
            "query_per_class": self.query_per_class,
            "euclidean_mean": self.euclidean.mean,
            "euclidean_ci95": self.euclidean.ci95,
            "mahalanobis_mean": self.mahalanobis.mean,
            "mahalanobis_ci95": self.mahalanobis.ci95,
            "stream_digest": self.mahalanobis.stream_digest,
        }


def compare_heads(
    model: FewShotModel,
    manifest: DatasetManifest,
    shapes: Sequence[Tuple[int, int, Union[int, str]]],
    seed: int = 0,
    n_episodes: int = 600,
    use_adapter: bool = False,
    split: str = "meta_test",
) -> List[HeadComparison]:
    """Euclidean vs Mahalanobis heads on identical episode streams.

    The Euclidean head is the metric head with every ``Q_n`` replaced by the
    identity. By default embeddings bypass the adapter, so the comparison
    isolates the distance function.
    """
    out = []
    for n_way, m_shot, qc in shapes:
        reports = {
            name: evaluate(model, manifest, n_way, m_shot, qc, n_episodes, seed, split, name, use_adapter)
            for name in ("euclidean", "mahalanobis")
        }
        if reports["euclidean"].stream_digest != reports["mahalanobis"].stream_digest:
            raise AssertionError("heads consumed different episode streams")
        out.append(HeadComparison(n_way, m_shot, qc, reports["euclidean"], reports["mahalanobis"]))
    return out
