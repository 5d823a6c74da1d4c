"""Forward pipeline: backbone -> set adapter -> metric head."""
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import metric
from .adapter import adapt
from .episodes import Episode


class FewShotModel:
    """Backbone plus parameter dictionary plus head settings.

    ``params`` maps names (``backbone.*``, ``adapter.*``) to arrays. Methods
    accept an optional mapping of tensors to use instead, which is how the
    trainer threads differentiable leaves through the pipeline.
    """

    def __init__(self, backbone, params: Dict[str, np.ndarray], beta: float = 1.0, task_center: str = "class"):
        self.backbone = backbone
        self.params = params
        self.beta = beta
        self.task_center = task_center

    def tensors(self, requires_grad: bool = False) -> Dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def embed_episode(self, episode: Episode, tparams: Optional[Mapping] = None) -> Tuple[ad.Tensor, ad.Tensor]:
        tparams = self.tensors() if tparams is None else tparams
        ids = episode.support_ids + episode.query_ids
        emb = self.backbone.embed(self.backbone.inputs(ids), tparams)
        n_s = len(episode.support)
        return ad.gather_rows(emb, np.arange(n_s)), ad.gather_rows(emb, np.arange(n_s, len(ids)))

    def query_logits(self, episode: Episode, tparams: Optional[Mapping] = None, metric_name: str = "mahalanobis", use_adapter: bool = True):
        tparams = self.tensors() if tparams is None else tparams
        phi_s, phi_q = self.embed_episode(episode, tparams)
        if use_adapter:
            adapted = adapt(phi_s, phi_q, tparams)
            psi_s, psi_q = adapted.support, adapted.queries
        else:
            psi_s, psi_q = phi_s, phi_q
        stats = metric.estimate_statistics(
            psi_s, episode.support_labels, self.beta, n_classes=episode.n_way, task_center=self.task_center
        )
        return metric.logits(psi_q, stats, metric_name)

    def predict(self, episode: Episode, metric_name: str = "mahalanobis", use_adapter: bool = True) -> np.ndarray:
        """Predicted local labels for the episode's queries."""
        dist = -self.query_logits(episode, metric_name=metric_name, use_adapter=use_adapter).value
        return np.argmin(dist, axis=1)
