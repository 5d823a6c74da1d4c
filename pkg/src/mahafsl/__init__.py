"""Episodic few-shot classification: attention-adapted embeddings scored by a
regularised class-covariance (Mahalanobis) head."""
from ._accel import USE_NUMBA, backend_name
from .adapter import AdaptedSet, adapt, init_adapter
from .backbone import BackboneConfig, PrecomputedEmbeddingStore, make_backbone, read_fsle, write_fsle
from .episodes import (
    DatasetManifest,
    Episode,
    PreprocessSpec,
    generate_synthetic,
    load_and_preprocess,
    load_manifest,
    sample_episode,
    scan_directory,
)
from .evaluation import EvalReport, compare_heads, evaluate
from .metric import TaskStatistics, classify, estimate_statistics, mahalanobis_sq
from .model import FewShotModel
from .trainer import Checkpoint, TrainConfig, episode_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
