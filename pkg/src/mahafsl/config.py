"""Run configuration: a JSON document of sections, plus ``--set key=value`` overrides.

Example::

    {
      "data": {"manifest": "out/manifest.json", "splits": "out/splits.json"},
      "backbone": {"kind": "precomputed", "embed_dim": 16},
      "train": {"epochs": 20, "n_way": 5, "m_shot": 5},
      "eval": {"n_way": 5, "m_shot": 5, "n_episodes": 600},
      "output": {"dir": "runs/demo"}
    }

Unknown sections or keys are rejected before any work starts.
"""
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from .backbone import BackboneConfig
from .episodes import ALL_REMAINING, PreprocessSpec
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    splits: Optional[str] = None
    embeddings: Optional[str] = None


@dataclass
class EvalConfig:
    n_way: int = 5
    m_shot: int = 5
    query_per_class: Union[int, str] = 15
    n_episodes: int = 600
    seed: int = 0
    split: str = "meta_test"
    metric: str = "mahalanobis"
    use_adapter: bool = True


@dataclass
class CompareConfig:
    shapes: List[List[Any]] = field(default_factory=lambda: [[5, 1, 15], [5, 5, 15]])
    n_episodes: int = 600
    seed: int = 0
    use_adapter: bool = False


@dataclass
class SynthConfig:
    classes: int = 10
    dim: int = 16
    mean_scale: float = 5.0
    cov: str = "isotropic"
    condition: float = 1.0
    samples_per_class: int = 100
    seed: int = 0
    noise: float = 1.0
    train_classes: Optional[int] = None


@dataclass
class OutputConfig:
    dir: Optional[str] = None


SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "preprocess": PreprocessSpec,
    "train": TrainConfig,
    "eval": EvalConfig,
    "compare": CompareConfig,
    "synth": SynthConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def require(self, *dotted: str) -> None:
        for name in dotted:
            section, key = name.split(".")
            if getattr(getattr(self, section), key) in (None, ""):
                raise ConfigError(f"missing required config field {name}")

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.preprocess.validate()
        self.train.validate()
        _check_qc(self.train.query_per_class, "train.query_per_class")
        _check_qc(self.eval.query_per_class, "eval.query_per_class")
        if self.eval.n_episodes < 1 or self.compare.n_episodes < 1:
            raise ConfigError("n_episodes must be >= 1")
        if self.eval.metric not in ("mahalanobis", "euclidean"):
            raise ConfigError(f"eval.metric must be 'mahalanobis' or 'euclidean', got {self.eval.metric!r}")
        if self.eval.split not in ("meta_train", "meta_test"):
            raise ConfigError(f"eval.split must be meta_train or meta_test, got {self.eval.split!r}")
        for shape in self.compare.shapes:
            if not isinstance(shape, list) or len(shape) != 3:
                raise ConfigError(f"compare.shapes entries must be [n_way, m_shot, query_per_class], got {shape!r}")
            _check_qc(shape[2], "compare.shapes")
        if self.synth.cov not in ("isotropic", "anisotropic"):
            raise ConfigError(f"synth.cov must be 'isotropic' or 'anisotropic', got {self.synth.cov!r}")
        if self.synth.condition < 1:
            raise ConfigError(f"synth.condition must be >= 1, got {self.synth.condition}")
        return self


def _check_qc(value, name):
    if value == ALL_REMAINING:
        return
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{name} must be a positive integer or 'all', got {value!r}")


def _coerce(value, annotation, name):
    origin = typing.get_origin(annotation)
    if origin is Union:
        errors = []
        for arg in typing.get_args(annotation):
            if arg is type(None):
                if value is None:
                    return None
                continue
            try:
                return _coerce(value, arg, name)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{name}: {value!r} does not match {annotation}")
    if origin in (list, List, tuple, typing.Tuple) or annotation in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return type(value)(value) if origin is not tuple else tuple(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in doc.items()}
    return cls(**kwargs)


def parse_override(text: str):
    """``section.key=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"--set expects section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"--set key must look like section.key, got {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def build_config(doc: Optional[dict] = None, overrides: Sequence[str] = ()) -> RunConfig:
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in (doc or {}).items()}
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        doc.setdefault(section, {})[key] = value
    return RunConfig(**{name: _build_section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}).validate()


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    return build_config(doc, overrides)
