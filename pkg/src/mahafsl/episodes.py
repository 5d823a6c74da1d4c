"""Datasets, splits and M-shot N-way episode sampling."""
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .backbone import PrecomputedEmbeddingStore
from .errors import ConfigError, IngestionError, ManifestError, SamplingError

SPLITS = ("meta_train", "meta_test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ALL_REMAINING = "all"


@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: Optional[str] = None


@dataclass
class ClassEntry:
    name: str
    samples: List[SampleRecord]


@dataclass
class DatasetManifest:
    classes: List[ClassEntry]
    splits: Dict[str, List[str]] = field(default_factory=dict)
    root: Optional[str] = None
    embedding_file: Optional[str] = None

    def __post_init__(self):
        self._by_name = {c.name: c for c in self.classes}

    def validate(self) -> "DatasetManifest":
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise ManifestError(f"duplicate class name {dup!r}")
        seen = set()
        for c in self.classes:
            for s in c.samples:
                if s.id in seen:
                    raise ManifestError(f"duplicate sample id {s.id!r}")
                seen.add(s.id)
        for split, members in self.splits.items():
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}; expected one of {SPLITS}")
            for name in members:
                if name not in self._by_name:
                    raise ManifestError(f"split {split} lists unknown class {name!r}")
        overlap = set(self.splits.get("meta_train", ())) & set(self.splits.get("meta_test", ()))
        if overlap:
            raise ManifestError(f"meta_train and meta_test share classes: {sorted(overlap)}")
        return self

    def class_names(self, split: Optional[str] = None) -> List[str]:
        if split is None:
            return [c.name for c in self.classes]
        if split not in self.splits:
            raise SamplingError(f"manifest has no {split!r} split")
        return list(self.splits[split])

    def samples(self, name: str) -> List[SampleRecord]:
        return self._by_name[name].samples

    def sample_ids(self, split: Optional[str] = None) -> List[str]:
        return [s.id for n in self.class_names(split) for s in self.samples(n)]

    def resolve(self, record: SampleRecord) -> Path:
        if record.path is None:
            raise IngestionError(f"sample {record.id!r} has no file path")
        p = Path(record.path)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def path_index(self) -> Dict[str, Path]:
        return {s.id: self.resolve(s) for c in self.classes for s in c.samples if s.path is not None}

    # -- serialisation ---------------------------------------------------

    def to_json(self) -> dict:
        doc = {}
        if self.root is not None:
            doc["root"] = self.root
        if self.embedding_file is not None:
            doc["embeddings"] = self.embedding_file
        doc["classes"] = [
            {
                "name": c.name,
                "samples": [{"id": s.id, "path": s.path} if s.path is not None else {"id": s.id} for s in c.samples],
            }
            for c in self.classes
        ]
        return doc

    def splits_json(self) -> dict:
        return {k: list(self.splits.get(k, [])) for k in SPLITS}


def _dump(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def save_manifest(manifest: DatasetManifest, path, splits_path=None) -> None:
    _dump(manifest.to_json(), path)
    if splits_path is not None:
        _dump(manifest.splits_json(), splits_path)


def load_manifest(path, splits_path=None) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        classes = [
            ClassEntry(c["name"], [SampleRecord(s["id"], s.get("path")) for s in c["samples"]])
            for c in doc["classes"]
        ]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    splits = {}
    if splits_path is not None:
        try:
            sdoc = json.loads(Path(splits_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read splits {splits_path}: {exc}") from exc
        if not isinstance(sdoc, dict):
            raise ManifestError(f"splits file {splits_path} must hold an object")
        splits = {k: list(v) for k, v in sdoc.items()}
    root = doc.get("root")
    emb = doc.get("embeddings")
    if emb is not None and not Path(emb).is_absolute():
        emb = str(path.parent / emb)
    return DatasetManifest(classes, splits, root=root, embedding_file=emb).validate()


def scan_directory(root) -> Tuple[DatasetManifest, int]:
    """Index ``root/<class>/<image>``. Returns the manifest and the skipped-entry count.

    Classes and files are sorted by name, so rescanning an unchanged tree
    yields an identical manifest.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    skipped = 0
    classes = []
    for cdir in sorted(root.iterdir(), key=lambda p: p.name):
        if not cdir.is_dir():
            skipped += 1
            continue
        samples = []
        for f in sorted(cdir.iterdir(), key=lambda p: p.name):
            if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                samples.append(SampleRecord(f"{cdir.name}/{f.name}", f"{cdir.name}/{f.name}"))
            else:
                skipped += 1
        if not samples:
            raise ManifestError(f"class folder {cdir} contains no images")
        classes.append(ClassEntry(cdir.name, samples))
    if not classes:
        raise ManifestError(f"{root} has no class folders")
    return DatasetManifest(classes, root=str(root.resolve())).validate(), skipped


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------


@dataclass
class Episode:
    n_way: int
    m_shot: int
    query_per_class: Union[int, str]
    classes: List[str]
    support: List[Tuple[str, int]]
    query: List[Tuple[str, int]]
    seed: int

    @property
    def support_ids(self) -> List[str]:
        return [s for s, _ in self.support]

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.support], dtype=np.intp)

    @property
    def query_ids(self) -> List[str]:
        return [s for s, _ in self.query]

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.query], dtype=np.intp)

    def digest(self) -> str:
        doc = [self.n_way, self.m_shot, self.query_per_class, self.classes, self.support, self.query, self.seed]
        return hashlib.sha256(json.dumps(doc).encode()).hexdigest()


def sample_episode(
    manifest: DatasetManifest,
    split: str,
    n_way: int,
    m_shot: int,
    query_per_class: Union[int, str] = 15,
    seed: int = 0,
) -> Episode:
    """Draw one episode using only ``np.random.default_rng(seed)``.

    ``query_per_class="all"`` puts every non-support sample of a chosen class
    in the query set. Support rows are ordered class by class.
    """
    if n_way < 1 or m_shot < 1:
        raise ConfigError(f"need n_way >= 1 and m_shot >= 1, got {n_way}, {m_shot}")
    all_remaining = query_per_class == ALL_REMAINING
    if not all_remaining and int(query_per_class) < 1:
        raise ConfigError(f"query_per_class must be positive or 'all', got {query_per_class!r}")
    pool = manifest.class_names(split)
    if len(pool) < n_way:
        raise SamplingError(f"split {split} has {len(pool)} classes, episode needs {n_way}")
    need = m_shot + (1 if all_remaining else int(query_per_class))
    for name in pool:
        if len(manifest.samples(name)) < need:
            raise SamplingError(
                f"class {name!r} has {len(manifest.samples(name))} samples, episode needs {need}"
            )
    rng = np.random.default_rng(seed)
    chosen = [pool[i] for i in rng.choice(len(pool), size=n_way, replace=False)]
    support, query = [], []
    for label, name in enumerate(chosen):
        recs = manifest.samples(name)
        order = rng.permutation(len(recs))
        support += [(recs[i].id, label) for i in order[:m_shot]]
        stop = None if all_remaining else m_shot + int(query_per_class)
        query += [(recs[i].id, label) for i in order[m_shot:stop]]
    return Episode(n_way, m_shot, query_per_class, chosen, support, query, int(seed))


# --------------------------------------------------------------------------
# image ingestion
# --------------------------------------------------------------------------


@dataclass
class PreprocessSpec:
    resize: int = 84
    center_crop: bool = True
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def validate(self) -> "PreprocessSpec":
        if int(self.resize) <= 0:
            raise ConfigError(f"preprocess.resize must be positive, got {self.resize}")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ConfigError("preprocess.mean/std need three entries with positive std")
        return self


def worker_count() -> int:
    raw = os.environ.get("FSL_THREADS")
    cpus = os.cpu_count() or 1
    if not raw:
        return cpus
    try:
        return max(1, min(int(raw), cpus))
    except ValueError:
        raise ConfigError(f"FSL_THREADS must be an integer, got {raw!r}") from None


def center_crop_box(width: int, height: int) -> Tuple[int, int, int, int]:
    side = min(width, height)
    left = (width - side) // 2
    top = (height - side) // 2
    return left, top, left + side, top + side


def load_image(path, spec: PreprocessSpec) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if spec.center_crop:
                im = im.crop(center_crop_box(*im.size))
            if im.size != (spec.resize, spec.resize):
                im = im.resize((spec.resize, spec.resize), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    arr = (arr - np.asarray(spec.mean)) / np.asarray(spec.std)
    return arr.transpose(2, 0, 1)


def load_and_preprocess(paths: Sequence, spec: PreprocessSpec) -> np.ndarray:
    """Decode, crop, resize and normalise images into a ``[B, 3, R, R]`` batch."""
    spec.validate()
    paths = list(paths)
    if len(paths) > 1 and worker_count() > 1:
        with ThreadPoolExecutor(worker_count()) as pool:
            imgs = list(pool.map(lambda p: load_image(p, spec), paths))
    else:
        imgs = [load_image(p, spec) for p in paths]
    return np.stack(imgs) if imgs else np.zeros((0, 3, spec.resize, spec.resize))


class ImageLoader:
    """Sample-id keyed loader with an in-memory cache of preprocessed arrays."""

    def __init__(self, manifest: DatasetManifest, spec: PreprocessSpec):
        self.paths = manifest.path_index()
        self.spec = spec.validate()
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in dict.fromkeys(ids) if i not in self._cache]
        if missing:
            try:
                paths = [self.paths[i] for i in missing]
            except KeyError as exc:
                raise IngestionError(f"sample {exc.args[0]!r} has no image path") from None
            for sid, img in zip(missing, load_and_preprocess(paths, self.spec)):
                self._cache[sid] = img
        return np.stack([self._cache[i] for i in ids])


# --------------------------------------------------------------------------
# synthetic embeddings
# --------------------------------------------------------------------------


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def synthetic_covariance(d: int, cov: str, condition: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    if cov == "isotropic":
        return noise ** 2 * np.eye(d)
    if cov == "anisotropic":
        if not condition >= 1:
            raise ConfigError(f"condition number must be >= 1, got {condition}")
        eig = noise ** 2 * np.geomspace(condition ** -0.5, condition ** 0.5, d)
        R = random_rotation(d, rng)
        return (R * eig) @ R.T
    raise ConfigError(f"cov must be 'isotropic' or 'anisotropic', got {cov!r}")


def generate_synthetic(
    classes: int,
    dim: int,
    mean_scale: float,
    cov: str = "isotropic",
    condition: float = 1.0,
    samples_per_class: int = 100,
    seed: int = 0,
    noise: float = 1.0,
    train_classes: Optional[int] = None,
) -> Tuple[DatasetManifest, PrecomputedEmbeddingStore]:
    """Gaussian class clusters sharing one covariance.

    Class means are random directions scaled to norm ``mean_scale``. The
    anisotropic covariance has log-spaced eigenvalues with geometric mean
    ``noise**2`` and max/min ratio ``condition``, in a random basis. Vectors
    are rounded to float32 so they survive an FSLE round trip unchanged. The
    first ``train_classes`` classes (default half) form meta_train.
    """
    if classes < 2:
        raise ConfigError(f"synthetic data needs >= 2 classes, got {classes}")
    if samples_per_class < 2:
        raise ConfigError(f"samples_per_class must be >= 2, got {samples_per_class}")
    if dim < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    sigma = synthetic_covariance(dim, cov, condition, noise, rng)
    chol = np.linalg.cholesky(sigma)
    names = [f"class_{i:03d}" for i in range(classes)]
    entries, ids, rows = [], [], []
    for name in names:
        direction = rng.standard_normal(dim)
        center = mean_scale * direction / np.linalg.norm(direction)
        pts = center + rng.standard_normal((samples_per_class, dim)) @ chol.T
        recs = [SampleRecord(f"{name}/{j:05d}") for j in range(samples_per_class)]
        entries.append(ClassEntry(name, recs))
        ids += [r.id for r in recs]
        rows.append(pts)
    vectors = np.concatenate(rows).astype(np.float32).astype(np.float64)
    n_train = classes // 2 if train_classes is None else int(train_classes)
    if not 0 <= n_train <= classes:
        raise ConfigError(f"train_classes must lie in [0, {classes}], got {n_train}")
    splits = {"meta_train": names[:n_train], "meta_test": names[n_train:]}
    manifest = DatasetManifest(entries, splits).validate()
    return manifest, PrecomputedEmbeddingStore(ids, vectors)
