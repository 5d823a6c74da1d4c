"""Feature extractors mapping samples to d-dimensional embeddings.

Two kinds are supported:

``precomputed``
    Vectors read from an FSLE file. Constant with respect to model parameters.
``conv-small``
    Blocks of 3x3 conv -> per-channel scale -> ReLU -> 2x2 max-pool, then global
    average pooling and a linear map to ``embed_dim``. Nothing couples samples
    within a batch, so each embedding depends on its own image only.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, DimensionError, EmbeddingLookupError

FSLE_MAGIC = b"FSLE"
FSLE_VERSION = 1


@dataclass
class BackboneConfig:
    kind: str = "precomputed"
    embed_dim: int = 64
    input_size: int = 84
    channels_per_block: List[int] = field(default_factory=lambda: [32, 32, 32, 32])

    def validate(self) -> "BackboneConfig":
        if self.kind not in ("conv-small", "precomputed"):
            raise ConfigError(f"backbone.kind must be 'conv-small' or 'precomputed', got {self.kind!r}")
        if int(self.embed_dim) < 2:
            raise ConfigError(f"backbone.embed_dim must be >= 2, got {self.embed_dim}")
        if self.kind == "conv-small":
            if not self.channels_per_block or any(int(c) < 1 for c in self.channels_per_block):
                raise ConfigError("backbone.channels_per_block must list positive channel counts")
            # floor pooling: 84 -> 42 -> 21 -> 10 -> 5
            if int(self.input_size) // 2 ** len(self.channels_per_block) < 1:
                raise ConfigError(
                    f"backbone.input_size {self.input_size} is too small for "
                    f"{len(self.channels_per_block)} pooling stages"
                )
        return self


# --------------------------------------------------------------------------
# FSLE embedding files
# --------------------------------------------------------------------------


def write_fsle(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    """Write embeddings as FSLE v1 (vectors stored as little-endian float32)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise DimensionError(f"expected {len(ids)} rows of vectors, got shape {vectors.shape}")
    d = vectors.shape[1]
    buf = bytearray()
    buf += FSLE_MAGIC
    buf += struct.pack("<IIQ", FSLE_VERSION, d, len(ids))
    rows = vectors.astype("<f4")
    for sid, row in zip(ids, rows):
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"sample id too long for FSLE: {sid[:40]}...")
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += row.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_fsle(path) -> "PrecomputedEmbeddingStore":
    data = Path(path).read_bytes()
    if data[:4] != FSLE_MAGIC:
        raise DataError(f"{path}: not an FSLE file (bad magic)")
    if len(data) < 20:
        raise DataError(f"{path}: truncated FSLE header")
    version, d, count = struct.unpack_from("<IIQ", data, 4)
    if version != FSLE_VERSION:
        raise DataError(f"{path}: unsupported FSLE version {version}")
    off = 20
    ids = []
    mat = np.empty((count, d))
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            ids.append(data[off:off + n].decode("utf-8"))
            off += n
            mat[i] = np.frombuffer(data, dtype="<f4", count=d, offset=off)
            off += 4 * d
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt FSLE record {len(ids)}: {exc}") from exc
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return PrecomputedEmbeddingStore(ids, mat)


class PrecomputedEmbeddingStore:
    """Sample id -> embedding vector."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise DimensionError(f"expected {len(ids)} rows, got shape {vectors.shape}")
        self.ids = list(ids)
        self.vectors = vectors
        self.vectors.flags.writeable = False
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("duplicate sample ids in embedding store")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, sid):
        return sid in self._index

    def lookup(self, ids: Iterable[str]) -> np.ndarray:
        rows = []
        for sid in ids:
            try:
                rows.append(self._index[sid])
            except KeyError:
                raise EmbeddingLookupError(f"sample id {sid!r} not in embedding store") from None
        return self.vectors[rows]

    def require(self, ids: Iterable[str]) -> None:
        missing = [sid for sid in ids if sid not in self._index]
        if missing:
            raise EmbeddingLookupError(
                f"{len(missing)} manifest sample ids missing from embedding store, e.g. {missing[0]!r}"
            )


# --------------------------------------------------------------------------
# backbones
# --------------------------------------------------------------------------


class PrecomputedBackbone:
    kind = "precomputed"

    def __init__(self, config: BackboneConfig, store: PrecomputedEmbeddingStore):
        if store.dim != config.embed_dim:
            raise DimensionError(f"store has d={store.dim}, config embed_dim={config.embed_dim}")
        self.config = config
        self.store = store

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def inputs(self, ids: Sequence[str]) -> List[str]:
        return list(ids)

    def embed(self, batch: Sequence[str], params: Optional[Mapping[str, ad.Tensor]] = None) -> ad.Tensor:
        if len(batch) == 0:
            raise DimensionError("embed needs a nonempty batch")
        return ad.Tensor(self.store.lookup(batch))


class ConvBackbone:
    kind = "conv-small"

    def __init__(self, config: BackboneConfig, loader: Optional[Callable[[Sequence[str]], np.ndarray]] = None):
        self.config = config.validate()
        self.loader = loader

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        params = {}
        c_in = 3
        for i, c_out in enumerate(self.config.channels_per_block):
            fan_in = c_in * 9
            params[f"backbone.conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3))
            params[f"backbone.conv{i}.bias"] = np.zeros(c_out)
            params[f"backbone.conv{i}.scale"] = np.ones(c_out)
            c_in = c_out
        params["backbone.fc.weight"] = rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, self.config.embed_dim))
        params["backbone.fc.bias"] = np.zeros(self.config.embed_dim)
        return params

    def inputs(self, ids: Sequence[str]) -> np.ndarray:
        if self.loader is None:
            raise DataError("conv-small backbone has no image loader attached")
        return self.loader(ids)

    def embed(self, batch, params: Mapping[str, ad.Tensor]) -> ad.Tensor:
        x = np.asarray(batch.value if isinstance(batch, ad.Tensor) else batch, dtype=np.float64)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[0] == 0 or x.shape[1:] != (3, s, s):
            raise DimensionError(f"expected a nonempty image batch [B,3,{s},{s}], got {x.shape}")
        h = ad.Tensor(x)
        for i in range(len(self.config.channels_per_block)):
            h = ad.conv2d(h, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"], pad=1)
            sc = ad.reshape(params[f"backbone.conv{i}.scale"], (1, -1, 1, 1))
            h = ad.maxpool2x2(ad.relu(h * sc))
        B, C = h.shape[:2]
        pooled = ad.mean(ad.reshape(h, (B, C, -1)), axis=2)
        return ad.matmul(pooled, params["backbone.fc.weight"]) + params["backbone.fc.bias"]


def make_backbone(config: BackboneConfig, store: Optional[PrecomputedEmbeddingStore] = None, loader=None):
    config.validate()
    if config.kind == "precomputed":
        if store is None:
            raise ConfigError("precomputed backbone requires an embedding file")
        return PrecomputedBackbone(config, store)
    return ConvBackbone(config, loader)
