"""Episodic meta-training with Nesterov SGD, plus checkpoint files."""
import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from . import metric
from .adapter import adapt, init_adapter
from .episodes import DatasetManifest, Episode, sample_episode
from .errors import ConfigError, DataError, NumericalError
from .model import FewShotModel

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSLC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.0002
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr_step: int = 40
    lr_gamma: float = 0.5
    loss_lambda: float = 0.1
    episodes_per_epoch: int = 100
    epochs: int = 80
    n_way: int = 5
    m_shot: int = 5
    query_per_class: Union[int, str] = 15
    beta: float = 1.0
    seed: int = 0
    task_center: str = "class"
    contrastive_include_queries: bool = True
    adapter_bias: bool = False
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.01
    pretrain_batch: int = 32

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate and weight_decay must be >= 0 and momentum in [0, 1)")
        if self.lr_step < 1 or not 0 < self.lr_gamma <= 1:
            raise ConfigError("lr_step must be >= 1 and lr_gamma in (0, 1]")
        if self.loss_lambda < 0:
            raise ConfigError(f"loss_lambda must be >= 0, got {self.loss_lambda}")
        if self.episodes_per_epoch < 1 or self.epochs < 0:
            raise ConfigError("episodes_per_epoch must be >= 1 and epochs >= 0")
        if self.n_way < 1 or self.m_shot < 1:
            raise ConfigError("n_way and m_shot must be >= 1")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        return self

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_gamma ** (epoch // self.lr_step)

    def digest(self, extra: Optional[dict] = None) -> str:
        doc = dataclasses.asdict(self)
        doc.pop("epochs")  # resuming with a longer schedule must keep the hash
        if extra:
            doc["extra"] = extra
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


@dataclass
class LossParts:
    loss: ad.Tensor
    query_ce: float
    contrastive_ce: float
    query_accuracy: float


def episode_loss(episode: Episode, model: FewShotModel, tparams: Mapping[str, ad.Tensor], cfg: TrainConfig) -> LossParts:
    """Query cross-entropy plus ``loss_lambda`` times the contrastive term.

    The contrastive term adapts every episode instance jointly (the full
    support+query set supplies keys and values), takes class centres of the
    adapted rows, and classifies each instance against those centres with the
    covariances estimated from the adapted support rows.
    """
    phi_s, phi_q = model.embed_episode(episode, tparams)
    ys, yq = episode.support_labels, episode.query_labels
    n = episode.n_way

    adapted = adapt(phi_s, phi_q, tparams)
    stats = metric.estimate_statistics(adapted.support, ys, cfg.beta, n_classes=n, task_center=cfg.task_center)
    q_logits = metric.logits(adapted.queries, stats, "mahalanobis")
    query_ce = ad.cross_entropy(q_logits, yq)
    acc = float(np.mean(np.argmax(q_logits.value, axis=1) == yq))

    loss = query_ce
    contrastive = 0.0
    if cfg.loss_lambda > 0:
        everything = ad.concat_rows([phi_s, phi_q])
        y_all = np.concatenate([ys, yq])
        psi = adapt(everything, np.zeros((0, everything.shape[1])), tparams).support
        n_s = len(ys)
        psi_s = ad.gather_rows(psi, np.arange(n_s))
        c_stats = metric.estimate_statistics(psi_s, ys, cfg.beta, n_classes=n, task_center=cfg.task_center)
        if cfg.contrastive_include_queries:
            onehot = np.zeros((len(y_all), n))
            onehot[np.arange(len(y_all)), y_all] = 1.0
            centers = ad.matmul(ad.Tensor((onehot / onehot.sum(axis=0)).T), psi)
            c_stats = dataclasses.replace(c_stats, mu=centers)
        c_ce = ad.cross_entropy(metric.logits(psi, c_stats, "mahalanobis"), y_all)
        contrastive = float(c_ce.value)
        loss = loss + ad.scale(c_ce, cfg.loss_lambda)
    return LossParts(loss, float(query_ce.value), contrastive, acc)


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


class NesterovSGD:
    """SGD with Nesterov momentum and L2 weight decay added to the gradient.

    v <- mu*v - lr*g ;  theta <- theta + mu*v - lr*g,  with g = grad + wd*theta
    """

    def __init__(self, momentum: float, weight_decay: float, velocity: Optional[Dict[str, np.ndarray]] = None):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = velocity if velocity is not None else {}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, theta in params.items():
            g = grads[name] + self.weight_decay * theta
            v = self.velocity.get(name)
            v = -lr * g if v is None else self.momentum * v - lr * g
            self.velocity[name] = v
            params[name] = theta + self.momentum * v - lr * g


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray]
    epoch: int
    rng_state: dict
    config_hash: str
    meta: dict = field(default_factory=dict)


def _pack_tensor(buf: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw
    buf += struct.pack("<B", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout (little-endian): magic ``FSLC``, u32 version, u32 header
    length, UTF-8 JSON header, u32 tensor count, then per tensor: u16 name
    length, name, u8 ndim, ndim x u64 extents, float64 data."""
    header = json.dumps(
        {
            "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state,
            "config_hash": ckpt.config_hash,
            "meta": ckpt.meta,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header
    tensors = [("param/" + k, v) for k, v in sorted(ckpt.params.items())]
    tensors += [("velocity/" + k, v) for k, v in sorted(ckpt.velocity.items())]
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        _pack_tensor(buf, name, np.asarray(arr))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params, velocity = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
            off += 8 * size
            kind, _, key = name.partition("/")
            (params if kind == "param" else velocity)[key] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint: {exc}") from exc
    return Checkpoint(params, velocity, header["epoch"], header["rng_state"], header["config_hash"], header["meta"])


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    mean_train_acc: float
    lr: float


def write_loss_csv(rows: List[EpochLog], path) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "mean_train_acc", "lr"])
    for r in rows:
        w.writerow([r.epoch, repr(r.mean_loss), repr(r.mean_train_acc), repr(r.lr)])
    Path(path).write_text(out.getvalue(), encoding="utf-8")


def init_params(backbone, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    params = backbone.init_params(rng)
    params.update(init_adapter(backbone.config.embed_dim, rng, bias=cfg.adapter_bias))
    return params


def _episode_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])


def pretrain_backbone(manifest: DatasetManifest, backbone, params: Dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """Supervised classification over all meta-train classes (updates ``params`` in place).

    A throwaway linear classifier sits on top of the embedding; only backbone
    weights are kept.
    """
    if backbone.kind != "conv-small" or cfg.pretrain_epochs <= 0:
        return
    names = manifest.class_names("meta_train")
    ids = [s.id for n in names for s in manifest.samples(n)]
    labels = np.array([i for i, n in enumerate(names) for _ in manifest.samples(n)])
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    d = backbone.config.embed_dim
    head = {"head.weight": rng.normal(0, np.sqrt(1.0 / d), (d, len(names))), "head.bias": np.zeros(len(names))}
    keys = [k for k in params if k.startswith("backbone.")]
    opt = NesterovSGD(cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(ids), cfg.pretrain_batch):
            batch = order[start:start + cfg.pretrain_batch]
            state = {k: params[k] for k in keys} | head
            tp = {k: ad.Tensor(v, requires_grad=True) for k, v in state.items()}
            with ad.GradTape() as tape:
                emb = backbone.embed(backbone.inputs([ids[i] for i in batch]), tp)
                loss = ad.cross_entropy(ad.matmul(emb, tp["head.weight"]) + tp["head.bias"], labels[batch])
            if not np.isfinite(loss.value):
                raise NumericalError(f"non-finite pretraining loss at epoch {epoch}")
            grads = backward_named(tape, loss, tp)
            opt.step(state, grads, cfg.pretrain_lr)
            for k in keys:
                params[k] = state[k]
            head = {k: state[k] for k in head}
        log.info("pretrain epoch %d loss %.4f", epoch, float(loss.value))


def backward_named(tape: ad.GradTape, loss: ad.Tensor, tparams: Mapping[str, ad.Tensor]) -> Dict[str, np.ndarray]:
    grads = ad.backward(tape, loss, wrt=tparams.values())
    return {k: grads[t] for k, t in tparams.items()}


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    backbone,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> Tuple[Checkpoint, List[EpochLog]]:
    """Run ``cfg.epochs`` epochs of episodic training (continuing ``resume`` if given).

    Episode seeds come from a generator seeded by ``cfg.seed`` whose state is
    stored in the checkpoint, so resuming reproduces an uninterrupted run.
    """
    cfg.validate()
    extra = {"backbone": dataclasses.asdict(backbone.config)}
    digest = cfg.digest(extra)
    rng = _episode_rng(cfg)
    if resume is None:
        params = init_params(backbone, cfg)
        pretrain_backbone(manifest, backbone, params, cfg)
        opt = NesterovSGD(cfg.momentum, cfg.weight_decay)
        start = 0
    else:
        if resume.config_hash != digest:
            raise ConfigError("checkpoint was produced with a different configuration")
        params = {k: v.copy() for k, v in resume.params.items()}
        opt = NesterovSGD(cfg.momentum, cfg.weight_decay, {k: v.copy() for k, v in resume.velocity.items()})
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch

    model = FewShotModel(backbone, params, cfg.beta, cfg.task_center)
    history: List[EpochLog] = []
    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses, accs = [], []
        for _ in range(cfg.episodes_per_epoch):
            seed = int(rng.integers(2**31 - 1))
            episode = sample_episode(manifest, "meta_train", cfg.n_way, cfg.m_shot, cfg.query_per_class, seed)
            tparams = model.tensors(requires_grad=True)
            with ad.GradTape() as tape:
                parts = episode_loss(episode, model, tparams, cfg)
            value = float(parts.loss.value)
            grads = backward_named(tape, parts.loss, tparams)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(
                    f"non-finite loss or gradient (lr={lr:g}, epoch={epoch}, episode seed={seed})"
                )
            opt.step(model.params, grads, lr)
            losses.append(value)
            accs.append(parts.query_accuracy)
        row = EpochLog(epoch, float(np.mean(losses)), float(np.mean(accs)), lr)
        history.append(row)
        log.info("epoch %d loss %.5f acc %.4f lr %g", epoch, row.mean_loss, row.mean_train_acc, lr)
        if on_epoch is not None:
            on_epoch(row)

    ckpt = Checkpoint(
        params=dict(model.params),
        velocity=dict(opt.velocity),
        epoch=max(start, cfg.epochs),
        rng_state=rng.bit_generator.state,
        config_hash=digest,
        meta={"train": dataclasses.asdict(cfg), **extra},
    )
    return ckpt, history
