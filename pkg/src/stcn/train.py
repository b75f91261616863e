"""Adam with step-decay schedule and decoupled weight decay, plus the two
training stages (backbone pretraining, TCN on cached features), feature
extraction and evaluation.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .backbone import BackboneConfig, DenseNet3D, FeatureExtractor, FeatureSequence, ltap, truncate
from .data import VideoSample, fuse_modalities, temporal_normalize
from .errors import ConfigError, InputError, NumericError
from .nn import Module, decays
from .seeding import derive_seed
from .serialize import load_archive, save_archive
from .tcn import TCN, TcnConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "tcn"
    lr_init: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 25
    weight_decay: float = 0.0
    dropout: Optional[float] = None  # overrides the model config when set
    epochs: int = 50
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every_epochs < 1:
            raise ConfigError("lr_decay_every_epochs must be >= 1")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.stage not in ("backbone", "tcn"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def full_scale_backbone_config(**overrides) -> TrainConfig:
    """Adam, lr 6.4e-4 divided by 10 every 25 epochs, weight decay 1e-4."""
    base = dict(stage="backbone", lr_init=6.4e-4, lr_decay_factor=0.1, lr_decay_every_epochs=25,
                weight_decay=1e-4, dropout=0.2, epochs=75)
    base.update(overrides)
    return TrainConfig(**base)


def full_scale_tcn_config(**overrides) -> TrainConfig:
    """Adam, lr 1e-4, eps 1e-8."""
    base = dict(stage="tcn", lr_init=1e-4, lr_decay_factor=1.0, eps=1e-8)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_init * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)


@dataclass
class TrainState:
    params: Dict[str, Tensor]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adam_step(state: TrainState, grads: Mapping[str, Optional[np.ndarray]], lr: float, cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update with decoupled weight decay on
    conv/affine weights. Parameters are updated in place."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update
    return state


# -- generic minibatch loop ------------------------------------------------------------


ForwardFn = Callable[[np.ndarray, bool, Optional[np.random.Generator]], Tensor]


def fit(
    model: Module,
    forward: ForwardFn,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> List[dict]:
    """Minimise mean cross-entropy with Adam; returns one metrics record per epoch."""
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    state = TrainState(model.parameters(), rng_seed=cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng(derive_seed(cfg.seed, cfg.stage, "shuffle", epoch)).permutation(n)
        drop_rng = np.random.default_rng(derive_seed(cfg.seed, cfg.stage, "dropout", epoch))
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in state.params.values():
                p.grad = None
            probs = forward(inputs[idx], True, drop_rng)
            loss = ops.cross_entropy(probs, labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"{cfg.stage} training diverged: loss {loss.item()} at epoch {epoch}")
            loss.backward()
            adam_step(state, {k: p.grad for k, p in state.params.items()}, lr, cfg)
            total_loss += loss.item() * len(idx)
            correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
        record = {"stage": cfg.stage, "epoch": epoch, "lr": lr, "loss": total_loss / n, "accuracy": correct / n}
        history.append(record)
        log.info("%s epoch %d lr %.3g loss %.4f acc %.3f", cfg.stage, epoch, lr, record["loss"], record["accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    return history


def write_metrics(path, history: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- stage 1: backbone --------------------------------------------------------------------


def clips_for(samples: Sequence[VideoSample], modality: str, k: int) -> np.ndarray:
    """Deterministically normalized clips ``[N x C x k x H x W]`` of one modality."""
    return np.stack([temporal_normalize(s, k).clip(modality) for s in samples])


def pretrain_backbone(
    clips: np.ndarray, labels: Sequence[int], bcfg: BackboneConfig, tcfg: TrainConfig
) -> "tuple[DenseNet3D, List[dict]]":
    if len(labels) == 0:
        raise InputError("backbone pretraining needs at least one sample")
    if max(labels) >= bcfg.num_classes or min(labels) < 0:
        raise InputError(f"labels must lie in [0, {bcfg.num_classes})")
    if tcfg.dropout is not None:
        bcfg = dataclasses.replace(bcfg, dropout=tcfg.dropout)
    model = DenseNet3D(bcfg, np.random.default_rng(derive_seed(tcfg.seed, "backbone", "init")))
    history = fit(model, lambda x, training, rng: model(x, training, rng), clips, np.asarray(labels), tcfg)
    return model, history


def predict(probs_fn: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return np.concatenate([probs_fn(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)])


# -- features -----------------------------------------------------------------------------


def extract_features(
    samples: Sequence[VideoSample],
    extractors: Mapping[str, FeatureExtractor],
    T: int,
    threads: int = 1,
) -> List[FeatureSequence]:
    """Per sample: normalize to k frames, run each modality's truncated
    backbone, pool to ``T`` steps, and fuse along channels."""
    if not extractors:
        raise InputError("no feature extractors given")
    ks = {e.cfg.frames for e in extractors.values()}
    if len(ks) != 1:
        raise ConfigError(f"extractors disagree on frame count k: {sorted(ks)}")
    k = ks.pop()
    if k % T:
        raise ConfigError(f"k={k} is not a multiple of T={T}")

    def one(sample: VideoSample) -> FeatureSequence:
        missing = set(extractors) - set(sample.frames)
        if missing:
            raise InputError(f"sample {sample.sample_id!r} lacks modalities {sorted(missing)}")
        clip = temporal_normalize(sample, k)
        seqs = [
            ltap(ext.extract(clip.clip(m)), T, label=sample.label, modality=m, sample_id=sample.sample_id)
            for m, ext in extractors.items()
        ]
        return fuse_modalities(seqs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, samples))
    return [one(s) for s in samples]


def write_feature_cache(root, seqs: Sequence[FeatureSequence]) -> Path:
    """One archive per sample (``<sample_id>.stcn``) plus ``index.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        save_archive(root / f"{s.sample_id}.stcn", {"values": s.values},
                     meta={"label": int(s.label), "modality": s.modality, "sample_id": s.sample_id})
    index = {"samples": [s.sample_id for s in seqs]}
    if seqs:
        index.update(T=seqs[0].length, channels=seqs[0].channels, modality=seqs[0].modality)
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return root


def read_feature_cache(root, sample_ids: Optional[Sequence[str]] = None) -> List[FeatureSequence]:
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise InputError(f"no feature cache at {root}; run extract first")
    index = json.loads(index_path.read_text())
    ids = index["samples"] if sample_ids is None else list(sample_ids)
    missing = [sid for sid in ids if sid not in set(index["samples"])]
    if missing:
        raise InputError(f"feature cache at {root} lacks samples {missing[:5]} listed in the manifest")
    out = []
    for sid in ids:
        tensors, meta = load_archive(root / f"{sid}.stcn")
        out.append(FeatureSequence(tensors["values"], int(meta["label"]), meta["modality"], meta["sample_id"]))
    return out


# -- stage 2: TCN -------------------------------------------------------------------------


def stack_sequences(seqs: Sequence[FeatureSequence]):
    if not seqs:
        raise InputError("no feature sequences")
    shapes = {s.values.shape for s in seqs}
    if len(shapes) != 1:
        raise InputError(f"cached sequences disagree on [T x C]: {sorted(shapes)}")
    return np.stack([s.values for s in seqs]), np.array([s.label for s in seqs], dtype=np.int64)


def train_tcn(seqs: Sequence[FeatureSequence], tcn_cfg: TcnConfig, tcfg: TrainConfig) -> "tuple[TCN, List[dict]]":
    x, y = stack_sequences(seqs)
    if x.shape[1] != tcn_cfg.seq_len or x.shape[2] != tcn_cfg.in_channels:
        raise InputError(f"features are {x.shape[1:]} but the TCN expects "
                         f"({tcn_cfg.seq_len}, {tcn_cfg.in_channels})")
    if tcfg.dropout is not None:
        tcn_cfg = dataclasses.replace(tcn_cfg, dropout=tcfg.dropout)
    model = TCN(tcn_cfg, np.random.default_rng(derive_seed(tcfg.seed, "tcn", "init")))
    history = fit(model, lambda xb, training, rng: model(xb, training, rng), x, y, tcfg)
    return model, history


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray  # [K x K], rows = true class, columns = prediction
    predictions: np.ndarray
    labels: np.ndarray


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, predictions):
        m[int(t), int(p)] += 1
    return m


def evaluate_predictions(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> Evaluation:
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    if labels.size == 0:
        raise InputError("cannot evaluate on an empty set")
    conf = confusion_matrix(labels, predictions, num_classes)
    return Evaluation(float(np.trace(conf)) / conf.sum(), conf, predictions, labels)


def evaluate(model: TCN, seqs: Sequence[FeatureSequence]) -> Evaluation:
    x, y = stack_sequences(seqs)
    probs = predict(lambda b: model(b).data, x)
    return evaluate_predictions(y, probs.argmax(axis=1), model.cfg.num_classes)


# -- checkpoints --------------------------------------------------------------------------


def save_backbone(path, model: DenseNet3D, modality: str = "") -> None:
    save_archive(path, model.state_dict(), meta={"kind": "backbone", "modality": modality,
                                                 "config": model.cfg.to_dict()})


def load_backbone(path) -> DenseNet3D:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "backbone":
        raise InputError(f"{path} is not a backbone checkpoint")
    model = DenseNet3D(BackboneConfig.from_dict(meta["config"]), np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model


def load_extractor(path) -> FeatureExtractor:
    return truncate(load_backbone(path))


def save_tcn(path, model: TCN) -> None:
    save_archive(path, model.state_dict(), meta={"kind": "tcn", "config": model.cfg.to_dict()})


def load_tcn(path) -> TCN:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "tcn":
        raise InputError(f"{path} is not a TCN checkpoint")
    model = TCN(TcnConfig.from_dict(meta["config"]), np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model
