"""Run configuration: one YAML document covering every stage.

Fields the data determines (frame size, input channels, class count, TCN
input width) are filled in at run time and must not be set by hand.
See ``configs/synthetic.yaml`` for a complete example.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from .backbone import BackboneConfig
from .data import AUGMENT_OPS, AugmentSpec, synth_label_map
from .errors import ConfigError
from .tcn import TcnConfig, receptive_field
from .train import TrainConfig

log = logging.getLogger(__name__)

_DERIVED_BACKBONE = {"frames", "height", "width", "in_channels", "num_classes"}
_DERIVED_TCN = {"seq_len", "in_channels", "num_classes"}


@dataclass
class SynthConfig:
    num_classes: int = 4
    samples_per_class: int = 13
    test_per_class: Optional[int] = 3
    test_fraction: Optional[float] = None
    frames: int = 8
    height: int = 16
    width: int = 16
    noise: float = 0.02

    @property
    def held_out(self) -> int:
        if self.test_per_class is not None:
            return self.test_per_class
        return int(round(self.samples_per_class * (self.test_fraction or 0.0)))


@dataclass
class DataConfig:
    dataset: Optional[str] = None  # defaults to <out>/dataset
    frames: int = 8  # k, clip length fed to the backbone
    seq_len: int = 4  # T, short-term features per clip
    modalities: Tuple[str, ...] = ("rgb", "depth")
    augment: Tuple[str, ...] = ()
    label_map: Optional[object] = None  # "synth", or a list of [op, label, new_label]


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synth: Optional[SynthConfig] = None
    backbone: dict = field(default_factory=dict)
    tcn: dict = field(default_factory=dict)
    train_backbone: TrainConfig = field(default_factory=lambda: TrainConfig(stage="backbone"))
    train_tcn: TrainConfig = field(default_factory=lambda: TrainConfig(stage="tcn"))
    tse_samples: int = 4

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data.dataset) if self.data.dataset else self.out_dir / "dataset"

    def backbone_config(self, height: int, width: int, in_channels: int, num_classes: int) -> BackboneConfig:
        return BackboneConfig(frames=self.data.frames, height=height, width=width,
                              in_channels=in_channels, num_classes=num_classes, **self.backbone)

    def tcn_config(self, in_channels: int, num_classes: int) -> TcnConfig:
        return TcnConfig(seq_len=self.data.seq_len, in_channels=in_channels, num_classes=num_classes, **self.tcn)

    def augment_spec(self, num_classes: int) -> Optional[AugmentSpec]:
        if not self.data.augment:
            return None
        lm = self.data.label_map
        if lm == "synth":
            mapping = synth_label_map(num_classes, self.data.augment)
        elif lm is None:
            mapping = None
        else:
            mapping = {(op, int(a)): int(b) for op, a, b in lm}
        return AugmentSpec(tuple(self.data.augment), mapping)

    def validate(self) -> "RunConfig":
        d = self.data
        if d.frames < 1 or d.seq_len < 1 or d.frames % d.seq_len:
            raise ConfigError(f"data.frames={d.frames} must be a positive multiple of data.seq_len={d.seq_len}")
        if not d.modalities:
            raise ConfigError("data.modalities is empty")
        bad = set(d.augment) - set(AUGMENT_OPS)
        if bad:
            raise ConfigError(f"unknown augmentation ops {sorted(bad)}")
        for name, keys, section in (("backbone", _DERIVED_BACKBONE, self.backbone), ("tcn", _DERIVED_TCN, self.tcn)):
            clash = keys & set(section)
            if clash:
                raise ConfigError(f"{name} keys {sorted(clash)} are derived from the data; remove them")
        self.train_backbone.validate()
        self.train_tcn.validate()
        if self.train_backbone.stage != "backbone" or self.train_tcn.stage != "tcn":
            raise ConfigError("train.backbone / train.tcn stage fields are fixed")
        # shapes that do not depend on the data: probe with placeholder sizes
        h, w = (self.synth.height, self.synth.width) if self.synth else (112, 112)
        nc = self.synth.num_classes if self.synth else 2
        self.backbone_config(h, w, 1, nc).validate()
        tcfg = self.tcn_config(1, nc).validate()
        if receptive_field(tcfg) < d.seq_len:
            log.warning("TCN receptive field %d is shorter than seq_len %d", receptive_field(tcfg), d.seq_len)
        if self.synth is not None:
            if self.synth.frames < 1:
                raise ConfigError("synth.frames must be >= 1")
            if self.synth.held_out >= self.synth.samples_per_class:
                raise ConfigError("synth test split leaves no training samples")
            if d.augment:
                self.augment_spec(self.synth.num_classes)
        if self.tse_samples < 0:
            raise ConfigError("report.tse_samples must be >= 0")
        return self


def _build(cls, section: Optional[dict], where: str):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    for key in ("modalities", "augment"):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(section[key])
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {"seed", "out", "data", "synth", "backbone", "tcn", "train", "report"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    train = doc.get("train") or {}
    if set(train) - {"backbone", "tcn"}:
        raise ConfigError("train section accepts only 'backbone' and 'tcn'")
    report = doc.get("report") or {}
    if set(report) - {"tse_samples"}:
        raise ConfigError("report section accepts only 'tse_samples'")
    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        out=str(doc.get("out", "runs/default")),
        data=_build(DataConfig, doc.get("data"), "data"),
        synth=_build(SynthConfig, doc["synth"], "synth") if doc.get("synth") is not None else None,
        backbone=dict(doc.get("backbone") or {}),
        tcn=dict(doc.get("tcn") or {}),
        train_backbone=_build(TrainConfig, {"stage": "backbone", **(train.get("backbone") or {})}, "train.backbone"),
        train_tcn=_build(TrainConfig, {"stage": "tcn", **(train.get("tcn") or {})}, "train.tcn"),
        tse_samples=int(report.get("tse_samples", 4)),
    )
    try:
        BackboneConfig.from_dict({k: v for k, v in cfg.backbone.items()})
        TcnConfig.from_dict({k: v for k, v in cfg.tcn.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, out: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from None
    cfg = parse_config(doc or {})
    if out is not None:
        cfg.out = out
    if seed is not None:
        cfg.seed = seed
    # the top-level seed drives every stage unless a stage pins its own
    for tc, key in ((cfg.train_backbone, "backbone"), (cfg.train_tcn, "tcn")):
        if "seed" not in ((doc or {}).get("train") or {}).get(key, {}) or seed is not None:
            tc.seed = cfg.seed
    return cfg.validate()
