"""Temporal convolutional network with temporal squeeze-and-excitation gates.

Feature sequences enter as ``[N x T x C]``. Each residual block first gates
its input per time step (squeeze over channels, two-layer excitation over
time, rescale), then runs ``convs_per_block`` dilated causal convolutions
with ReLU and dropout, and adds the block input back (through a 1x1
convolution when the channel count changes).

The excitation mixes all time steps through dense ``T x T`` maps, so the
gates themselves look at the whole sequence. Given fixed gates, every block
is strictly causal.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, InputError
from .nn import CausalConv1d, Linear, Module
from .tensor import Tensor, as_tensor, mul, reshape

log = logging.getLogger(__name__)


@dataclass
class TcnConfig:
    seq_len: int = 8
    in_channels: int = 64
    channels: Tuple[int, ...] = (64, 64, 64)
    kernel_size: int = 2
    dilations: Optional[Tuple[int, ...]] = None  # defaults to 1, 2, 4, ...
    convs_per_block: int = 2
    tse_reduction: int = 2
    use_tse: bool = True
    dropout: float = 0.2
    num_classes: int = 19

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.dilations is None:
            self.dilations = tuple(2 ** i for i in range(len(self.channels)))
        self.dilations = tuple(int(d) for d in self.dilations)

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def tse_hidden(self) -> int:
        return math.ceil(self.seq_len / self.tse_reduction)

    def validate(self) -> "TcnConfig":
        if self.levels < 1:
            raise ConfigError("a TCN needs at least one level")
        if len(self.dilations) != self.levels:
            raise ConfigError(f"{self.levels} levels but {len(self.dilations)} dilations")
        if min(self.dilations) < 1 or self.kernel_size < 1 or self.convs_per_block < 1:
            raise ConfigError("dilations, kernel_size and convs_per_block must be positive")
        if self.tse_reduction < 1 or self.seq_len < 1:
            raise ConfigError("tse_reduction and seq_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        rf = receptive_field(self)
        if rf < self.seq_len:
            log.warning("receptive field %d does not cover sequence length %d", rf, self.seq_len)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TcnConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown tcn config keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(cfg: TcnConfig) -> int:
    return 1 + sum(cfg.convs_per_block * (cfg.kernel_size - 1) * d for d in cfg.dilations)


# -- temporal squeeze-and-excitation -----------------------------------------------


def tse_squeeze(x: Tensor) -> Tensor:
    """Channel mean per time step: ``[..., T, C] -> [..., T]``."""
    return as_tensor(x).mean(axis=-1)


def tse_excite(z: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """``sigmoid(W2 relu(W1 z))`` for ``z`` of shape [T] or [N x T]; no biases."""
    z = as_tensor(z)
    single = z.ndim == 1
    zb = reshape(z, (1, -1)) if single else z
    s = ops.sigmoid(ops.matmul(ops.relu(ops.matmul(zb, w1.T)), w2.T))
    return reshape(s, (-1,)) if single else s


def tse_rescale(x: Tensor, s: Tensor) -> Tensor:
    """Scale row ``t`` of ``x`` ([..., T, C]) by ``s[..., t]``."""
    s = as_tensor(s)
    return mul(as_tensor(x), reshape(s, s.shape + (1,)))


class TSE(Module):
    def __init__(self, seq_len: int, reduction: int, rng: np.random.Generator):
        hidden = math.ceil(seq_len / reduction)
        self.w1 = Tensor(rng.standard_normal((hidden, seq_len)) * math.sqrt(2.0 / seq_len), requires_grad=True)
        self.w2 = Tensor(rng.standard_normal((seq_len, hidden)) * math.sqrt(1.0 / hidden), requires_grad=True)

    def gates(self, x: Tensor) -> Tensor:
        return tse_excite(tse_squeeze(x), self.w1, self.w2)


@dataclass
class TemporalWeights:
    s: np.ndarray  # [T], each in (0, 1)
    layer_index: int


# -- residual blocks ------------------------------------------------------------------


class TemporalBlock(Module):
    def __init__(self, c_in: int, c_out: int, dilation: int, cfg: TcnConfig, rng: np.random.Generator):
        self.tse = TSE(cfg.seq_len, cfg.tse_reduction, rng) if cfg.use_tse else None
        convs, c = [], c_in
        for _ in range(cfg.convs_per_block):
            convs.append(CausalConv1d(c, c_out, cfg.kernel_size, dilation, rng))
            c = c_out
        self.convs = convs
        self.downsample = CausalConv1d(c_in, c_out, 1, 1, rng) if c_in != c_out else None
        self.dropout = cfg.dropout
        self.dilation = dilation

    def __call__(self, x: Tensor, training: bool = False, rng=None,
                 gates: Optional[Tensor] = None, record: Optional[list] = None) -> Tensor:
        return tcn_block(x, self, training, rng, gates, record)


def tcn_block(x: Tensor, block: TemporalBlock, training: bool = False, rng=None,
              gates: Optional[Tensor] = None, record: Optional[list] = None) -> Tensor:
    """One residual level on ``[N x T x C_in]`` -> ``[N x T x C_out]``.

    ``gates`` ([N x T]) overrides the TSE output; ``record`` collects the
    gates actually applied.
    """
    x = as_tensor(x)
    u = x
    if gates is None and block.tse is not None:
        gates = block.tse.gates(x)
    if gates is not None:
        gates = as_tensor(gates)
        if record is not None:
            record.append(gates.data.copy())
        u = tse_rescale(x, gates)
    elif record is not None:
        record.append(np.ones(x.shape[:2]))
    h = u.transpose(0, 2, 1)
    for conv in block.convs:
        h = ops.dropout(ops.relu(conv(h)), block.dropout, training, rng)
    residual = x.transpose(0, 2, 1)
    if block.downsample is not None:
        residual = block.downsample(residual)
    return (h + residual).transpose(0, 2, 1)


class TCN(Module):
    def __init__(self, cfg: TcnConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        blocks, c = [], cfg.in_channels
        for c_out, d in zip(cfg.channels, cfg.dilations):
            blocks.append(TemporalBlock(c, c_out, d, cfg, rng))
            c = c_out
        self.blocks = blocks
        self.head = Linear(c, cfg.num_classes, rng, std=0.01)

    def _check(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.cfg.in_channels:
            raise InputError(f"expected N x T x {self.cfg.in_channels} features, got {x.shape}")
        if x.shape[1] != self.cfg.seq_len:
            raise InputError(f"sequence length {x.shape[1]} does not match the model's T={self.cfg.seq_len}")
        return x

    def sequence(self, x, training: bool = False, rng=None,
                 gates: Optional[Sequence[Tensor]] = None, record: Optional[list] = None) -> Tensor:
        """Output sequence of the last level, ``[N x T x C_L]``."""
        h = self._check(as_tensor(x))
        for i, block in enumerate(self.blocks):
            h = block(h, training, rng, None if gates is None else gates[i], record)
        return h

    def logits(self, x, training: bool = False, rng=None, gates=None, record=None) -> Tensor:
        y_last = self.sequence(x, training, rng, gates, record)[:, -1, :]
        return self.head(y_last)

    def __call__(self, x, training: bool = False, rng=None, gates=None) -> Tensor:
        return ops.softmax(self.logits(x, training, rng, gates), axis=1)


def tcn_classify(x, model: TCN) -> np.ndarray:
    """Class probabilities ``[N x K]`` (or ``[K]`` for a single [T x C] sequence), eval mode."""
    arr = x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    probs = model(arr[None] if single else arr).data
    return probs[0] if single else probs


def dump_temporal_weights(x, model: TCN) -> List[List[TemporalWeights]]:
    """Gate vectors of every level for each sequence in ``x`` ([N x T x C] or [T x C]).

    Returns one list per sequence, each holding ``levels`` entries.
    """
    arr = x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    record: list = []
    model.sequence(arr, training=False, record=record)
    return [
        [TemporalWeights(s=record[level][n].copy(), layer_index=level) for level in range(len(record))]
        for n in range(arr.shape[0])
    ]
