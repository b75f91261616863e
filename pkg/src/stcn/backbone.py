"""3D-DenseNet short-term feature extractor.

Layout is ``N x C x T x H x W`` and every 3-tuple is ``(T, H, W)``; the
Table-1 style "5x5x5 conv, stride 2x2x1" therefore becomes
``stem_stride=(1, 2, 2)``. No stage ever strides or pools over time, so a
``k``-frame clip yields ``k`` feature vectors.

Temporal padding of the 3x3x3 and 5x5x5 convolutions replicates the edge
frames instead of inserting zeros. A clip that is constant over time thus
produces identical per-frame features.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, InputError
from .nn import BatchNorm, Conv3d, Linear, Module
from .ops import matmul
from .tensor import Tensor, as_tensor, concat

Triple = Tuple[int, int, int]


@dataclass
class BackboneConfig:
    frames: int = 32
    height: int = 112
    width: int = 112
    in_channels: int = 3
    block_layers: Tuple[int, ...] = (6, 12, 24, 16)
    growth_rate: int = 12
    compression: float = 0.5
    dropout: float = 0.2
    num_classes: int = 19
    stem_channels: Optional[int] = None  # defaults to 2 * growth_rate
    bottleneck_factor: int = 4
    stem_kernel: Triple = (5, 5, 5)
    stem_stride: Triple = (1, 2, 2)
    stem_padding: Triple = (2, 2, 2)
    pool_window: Triple = (1, 3, 3)
    pool_stride: Triple = (1, 2, 2)
    pool_padding: Triple = (0, 1, 1)
    transition_window: Triple = (1, 2, 2)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("block_layers", "stem_kernel", "stem_stride", "stem_padding", "pool_window",
                     "pool_stride", "pool_padding", "transition_window"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def stem_out(self) -> int:
        return self.stem_channels if self.stem_channels is not None else 2 * self.growth_rate

    @property
    def feature_channels(self) -> int:
        return stage_shapes(self)[-1].channels

    def validate(self) -> "BackboneConfig":
        if not self.block_layers or min(self.block_layers) < 1:
            raise ConfigError(f"block_layers must be non-empty with counts >= 1, got {self.block_layers}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.growth_rate < 1 or self.frames < 1:
            raise ConfigError("growth_rate and frames must be positive")
        if self.stem_stride[0] != 1 or self.pool_stride[0] != 1 or self.transition_window[0] != 1:
            raise ConfigError("temporal strides must all be 1")
        if self.pool_window[0] != 1 or self.pool_padding[0] != 0:
            raise ConfigError("stem pool must not pool or pad over time")
        if self.stem_kernel[0] != 2 * self.stem_padding[0] + 1:
            raise ConfigError("stem temporal padding must preserve the frame count")
        stage_shapes(self)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Stage:
    name: str
    channels: int
    frames: int
    height: int
    width: int


def stage_shapes(cfg: BackboneConfig) -> List[Stage]:
    """Per-stage (C, T, H, W) by pure shape arithmetic, no tensors involved."""
    t, h, w = cfg.frames, cfg.height, cfg.width
    ext = lambda size, k, s, p: ops.out_extent(size, k, s, p)  # noqa: E731
    t, h, w = (ext(v, k, s, p) for v, k, s, p in zip((t, h, w), cfg.stem_kernel, cfg.stem_stride, cfg.stem_padding))
    c = cfg.stem_out
    stages = [Stage("stem", c, t, h, w)]
    t, h, w = (ext(v, k, s, p) for v, k, s, p in zip((t, h, w), cfg.pool_window, cfg.pool_stride, cfg.pool_padding))
    if min(h, w) < 1:
        raise ConfigError(f"input {cfg.height}x{cfg.width} collapses in the stem")
    stages.append(Stage("stem_pool", c, t, h, w))
    for i, n in enumerate(cfg.block_layers):
        c += n * cfg.growth_rate
        final = i == len(cfg.block_layers) - 1
        stages.append(Stage("block_final" if final else f"block{i + 1}", c, t, h, w))
        if final:
            break
        if h < 2 or w < 2:
            raise ConfigError(
                f"spatial extent {h}x{w} before transition {i + 1} is below 2; use a larger input or fewer blocks"
            )
        c = int(np.floor(cfg.compression * c))
        _, kh, kw = cfg.transition_window
        h, w = ext(h, kh, kh, 0), ext(w, kw, kw, 0)
        stages.append(Stage(f"transition{i + 1}", c, t, h, w))
    return stages


# -- layers -------------------------------------------------------------------


class DenseLayer(Module):
    """BN-ReLU-Conv1x1x1 (to ``bottleneck_factor * growth``) then
    BN-ReLU-Conv3x3x3 (to ``growth``), dropout, and channel concatenation."""

    def __init__(self, c_in: int, cfg: BackboneConfig, rng: np.random.Generator):
        width = cfg.bottleneck_factor * cfg.growth_rate
        self.c_in = c_in
        self.norm1 = BatchNorm(c_in, cfg.bn_momentum, cfg.bn_eps)
        self.conv1 = Conv3d(c_in, width, 1, rng)
        self.norm2 = BatchNorm(width, cfg.bn_momentum, cfg.bn_eps)
        self.conv2 = Conv3d(width, cfg.growth_rate, 3, rng, padding=(0, 1, 1))
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return dense_layer(x, self, training, rng)


def dense_layer(x: Tensor, layer: DenseLayer, training: bool = False, rng=None) -> Tensor:
    if x.shape[1] != layer.c_in:
        raise ConfigError(f"dense layer built for {layer.c_in} channels got input with {x.shape[1]}")
    y = layer.conv1(ops.relu(layer.norm1(x, training)))
    y = ops.edge_pad_time(ops.relu(layer.norm2(y, training)), 1)
    y = ops.dropout(layer.conv2(y), layer.dropout, training, rng)
    return concat([x, y], axis=1)


class Transition(Module):
    """BN-ReLU-Conv1x1x1 to ``floor(compression * C)`` channels, then spatial
    average pooling; the temporal extent is untouched."""

    def __init__(self, c_in: int, cfg: BackboneConfig, rng: np.random.Generator):
        self.c_out = int(np.floor(cfg.compression * c_in))
        if self.c_out < 1:
            raise ConfigError(f"compression {cfg.compression} leaves no channels from {c_in}")
        self.norm = BatchNorm(c_in, cfg.bn_momentum, cfg.bn_eps)
        self.conv = Conv3d(c_in, self.c_out, 1, rng)
        self.window = cfg.transition_window

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return transition(x, self, training)


def transition(x: Tensor, layer: Transition, training: bool = False) -> Tensor:
    if x.shape[3] < 2 or x.shape[4] < 2:
        raise ConfigError(
            f"transition needs H, W >= 2, got {x.shape[3]}x{x.shape[4]}; use a larger input or fewer blocks"
        )
    y = layer.conv(ops.relu(layer.norm(x, training)))
    return ops.pool3d(y, "average", layer.window, layer.window)


@dataclass
class GlobalFeature:
    """Per-frame features after global spatial pooling: ``values`` is [k x C]."""

    values: np.ndarray

    @property
    def k_time(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


class DenseNet3D(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.stem = Conv3d(cfg.in_channels, cfg.stem_out, cfg.stem_kernel, rng,
                           stride=cfg.stem_stride, padding=(0,) + cfg.stem_padding[1:])
        self.stem_norm = BatchNorm(cfg.stem_out, cfg.bn_momentum, cfg.bn_eps)
        c = cfg.stem_out
        self.blocks: List[_Block] = []
        self.transitions: List[Transition] = []
        for i, n in enumerate(cfg.block_layers):
            block = []
            for _ in range(n):
                block.append(DenseLayer(c, cfg, rng))
                c += cfg.growth_rate
            self.blocks.append(_Block(block))
            if i < len(cfg.block_layers) - 1:
                self.transitions.append(Transition(c, cfg, rng))
                c = self.transitions[-1].c_out
        self.final_norm = BatchNorm(c, cfg.bn_momentum, cfg.bn_eps)
        self.feature_channels = c
        # small init so the untrained head predicts near-uniformly
        self.head = Linear(c, cfg.num_classes, rng, std=0.01)

    def features(self, video, training: bool = False, rng=None, stages: Optional[list] = None) -> Tensor:
        """Global spatio-temporal features ``[N x k x C]`` of a clip batch ``[N x C_in x k x H x W]``.

        If ``stages`` is a list, the 5-D activation after every stage is appended to it.
        """
        x = as_tensor(video)
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise InputError(f"expected video of shape N x {cfg.in_channels} x T x H x W, got {x.shape}")
        if x.shape[2] != cfg.frames:
            raise InputError(f"video has {x.shape[2]} frames, backbone expects k={cfg.frames}")
        record = stages.append if stages is not None else (lambda _: None)
        x = self.stem(ops.edge_pad_time(x, cfg.stem_padding[0]))
        x = ops.relu(self.stem_norm(x, training))
        record(x)
        x = ops.pool3d(x, "max", cfg.pool_window, cfg.pool_stride, cfg.pool_padding)
        record(x)
        for i, block in enumerate(self.blocks):
            for layer in block.layers:
                x = layer(x, training, rng)
            record(x)
            if i < len(self.transitions):
                x = self.transitions[i](x, training)
                record(x)
        x = ops.relu(self.final_norm(x, training))
        pooled = x.mean(axis=(3, 4))  # N x C x T
        return pooled.transpose(0, 2, 1)

    def classify(self, features: Tensor) -> Tensor:
        return classify_head(features, self.head)

    def __call__(self, video, training: bool = False, rng=None) -> Tensor:
        return self.classify(self.features(video, training, rng))


class _Block(Module):
    def __init__(self, layers: List[DenseLayer]):
        self.layers = layers


def classify_head(features: Tensor, head: Linear) -> Tensor:
    """Global temporal average pooling, affine map, softmax: ``[N x k x C] -> [N x K]``."""
    return ops.softmax(head(features.mean(axis=1)), axis=1)


class FeatureExtractor:
    """A backbone with its temporal pooling and classifier head cut off.

    Shares the backbone's parameter tensors and always runs in eval mode
    (running batch-norm statistics, no dropout).
    """

    def __init__(self, backbone: DenseNet3D):
        self.backbone = backbone
        self.cfg = backbone.cfg

    @property
    def feature_channels(self) -> int:
        return self.backbone.feature_channels

    def __call__(self, video) -> Tensor:
        return self.backbone.features(video, training=False)

    def extract(self, clip: np.ndarray) -> GlobalFeature:
        """Features of one clip ``[C_in x k x H x W]``."""
        return GlobalFeature(self(np.asarray(clip)[None]).data[0].copy())


def truncate(backbone: DenseNet3D) -> FeatureExtractor:
    return FeatureExtractor(backbone)


# -- local temporal average pooling ----------------------------------------------


@dataclass
class FeatureSequence:
    values: np.ndarray  # T x C
    label: int = -1
    modality: str = ""
    sample_id: str = ""

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def ltap_windows(k: int, T: int) -> List[Tuple[int, int]]:
    """Inclusive 0-based frame ranges of the ``T`` overlapping pooling windows.

    With ``w = k // T`` the window of step ``t`` (1-based) covers frames
    ``t*w - w .. t*w + w - 1`` (1-based), clipped to the clip.
    """
    if T < 1 or k % T:
        raise ConfigError(f"frame count k={k} is not a multiple of T={T}")
    w = k // T
    out = []
    for t in range(1, T + 1):
        lo, hi = max(t * w - w, 1), min(t * w + w - 1, k)
        out.append((lo - 1, hi - 1))
    return out


def ltap_matrix(k: int, T: int) -> np.ndarray:
    A = np.zeros((T, k))
    for t, (lo, hi) in enumerate(ltap_windows(k, T)):
        A[t, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return A


def ltap(feature, T: int, label: int = -1, modality: str = "", sample_id: str = "") -> FeatureSequence:
    """Pool a ``GlobalFeature`` (or a [k x C] array) into ``T`` short-term features."""
    values = feature.values if isinstance(feature, GlobalFeature) else np.asarray(feature, dtype=np.float64)
    A = ltap_matrix(values.shape[0], T)
    return FeatureSequence(A @ values, label=label, modality=modality, sample_id=sample_id)


def ltap_tensor(features: Tensor, T: int) -> Tensor:
    """Differentiable LTAP over a single ``[k x C]`` tensor."""
    return matmul(Tensor(ltap_matrix(features.shape[0], T)), features)

