"""Video ingestion: temporal normalization, augmentation, spatial sizing,
modality fusion, on-disk datasets, and a synthetic moving-blob generator.

Frames are numpy arrays ``[n x H x W x C]`` keyed by modality name. Frame
indices reported in ``source_indices`` are 1-based.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import FeatureSequence
from .errors import ConfigError, InputError
from .seeding import derive_seed
from .serialize import load_tensor, save_tensor

MODALITY_ORDER = ("rgb", "depth", "flow")
AUGMENT_OPS = ("reverse", "mirror", "reverse+mirror")


def modality_sort_key(name: str):
    return (MODALITY_ORDER.index(name), "") if name in MODALITY_ORDER else (len(MODALITY_ORDER), name)


@dataclass
class VideoSample:
    frames: Dict[str, np.ndarray]
    label: int
    sample_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise InputError("a video sample needs at least one modality")
        shapes = {m: f.shape for m, f in self.frames.items()}
        for m, s in shapes.items():
            if len(s) != 4:
                raise InputError(f"modality {m!r} frames must be n x H x W x C, got {s}")
        if len({s[:3] for s in shapes.values()}) != 1:
            raise InputError(f"modalities disagree on n, H, W: {shapes}")

    @property
    def n(self) -> int:
        return next(iter(self.frames.values())).shape[0]

    @property
    def modalities(self) -> List[str]:
        return sorted(self.frames, key=modality_sort_key)

    def clip(self, modality: str) -> np.ndarray:
        """One modality as a backbone input ``[C x n x H x W]``."""
        return np.ascontiguousarray(self.frames[modality].transpose(3, 0, 1, 2))


@dataclass
class NormalizedVideo(VideoSample):
    source_indices: List[int] = field(default_factory=list)


# -- temporal normalization --------------------------------------------------------


def select_indices(n: int, k: int, mode: str = "deterministic", rng: Optional[np.random.Generator] = None) -> List[int]:
    """1-based source frame for each of the ``k`` output frames."""
    if n < 1:
        raise InputError("cannot normalize an empty video")
    if k < 1:
        raise ConfigError(f"target length k must be >= 1, got {k}")
    if mode not in ("random", "deterministic"):
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if mode == "random" and rng is None:
        raise ConfigError("random normalization needs an rng")
    if n == k:
        return list(range(1, n + 1))
    if n > k:
        base, rem = divmod(n, k)
        out, start = [], 1
        for i in range(k):
            size = base + 1 if i < rem else base
            if mode == "deterministic":
                out.append(start + (size - 1) // 2)
            else:
                out.append(int(rng.integers(start, start + size)))
            start += size
        return out
    extra = k - n
    if mode == "deterministic":
        chosen = [1 + (j * n) // extra for j in range(extra)]
    else:
        chosen = rng.integers(1, n + 1, size=extra).tolist()
    # each duplicate lands right after its source frame
    return sorted(list(range(1, n + 1)) + chosen)


def temporal_normalize(video: VideoSample, k: int, mode: str = "deterministic", seed: Optional[int] = None) -> NormalizedVideo:
    rng = np.random.default_rng(seed) if mode == "random" else None
    idx = select_indices(video.n, k, mode, rng)
    pick = np.asarray(idx) - 1
    frames = {m: f[pick] for m, f in video.frames.items()}
    return NormalizedVideo(frames=frames, label=video.label, sample_id=video.sample_id, source_indices=idx)


# -- augmentation ----------------------------------------------------------------------


@dataclass
class AugmentSpec:
    ops: Tuple[str, ...] = AUGMENT_OPS
    label_map: Optional[Dict[Tuple[str, int], int]] = None

    def __post_init__(self):
        self.ops = tuple(self.ops)
        bad = set(self.ops) - set(AUGMENT_OPS)
        if bad:
            raise ConfigError(f"unknown augmentation ops {sorted(bad)}")

    def relabel(self, op: str, label: int) -> int:
        if self.label_map is None:
            return label
        try:
            return self.label_map[(op, label)]
        except KeyError:
            raise ConfigError(f"label_map has no entry for ({op!r}, {label})") from None


def reverse(sample: VideoSample) -> VideoSample:
    return VideoSample({m: f[::-1].copy() for m, f in sample.frames.items()}, sample.label, sample.sample_id)


def mirror(sample: VideoSample) -> VideoSample:
    """Flip the width axis of every modality; horizontal flow also changes sign."""
    out = {}
    for m, f in sample.frames.items():
        flipped = f[:, :, ::-1].copy()
        if m == "flow":
            flipped[..., 0] *= -1.0
        out[m] = flipped
    return VideoSample(out, sample.label, sample.sample_id)


def augment(sample: VideoSample, spec: AugmentSpec) -> List[VideoSample]:
    """The original sample followed by one transformed copy per op in ``spec``."""
    out = [sample]
    for op in spec.ops:
        if op == "reverse":
            new = reverse(sample)
        elif op == "mirror":
            new = mirror(sample)
        else:
            new = mirror(reverse(sample))
        new.label = spec.relabel(op, sample.label)
        new.sample_id = f"{sample.sample_id}~{op}"
        out.append(new)
    return out


# -- spatial sizing ----------------------------------------------------------------------


def _axis_weights(src: int, dst: int):
    # half-pixel centres; same size maps every output exactly onto a source pixel
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def spatial_resize(frames: np.ndarray, target: Tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Resize ``[n x H x W x C]`` frames to ``target = (H', W')``."""
    if method != "bilinear":
        raise ConfigError(f"unsupported resize method {method!r}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ConfigError(f"target size must be positive, got {target}")
    _, h, w, _ = frames.shape
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    fy = fy[None, :, None, None]
    fx = fx[None, None, :, None]
    rows = frames[:, y0] * (1.0 - fy) + frames[:, y1] * fy
    return rows[:, :, x0] * (1.0 - fx) + rows[:, :, x1] * fx


def resize_smaller_side(frames: np.ndarray, size: int) -> np.ndarray:
    """Scale so the smaller of H and W becomes ``size``, keeping the aspect ratio."""
    _, h, w, _ = frames.shape
    scale = size / min(h, w)
    return spatial_resize(frames, (max(1, round(h * scale)), max(1, round(w * scale))))


def crop(frames: np.ndarray, top: int, left: int, size: Tuple[int, int]) -> np.ndarray:
    return frames[:, top:top + size[0], left:left + size[1]].copy()


def crop_offset(shape: Tuple[int, int], size: Tuple[int, int], rng: np.random.Generator) -> Tuple[int, int]:
    h, w = shape
    if size[0] > h or size[1] > w:
        raise InputError(f"crop {size} larger than frame {h}x{w}")
    return int(rng.integers(0, h - size[0] + 1)), int(rng.integers(0, w - size[1] + 1))


def random_crop(frames: np.ndarray, size: Tuple[int, int], seed: int) -> np.ndarray:
    top, left = crop_offset(frames.shape[1:3], size, np.random.default_rng(seed))
    return crop(frames, top, left, size)


def random_crop_sample(sample: VideoSample, size: Tuple[int, int], seed: int) -> VideoSample:
    """One offset for every frame of every modality."""
    first = next(iter(sample.frames.values()))
    top, left = crop_offset(first.shape[1:3], size, np.random.default_rng(seed))
    return VideoSample({m: crop(f, top, left, size) for m, f in sample.frames.items()}, sample.label, sample.sample_id)


# -- modality fusion ---------------------------------------------------------------------


def fuse_modalities(seqs: Sequence[FeatureSequence]) -> FeatureSequence:
    """Concatenate per-modality sequences along channels in rgb, depth, flow order."""
    if not seqs:
        raise InputError("nothing to fuse")
    lengths = {s.length for s in seqs}
    labels = {s.label for s in seqs}
    if len(lengths) != 1:
        raise InputError(f"sequence lengths differ: {sorted(lengths)}")
    if len(labels) != 1:
        raise InputError(f"labels differ: {sorted(labels)}")
    ordered = sorted(seqs, key=lambda s: modality_sort_key(s.modality))
    return FeatureSequence(
        np.concatenate([s.values for s in ordered], axis=1),
        label=ordered[0].label,
        modality="+".join(s.modality for s in ordered),
        sample_id=ordered[0].sample_id,
    )


def split_channels(fused: FeatureSequence, channels: Sequence[int]) -> List[np.ndarray]:
    bounds = np.cumsum([0] + list(channels))
    return [fused.values[:, bounds[i]:bounds[i + 1]] for i in range(len(channels))]


# -- synthetic gestures -------------------------------------------------------------------

ARCHETYPES = ("left", "right", "up", "down", "clockwise", "counterclockwise", "expanding", "contracting")

_REVERSE = {"left": "right", "right": "left", "up": "down", "down": "up",
            "clockwise": "counterclockwise", "counterclockwise": "clockwise",
            "expanding": "contracting", "contracting": "expanding"}
_MIRROR = {"left": "right", "right": "left", "up": "up", "down": "down",
           "clockwise": "counterclockwise", "counterclockwise": "clockwise",
           "expanding": "expanding", "contracting": "contracting"}


@dataclass
class BlobMotion:
    """Parameters of one blob trajectory; ``path`` evaluates it."""

    archetype: str
    start: Tuple[float, float]  # (x, y) for linear motion, circle centre otherwise
    speed: float
    sigma: float
    radius: float = 3.0
    phase: float = 0.0

    def path(self, n: int, width: int):
        """Per-frame blob centres ``[n x 2]`` as (x, y) and widths ``[n]``."""
        u = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
        x0, y0 = self.start
        span = self.speed * 0.4 * width
        xs, ys = np.full(n, x0), np.full(n, y0)
        sig = np.full(n, self.sigma)
        a = self.archetype
        if a == "left":
            xs = x0 - span * u
        elif a == "right":
            xs = x0 + span * u
        elif a == "up":
            ys = y0 - span * u
        elif a == "down":
            ys = y0 + span * u
        elif a in ("clockwise", "counterclockwise"):
            # image y grows downward, so increasing angle turns clockwise on screen
            sweep = 1.5 * math.pi * self.speed * (1 if a == "clockwise" else -1)
            theta = self.phase + sweep * u
            xs = x0 + self.radius * np.cos(theta)
            ys = y0 + self.radius * np.sin(theta)
        elif a == "expanding":
            sig = self.sigma * (1.0 + self.speed * u)
        elif a == "contracting":
            sig = self.sigma * (1.0 + self.speed * (1.0 - u))
        else:
            raise ConfigError(f"unknown archetype {a!r}")
        return np.stack([xs, ys], axis=1), sig


def render_blobs(centres: np.ndarray, sigmas: np.ndarray, height: int, width: int) -> np.ndarray:
    """Gaussian blobs of peak 1, one per frame: ``[n x H x W]``."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    d2 = (xx[None] - centres[:, 0, None, None]) ** 2 + (yy[None] - centres[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2.0 * sigmas[:, None, None] ** 2))


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    # frames too small for the margin: fall back to the middle of the range
    return float(rng.uniform(lo, hi)) if hi > lo else (lo + hi) / 2.0


def random_motion(archetype: str, height: int, width: int, rng: np.random.Generator) -> BlobMotion:
    sigma = float(rng.uniform(1.0, 1.3))
    speed = float(rng.uniform(0.7, 1.0))
    margin = 3.0 * sigma
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    span = speed * 0.4 * width
    if archetype in ("left", "right", "up", "down"):
        extent = width if archetype in ("left", "right") else height
        lo = margin + (span if archetype in ("left", "up") else 0.0)
        hi = extent - 1 - margin - (span if archetype in ("right", "down") else 0.0)
        along = _uniform(rng, lo, hi)
        other = height if archetype in ("left", "right") else width
        across = _uniform(rng, margin, other - 1 - margin)
        start = (along, across) if archetype in ("left", "right") else (across, along)
        return BlobMotion(archetype, start, speed, sigma)
    jitter = rng.uniform(-0.5, 0.5, size=2)
    start = (cx + float(jitter[0]), cy + float(jitter[1]))
    if archetype in ("clockwise", "counterclockwise"):
        radius = float(rng.uniform(0.18, 0.22) * min(height, width))
        return BlobMotion(archetype, start, speed, sigma, radius=radius, phase=float(rng.uniform(0, 2 * math.pi)))
    return BlobMotion(archetype, start, speed, sigma)


def synth_gestures(
    num_classes: int,
    samples_per_class: int,
    shape: Tuple[int, int, int] = (8, 16, 16),
    seed: int = 0,
    noise: float = 0.02,
) -> List[VideoSample]:
    """Moving-blob videos, class ``i`` following ``ARCHETYPES[i]``.

    Each sample carries an ``rgb`` intensity channel and a ``depth`` channel
    equal to ``1 - intensity``.
    """
    if not 1 <= num_classes <= len(ARCHETYPES):
        raise ConfigError(f"synthetic data supports 1..{len(ARCHETYPES)} classes, got {num_classes}")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    n, h, w = shape
    out = []
    for label in range(num_classes):
        for j in range(samples_per_class):
            sample_id = f"c{label}_s{j:03d}"
            rng = np.random.default_rng(derive_seed(seed, "synth", sample_id))
            motion = random_motion(ARCHETYPES[label], h, w, rng)
            centres, sigmas = motion.path(n, w)
            frames = render_blobs(centres, sigmas, h, w)
            if noise:
                frames = frames + noise * rng.standard_normal(frames.shape)
            rgb = frames[..., None]
            out.append(VideoSample({"rgb": rgb, "depth": 1.0 - rgb}, label, sample_id))
    return out


def synth_label_map(num_classes: int, ops: Iterable[str] = AUGMENT_OPS) -> Dict[Tuple[str, int], int]:
    """Label remapping for the synthetic archetypes under each augmentation op."""
    names = ARCHETYPES[:num_classes]
    index = {a: i for i, a in enumerate(names)}
    mapping = {}
    for op in ops:
        for a in names:
            b = a
            if op in ("reverse", "reverse+mirror"):
                b = _REVERSE[b]
            if op in ("mirror", "reverse+mirror"):
                b = _MIRROR[b]
            if b not in index:
                raise ConfigError(f"{op} turns {a!r} into {b!r}, which is not among the first {num_classes} classes")
            mapping[(op, index[a])] = index[b]
    return mapping


def stratified_split(samples: Sequence[VideoSample], test_per_class: int, seed: int) -> Dict[str, List[str]]:
    by_class: Dict[int, List[str]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s.sample_id)
    train, test = [], []
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if test_per_class >= len(ids):
            raise ConfigError(f"class {label} has {len(ids)} samples, cannot hold out {test_per_class}")
        order = np.random.default_rng(derive_seed(seed, "split", label)).permutation(len(ids))
        test += [ids[i] for i in sorted(order[:test_per_class])]
        train += [ids[i] for i in sorted(order[test_per_class:])]
    return {"train": train, "test": test}


# -- on-disk layout -------------------------------------------------------------------------


def write_dataset(root, samples: Sequence[VideoSample], splits: Mapping[str, List[str]],
                  class_names: Sequence[str]) -> Path:
    """One directory per sample with ``<modality>.stcn`` files and ``meta.json``,
    plus ``manifest.json`` at the root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = root / s.sample_id
        d.mkdir(exist_ok=True)
        for m, f in s.frames.items():
            save_tensor(d / f"{m}.stcn", f)
        meta = {"sample_id": s.sample_id, "label": int(s.label), "n": s.n, "modalities": s.modalities}
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = {
        "num_classes": len(class_names),
        "class_names": list(class_names),
        "splits": {k: list(v) for k, v in splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise InputError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def read_sample(root, sample_id: str) -> VideoSample:
    d = Path(root) / sample_id
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise InputError(f"sample {sample_id!r} listed in the manifest has no {meta_path}")
    meta = json.loads(meta_path.read_text())
    frames = {m: load_tensor(d / f"{m}.stcn") for m in meta["modalities"]}
    sample = VideoSample(frames, int(meta["label"]), meta["sample_id"])
    if sample.n != meta["n"]:
        raise InputError(f"sample {sample_id!r}: meta says n={meta['n']}, files hold {sample.n} frames")
    return sample


def read_split(root, split: str) -> List[VideoSample]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise InputError(f"manifest has no split {split!r}")
    return [read_sample(root, sid) for sid in manifest["splits"][split]]
