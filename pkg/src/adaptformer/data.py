"""Deterministic synthetic image tasks.

Each image is a gray oriented grating plus a uniform color cast, a faint
Gaussian blob and additive noise. Two discrete latents drive the labels: the
orientation index ``o`` (``num_classes`` values) and a warmth bit ``w``
choosing which half of the hue circle the cast comes from (cos h > 0 or
< 0). Phase, frequency, blob placement and the hue angle inside its half
are continuous nuisances.

Shifts:
    none           label = o
    hue-rotation   label = o, hue rotated by 60 degrees
    texture-swap   label = o, square-wave grating instead of sine
    label-regroup  same images as ``none``; label = (o + w) mod num_classes,
                   i.e. o XOR w for two classes. Frozen source features carry
                   both factors linearly, so a linear head cannot express the
                   regrouped label while a small nonlinear correction can.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import load, save
from .tensor import Rng

SHIFTS = ("none", "hue-rotation", "texture-swap", "label-regroup")

# orthonormal chroma plane, orthogonal to gray (1, 1, 1)
_CHROMA = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]])
_CHROMA /= np.linalg.norm(_CHROMA, axis=1, keepdims=True)


@dataclass(frozen=True)
class TaskSpec:
    name: str = "source"
    image_size: int = 16
    channels: int = 3
    num_classes: int = 4
    train_count: int = 512
    eval_count: int = 256
    seed: int = 0
    shift: str = "none"
    noise: float = 0.05

    def validate(self) -> None:
        if self.shift not in SHIFTS:
            raise ValueError(f"unknown shift {self.shift!r}; expected one of {SHIFTS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.train_count, self.eval_count) < self.num_classes:
            raise ValueError(
                f"train/eval counts ({self.train_count}, {self.eval_count}) must be "
                f">= num_classes ({self.num_classes})")
        if self.channels != 3:
            raise ValueError("only 3-channel images are generated")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W, c] or [n, F, H, W, c]
    labels: np.ndarray  # [n] int64
    latents: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_frames(self) -> int:
        return 1 if self.images.ndim == 4 else self.images.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx],
                       {k: v[idx] for k, v in self.latents.items()})


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    eval: Dataset


def _balanced_latents(rng: Rng, n: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    # cycle the joint (o, w) grid so o, w and (o + w) mod C are each balanced within 1
    k = np.arange(n) % (2 * num_classes)
    k = k[rng.permutation(n)]
    return k % num_classes, k // num_classes


def _render(spec: TaskSpec, orient, hue, phase, freq, blob_xy, noise) -> np.ndarray:
    h = spec.image_size
    n = len(orient)
    yy, xx = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    theta = orient * np.pi / spec.num_classes
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy) / h
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    if spec.shift == "texture-swap":
        wave = np.sign(wave)
    if spec.shift == "hue-rotation":
        hue = hue + np.pi / 3
    cast = 0.18 * (np.cos(hue)[:, None] * _CHROMA[0] + np.sin(hue)[:, None] * _CHROMA[1])
    img = 0.5 + 0.3 * wave[..., None] + cast[:, None, None, :]
    d2 = (xx[None] - blob_xy[:, 0, None, None]) ** 2 + (yy[None] - blob_xy[:, 1, None, None]) ** 2
    img = img + 0.1 * np.exp(-d2 / (2 * (h / 8) ** 2))[..., None]
    img = img + noise
    return np.clip(img, 0.0, 1.0).reshape(n, h, h, spec.channels)


def _draw_split(spec: TaskSpec, rng: Rng, n: int) -> Dataset:
    orient, warm = _balanced_latents(rng, n, spec.num_classes)
    # hue spans 80% of its half circle, away from the cos h = 0 boundary
    hue = np.pi * (warm - 0.4 + 0.8 * rng.uniform(n))
    phase = rng.uniform(n, 0.0, 2 * np.pi)
    freq = rng.uniform(n, 1.5, 2.5)
    blob_xy = rng.uniform((n, 2), 0.0, spec.image_size)
    noise = rng.normal((n, spec.image_size, spec.image_size, spec.channels), std=spec.noise)
    images = _render(spec, orient, hue, phase, freq, blob_xy, noise)
    if spec.shift == "label-regroup":
        labels = (orient + warm) % spec.num_classes
    else:
        labels = orient.copy()
    latents = dict(orient=orient, warm=warm, hue=hue, phase=phase, freq=freq, blob_xy=blob_xy)
    return Dataset(images, labels.astype(np.int64), latents)


def generate(spec: TaskSpec) -> TaskData:
    """Train and eval splits drawn from disjoint child streams of ``spec.seed``."""
    spec.validate()
    root = Rng(spec.seed)
    return TaskData(spec, _draw_split(spec, root.spawn(0), spec.train_count),
                    _draw_split(spec, root.spawn(1), spec.eval_count))


def _clip_frames(spec: TaskSpec, base: Dataset, num_frames: int, rng: Rng) -> Dataset:
    lat = base.latents
    n = len(base)
    drift = rng.uniform(n, -0.6, 0.6)
    step = rng.normal((n, 2), std=0.75)
    frames = [base.images]
    for t in range(1, num_frames):
        noise = rng.normal(base.images.shape, std=spec.noise)
        frames.append(_render(spec, lat["orient"], lat["hue"], lat["phase"] + t * drift,
                              lat["freq"], lat["blob_xy"] + t * step, noise))
    return Dataset(np.stack(frames, axis=1), base.labels.copy(), dict(lat))


def frames_variant(spec: TaskSpec, num_frames: int) -> TaskData:
    """Clips of ``num_frames`` correlated frames: the grating drifts in phase and
    the blob wanders; frame 0 is the still image and the label is shared."""
    if num_frames not in (1, 2, 4, 8):
        raise ValueError(f"num_frames must be one of 1, 2, 4, 8; got {num_frames}")
    data = generate(spec)
    if num_frames == 1:
        return data
    root = Rng(spec.seed)
    return TaskData(spec, _clip_frames(spec, data.train, num_frames, root.spawn(10)),
                    _clip_frames(spec, data.eval, num_frames, root.spawn(11)))


def with_shift(spec: TaskSpec, shift: str, **changes) -> TaskSpec:
    return replace(spec, shift=shift, **changes)


def export_dataset(data: Dataset, path, spec: TaskSpec | None = None) -> str:
    """Write images, labels and latents to one container file; returns its hash."""
    tensors = {"images": data.images, "labels": data.labels.astype(np.float64)}
    tensors.update({f"latents.{k}": np.asarray(v, dtype=np.float64) for k, v in data.latents.items()})
    meta = {"kind": "dataset", "count": len(data)}
    if spec is not None:
        meta["task"] = spec.to_dict()
    return save(tensors, path, meta)


def import_dataset(path) -> Dataset:
    ckpt = load(path)
    t = ckpt.tensors
    latents = {k.split(".", 1)[1]: v for k, v in t.items() if k.startswith("latents.")}
    for k in ("orient", "warm"):
        if k in latents:
            latents[k] = latents[k].astype(np.int64)
    return Dataset(t["images"], t["labels"].astype(np.int64), latents)
