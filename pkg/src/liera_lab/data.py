"""Synthetic image classification tasks.

Every sample is a pure function of ``(task, index)``: sample ``i`` has label
``i % n_classes`` and draws its randomness from a stream keyed by
``(seed, i)``.  Train samples use indices ``0..n_train-1`` and validation
samples the indices that follow, so the splits never overlap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import FormatError
from .rng import Rng, hash_seed

KINDS = ("bars", "blobs")
TRANSFORMS = {"shift": ("dx", "dy"), "rotate90": (), "noise": ("sigma",)}


@dataclass(frozen=True)
class Transform:
    kind: str
    dx: int = 0
    dy: int = 0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "noise" and not self.sigma > 0:
            raise ValueError("noise sigma must be positive")

    def to_json(self) -> dict:
        return {"kind": self.kind, **{k: getattr(self, k) for k in TRANSFORMS[self.kind]}}

    @classmethod
    def from_json(cls, d: dict) -> "Transform":
        d = dict(d)
        kind = d.pop("kind")
        unknown = set(d) - set(TRANSFORMS.get(kind, ()))
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)} for transform {kind!r}")
        return cls(kind, **d)


def shift(dx: int, dy: int) -> Transform:
    return Transform("shift", dx=dx, dy=dy)


def noise(sigma: float) -> Transform:
    return Transform("noise", sigma=sigma)


def rotate90() -> Transform:
    return Transform("rotate90")


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 4
    image_size: tuple = (1, 8, 8)
    kind: str = "bars"
    transforms: tuple = ()
    seed: int = 1
    n_train: int = 512
    n_val: int = 256

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(d) for d in self.image_size))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator {self.kind!r}")
        if self.n_classes < 2 or len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ValueError("need n_classes >= 2 and a (C, H, W) image size")
        if self.kind == "bars" and self.image_size[1] < math.ceil(self.n_classes / 2):
            raise ValueError("image too small for that many bar classes")
        if self.n_train < self.n_classes or self.n_val < self.n_classes:
            raise ValueError("n_train and n_val must be >= n_classes")

    def with_transforms(self, *transforms) -> "TaskSpec":
        return TaskSpec(self.n_classes, self.image_size, self.kind, tuple(transforms), self.seed, self.n_train, self.n_val)

    def to_json(self) -> dict:
        return dict(
            n_classes=self.n_classes,
            image_size=list(self.image_size),
            kind=self.kind,
            transforms=[t.to_json() for t in self.transforms],
            seed=self.seed,
            n_train=self.n_train,
            n_val=self.n_val,
        )

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown task keys {sorted(unknown)}")
        d["transforms"] = tuple(Transform.from_json(t) for t in d.get("transforms", ()))
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    task: TaskSpec = field(default_factory=TaskSpec)

    def __len__(self):
        return len(self.labels)


def _bars(spec: TaskSpec, label: int, rng: Rng) -> np.ndarray:
    c, h, w = spec.image_size
    n_bands = math.ceil(spec.n_classes / 2)
    vertical = label % 2 == 1
    extent = w if vertical else h
    width = extent // n_bands
    pos = (label // 2) * width + int(rng.integers(width, 1)[0])
    amp = 0.5 + rng.uniform(1)[0]
    img = 0.05 * rng.normal(c * h * w).reshape(c, h, w)
    if vertical:
        img[:, :, pos] += amp
    else:
        img[:, pos, :] += amp
    return img


def _blobs(spec: TaskSpec, label: int, rng: Rng) -> np.ndarray:
    c, h, w = spec.image_size
    angle = 2 * math.pi * label / spec.n_classes
    jitter = rng.uniform(2) - 0.5
    cy = (h - 1) / 2 + (h / 4) * math.sin(angle) + jitter[0]
    cx = (w - 1) / 2 + (w / 4) * math.cos(angle) + jitter[1]
    amp = 0.5 + rng.uniform(1)[0]
    yy, xx = np.mgrid[0:h, 0:w]
    blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
    return blob[None, :, :] + 0.05 * rng.normal(c * h * w).reshape(c, h, w)


def sample(spec: TaskSpec, index: int) -> tuple[np.ndarray, int]:
    """The ``index``-th image of the task, with its transforms applied."""
    label = index % spec.n_classes
    base_rng = Rng(hash_seed(spec.seed, index))
    img = (_bars if spec.kind == "bars" else _blobs)(spec, label, base_rng)
    for j, t in enumerate(spec.transforms):
        if t.kind == "shift":
            img = np.roll(img, (t.dx, t.dy), axis=(1, 2))
        elif t.kind == "rotate90":
            img = np.ascontiguousarray(np.rot90(img, 1, axes=(1, 2)))
        else:
            noise_rng = Rng(hash_seed(spec.seed, index, 1000 + j))
            img = img + t.sigma * noise_rng.normal(img.size).reshape(img.shape)
    return img, label


def _split(spec: TaskSpec, start: int, n: int, split: str) -> Dataset:
    pairs = [sample(spec, start + i) for i in range(n)]
    images = np.stack([p[0] for p in pairs]).astype(np.float64)
    labels = np.array([p[1] for p in pairs], dtype=np.int64)
    return Dataset(images, labels, split, spec)


def generate(spec: TaskSpec, n_train: int | None = None, n_val: int | None = None) -> tuple[Dataset, Dataset]:
    n_train = spec.n_train if n_train is None else n_train
    n_val = spec.n_val if n_val is None else n_val
    if n_train < spec.n_classes or n_val < spec.n_classes:
        raise ValueError("n_train and n_val must be >= n_classes")
    return _split(spec, 0, n_train, "train"), _split(spec, n_train, n_val, "val")


def save_dataset(path, dataset: Dataset) -> None:
    formats.save_container(
        path,
        {
            "images": dataset.images,
            "labels": dataset.labels.astype(np.float64),
            "meta.json": {"split": dataset.split, "task": dataset.task.to_json()},
        },
    )


def load_dataset(path) -> Dataset:
    entries = formats.load_container(path)
    missing = {"images", "labels", "meta.json"} - set(entries)
    if missing:
        raise FormatError(f"dataset container lacks {sorted(missing)}")
    labels = entries["labels"]
    if np.any(labels != np.round(labels)):
        raise FormatError("labels must be integral")
    meta = entries["meta.json"]
    return Dataset(entries["images"], labels.astype(np.int64), meta["split"], TaskSpec.from_json(meta["task"]))
