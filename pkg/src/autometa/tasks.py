"""Few-shot datasets: procedural glyphs, the FSDS file format, episode sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class ClassDataset:
    """Images grouped by class, stored as uint8 (n_classes, per_class, H, W)."""

    pixels: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 4:
            raise DatasetError("pixels must be a uint8 array shaped (classes, per_class, H, W)")
        if len(self.class_ids) != self.pixels.shape[0]:
            raise DatasetError("one class id per class required")
        self.pixels.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.pixels.shape[0]

    @property
    def per_class(self) -> int:
        return self.pixels.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.pixels.shape[2], self.pixels.shape[3]

    def images(self, cls: int, idx) -> np.ndarray:
        """Float images in [0, 1], shaped (n, 1, H, W)."""
        return self.pixels[cls, idx][:, None].astype(np.float64) / 255.0

    def split(self, n_test: int) -> tuple["ClassDataset", "ClassDataset"]:
        """(meta-train, meta-test) with the last ``n_test`` classes held out."""
        if not 0 < n_test < self.n_classes:
            raise DatasetError(f"cannot hold out {n_test} of {self.n_classes} classes")
        k = self.n_classes - n_test
        return (ClassDataset(self.pixels[:k], self.class_ids[:k]),
                ClassDataset(self.pixels[k:], self.class_ids[k:]))


# ---------------------------------------------------------------- synthetic glyphs

def _stroke_points(rng: np.random.Generator) -> np.ndarray:
    """Densely sampled points of one line or arc in the unit square."""
    t = np.linspace(0.0, 1.0, 48)
    if rng.random() < 0.5:
        a, b = rng.uniform(0.15, 0.85, size=(2, 2))
        return a[None] + t[:, None] * (b - a)[None]
    center = rng.uniform(0.3, 0.7, size=2)
    radius = rng.uniform(0.12, 0.35)
    start = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(0.5 * np.pi, 1.5 * np.pi) * rng.choice([-1, 1])
    ang = start + t * sweep
    return center[None] + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _render(points: np.ndarray, size: int, width: float) -> np.ndarray:
    grid = (np.arange(size) + 0.5) / size
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    cells = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d2 = ((cells[:, None, :] - points[None, :, :]) ** 2).sum(-1).min(axis=1)
    return np.exp(-d2 / (2 * width ** 2)).reshape(size, size)


def generate_synthetic_glyphs(seed: int, n_classes: int, per_class: int, size: int = 16) -> ClassDataset:
    """Each class is a template of 3-6 random strokes; samples add affine jitter and pixel noise."""
    if size < 8:
        raise DatasetError("size must be >= 8")
    if per_class < 2:
        raise DatasetError("per_class must be >= 2")
    if n_classes < 1:
        raise DatasetError("n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    width = 0.6 / size
    out = np.empty((n_classes, per_class, size, size), dtype=np.uint8)
    for c in range(n_classes):
        strokes = np.concatenate([_stroke_points(rng) for _ in range(rng.integers(3, 7))])
        for i in range(per_class):
            theta = np.deg2rad(rng.uniform(-15, 15))
            rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
            shift = rng.uniform(-0.1, 0.1, size=2)
            pts = (strokes - 0.5) @ rot.T + 0.5 + shift
            img = _render(pts, size, width) + rng.normal(0.0, 0.05, size=(size, size))
            out[c, i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return ClassDataset(out, tuple(range(n_classes)))


# ---------------------------------------------------------------- FSDS files

def dataset_to_bytes(ds: ClassDataset) -> bytes:
    n, k, h, w = ds.pixels.shape
    return _HEADER.pack(FSDS_MAGIC, FSDS_VERSION, n, k, h, w) + ds.pixels.tobytes(order="C")


def dataset_from_bytes(raw: bytes) -> ClassDataset:
    if len(raw) < 4 or raw[:4] != FSDS_MAGIC:
        raise BadMagicError("bad magic: not an FSDS file")
    if len(raw) < _HEADER.size:
        raise TruncatedError("truncated: incomplete header")
    _, version, n, k, h, w = _HEADER.unpack_from(raw)
    if version != FSDS_VERSION:
        raise UnsupportedVersionError(f"unsupported FSDS version {version}")
    expected = n * k * h * w
    body = len(raw) - _HEADER.size
    if body < expected:
        raise TruncatedError(f"truncated: header declares {expected} pixel bytes, found {body}")
    if body > expected:
        raise CountMismatchError(f"count mismatch: {body - expected} bytes beyond the declared images")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, k, h, w).copy()
    return ClassDataset(pixels, tuple(range(n)))


def save_dataset(ds: ClassDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> ClassDataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- episodes

@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: tuple[int, ...]
    support_ids: tuple[tuple[int, int], ...]
    query_ids: tuple[tuple[int, int], ...]


def sample_episode(ds: ClassDataset, n_way: int, k_shot: int, query_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """Sample an n-way k-shot task; labels are a random permutation of range(n_way)."""
    if n_way > ds.n_classes:
        raise DatasetError(f"{n_way}-way episode needs {n_way} classes, dataset has {ds.n_classes}")
    if k_shot + query_per_class > ds.per_class:
        raise DatasetError(f"{k_shot}+{query_per_class} images per class requested, "
                           f"dataset has {ds.per_class}")
    classes = rng.choice(ds.n_classes, size=n_way, replace=False)
    labels = rng.permutation(n_way)
    sx, sy, qx, qy, sids, qids = [], [], [], [], [], []
    for cls, lab in zip(classes, labels):
        idx = rng.choice(ds.per_class, size=k_shot + query_per_class, replace=False)
        sx.append(ds.images(cls, idx[:k_shot]))
        qx.append(ds.images(cls, idx[k_shot:]))
        sy += [lab] * k_shot
        qy += [lab] * query_per_class
        sids += [(ds.class_ids[cls], int(i)) for i in idx[:k_shot]]
        qids += [(ds.class_ids[cls], int(i)) for i in idx[k_shot:]]
    return Episode(n_way, k_shot, np.concatenate(sx), np.asarray(sy, dtype=np.int64),
                   np.concatenate(qx), np.asarray(qy, dtype=np.int64),
                   tuple(ds.class_ids[c] for c in classes), tuple(sids), tuple(qids))


@dataclass(frozen=True)
class TaskSampler:
    """Meta-train / meta-test pair with a fixed episode shape."""

    train: ClassDataset
    test: ClassDataset
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15

    def __post_init__(self):
        if set(self.train.class_ids) & set(self.test.class_ids):
            raise DatasetError("meta-train and meta-test class sets overlap")

    def train_episode(self, rng: np.random.Generator) -> Episode:
        return sample_episode(self.train, self.n_way, self.k_shot, self.query_per_class, rng)

    def test_episode(self, rng: np.random.Generator) -> Episode:
        return sample_episode(self.test, self.n_way, self.k_shot, self.query_per_class, rng)


def synthetic_sampler(seed: int = 0, n_train: int = 80, n_test: int = 20, per_class: int = 20,
                      size: int = 16, n_way: int = 5, k_shot: int = 1,
                      query_per_class: int = 15) -> TaskSampler:
    ds = generate_synthetic_glyphs(seed, n_train + n_test, per_class, size)
    train, test = ds.split(n_test)
    return TaskSampler(train, test, n_way, k_shot, query_per_class)
