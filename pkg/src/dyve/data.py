"""Datasets: synthetic class-conditional images, split tagging, file formats.

Dataset file (little-endian)::

    b"DYVD" | version:u8 (=1) | n_train:u32 | n_tune:u32 | n_heldout:u32
    | class_count:u32 | rank:u32 | dims:u32 * rank
    | records: (label:u32, values:f32 * prod(dims)) * (n_train + n_tune + n_heldout)

Records are stored grouped by split in the order train, tune, heldout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ModelFormatError, TruncatedBlobError, ValidationError, VersionMismatchError

DATA_MAGIC = b"DYVD"
DATA_VERSION = 1
SPLITS = ("train", "tune", "heldout")
PATCH = 8


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *shape) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    splits: np.ndarray  # (N,) str tags from SPLITS

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U8")
        if len(self.inputs) != len(self.labels) or len(self.labels) != len(self.splits):
            raise ValidationError("inputs, labels and split tags must align")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError("label outside [0, class_count)")
        if not set(np.unique(self.splits)) <= set(SPLITS):
            raise ValidationError(f"split tags must be in {SPLITS}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def split(self, name: str) -> "Dataset":
        m = self.splits == name
        return Dataset(self.inputs[m], self.labels[m], self.class_count, self.splits[m])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.splits[idx])

    def retag(self, name: str) -> "Dataset":
        return Dataset(self.inputs, self.labels, self.class_count, np.full(len(self), name))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.inputs for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       parts[0].class_count,
                       np.concatenate([p.splits for p in parts]))


def _patch(cls: int, rng: np.random.Generator) -> np.ndarray:
    """An 8x8 pattern in [0, 1] for one of ten pattern families."""
    p = PATCH
    yy, xx = np.mgrid[0:p, 0:p]
    c = (p - 1) / 2
    rad = np.hypot(yy - c, xx - c)
    kind = cls % 10
    if kind == 0:
        m = (yy // 2) % 2 == 0
    elif kind == 1:
        m = (xx // 2) % 2 == 0
    elif kind == 2:
        m = ((yy + xx) % 4 < 2)
    elif kind == 3:
        m = ((yy // 2 + xx // 2) % 2 == 0)
    elif kind == 4:
        m = rad < 3.2
    elif kind == 5:
        m = (rad > 2.2) & (rad < 3.8)
    elif kind == 6:
        m = (np.abs(yy - c) < 1) | (np.abs(xx - c) < 1)
    elif kind == 7:
        m = (np.abs(yy - xx) < 1) | (np.abs(yy + xx - (p - 1)) < 1)
    elif kind == 8:
        m = (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    else:
        m = ((yy == 0) | (yy == p - 1) | (xx == 0) | (xx == p - 1))
    return m.astype(np.float64) * rng.uniform(0.7, 1.0)


def _soften(p: np.ndarray, passes: int) -> np.ndarray:
    """Separable [1, 2, 1] / 4 smoothing, zero outside the patch."""
    for _ in range(passes):
        q = np.pad(p, 1)
        p = (q[:-2] + 2 * q[1:-1] + q[2:])[:, 1:-1] / 4
        q = np.pad(p, 1)
        p = (q[:, :-2] + 2 * q[:, 1:-1] + q[:, 2:])[1:-1] / 4
    return p


# one hue per class; classes beyond ten reuse patterns with new hues
def _class_color(cls: int) -> np.ndarray:
    angle = 2 * np.pi * cls / 10.0 + 0.7 * (cls // 10)
    return 0.55 + 0.45 * np.cos(angle + np.array([0.0, 2.1, 4.2]))


def generate_synthetic(classes: int, per_class: int, shape=(3, 16, 16), seed: int = 0,
                       noise: float = 0.04, clutter: int = 0, soften: int = 0) -> Dataset:
    """Class-conditional images: one coloured pattern patch on a flat background.

    Each class has its own pattern family and hue; position, amplitude,
    background level and pixel noise vary per sample; ``clutter`` faint
    Gaussian distractor blobs are added to each background. Deterministic in
    ``seed``.
    """
    if classes < 2:
        raise ValidationError("need at least two classes")
    c, h, w = shape
    if h < PATCH or w < PATCH:
        raise ValidationError(f"images must be at least {PATCH}x{PATCH}")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, c, h, w), dtype=np.float32)
    for i, cls in enumerate(labels):
        bg = rng.uniform(0.0, 0.15)
        img = np.full((c, h, w), bg)
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(clutter):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(1.0, 2.5)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img += rng.uniform(0.1, 0.35, (c, 1, 1)) * bump[None]
        top = rng.integers(0, h - PATCH + 1)
        left = rng.integers(0, w - PATCH + 1)
        color = _class_color(int(cls))[np.arange(c) % 3] + rng.normal(0.0, 0.05, c)
        pat = _soften(_patch(int(cls), rng), soften)
        img[:, top : top + PATCH, left : left + PATCH] += color[:, None, None] * pat[None]
        if noise > 0:
            img += rng.normal(0.0, noise, img.shape)
        images[i] = img
    return Dataset(images, labels, classes, np.full(n, "train"))


def holdout_split(ds: Dataset, tune_fraction: float = 0.05, seed: int = 0) -> Dataset:
    """Tag a random ``tune_fraction`` of ``ds`` as "tune" and the rest "heldout"."""
    rng = np.random.default_rng(seed)
    n_tune = max(1, int(round(tune_fraction * len(ds))))
    tags = np.full(len(ds), "heldout", dtype="<U8")
    tags[rng.permutation(len(ds))[:n_tune]] = "tune"
    return Dataset(ds.inputs, ds.labels, ds.class_count, tags)


# ------------------------------------------------------------------ file formats

def dumps_dataset(ds: Dataset) -> bytes:
    parts = [ds.split(s) for s in SPLITS]
    shape = ds.shape
    head = DATA_MAGIC + struct.pack("<B", DATA_VERSION)
    head += struct.pack("<5I", *(len(p) for p in parts), ds.class_count, len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    rec = np.dtype([("label", "<u4"), ("values", "<f4", (int(np.prod(shape)),))])
    body = []
    for p in parts:
        arr = np.empty(len(p), dtype=rec)
        arr["label"] = p.labels
        arr["values"] = p.inputs.reshape(len(p), rec["values"].shape[0])
        body.append(arr.tobytes())
    return head + b"".join(body)


def loads_dataset(data: bytes) -> Dataset:
    if data[:4] != DATA_MAGIC:
        raise BadMagicError("bad magic: not a dataset file")
    if len(data) < 25:
        raise TruncatedBlobError("truncated dataset header")
    if data[4] != DATA_VERSION:
        raise VersionMismatchError(f"dataset version {data[4]}, expected {DATA_VERSION}")
    n_train, n_tune, n_held, classes, rank = struct.unpack_from("<5I", data, 5)
    off = 25 + 4 * rank
    if rank not in (1, 3) or len(data) < off:
        raise ModelFormatError("bad dataset shape header")
    shape = struct.unpack_from(f"<{rank}I", data, 25)
    n = n_train + n_tune + n_held
    rec = np.dtype([("label", "<u4"), ("values", "<f4", (int(np.prod(shape)),))])
    if len(data) - off < n * rec.itemsize:
        raise TruncatedBlobError(f"truncated dataset: {n} records declared")
    arr = np.frombuffer(data, dtype=rec, count=n, offset=off)
    tags = np.repeat(np.array(SPLITS), [n_train, n_tune, n_held])
    return Dataset(arr["values"].reshape((n,) + tuple(shape)), arr["label"].astype(np.int64), classes, tags)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())


def load_cifar10_batch(path, split: str = "heldout") -> Dataset:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record)."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % 3073:
        raise TruncatedBlobError("CIFAR-10 batch size is not a multiple of 3073 bytes")
    recs = raw.reshape(-1, 3073)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return Dataset(images, recs[:, 0].astype(np.int64), 10, np.full(len(recs), split))
