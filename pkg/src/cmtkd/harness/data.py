"""Desk-scale image datasets: binary container, synthetic generator, batching."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"CMTD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, m, count, H, W, C
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (init, data order, augmentation...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# ---------------------------------------------------------------------------
# binary container


def write_dataset(path: str | Path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    """Write uint8 NHWC images and integer labels."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DatasetError("images must be a uint8 array of shape (N, H, W, C)")
    if labels.shape != (images.shape[0],):
        raise DatasetError("need one label per image")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DatasetError(f"labels must lie in [0, {num_classes})")
    n, h, w, c = images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, num_classes, n, h, w, c))
        fh.write(np.ascontiguousarray(images).tobytes())
        fh.write(labels.astype("<u2").tobytes())


def read_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """(images uint8 NHWC, labels int64, number of classes)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: file too short for a header")
    magic, version, m, n, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    npix = n * h * w * c
    if len(raw) != _HEADER.size + npix + 2 * n:
        raise DatasetError(f"{path}: header promises {n} images of {h}x{w}x{c} but the payload size disagrees")
    images = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=_HEADER.size).reshape(n, h, w, c).copy()
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=_HEADER.size + npix).astype(np.int64)
    if n and labels.max() >= m:
        raise DatasetError(f"{path}: label {labels.max()} >= number of classes {m}")
    return images, labels, m


# ---------------------------------------------------------------------------
# synthetic patterns
#
# Every class is a left-right symmetric motif so that horizontal flips keep
# the label.  Position, scale, colours, clutter and noise are random.


def _motif(kind: int, yy: np.ndarray, xx: np.ndarray, r: float, t: float) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    rad = np.hypot(yy, xx)
    if kind == 0:  # disk
        return rad <= r
    if kind == 1:  # ring
        return np.abs(rad - r) <= t
    if kind == 2:  # filled square
        return np.maximum(ay, ax) <= r
    if kind == 3:  # square outline
        return np.abs(np.maximum(ay, ax) - r) <= t
    if kind == 4:  # plus
        return ((ay <= t) & (ax <= r)) | ((ax <= t) & (ay <= r))
    if kind == 5:  # diagonal cross
        return ((np.abs(yy - xx) <= t) | (np.abs(yy + xx) <= t)) & (np.maximum(ay, ax) <= r)
    if kind == 6:  # horizontal bars
        return (np.mod(yy + r, 2 * t + 2) < t + 1) & (ax <= r) & (ay <= r)
    if kind == 7:  # vertical bars, symmetric about the centre column
        return (np.mod(ax + t / 2, 2 * t + 2) < t + 1) & (ay <= r) & (ax <= r)
    if kind == 8:  # upright triangle
        return (yy <= r * 0.8) & (yy >= -r) & (ax <= (yy + r) * 0.6)
    if kind == 9:  # diamond
        return (ay + ax) <= r
    # extra classes: concentric pairs of the base motifs
    inner = _motif(kind % 10, yy, xx, r * 0.5, t)
    return inner | _motif((kind // 10 + kind) % 10, yy, xx, r, t)


def generate_dataset(
    num_classes: int,
    per_class: int,
    size: tuple[int, int] = (16, 16),
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced synthetic set; returns uint8 NHWC images and labels."""
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least two classes and one image per class")
    rng = np.random.default_rng(seed)
    h, w = size
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(n)]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    images = np.empty((n, h, w, channels), dtype=np.uint8)
    for i, label in enumerate(labels):
        r = rng.uniform(0.22, 0.4) * min(h, w)
        cy = rng.uniform(r * 0.7, h - 1 - r * 0.7)
        cx = rng.uniform(r * 0.7, w - 1 - r * 0.7)
        t = rng.uniform(0.8, 1.6)
        mask = _motif(int(label), ys - cy, xs - cx, r, t).astype(np.float64)
        bg = rng.uniform(0.0, 1.0, channels)
        fg = rng.uniform(0.0, 1.0, channels)
        while np.abs(fg - bg).mean() < 0.25:
            fg = rng.uniform(0.0, 1.0, channels)
        img = bg + mask[..., None] * (fg - bg)
        # clutter: a random straight stroke in a random colour
        p0, p1 = rng.uniform(0, [h, w]), rng.uniform(0, [h, w])
        seg = p1 - p0
        tt = np.clip(((ys - p0[0]) * seg[0] + (xs - p0[1]) * seg[1]) / max(seg @ seg, 1e-9), 0, 1)
        dist = np.hypot(ys - (p0[0] + tt * seg[0]), xs - (p0[1] + tt * seg[1]))
        stroke = (dist <= 0.6)[..., None]
        img = np.where(stroke, rng.uniform(0, 1, channels), img)
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return images, labels


def generate_splits(
    out_dir: str | Path,
    num_classes: int = 10,
    per_class: int = 200,
    size: tuple[int, int] = (16, 16),
    seed: int = 0,
    test_per_class: int | None = None,
    channels: int = 3,
    noise: float = 0.1,
) -> Path:
    """Write ``train.cmtd`` and ``test.cmtd`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_per_class = test_per_class or max(per_class // 4, 1)
    for split, k, s in (("train", per_class, seed), ("test", test_per_class, seed + 7919)):
        images, labels = generate_dataset(num_classes, k, size, s, channels, noise)
        write_dataset(out / f"{split}.cmtd", images, labels, num_classes)
    return out


# ---------------------------------------------------------------------------
# loading and batching


@dataclass
class Dataset:
    train_x: np.ndarray  # (N, C, H, W), normalized
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    mean: np.ndarray  # per-channel statistics of the raw train pixels in [0, 1]
    std: np.ndarray


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float64) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(dtype)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    return mean, np.where(std > 0, std, 1.0)


def load_dataset(path: str | Path, dtype=np.float64, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Read ``train.cmtd`` / ``test.cmtd`` from a directory and normalize both with train statistics."""
    root = Path(path)
    files = {s: root / f"{s}.cmtd" for s in SPLITS}
    for s, f in files.items():
        if not f.is_file():
            raise DatasetError(f"missing {s} split: {f}")
    tr_img, tr_y, m = read_dataset(files["train"])
    te_img, te_y, m_test = read_dataset(files["test"])
    if m != m_test or tr_img.shape[1:] != te_img.shape[1:]:
        raise DatasetError("train and test splits disagree on classes or image shape")
    mean, std = stats if stats is not None else channel_stats(tr_img)
    return Dataset(
        normalize(tr_img, mean, std, dtype), tr_y, normalize(te_img, mean, std, dtype), te_y, m,
        np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64),
    )


def random_flip(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    flips = rng.random(x.shape[0]) < p
    out = x.copy()
    out[flips] = out[flips, :, :, ::-1]
    return out, flips


def random_crop(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    rows = oy[:, None] + np.arange(h)[None, :]
    cols = ox[:, None] + np.arange(w)[None, :]
    return padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                  rows[:, None, :, None], cols[:, None, None, :]]


class BatchLoader:
    """Mini-batches in a seed-determined order, with optional flip + crop augmentation.

    The sample order is drawn once; with ``reshuffle`` a fresh permutation is
    drawn each epoch from the same stream.  The last incomplete batch is
    dropped so batch-norm always sees full batches.
    """

    def __init__(self, x, y, batch_size: int, seed: int, augment: bool = True, reshuffle: bool = False, pad: int = 2):
        if len(x) < batch_size:
            raise DatasetError(f"training split has {len(x)} samples, fewer than one batch of {batch_size}")
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.augment = augment
        self.reshuffle = reshuffle
        self.pad = pad
        self.order_rng = substream(seed, "data_order")
        self.aug_rng = substream(seed, "augment")
        self.order = self.order_rng.permutation(len(x))

    def __len__(self) -> int:
        return len(self.x) // self.batch_size

    def epoch(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if self.reshuffle:
            self.order = self.order_rng.permutation(len(self.x))
        for b in range(len(self)):
            idx = self.order[b * self.batch_size : (b + 1) * self.batch_size]
            xb = self.x[idx]
            if self.augment:
                xb, _ = random_flip(xb, self.aug_rng)
                xb = random_crop(xb, self.aug_rng, self.pad)
            yield np.ascontiguousarray(xb), self.y[idx]

    def rng_state(self) -> dict:
        return {"data_order": self.order_rng.bit_generator.state, "augment": self.aug_rng.bit_generator.state}
