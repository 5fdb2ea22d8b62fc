"""MNIST / Fashion-MNIST / CIFAR-10 loading, splitting and augmentation."""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DataError, DimensionOverflowError, FileSizeError, TruncatedFileError
from .rng import Stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_BATCH_RECORDS = 10000
MAX_IDX_ELEMENTS = 2**31 - 1

FAMILIES = {
    "mnist": dict(channels=1, resolution=28, n_train=60000, n_test=10000),
    "fashion_mnist": dict(channels=1, resolution=28, n_train=60000, n_test=10000),
    "cifar10": dict(channels=3, resolution=32, n_train=50000, n_test=10000),
}

CLASS_NAMES = {
    "mnist": [str(i) for i in range(10)],
    "fashion_mnist": ["tshirt", "trouser", "pullover", "dress", "coat",
                      "sandal", "shirt", "sneaker", "bag", "boot"],
    "cifar10": ["airplane", "automobile", "bird", "cat", "deer",
                "dog", "frog", "horse", "ship", "truck"],
}


@dataclass
class Dataset:
    name: str
    train_images: np.ndarray  # uint8 [N,C,H,W]
    train_labels: np.ndarray  # int64 [N]
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def channels(self) -> int:
        return self.train_images.shape[1]

    @property
    def resolution(self) -> int:
        return self.train_images.shape[2]


@dataclass
class SplitIndices:
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int


@dataclass
class AugmentPolicy:
    pad_crop: int = 0
    rotation_deg: float = 0.0
    hflip_prob: float = 0.0

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.pad_crop < 0:
            raise ValueError("pad_crop must be >= 0")

    @classmethod
    def for_dataset(cls, name: str) -> "AugmentPolicy":
        if name == "cifar10":
            return cls(pad_crop=4, rotation_deg=0.0, hflip_prob=0.5)
        return cls(pad_crop=4, rotation_deg=10.0, hflip_prob=0.0)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(path):
    """Parse an IDX file. Returns an array of shape ``dims`` (uint8)."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: header truncated, expected at least 4 bytes, got {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise BadMagicError(f"{path}: bad IDX magic 0x{magic:08x} (expected 0x{IDX_IMAGE_MAGIC:08x} or 0x{IDX_LABEL_MAGIC:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: header truncated, expected {header} bytes, got {len(buf)}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_IDX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: dimensions {dims} describe {count} elements, over the {MAX_IDX_ELEMENTS} limit")
    expected = header + count
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: payload truncated, expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims).copy()


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGE_MAGIC if array.ndim == 3 else IDX_LABEL_MAGIC
    if array.ndim not in (1, 3):
        magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        f.write(array.tobytes())


def parse_cifar_binary(paths, records_per_file: int | None = None):
    """Parse CIFAR-10 binary batches into (uint8 [N,3,32,32], int64 [N]).

    With ``records_per_file`` set, each file must hold exactly that many records.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        buf = _read_bytes(p)
        if records_per_file is not None and len(buf) != records_per_file * CIFAR_RECORD:
            raise FileSizeError(f"{p}: size {len(buf)} bytes, expected {records_per_file * CIFAR_RECORD} bytes")
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise FileSizeError(
                f"{p}: size {len(buf)} bytes is not a whole number of {CIFAR_RECORD}-byte records "
                f"(expected {CIFAR_BATCH_RECORDS * CIFAR_RECORD} bytes for a standard batch)")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).copy())
    return np.concatenate(images), np.concatenate(labels)


def write_cifar_batch(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _find(root: Path, names):
    for n in names:
        for cand in (root / n, root / (n + ".gz")):
            if cand.exists():
                return cand
    raise DataError(f"none of {names} found under {root}")


def load_dataset(name: str, data_dir, strict: bool = True) -> Dataset:
    """Load a dataset from ``<data_dir>/<name>/``.

    ``strict`` enforces the official sample counts.
    """
    if name not in FAMILIES:
        raise DataError(f"unknown dataset {name!r}")
    root = Path(data_dir) / name
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    fam = FAMILIES[name]
    if name == "cifar10":
        if (root / "cifar-10-batches-bin").is_dir():
            root = root / "cifar-10-batches-bin"
        n = CIFAR_BATCH_RECORDS if strict else None
        tr = [_find(root, [f"data_batch_{i}.bin"]) for i in range(1, 6)]
        xtr, ytr = parse_cifar_binary(tr, n)
        xte, yte = parse_cifar_binary([_find(root, ["test_batch.bin"])], n)
    else:
        xtr = parse_idx(_find(root, ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]))
        ytr = parse_idx(_find(root, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]))
        xte = parse_idx(_find(root, ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]))
        yte = parse_idx(_find(root, ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]))
        xtr, xte = xtr[:, None], xte[:, None]
        ytr, yte = ytr.astype(np.int64), yte.astype(np.int64)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise DataError(f"{name}: image and label counts differ")
    res = fam["resolution"]
    if xtr.shape[1:] != (fam["channels"], res, res) or xte.shape[1:] != (fam["channels"], res, res):
        raise DataError(f"{name}: unexpected image shape {xtr.shape[1:]}")
    if strict and (len(xtr) != fam["n_train"] or len(xte) != fam["n_test"]):
        raise DataError(f"{name}: expected {fam['n_train']}/{fam['n_test']} samples, got {len(xtr)}/{len(xte)}")
    for y in (ytr, yte):
        if len(y) and (y.min() < 0 or y.max() > 9):
            raise DataError(f"{name}: labels outside [0, 10)")
    return Dataset(name, xtr, ytr, xte, yte)


def validation_count(n: int, ratio: float = 0.9) -> int:
    """``round((1 - ratio) * n)`` in exact decimal arithmetic, halves rounded up."""
    frac = 1 - Fraction(str(ratio))
    return math.floor(frac * n + Fraction(1, 2))


def split(n: int, ratio: float = 0.9, seed: int = 42) -> SplitIndices:
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    perm = Stream(seed, "split").permutation(n)
    n_val = validation_count(n, ratio)
    n_train = n - n_val
    return SplitIndices(perm[:n_train].copy(), perm[n_train:].copy(), seed)


def _rotate(images: np.ndarray, angles_deg: np.ndarray) -> np.ndarray:
    """Bilinear rotation about the image centre with zero fill. images: [B,C,H,W] float."""
    b, c, h, w = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    th = np.deg2rad(angles_deg)[:, None, None]
    cos, sin = np.cos(th), np.sin(th)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(images.dtype)[:, None]
    fy = (sy - y0).astype(images.dtype)[:, None]

    padded = np.zeros((b, c, h + 2, w + 2), dtype=images.dtype)
    padded[:, :, 1:-1, 1:-1] = images

    def tap(yi, xi):
        inside = (yi >= -1) & (yi <= h) & (xi >= -1) & (xi <= w)
        yi = np.clip(yi, -1, h) + 1
        xi = np.clip(xi, -1, w) + 1
        bi = np.arange(b)[:, None, None]
        vals = padded[bi, :, yi, xi]  # [B,H,W,C]
        vals = np.where(inside[..., None], vals, 0)
        return np.moveaxis(vals, -1, 1)

    a, bb = tap(y0, x0), tap(y0, x0 + 1)
    cc, d = tap(y0 + 1, x0), tap(y0 + 1, x0 + 1)
    upper = a * (1 - fx) + bb * fx
    lower = cc * (1 - fx) + d * fx
    return upper * (1 - fy) + lower * fy


def augment(images: np.ndarray, policy: AugmentPolicy, streams, offsets=None) -> np.ndarray:
    """Augment a batch ``[B,C,H,W]`` (float, pre-normalisation pixel values).

    ``streams`` holds one :class:`Stream` per sample. Order: crop, rotate, flip.
    ``offsets`` forces the crop offsets (testing hook).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
        if isinstance(streams, Stream):
            streams = [streams]
    b, c, h, w = images.shape
    p = policy.pad_crop
    out = images.copy()
    draws = []
    for s in streams:
        oy = s.below(2 * p + 1) if p else 0
        ox = s.below(2 * p + 1) if p else 0
        ang = float(s.uniform(1, -policy.rotation_deg, policy.rotation_deg)[0]) if policy.rotation_deg else 0.0
        flip = bool(s.uniform(1)[0] < policy.hflip_prob) if policy.hflip_prob else False
        draws.append((oy, ox, ang, flip))
    if offsets is not None:
        draws = [(oy, ox, a, f) for (oy, ox), (_, _, a, f) in zip(offsets, draws)]
    if p:
        padded = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
        padded[:, :, p:p + h, p:p + w] = images
        for i, (oy, ox, _, _) in enumerate(draws):
            out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    if policy.rotation_deg:
        angles = np.array([d[2] for d in draws])
        out = _rotate(out, angles).astype(images.dtype)
    if policy.hflip_prob:
        for i, d in enumerate(draws):
            if d[3]:
                out[i] = out[i, :, :, ::-1]
    return out[0] if single else out


def augment_streams(seed: int, epoch: int, indices) -> list:
    return [Stream(seed, "augment", epoch, int(i)) for i in indices]


def normalize(images, mean, std) -> np.ndarray:
    """``(x/255 - mean)/std`` per channel; returns float32 ``[N,C,H,W]``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be positive for every channel")
    x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (-1, 1, 1)
    return ((x - mean.astype(np.float32).reshape(shape)) / std.astype(np.float32).reshape(shape)).astype(np.float32)


def compute_stats(images) -> tuple[list, list]:
    """Per-channel mean/std of ``images/255`` at float64, rounded to 6 decimals."""
    x = np.asarray(images)
    c = x.shape[1]
    means, stds = [], []
    for ch in range(c):
        v = x[:, ch].astype(np.float64) / 255.0
        m = v.mean()
        means.append(round(float(m), 6))
        stds.append(round(float(np.sqrt(((v - m) ** 2).mean())), 6))
    return means, stds


def cached_stats(dataset: Dataset, split_idx: SplitIndices, cache_dir) -> tuple[list, list]:
    """Stats over the training split, cached as ``stats.<dataset>.<seed>.txt``."""
    path = Path(cache_dir) / f"stats.{dataset.name}.{split_idx.seed}.txt"
    if path.exists():
        kv = dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)
        return ([float(v) for v in kv["mean"].split(",")], [float(v) for v in kv["std"].split(",")])
    mean, std = compute_stats(dataset.train_images[np.sort(split_idx.train_idx)])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("mean=" + ",".join(f"{m:.6f}" for m in mean) + "\n"
                    + "std=" + ",".join(f"{s:.6f}" for s in std) + "\n")
    return mean, std
