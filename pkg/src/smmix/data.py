"""Synthetic shape dataset and its binary on-disk format.

File ``data.smds`` (little-endian)::

    b"SMDS" | u32 version | u32 count | u16 H | u16 W | u16 C | u16 num_classes
    then per sample: u8 label, H*W*C u8 pixels in channel-planar (C, H, W) order

``manifest.txt`` lists one ``<index> <split>`` pair per line, in stream order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"SMDS"
VERSION = 1
HEADER = struct.Struct("<4sII4H")
DATA_FILE = "data.smds"
MANIFEST_FILE = "manifest.txt"
MANIFEST_HEADER = "# smds manifest v1"
SHAPES = ("disc", "square", "triangle", "cross")


class DatasetError(Exception):
    pass


class MagicMismatchError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    label: int


@dataclass
class ShapeBox:
    top: int
    left: int
    bottom: int  # inclusive
    right: int


# -- rendering ---------------------------------------------------------

def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        # apex at the top, base at the bottom of the box
        frac = (dy + r) / (2 * r)
        return (np.abs(dy) <= r) & (np.abs(dx) <= r * frac)
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dy) <= r) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= r) & (np.abs(dy) <= arm))
    raise ValueError(f"unknown shape {kind!r}")


def render_sample(rng: np.random.Generator, label: int, size: int = 32, channels: int = 3
                  ) -> tuple[np.ndarray, ShapeBox]:
    """One (C, H, W) uint8 image with the class shape on a noisy background."""
    kind = SHAPES[label % len(SHAPES)]
    r = rng.uniform(0.15, 0.30) * size
    lo, hi = r, size - 1 - r
    cy, cx = rng.uniform(lo, hi), rng.uniform(lo, hi)

    base = rng.uniform(0.15, 0.85, size=channels)
    grad = rng.uniform(-0.05, 0.05, size=(channels, 2))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    bg = base[:, None, None] + grad[:, :1, None] * yy + grad[:, 1:, None] * xx
    bg = bg + rng.normal(0.0, 0.03, size=(channels, size, size))

    color = rng.uniform(0.0, 1.0, size=channels)
    # keep the shape visible: some channel must differ from the background by >= 0.5
    if np.abs(color - base).max() < 0.5:
        k = int(np.argmax(np.abs(base - 0.5)))
        color[k] = rng.uniform(base[k] + 0.5, 1.0) if base[k] < 0.5 else rng.uniform(0.0, base[k] - 0.5)
    mask = _shape_mask(kind, size, cy, cx, r)
    fg = color[:, None, None] + rng.normal(0.0, 0.04, size=(channels, size, size))
    img = np.where(mask[None], fg, bg)
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    ys, xs = np.nonzero(mask)
    return img, ShapeBox(int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))


def synth_arrays(n: int, seed: int, size: int = 32, channels: int = 3, num_classes: int = 4
                 ) -> tuple[np.ndarray, np.ndarray, list[ShapeBox]]:
    """Class-balanced images (uint8) and labels, deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5D5]))
    labels = rng.permutation(np.arange(n) % num_classes).astype(np.uint8)
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    boxes = []
    for i, y in enumerate(labels):
        images[i], box = render_sample(rng, int(y), size, channels)
        boxes.append(box)
    return images, labels, boxes


# -- file format -------------------------------------------------------

def write_dataset(path: str | Path, images: np.ndarray, labels: np.ndarray, num_classes: int,
                  splits: list[str] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = images.shape
    with open(path / DATA_FILE, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, n, h, w, c, num_classes))
        rec = np.empty((n, 1 + c * h * w), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = images.reshape(n, -1)
        f.write(rec.tobytes())
    splits = splits if splits is not None else ["train"] * n
    lines = [MANIFEST_HEADER] + [f"{i} {s}" for i, s in enumerate(splits)]
    (path / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return path


def synth_generate(n: int, out_dir: str | Path, seed: int = 0, size: int = 32, channels: int = 3,
                   num_classes: int = 4, train_fraction: float = 0.8) -> Path:
    """Render ``n`` samples and write data file + 80/20 train/val manifest."""
    images, labels, _ = synth_arrays(n, seed, size, channels, num_classes)
    n_train = int(round(train_fraction * n))
    splits = ["train"] * n_train + ["val"] * (n - n_train)
    return write_dataset(out_dir, images, labels, num_classes, splits)


@dataclass
class DatasetHeader:
    count: int
    height: int
    width: int
    channels: int
    num_classes: int

    @property
    def record_size(self) -> int:
        return 1 + self.height * self.width * self.channels


def read_header(path: str | Path) -> DatasetHeader:
    path = Path(path)
    file = path / DATA_FILE if path.is_dir() else path
    with open(file, "rb") as f:
        raw = f.read(HEADER.size)
    if len(raw) < HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise MagicMismatchError(f"{file}: bad magic {raw[:4]!r}")
        raise TruncatedFileError(f"{file}: header is {len(raw)} bytes, need {HEADER.size}")
    magic, version, n, h, w, c, k = HEADER.unpack(raw)
    if magic != MAGIC:
        raise MagicMismatchError(f"{file}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{file}: version {version}, this reader supports {VERSION}")
    return DatasetHeader(n, h, w, c, k)


def read_manifest(path: str | Path) -> list[tuple[int, str]]:
    entries = []
    for line in (Path(path) / MANIFEST_FILE).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        idx, split = line.split()
        entries.append((int(idx), split))
    return entries


def _read_records(path: Path) -> tuple[DatasetHeader, np.ndarray]:
    header = read_header(path)
    file = path / DATA_FILE
    raw = np.fromfile(file, dtype=np.uint8, offset=HEADER.size)
    need = header.count * header.record_size
    if raw.size < need:
        raise TruncatedFileError(f"{file}: {raw.size} payload bytes, header promises {need}")
    recs = raw[:need].reshape(header.count, header.record_size)
    bad = recs[:, 0] >= header.num_classes
    if bad.any():
        i = int(np.argmax(bad))
        raise LabelRangeError(f"{file}: sample {i} has label {recs[i, 0]} >= {header.num_classes}")
    return header, recs


def load_arrays(path: str | Path, split: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """All samples of ``split`` (manifest order) as float32 images in [0,1] and int labels."""
    path = Path(path)
    entries = [i for i, s in read_manifest(path) if split is None or s == split]
    header, recs = _read_records(path)
    if entries and max(entries) >= header.count:
        raise DatasetError(f"manifest references sample {max(entries)} of {header.count}")
    sel = recs[np.asarray(entries, dtype=np.int64)]
    shape = (len(entries), header.channels, header.height, header.width)
    images = (sel[:, 1:].reshape(shape).astype(np.float32) / np.float32(255.0))
    return images, sel[:, 0].astype(np.int64)


def load_dataset(path: str | Path, split: str | None = None) -> Iterator[Sample]:
    """Stream samples in manifest order (optionally one split)."""
    path = Path(path)
    entries = [i for i, s in read_manifest(path) if split is None or s == split]
    if not entries:
        return iter(())
    images, labels = load_arrays(path, split)
    return (Sample(img, int(y)) for img, y in zip(images, labels))


def shuffled(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded per-epoch permutation, a view on top of manifest order."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x5F])).permutation(n)
