"""Dataset ingestion: CIFAR-10 binary files and a synthetic desk-scale stand-in.

Loaders are pure functions of (path, seed): repeated loads are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# widely used channel statistics of the CIFAR-10 training set
CIFAR10_MEAN = np.array([0.49139968, 0.48215827, 0.44653124], dtype=np.float32)
CIFAR10_STD = np.array([0.24703233, 0.24348505, 0.26158768], dtype=np.float32)

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


class DataFormatError(ValueError):
    """Corrupt or mis-sized dataset file."""


@dataclass
class DataSplit:
    """Disjoint train/val plus a held-out test partition."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_y), len(self.val_y), len(self.test_y)


def _class_patterns(rng: np.random.Generator, classes: int, channels: int,
                    size: int) -> np.ndarray:
    """One fixed mean image per class: a few Gaussian bumps with per-channel gains."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    sigma = max(size / 5.0, 1.0)
    patterns = np.zeros((classes, channels, size, size), dtype=np.float64)
    for c in range(classes):
        for _ in range(3):
            cy, cx = rng.uniform(0, size - 1, size=2)
            gains = rng.uniform(-1.0, 1.0, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            patterns[c] += gains[:, None, None] * bump[None, :, :]
        rms = np.sqrt(np.mean(patterns[c] ** 2))
        if rms > 0:
            patterns[c] /= rms
    return patterns.astype(np.float32)


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    reps = n // classes
    rem = n - reps * classes
    labels = np.concatenate([np.tile(np.arange(classes), reps), np.arange(rem)])
    return labels.astype(np.int64)


def gen_synthetic(n: int, classes: int, image_size: int, seed: int,
                  noise: float = 0.3, channels: int = 3,
                  amplitude: float = 1.0) -> DataSplit:
    """Class-conditional Gaussian-blob images, ``n`` points per split, balanced labels.

    ``amplitude`` scales the class mean patterns relative to the fixed noise;
    linearly separable at noise=0 by construction (distinct fixed class means).
    """
    if n < classes:
        raise ValueError(f"need at least one point per class: n={n}, classes={classes}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xDA7A])))
    patterns = amplitude * _class_patterns(rng, classes, channels, image_size)

    def draw(count: int):
        y = _balanced_labels(count, classes)
        x = patterns[y]
        if noise > 0:
            x = x + noise * rng.standard_normal(x.shape).astype(np.float32)
        return np.ascontiguousarray(x, dtype=np.float32), y

    train_x, train_y = draw(n)
    val_x, val_y = draw(n)
    test_x, test_y = draw(n)
    return DataSplit(train_x, train_y, val_x, val_y, test_x, test_y, classes)


def synthetic_class_means(classes: int, image_size: int, seed: int,
                          channels: int = 3) -> np.ndarray:
    """The exact per-class mean images a generator with this seed uses."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xDA7A])))
    return _class_patterns(rng, classes, channels, image_size)


def _read_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        offset = (raw.size // RECORD_BYTES) * RECORD_BYTES
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES} "
            f"(trailing fragment starts at byte {offset})")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        idx = int(bad[0])
        raise DataFormatError(
            f"{path}: label byte {int(labels[idx])} > 9 at byte offset {idx * RECORD_BYTES}")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels.astype(np.int64)


def _standardize(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float32) / 255.0
    return (x - CIFAR10_MEAN[None, :, None, None]) / CIFAR10_STD[None, :, None, None]


def load_cifar10(data_dir: str | Path, subset_size: int | None, split: float,
                 seed: int) -> DataSplit:
    """Load CIFAR-10 binary batches, shuffle deterministically and split train/val.

    ``subset_size`` caps each split for desk runs; ``split`` is the train fraction.
    """
    data_dir = Path(data_dir)
    train_files = sorted(data_dir.glob("data_batch_*.bin"))
    test_file = data_dir / "test_batch.bin"
    if not train_files:
        raise DataFormatError(f"no data_batch_*.bin files under {data_dir}")
    if not 0.0 < split < 1.0:
        raise ValueError(f"train/val split must be in (0, 1), got {split}")

    parts = [_read_batch_file(f) for f in train_files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xC1FA])))
    order = rng.permutation(len(labels))
    pixels, labels = pixels[order], labels[order]

    n_train = int(len(labels) * split)
    train_x, train_y = pixels[:n_train], labels[:n_train]
    val_x, val_y = pixels[n_train:], labels[n_train:]
    if test_file.exists():
        test_x, test_y = _read_batch_file(test_file)
    else:
        test_x, test_y = val_x, val_y
    if subset_size is not None:
        train_x, train_y = train_x[:subset_size], train_y[:subset_size]
        val_x, val_y = val_x[:subset_size], val_y[:subset_size]
        test_x, test_y = test_x[:subset_size], test_y[:subset_size]

    return DataSplit(_standardize(train_x), train_y, _standardize(val_x), val_y,
                     _standardize(test_x), test_y, 10)


def epoch_batches(x: np.ndarray, y: np.ndarray, batch_size: int,
                  rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled full batches for one epoch (remainder smaller than a batch is dropped)."""
    order = rng.permutation(len(y))
    n_full = len(y) // batch_size
    out = []
    for b in range(n_full):
        idx = order[b * batch_size:(b + 1) * batch_size]
        out.append((x[idx], y[idx]))
    return out
