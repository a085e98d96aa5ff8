"""CIFAR-10 binary ingestion, a synthetic stand-in dataset, augmentation and mixup."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 3 x 32 x 32 channel-major pixels
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]

# per-channel standardization applied after scaling pixels to [0, 1]
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


class DatasetError(IOError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # float32 (N, C, H, W), already preprocessed
    labels: np.ndarray  # int64 (N,)
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def parse_cifar_batch(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Split a binary batch into uint8 images (N, 3, 32, 32) and int64 labels."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DatasetError(f"corrupt CIFAR-10 batch: {len(raw)} bytes is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError("corrupt CIFAR-10 batch: label byte outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def standardize(images_u8: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    return ((x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]).astype(np.float32)


def _find_dir(path) -> Path:
    p = Path(path)
    for cand in (p, p / "cifar-10-batches-bin"):
        if all((cand / f).is_file() for f in TRAIN_FILES + TEST_FILES):
            return cand
    raise DatasetError(f"CIFAR-10 binary batches not found under {p}")


def _load_files(d: Path, names) -> Dataset:
    parts = [parse_cifar_batch((d / n).read_bytes()) for n in names]
    imgs = np.concatenate([a for a, _ in parts])
    labels = np.concatenate([b for _, b in parts])
    return Dataset(standardize(imgs), labels)


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    d = _find_dir(path)
    return _load_files(d, TRAIN_FILES), _load_files(d, TEST_FILES)


def default_cifar_dir():
    """``$EOQ_CIFAR10_DIR`` if it points at the binary batches, else None."""
    env = os.environ.get("EOQ_CIFAR10_DIR")
    if not env:
        return None
    try:
        return _find_dir(env)
    except DatasetError:
        return None


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 512
    n_val: int = 256
    num_classes: int = 4
    channels: int = 3
    size: int = 8
    noise: float = 0.5


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Gaussian class blobs rendered as images: one random prototype image per class plus
    isotropic pixel noise.  Labels are drawn uniformly at random."""
    rng = np.random.default_rng(seed)
    shape = (spec.channels, spec.size, spec.size)
    protos = rng.standard_normal((spec.num_classes,) + shape)

    def draw(n):
        y = rng.integers(0, spec.num_classes, size=n)
        x = protos[y] + spec.noise * rng.standard_normal((n,) + shape)
        return Dataset(x.astype(np.float32), y.astype(np.int64), spec.num_classes)

    return draw(spec.n_train), draw(spec.n_val)


# ---------------------------------------------------------------------------
# augmentation

def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding by ``pad`` and random horizontal flip, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def mixup_batch(x1, y1, x2, y2, alpha: float, seed=None, lam: float | None = None):
    """Convex combination of two batches: ``(x_mix, (y1, y2), lam)`` with
    ``lam ~ Beta(alpha, alpha)`` unless ``lam`` is given."""
    if lam is None:
        if alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lam = float(rng.beta(alpha, alpha))
    if lam == 1.0:
        return x1, (y1, y2), lam
    return lam * x1 + (1.0 - lam) * x2, (y1, y2), lam


def mixup_permuted(x, y, alpha: float, rng: np.random.Generator):
    """Mix a batch with a random permutation of itself."""
    perm = rng.permutation(len(y))
    return mixup_batch(x, y, x[perm], y[perm], alpha, rng)
