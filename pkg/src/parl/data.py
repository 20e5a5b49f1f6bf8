"""Datasets: synthetic desk-scale tasks, CIFAR binary files, image augmentation."""

from dataclasses import dataclass, field

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .exceptions import ContractViolation, ParseError


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ContractViolation("inputs and labels differ in length")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def subset(self, index, split=None):
        return Dataset(self.inputs[index], self.labels[index], self.num_classes,
                       split or self.split, dict(self.meta))

    def sample(self, n, seed):
        """A seeded random subset of at most ``n`` examples (evaluation subsampling)."""
        if n is None or n >= len(self):
            return self
        index = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return self.subset(index)


def _minmax(X):
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (X - lo) / span, lo, span


def synth_two_moons(n, noise=0.1, seed=0):
    """Two interleaving half circles, features min-max scaled to [0, 1].

    ``meta`` records the affine map so raw coordinates can be recovered as
    ``inputs * meta["scale"] + meta["offset"]``.
    """
    if n < 2 or noise < 0:
        raise ContractViolation("two-moons needs n >= 2 and noise >= 0")
    X, y = make_moons(n_samples=n, noise=noise if noise > 0 else None, random_state=seed)
    X, lo, span = _minmax(X)
    return Dataset(X, y, 2, meta={"offset": lo, "scale": span, "name": "two_moons"})


def synth_blobs(n, k=3, spread=1.0, seed=0, n_features=2):
    if n < 2 or spread < 0 or k < 1:
        raise ContractViolation("blobs needs n >= 2, k >= 1 and spread >= 0")
    X, y = make_blobs(n_samples=n, centers=k, cluster_std=spread, n_features=n_features,
                      random_state=seed)
    X, lo, span = _minmax(X)
    return Dataset(X, y, k, meta={"offset": lo, "scale": span, "name": "blobs"})


def synth_bars(n, size=8, noise=0.15, seed=0):
    """Tiny single-channel images: class 0 holds a horizontal bar, class 1 a vertical one."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    pos = rng.integers(1, size - 1, size=n)
    images = np.zeros((n, 1, size, size))
    for i in range(n):
        if labels[i] == 0:
            images[i, 0, pos[i], :] = 1.0
        else:
            images[i, 0, :, pos[i]] = 1.0
    images = np.clip(images + rng.normal(0.0, noise, images.shape), 0.0, 1.0)
    return Dataset(images, labels, 2, meta={"name": "bars"})


def train_test_split(dataset, test_fraction=0.5, seed=0):
    """Seeded disjoint partition into train and test splits."""
    if not 0 < test_fraction < 1:
        raise ContractViolation("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


# ----------------------------------------------------------------------------
# CIFAR binary format
# ----------------------------------------------------------------------------

_CIFAR = {
    # variant: (label bytes, label byte used, number of classes)
    "cifar10": (1, 0, 10),
    "cifar100": (2, 1, 100),
}
_PIXELS = 3 * 32 * 32


def decode_cifar_bytes(buf, variant="cifar10", split="train"):
    if variant not in _CIFAR:
        raise ContractViolation(f"unknown CIFAR variant {variant!r}")
    n_label, which, num_classes = _CIFAR[variant]
    record = n_label + _PIXELS
    if len(buf) % record:
        whole = len(buf) - len(buf) % record
        raise ParseError(f"{variant} file size {len(buf)} is not a multiple of {record}", whole)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, which].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range", int(bad[0]) * record + which)
    if variant == "cifar100":
        coarse_bad = np.nonzero(raw[:, 0] >= 20)[0]
        if coarse_bad.size:
            raise ParseError("coarse label out of range", int(coarse_bad[0]) * record)
    images = raw[:, n_label:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, split, meta={"name": variant})


def load_cifar_binary(path, variant="cifar10", split="train"):
    with open(path, "rb") as fh:
        return decode_cifar_bytes(fh.read(), variant, split)


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    max_shift: int = 0
    flip: bool = False
    crop_pad: int = 0
    seed: int = 0
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.max_shift < 0 or self.crop_pad < 0 or not 0 <= self.flip_prob <= 1:
            raise ContractViolation("augmentation magnitudes must be non-negative")


def shift_image(img, dy, dx):
    """Translate a (c, h, w) image by whole pixels, filling with zeros."""
    out = np.zeros_like(img)
    _, h, w = img.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[:, dst_y, dst_x] = img[:, src_y, src_x]
    return out


def flip_image(img):
    return img[:, :, ::-1].copy()


def pad_crop(img, pad, top, left):
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top:top + h, left:left + w]


def augment(batch, spec, rng=None, epoch=0):
    """Random pad-and-crop, horizontal flip and shift, drawn independently per example.

    Each example uses its own stream derived from ``(spec.seed, epoch, index)``
    unless an explicit ``rng`` is given.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise ContractViolation("augmentation needs image batches of shape (n, c, h, w)")
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        r = rng if rng is not None else np.random.default_rng([spec.seed, epoch, i])
        if spec.crop_pad:
            top, left = r.integers(0, 2 * spec.crop_pad + 1, size=2)
            img = pad_crop(img, spec.crop_pad, top, left)
        if spec.flip and r.random() < spec.flip_prob:
            img = flip_image(img)
        if spec.max_shift:
            dy, dx = r.integers(-spec.max_shift, spec.max_shift + 1, size=2)
            img = shift_image(img, dy, dx)
        out[i] = img
    return out
