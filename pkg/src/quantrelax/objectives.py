"""Gradient oracles and desk-scale datasets.

Every oracle exposes the same small surface: ``n`` parameters laid out in
``groups`` (which ones get quantized), ``num_samples`` indices to batch
over, ``stochastic_grad(x, batch)``, ``full_loss`` and, for classifiers,
``accuracy``. Losses are batch averages so minibatch gradients are
unbiased. Gradient evaluation has no hidden randomness.
"""

from __future__ import annotations

import csv
import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizer import Group


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        labels = np.asarray(self.labels)
        if labels.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DatasetError("labels must be integers")
        labels = labels.astype(np.int64)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if feats.shape[0] < 1:
            raise DatasetError("dataset must have at least one sample")
        if feats.shape[0] != labels.shape[0]:
            raise DatasetError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(feats)):
            raise DatasetError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def stratified_split(data: Dataset, rng: np.random.Generator,
                     val_fraction: float = 1 / 6) -> tuple[Dataset, Dataset]:
    """Per-class shuffle, then hold out ``round(n_c * val_fraction)`` of each class."""
    train_idx, val_idx = [], []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * val_fraction))
        val_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train = np.sort(np.concatenate(train_idx))
    val = np.sort(np.concatenate(val_idx))
    return data.subset(train), data.subset(val)


def class_centers(dim: int, num_classes: int, radius: float = 2.0) -> np.ndarray:
    """Fixed centers: evenly spaced on a circle in the first two coordinates."""
    centers = np.zeros((num_classes, dim))
    if dim == 1:
        centers[:, 0] = radius * (np.arange(num_classes) - (num_classes - 1) / 2)
        return centers
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_blobs(n_samples: int, dim: int, num_classes: int, spread: float,
              seed: int) -> tuple[Dataset, Dataset]:
    """Gaussian clusters around fixed class centers, split 5:1 into train/val."""
    if spread <= 0:
        raise DatasetError("spread must be positive")
    if n_samples < num_classes:
        raise DatasetError("n_samples must be >= num_classes")
    if dim < 1:
        raise DatasetError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % num_classes
    labels = labels[rng.permutation(n_samples)]
    centers = class_centers(dim, num_classes)
    features = centers[labels] + spread * rng.standard_normal((n_samples, dim))
    return stratified_split(Dataset(features, labels, num_classes), rng)


def load_csv(path) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows; ``num_classes`` is ``max(label) + 1``."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: no such file")
    rows, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        d = len(header) - 1
        if d < 1 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(d)]:
            raise DatasetError(f"{path}:1: header must be f0,...,f{{d-1}},label")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 1:
                raise DatasetError(f"{path}:{lineno}: expected {d + 1} columns, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in feats):
                raise DatasetError(f"{path}:{lineno}: non-finite feature value")
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: label must be an integer") from None
            if label < 0:
                raise DatasetError(f"{path}:{lineno}: negative label")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), max(2, max(labels) + 1))


def save_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(data.dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# Float checkpoints: 8-byte magic, u32 version, u32 n, then n little-endian f64.
CHECKPOINT_MAGIC = b"QRLXCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")


def save_checkpoint(x, path) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, x.size))
        fh.write(x.tobytes())


def load_checkpoint(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {n} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


class GradientOracle:
    """Base class; subclasses fill in the loss/gradient kernels."""

    n: int
    groups: tuple[Group, ...]
    num_samples: int
    classification = False

    def stochastic_grad(self, x, batch) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        return self.stochastic_grad(x, np.arange(self.num_samples))

    def full_loss(self, x, dataset: Dataset | None = None) -> float:
        raise NotImplementedError

    def accuracy(self, x, dataset: Dataset | None = None) -> float:
        raise TypeError(f"{type(self).__name__} is not a classifier")

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"expected parameter vector of length {self.n}, got shape {x.shape}")
        return x


class QuadraticOracle(GradientOracle):
    """``f(x) = 0.5 * sum_i d_i (x_i - c_i)^2`` with coordinate-sampled gradients.

    A batch is a set of coordinate indices; the partial gradient on those
    coordinates is rescaled by ``n / |batch|`` so its expectation over
    uniformly drawn batches is the full gradient.
    """

    def __init__(self, c, diag=None, groups=None):
        c = np.asarray(c, dtype=np.float64).ravel()
        if c.size == 0 or not np.all(np.isfinite(c)):
            raise ValueError("c must be a nonempty finite vector")
        d = np.ones_like(c) if diag is None else np.asarray(diag, dtype=np.float64).ravel()
        if d.shape != c.shape:
            raise ValueError("diag must match c in length")
        if not np.all(d > 0):
            raise ValueError("diag entries must be positive")
        self.c = c
        self.diag = d
        self.n = c.size
        self.num_samples = c.size
        self.groups = tuple(groups) if groups is not None else (Group(0, self.n),)

    @property
    def lipschitz(self) -> float:
        return float(self.diag.max())

    def value(self, x) -> float:
        x = self._check(x)
        r = x - self.c
        return 0.5 * float(np.sum(self.diag * r * r))

    def full_loss(self, x, dataset=None) -> float:
        return self.value(x)

    def stochastic_grad(self, x, batch) -> np.ndarray:
        x = self._check(x)
        batch = np.asarray(batch, dtype=np.int64)
        g = np.zeros(self.n)
        if batch.size == 0:
            return g
        # Repeated indices accumulate, keeping sampling with replacement unbiased too.
        np.add.at(g, batch, self.diag[batch] * (x[batch] - self.c[batch]))
        return g * (self.n / batch.size)

    def grad(self, x) -> np.ndarray:
        x = self._check(x)
        return self.diag * (x - self.c)


def make_quadratic(c, diag=None, groups=None) -> QuadraticOracle:
    return QuadraticOracle(c, diag, groups)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class _ClassifierOracle(GradientOracle):
    classification = True

    def __init__(self, train: Dataset):
        self.train = train
        self.num_samples = len(train)

    def _loss_grad(self, x, feats, labels, need_grad=True):
        raise NotImplementedError

    def _logits(self, x, feats) -> np.ndarray:
        raise NotImplementedError

    def stochastic_grad(self, x, batch) -> np.ndarray:
        x = self._check(x)
        batch = np.asarray(batch, dtype=np.int64)
        return self._loss_grad(x, self.train.features[batch], self.train.labels[batch])[1]

    def loss_and_grad(self, x, batch=None) -> tuple[float, np.ndarray]:
        x = self._check(x)
        if batch is None:
            return self._loss_grad(x, self.train.features, self.train.labels)
        batch = np.asarray(batch, dtype=np.int64)
        return self._loss_grad(x, self.train.features[batch], self.train.labels[batch])

    def full_loss(self, x, dataset: Dataset | None = None) -> float:
        x = self._check(x)
        data = self.train if dataset is None else dataset
        return self._loss_grad(x, data.features, data.labels, need_grad=False)[0]

    def predict(self, x, features) -> np.ndarray:
        return self._logits(self._check(x), np.asarray(features, dtype=np.float64)).argmax(axis=1)

    def accuracy(self, x, dataset: Dataset | None = None) -> float:
        data = self.train if dataset is None else dataset
        return float(np.mean(self.predict(x, data.features) == data.labels))


class LogisticOracle(_ClassifierOracle):
    """Binary logistic regression; parameters are ``[w (d), b]``."""

    def __init__(self, train: Dataset):
        if train.num_classes != 2:
            raise ValueError(f"logistic regression needs 2 classes, got {train.num_classes}")
        super().__init__(train)
        d = train.dim
        self.n = d + 1
        self.groups = (Group(0, d), Group(d, d + 1, quantized=False))

    def _logits(self, x, feats):
        z = feats @ x[:-1] + x[-1]
        return np.stack([np.zeros_like(z), z], axis=1)

    def _loss_grad(self, x, feats, labels, need_grad=True):
        z = feats @ x[:-1] + x[-1]
        t = labels.astype(np.float64)
        # log(1 + e^z) - t z, computed stably.
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        if not need_grad:
            return loss, None
        r = (0.5 * (1.0 + np.tanh(0.5 * z)) - t) / z.size
        return loss, np.concatenate([feats.T @ r, [r.sum()]])


def make_logistic(dataset: Dataset) -> LogisticOracle:
    return LogisticOracle(dataset)


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass(frozen=True)
class MlpLayout:
    input_dim: int
    hidden: int
    classes: int
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        object.__setattr__(self, "activation", Activation(self.activation))
        if min(self.input_dim, self.hidden) < 1 or self.classes < 2:
            raise ValueError(f"invalid MLP layout {self}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, h, c = self.input_dim, self.hidden, self.classes
        return [(d, h), (h,), (h, c), (c,)]

    @property
    def n_params(self) -> int:
        d, h, c = self.input_dim, self.hidden, self.classes
        return d * h + h + h * c + c

    @property
    def groups(self) -> tuple[Group, ...]:
        out, pos = [], 0
        for i, shape in enumerate(self.shapes):
            size = int(np.prod(shape))
            # W1 and W2 are quantized, biases stay full precision.
            out.append(Group(pos, pos + size, quantized=(i % 2 == 0)))
            pos += size
        return tuple(out)


class MlpOracle(_ClassifierOracle):
    """One-hidden-layer perceptron with softmax cross-entropy, manual backprop."""

    def __init__(self, layout: MlpLayout, train: Dataset, seed: int = 0):
        if train.dim != layout.input_dim:
            raise ValueError(f"dataset has {train.dim} features, layout expects {layout.input_dim}")
        if train.num_classes != layout.classes:
            raise ValueError(f"dataset has {train.num_classes} classes, layout expects {layout.classes}")
        super().__init__(train)
        self.layout = layout
        self.n = layout.n_params
        self.groups = layout.groups
        self.seed = seed

    def unpack(self, x):
        parts, pos = [], 0
        for shape in self.layout.shapes:
            size = int(np.prod(shape))
            parts.append(x[pos:pos + size].reshape(shape))
            pos += size
        return parts

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        if rng is None:
            rng = np.random.default_rng(self.seed)
        out = []
        for shape in self.layout.shapes:
            if len(shape) == 2:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                out.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                out.append(np.zeros(shape))
        return np.concatenate(out)

    def _act(self, a):
        if self.layout.activation is Activation.RELU:
            return np.maximum(a, 0.0)
        return np.tanh(a)

    def _act_grad(self, a, h):
        if self.layout.activation is Activation.RELU:
            return (a > 0).astype(np.float64)
        return 1.0 - h * h

    def _logits(self, x, feats):
        w1, b1, w2, b2 = self.unpack(x)
        return self._act(feats @ w1 + b1) @ w2 + b2

    def _loss_grad(self, x, feats, labels, need_grad=True):
        w1, b1, w2, b2 = self.unpack(x)
        a = feats @ w1 + b1
        h = self._act(a)
        logp = _log_softmax(h @ w2 + b2)
        m = feats.shape[0]
        loss = -float(logp[np.arange(m), labels].mean())
        if not need_grad:
            return loss, None
        dz = np.exp(logp)
        dz[np.arange(m), labels] -= 1.0
        dz /= m
        dw2 = h.T @ dz
        db2 = dz.sum(axis=0)
        da = (dz @ w2.T) * self._act_grad(a, h)
        dw1 = feats.T @ da
        db1 = da.sum(axis=0)
        return loss, np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])


def make_mlp(layout: MlpLayout, train: Dataset, seed: int = 0) -> MlpOracle:
    return MlpOracle(layout, train, seed)
