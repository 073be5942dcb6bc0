"""Synthetic labeled data, stochastic views and class-imbalance subsampling."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetTooSmall


@dataclass(frozen=True)
class SyntheticSpec:
    """Isotropic Gaussian classes around fixed means."""

    class_means: np.ndarray = field(compare=False)
    samples_per_class: int = 100
    within_class_std: float = 0.1

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        object.__setattr__(self, "class_means", means)
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.within_class_std < 0:
            raise ValueError("within_class_std must be nonnegative")
        C = means.shape[0]
        if C >= 2:
            diff = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diff ** 2).sum(-1))[~np.eye(C, dtype=bool)]
            if dist.min() <= 4 * self.within_class_std:
                raise ValueError("class means must be more than 4 std apart")

    @property
    def n_classes(self):
        return self.class_means.shape[0]

    @property
    def dim(self):
        return self.class_means.shape[1]

    @classmethod
    def on_circle(cls, n_classes, dim=2, radius=1.0, samples_per_class=100, within_class_std=0.1):
        """Means evenly spaced on a circle in the first coordinate plane."""
        if dim < 2:
            raise ValueError("dim must be at least 2")
        angles = 2 * np.pi * np.arange(n_classes) / n_classes
        means = np.zeros((n_classes, dim))
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
        return cls(means, samples_per_class, within_class_std)

    @classmethod
    def on_simplex(cls, n_classes, dim, scale=1.0, samples_per_class=100, within_class_std=0.1):
        """Means at ``scale * e_l`` (needs ``dim >= n_classes``)."""
        if dim < n_classes:
            raise ValueError("simplex placement needs dim >= n_classes")
        means = np.zeros((n_classes, dim))
        means[np.arange(n_classes), np.arange(n_classes)] = scale
        return cls(means, samples_per_class, within_class_std)


@dataclass(frozen=True)
class AugmentationSpec:
    noise_std: float = 0.0
    rotation_max_angle: float = 0.0
    scale_jitter: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0 or self.scale_jitter < 0:
            raise ValueError("augmentation magnitudes must be nonnegative")
        if not 0.0 <= self.rotation_max_angle <= math.pi:
            raise ValueError("rotation_max_angle must lie in [0, pi]")

    @property
    def is_identity(self):
        return self.noise_std == 0 and self.rotation_max_angle == 0 and self.scale_jitter == 0


@dataclass(frozen=True)
class ImbalanceRule:
    """``balanced``, ``linear`` or ``exponential`` (with decay ``rho``)."""

    kind: str = "balanced"
    rho: float = 0.1

    def __post_init__(self):
        if self.kind not in ("balanced", "linear", "exponential"):
            raise ValueError(f"unknown imbalance rule {self.kind!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")

    def fractions(self, n_classes):
        """Kept fraction for classes 1..C (class index 0 keeps the most)."""
        C = n_classes
        l = np.arange(1, C + 1, dtype=np.float64)
        if self.kind == "balanced":
            return np.ones(C)
        if self.kind == "linear":
            return (C - l + 1) / C
        if C == 1:
            return np.ones(1)
        return self.rho ** ((l - 1) / (C - 1))


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("X must be (N, d) and y (N,)")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.X.shape[0]

    @property
    def class_counts(self):
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.X[idx], self.y[idx], self.n_classes)


def generate(spec, rng):
    C, n = spec.n_classes, spec.samples_per_class
    y = np.repeat(np.arange(C), n)
    noise = rng.standard_normal((C * n, spec.dim))
    X = spec.class_means[y] + spec.within_class_std * noise
    return LabeledDataset(X, y, C)


def train_val_split(dataset, val_fraction, rng):
    """Stratified split; each class contributes ``round(val_fraction * n_c)`` validation rows."""
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.y == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(math.floor(val_fraction * idx.size + 0.5))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return dataset.subset(tr), dataset.subset(va)


def augment_batch(X, aug, rng):
    """Apply an independent random view to every row of ``X``.

    Each row is rotated by an angle uniform in ``[-max, max]`` in a random
    coordinate plane, scaled by ``exp(u * scale_jitter)`` with ``u ~ U[-1, 1]``,
    and perturbed by isotropic Gaussian noise.  The zero spec returns ``X``
    unchanged.
    """
    X = np.array(X, dtype=np.float64, copy=True)
    if aug.is_identity:
        return X
    B, d = X.shape
    if aug.rotation_max_angle > 0 and d >= 2:
        theta = rng.uniform(-aug.rotation_max_angle, aug.rotation_max_angle, size=B)
        if d == 2:
            a = np.zeros(B, dtype=np.int64)
            b = np.ones(B, dtype=np.int64)
        else:
            a = rng.integers(0, d, size=B)
            b = (a + rng.integers(1, d, size=B)) % d
        rows = np.arange(B)
        xa, xb = X[rows, a].copy(), X[rows, b].copy()
        c, s = np.cos(theta), np.sin(theta)
        X[rows, a] = c * xa - s * xb
        X[rows, b] = s * xa + c * xb
    if aug.scale_jitter > 0:
        X *= np.exp(rng.uniform(-1.0, 1.0, size=B) * aug.scale_jitter)[:, None]
    if aug.noise_std > 0:
        X += aug.noise_std * rng.standard_normal((B, d))
    return X


def augment(x, aug, rng):
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], aug, rng)[0]


@dataclass
class RawBatch:
    queries: np.ndarray    # (M, d_in)
    positives: np.ndarray  # (M, K, d_in)
    base_index: np.ndarray  # (M,) dataset rows the views came from


def make_contrastive_batch(dataset, aug, M, K, rng, base_index=None):
    """Draw ``M`` distinct base rows and produce one query and ``K`` positive views each.

    ``base_index`` fixes the base rows (e.g. a slice of an epoch permutation);
    it must not contain repeats.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if base_index is None:
        if len(dataset) < M:
            raise DatasetTooSmall(f"dataset has {len(dataset)} rows, batch needs {M}")
        base_index = rng.choice(len(dataset), size=M, replace=False)
    base_index = np.asarray(base_index, dtype=np.int64)
    if np.unique(base_index).size != base_index.size:
        raise ValueError("base rows within a batch must be distinct")
    M = base_index.size
    base = dataset.X[base_index]
    queries = augment_batch(base, aug, rng)
    reps = np.repeat(base, K, axis=0)
    positives = augment_batch(reps, aug, rng).reshape(M, K, -1)
    return RawBatch(queries, positives, base_index)


def subsample_imbalanced(dataset, rule, rng):
    """Keep ``round(q_l * n_l)`` (at least 1) random rows of each class ``l``."""
    if rule.kind == "balanced":
        return dataset.subset(np.arange(len(dataset)))
    fr = rule.fractions(dataset.n_classes)
    keep = []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.y == c)
        if idx.size == 0:
            continue
        n_keep = max(1, int(math.floor(fr[c] * idx.size + 0.5)))
        keep.append(np.sort(rng.choice(idx, size=n_keep, replace=False)))
    return dataset.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# CSV round trip: header x0,...,x{d-1},label
# ---------------------------------------------------------------------------

def write_csv(path, X, y, prefix="x"):
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1] if X.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}{k}" for k in range(d)] + ["label"])
        for row, label in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path):
    """Return ``(X, y, header)``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    d = len(header) - 1
    if not rows:
        return np.zeros((0, d)), np.zeros(0, dtype=np.int64), header
    X = np.array([[float(v) for v in row[:d]] for row in rows], dtype=np.float64)
    y = np.array([int(row[d]) for row in rows], dtype=np.int64)
    return X, y, header


def export_dataset(dataset, path):
    write_csv(path, dataset.X, dataset.y, prefix="x")


def import_dataset(path, n_classes=None):
    X, y, _ = read_csv(path)
    C = n_classes if n_classes is not None else (int(y.max()) + 1 if y.size else 0)
    return LabeledDataset(X, y, C)
