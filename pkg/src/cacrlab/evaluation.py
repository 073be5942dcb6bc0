"""Frozen-feature evaluation: linear probe, k-NN probe, embedding export."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import read_csv, write_csv
from .encoder import mlp_forward
from .errors import LabelMismatch


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 500
    lr: float = 1.0
    l2_reg: float = 1e-4
    batch_size: int = 0  # 0 means full batch

    def __post_init__(self):
        if not self.lr > 0 or self.l2_reg < 0 or self.epochs < 0 or self.batch_size < 0:
            raise ValueError("invalid probe configuration")


@dataclass
class ProbeResult:
    top1_accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    train_loss: list = field(default_factory=list)

    def to_dict(self):
        return {
            "top1_accuracy": float(self.top1_accuracy),
            "per_class_accuracy": [float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.astype(int).tolist(),
            "final_train_loss": float(self.train_loss[-1]) if self.train_loss else None,
        }

    def to_json(self, path, extra=None):
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _result(pred, y_test, n_classes, train_loss=()):
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_test, pred), 1)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / np.maximum(counts, 1), np.nan)
    top1 = float(np.mean(pred == y_test)) if y_test.size else 0.0
    return ProbeResult(top1, per_class, conf, list(train_loss))


def _check_labels(Z_train, y_train, Z_test, y_test):
    Z_train, Z_test = np.asarray(Z_train, dtype=np.float64), np.asarray(Z_test, dtype=np.float64)
    y_train, y_test = np.asarray(y_train, dtype=np.int64), np.asarray(y_test, dtype=np.int64)
    if Z_train.shape[0] != y_train.shape[0] or Z_test.shape[0] != y_test.shape[0]:
        raise LabelMismatch("embedding and label counts differ")
    if Z_train.shape[1] != Z_test.shape[1]:
        raise LabelMismatch("train and test embeddings have different widths")
    if y_train.size == 0:
        raise LabelMismatch("empty training split")
    return Z_train, y_train, Z_test, y_test


def extract_embeddings(params, dataset):
    """Deterministic encoder pass over the raw (unaugmented) rows."""
    Z, _ = mlp_forward(params, dataset.X)
    return Z, dataset.y.copy()


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def logistic_loss_and_grad(W, b, X, y, l2_reg):
    """Mean softmax cross-entropy plus ``l2_reg/2 ||W||^2`` and its gradients."""
    logits = X @ W + b
    lse = kernels.logsumexp_rows(logits)
    n = X.shape[0]
    loss = float(np.mean(lse - logits[np.arange(n), y]) + 0.5 * l2_reg * np.sum(W * W))
    P = kernels.softmax_rows(logits)
    P[np.arange(n), y] -= 1.0
    P /= n
    return loss, X.T @ P + l2_reg * W, P.sum(axis=0)


def fit_logistic(X, y, n_classes, cfg, W0=None, b0=None):
    """Gradient descent on the multinomial logistic objective.

    Full batch by default; a rejected step (loss increase) halves the step
    size and is retried, so the recorded loss never increases.
    """
    d = X.shape[1]
    W = np.zeros((d, n_classes)) if W0 is None else np.array(W0, dtype=np.float64)
    b = np.zeros(n_classes) if b0 is None else np.array(b0, dtype=np.float64)
    lr = cfg.lr
    loss, gW, gb = logistic_loss_and_grad(W, b, X, y, cfg.l2_reg)
    history = [loss]
    n = X.shape[0]
    full = cfg.batch_size == 0 or cfg.batch_size >= n
    for _ in range(cfg.epochs):
        if full:
            for _ in range(60):
                W_new, b_new = W - lr * gW, b - lr * gb
                new_loss, new_gW, new_gb = logistic_loss_and_grad(W_new, b_new, X, y, cfg.l2_reg)
                if new_loss <= loss:
                    break
                lr *= 0.5
            else:
                break
            W, b, loss, gW, gb = W_new, b_new, new_loss, new_gW, new_gb
        else:
            for s in range(0, n, cfg.batch_size):
                sl = slice(s, s + cfg.batch_size)
                _, gW, gb = logistic_loss_and_grad(W, b, X[sl], y[sl], cfg.l2_reg)
                W, b = W - lr * gW, b - lr * gb
            loss, gW, gb = logistic_loss_and_grad(W, b, X, y, cfg.l2_reg)
        history.append(loss)
    return W, b, history


def linear_probe(Z_train, y_train, Z_test, y_test, cfg=ProbeConfig(), n_classes=None, W0=None, b0=None):
    Z_train, y_train, Z_test, y_test = _check_labels(Z_train, y_train, Z_test, y_test)
    C = n_classes or int(max(y_train.max(), y_test.max() if y_test.size else 0)) + 1
    W, b, history = fit_logistic(Z_train, y_train, C, cfg, W0, b0)
    pred = np.argmax(Z_test @ W + b, axis=1) if y_test.size else np.zeros(0, dtype=np.int64)
    return _result(pred, y_test, C, history)


# ---------------------------------------------------------------------------
# k-NN probe
# ---------------------------------------------------------------------------

def knn_probe(Z_train, y_train, Z_test, y_test, k=5, n_classes=None):
    """Majority vote of the ``k`` nearest training rows (squared Euclidean).

    Vote ties go to the class with the smallest summed distance, then to the
    smallest class index.  Training rows are never excluded, so probing the
    training set with ``k=1`` recovers its own labels.
    """
    Z_train, y_train, Z_test, y_test = _check_labels(Z_train, y_train, Z_test, y_test)
    if not 1 <= k <= Z_train.shape[0]:
        raise ValueError("k must lie in [1, train size]")
    C = n_classes or int(max(y_train.max(), y_test.max() if y_test.size else 0)) + 1
    D = kernels.pairwise_sq_dist(Z_test, Z_train)
    pred = np.empty(Z_test.shape[0], dtype=np.int64)
    for i in range(Z_test.shape[0]):
        nearest = np.argsort(D[i], kind="stable")[:k]
        labels = y_train[nearest]
        votes = np.bincount(labels, minlength=C)
        dist_sum = np.bincount(labels, weights=D[i, nearest], minlength=C)
        tied = np.flatnonzero(votes == votes.max())
        best = tied[np.argmin(dist_sum[tied])]  # argmin picks the smallest index on equal sums
        pred[i] = best
    return _result(pred, y_test, C)


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

def export_embeddings(Z, y, path):
    """CSV with header ``e0,...,e{d-1},label``, rows in input order."""
    write_csv(path, Z, y, prefix="e")


def import_embeddings(path):
    Z, y, _ = read_csv(path)
    return Z, y
