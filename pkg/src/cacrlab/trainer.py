"""Mini-batch SGD training in single-encoder or momentum-queue mode."""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import AugmentationSpec, make_contrastive_batch, train_val_split
from .encoder import ema_update, init_params, mlp_backward, mlp_forward
from .errors import CollapseDetected, EmptyValidation, NonFiniteLoss, ShapeMismatch, ZeroNorm
from .losses import ContrastiveBatch, LossSpec
from .rng import make_rng

RUN_COLUMNS = ("epoch", "loss", "ca", "cr", "entropy", "mi", "align", "uniform", "seconds")

DEFAULT_DECAY_FRACTIONS = (0.775, 0.85, 0.925)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = LossSpec()
    M: int = 64
    K: int = 4
    epochs: int = 200
    lr: float = None
    lr_schedule: tuple = None
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    mode: str = "simclr"
    queue_size: int = 1024
    ema: float = 0.99
    seed: int = 0
    val_fraction: float = 0.2
    record_timing: bool = False

    def __post_init__(self):
        if self.M < 2 or self.K < 1 or self.epochs < 0:
            raise ValueError("need M >= 2, K >= 1, epochs >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.sgd_momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("sgd_momentum must lie in [0, 1) and weight_decay be nonnegative")
        if self.mode not in ("simclr", "momentum_queue"):
            raise ValueError("mode must be 'simclr' or 'momentum_queue'")
        if self.queue_size < 1 or not 0.0 <= self.ema <= 1.0:
            raise ValueError("queue_size must be positive and ema in [0, 1]")
        sched = self.schedule
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr_schedule epochs must be strictly increasing")

    @property
    def base_lr(self):
        return self.lr if self.lr is not None else 0.12 * self.M / 256.0

    @property
    def schedule(self):
        if self.lr_schedule is not None:
            return tuple((int(e), float(f)) for e, f in self.lr_schedule)
        merged = {}
        for fr in DEFAULT_DECAY_FRACTIONS:
            e = int(round(fr * self.epochs))
            merged[e] = merged.get(e, 1.0) * 0.1  # short runs can round milestones together
        return tuple(sorted(merged.items()))

    def lr_at(self, epoch):
        lr = self.base_lr
        for e, factor in self.schedule:
            if epoch >= e:
                lr *= factor
        return lr


class MomentumQueue:
    """Fixed-capacity FIFO of key vectors backed by a ring buffer."""

    def __init__(self, capacity, dim):
        self.capacity = int(capacity)
        self.buffer = np.zeros((self.capacity, dim))
        self.cursor = 0
        self.count = 0

    def __len__(self):
        return self.count

    def enqueue(self, keys):
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.buffer.shape[1]:
            raise ShapeMismatch("key rows do not match queue width")
        for row in keys[-self.capacity:]:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
        self.count = min(self.capacity, self.count + keys.shape[0])

    def keys(self):
        """Stored keys, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate([self.buffer[self.cursor:], self.buffer[: self.cursor]])


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path, config_hash=None):
        """Full-precision CSV; ``config_hash`` adds a constant trailing column."""
        extra = [] if config_hash is None else [config_hash]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(RUN_COLUMNS) + (["config_hash"] if extra else []))
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in RUN_COLUMNS[1:]] + extra)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, grads, lr, velocity, sgd_momentum=0.9, weight_decay=0.0):
    """Heavy-ball SGD with L2 decay folded into the gradient.

    ``v <- mu v + (g + wd p)``, ``p <- p - lr v``.  Works on any objects with
    matching ``arrays()`` (``MlpParams``) or on plain numpy arrays.
    """
    if isinstance(params, np.ndarray):
        if params.shape != grads.shape or params.shape != velocity.shape:
            raise ShapeMismatch("params, grads and velocity must share a shape")
        v = sgd_momentum * velocity + (grads + weight_decay * params)
        return params - lr * v, v
    new_p, new_v = params.copy(), velocity.copy()
    for p, g, v in zip(new_p.arrays(), grads.arrays(), new_v.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeMismatch("params, grads and velocity must share a shape")
        v *= sgd_momentum
        v += g + weight_decay * p
        p -= lr * v
    return new_p, new_v


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def epoch_diagnostics(val_embeddings, t_neg, tau):
    """Average conditional entropy, mutual information, alignment and uniformity.

    ``val_embeddings`` is a list of ``(Zq, Zp)`` pairs: query embeddings (B, d)
    and one positive view each (B, d).  Negatives are the other queries of the
    same batch, so the support size is ``n = B - 1``.
    """
    if not val_embeddings:
        raise EmptyValidation("need at least one validation batch")
    H, I, A, U = [], [], [], []
    for Zq, Zp in val_embeddings:
        batch = ContrastiveBatch(Zq, Zp[:, None, :])
        w = losses.negative_weights(batch, t_neg)
        H.append(losses.conditional_entropy(w))
        I.append(losses.mutual_information(w))
        A.append(float(np.mean(np.sum((Zq - Zp) ** 2, axis=1))))
        au = losses.align_uniform_loss(batch, tau)
        U.append(au.parts["cr"])
    return {"entropy": float(np.mean(H)), "mi": float(np.mean(I)),
            "align": float(np.mean(A)), "uniform": float(np.mean(U))}


def _forward(params, X):
    try:
        return mlp_forward(params, X)
    except ZeroNorm as exc:
        raise CollapseDetected(str(exc)) from exc


def _check_finite(ev):
    if not math.isfinite(ev.value) or not np.isfinite(ev.grad_queries).all():
        raise NonFiniteLoss(f"loss evaluated to {ev.value!r}")


class _Validation:
    """Fixed validation views, drawn once so epoch-to-epoch changes reflect the encoder only."""

    def __init__(self, val_set, aug, M, seed):
        if len(val_set) < 2:
            raise EmptyValidation("validation split needs at least 2 rows")
        rng = make_rng(seed, "val")
        B = min(M, len(val_set))
        perm = rng.permutation(len(val_set))
        self.batches = []
        for b in range(len(val_set) // B):
            raw = make_contrastive_batch(val_set, aug, B, 1, rng, base_index=perm[b * B:(b + 1) * B])
            self.batches.append((raw.queries, raw.positives[:, 0, :]))

    def diagnostics(self, params, t_neg, tau):
        embedded = [(_forward(params, q)[0], _forward(params, p)[0]) for q, p in self.batches]
        return epoch_diagnostics(embedded, t_neg, tau)


def _split(dataset, config):
    return train_val_split(dataset, config.val_fraction, make_rng(config.seed, "split"))


def _epoch_row(epoch, sums, steps, diag, t0, config):
    elapsed = time.perf_counter() - t0
    row = {"epoch": epoch}
    for key in ("loss", "ca", "cr"):
        row[key] = sums[key] / max(steps, 1)
    row.update(diag)
    row["seconds"] = elapsed if config.record_timing else 0.0
    row["wall_seconds"] = elapsed
    return row


def _accumulate(sums, ev):
    sums["loss"] += ev.value
    sums["ca"] += ev.parts.get("ca", 0.0)
    sums["cr"] += ev.parts.get("cr", 0.0)


def _diag_temps(config):
    t_neg = config.loss.temps.t_neg
    return t_neg, 1.0 / (2.0 * t_neg)


def train_simclr_style(dataset, spec, config, aug=AugmentationSpec(), on_epoch=None, init=None):
    """Single encoder, negatives are the other queries of each batch.

    Returns ``(params, RunRecord)``.  ``on_epoch(row)`` is called after each
    epoch's diagnostics.
    """
    if config.mode != "simclr":
        raise ValueError("config.mode must be 'simclr'")
    train, val = _split(dataset, config)
    params = init.copy() if init is not None else init_params(spec, make_rng(config.seed, "init"))
    velocity = params.zeros_like()
    record = RunRecord()
    if config.epochs == 0:
        return params, record
    validation = _Validation(val, aug, config.M, config.seed)
    M, K, d = config.M, config.K, spec.d_out
    n_steps = len(train) // M
    if n_steps == 0:
        raise ValueError(f"training split has {len(train)} rows, fewer than M={M}")
    t_neg, tau = _diag_temps(config)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = make_rng(config.seed, "train", epoch)
        perm = rng.permutation(len(train))
        lr = config.lr_at(epoch)
        sums = {"loss": 0.0, "ca": 0.0, "cr": 0.0}
        for step in range(n_steps):
            raw = make_contrastive_batch(train, aug, M, K, rng, base_index=perm[step * M:(step + 1) * M])
            X = np.concatenate([raw.queries, raw.positives.reshape(M * K, -1)])
            Z, cache = _forward(params, X)
            batch = ContrastiveBatch(Z[:M], Z[M:].reshape(M, K, d))
            ev = config.loss.evaluate(batch)
            _check_finite(ev)
            _accumulate(sums, ev)
            gZ = np.concatenate([ev.grad_queries, ev.grad_positives.reshape(M * K, d)])
            grads = mlp_backward(params, cache, gZ)
            params, velocity = sgd_step(params, grads, lr, velocity, config.sgd_momentum, config.weight_decay)
        diag = validation.diagnostics(params, t_neg, tau)
        row = _epoch_row(epoch + 1, sums, n_steps, diag, t0, config)
        record.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, record


@dataclass
class MomentumState:
    online: object
    target: object
    velocity: object
    queue: MomentumQueue


def momentum_step(state, raw, config, lr):
    """One online update, queue refresh and target EMA; returns the LossEval."""
    M, K = raw.positives.shape[:2]
    d = state.online.spec.d_out
    Zq, cache = _forward(state.online, raw.queries)
    Zk = _forward(state.target, raw.positives.reshape(M * K, -1))[0].reshape(M, K, d)
    batch = ContrastiveBatch(Zq, Zk, queue=state.queue.keys(), intra_batch=True, detach_queue=True)
    ev = config.loss.evaluate(batch)
    _check_finite(ev)
    grads = mlp_backward(state.online, cache, ev.grad_queries)
    state.online, state.velocity = sgd_step(state.online, grads, lr, state.velocity,
                                            config.sgd_momentum, config.weight_decay)
    state.queue.enqueue(Zk[:, 0, :])
    state.target = ema_update(state.target, state.online, config.ema)
    return ev


def init_momentum_state(spec, config, init=None):
    online = init.copy() if init is not None else init_params(spec, make_rng(config.seed, "init"))
    return MomentumState(online, online.copy(), online.zeros_like(),
                         MomentumQueue(config.queue_size, spec.d_out))


def train_momentum_queue(dataset, spec, config, aug=AugmentationSpec(), on_epoch=None, init=None):
    """Online encoder for queries, EMA target encoder for keys, FIFO key queue.

    Target keys act as the positives (no gradient) and fill the queue; the
    repulsion support of each query is the queue plus the other online
    queries of the batch.
    """
    if config.mode != "momentum_queue":
        raise ValueError("config.mode must be 'momentum_queue'")
    train, val = _split(dataset, config)
    state = init_momentum_state(spec, config, init)
    record = RunRecord()
    if config.epochs == 0:
        return state.online, record
    validation = _Validation(val, aug, config.M, config.seed)
    M, K = config.M, config.K
    n_steps = len(train) // M
    if n_steps == 0:
        raise ValueError(f"training split has {len(train)} rows, fewer than M={M}")
    t_neg, tau = _diag_temps(config)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = make_rng(config.seed, "train", epoch)
        perm = rng.permutation(len(train))
        lr = config.lr_at(epoch)
        sums = {"loss": 0.0, "ca": 0.0, "cr": 0.0}
        for step in range(n_steps):
            raw = make_contrastive_batch(train, aug, M, K, rng, base_index=perm[step * M:(step + 1) * M])
            _accumulate(sums, momentum_step(state, raw, config, lr))
        diag = validation.diagnostics(state.online, t_neg, tau)
        row = _epoch_row(epoch + 1, sums, n_steps, diag, t0, config)
        record.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return state.online, record


def train(dataset, spec, config, aug=AugmentationSpec(), on_epoch=None, init=None):
    fn = train_simclr_style if config.mode == "simclr" else train_momentum_queue
    return fn(dataset, spec, config, aug, on_epoch, init)
