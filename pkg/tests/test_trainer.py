import math

import numpy as np
import pytest

from cacrlab import losses as L
from cacrlab import reference as R
from cacrlab.data import AugmentationSpec, SyntheticSpec, generate, make_contrastive_batch
from cacrlab.encoder import MlpParams, MlpSpec, init_params, mlp_backward, mlp_forward
from cacrlab.errors import CollapseDetected, EmptyValidation, NonFiniteLoss, ShapeMismatch
from cacrlab.losses import LossSpec, Temperatures
from cacrlab.rng import make_rng
from cacrlab.trainer import (RUN_COLUMNS, MomentumQueue, RunRecord, TrainConfig, epoch_diagnostics,
                             init_momentum_state, momentum_step, sgd_step, train, train_momentum_queue,
                             train_simclr_style)

AUG = AugmentationSpec(noise_std=0.1)
SPEC = MlpSpec((2, 16, 8))


def toy(n=40, seed=0):
    return generate(SyntheticSpec.on_circle(4, 2, 3.0, n, 0.5), make_rng(seed, "data"))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def test_sgd_examples():
    p, g, v = np.array([1.0, -2.0]), np.zeros(2), np.array([0.5, 0.25])
    p2, v2 = sgd_step(p, g, 0.1, v, sgd_momentum=0.9, weight_decay=0.0)
    assert np.allclose(p2, p - 0.1 * v2, atol=1e-16) and np.allclose(v2, 0.9 * v, atol=1e-16)
    p3, _ = sgd_step(p, np.array([1.0, 3.0]), 0.1, np.zeros(2), 0.0, 0.0)
    assert np.allclose(p3, p - 0.1 * np.array([1.0, 3.0]), atol=1e-16)
    p4, _ = sgd_step(np.array([1.0]), np.zeros(1), 1.0, np.zeros(1), 0.0, 1e-4)
    assert p4[0] == 1.0 - 1e-4
    with pytest.raises(ShapeMismatch):
        sgd_step(p, np.zeros(3), 0.1, v)


def test_sgd_on_params_and_decay_shrinks():
    params = init_params(SPEC, make_rng(1, "init"))
    zero = params.zeros_like()
    v = params.zeros_like()
    norms = [np.linalg.norm(params.flat())]
    for _ in range(10):
        params, v = sgd_step(params, zero, 0.5, v, 0.9, 1e-2)
        norms.append(np.linalg.norm(params.flat()))
    assert np.all(np.diff(norms) < 0)


def test_lr_rule_and_schedule():
    cfg = TrainConfig(M=64, epochs=200)
    assert cfg.base_lr == pytest.approx(0.12 * 64 / 256)
    assert cfg.schedule == ((155, 0.1), (170, 0.1), (185, 0.1))
    assert cfg.lr_at(154) == cfg.base_lr
    assert cfg.lr_at(155) == pytest.approx(cfg.base_lr * 0.1)
    assert cfg.lr_at(199) == pytest.approx(cfg.base_lr * 1e-3)
    short = TrainConfig(epochs=3)
    assert short.lr_at(2) == pytest.approx(short.base_lr * 0.1)
    assert short.lr_at(3) == pytest.approx(short.base_lr * 1e-3)
    assert TrainConfig(lr=0.5, lr_schedule=((2, 0.5),)).lr_at(3) == 0.25


def test_train_config_validation():
    for kwargs in ({"M": 1}, {"K": 0}, {"lr": -1.0}, {"sgd_momentum": 1.0}, {"mode": "byol"},
                   {"lr_schedule": ((5, 0.1), (5, 0.1))}, {"ema": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# queue
# ---------------------------------------------------------------------------

def test_queue_fifo():
    N, M, d = 6, 2, 3
    q = MomentumQueue(N, d)
    assert len(q) == 0 and q.keys().shape == (0, d)
    rows = []
    for step in range(N // M + 2):
        keys = np.full((M, d), float(step)) + np.arange(M)[:, None] * 0.1
        rows.extend(keys)
        q.enqueue(keys)
        assert len(q) <= N
    assert np.array_equal(q.keys(), np.array(rows[-N:]))
    with pytest.raises(ShapeMismatch):
        q.enqueue(np.zeros((1, d + 1)))


def test_queue_oversized_enqueue():
    q = MomentumQueue(3, 1)
    q.enqueue(np.arange(5.0)[:, None])
    assert q.keys().ravel().tolist() == [2.0, 3.0, 4.0]


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def test_diagnostics_uniform_rows():
    angles = 2 * np.pi * np.arange(3) / 3
    Z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    row = epoch_diagnostics([(Z, Z)], t_neg=2.0, tau=0.25)
    assert abs(row["entropy"] - math.log(2)) <= 1e-12
    assert abs(row["mi"]) <= 1e-12
    assert row["align"] == 0.0


def test_diagnostics_point_mass():
    Z = np.array([[1.0, 0.0], [0.6, 0.8], [-1.0, 0.0]])
    row = epoch_diagnostics([(Z, Z)], t_neg=1e3, tau=1.0)
    assert row["entropy"] < 1e-12
    assert abs(row["mi"] - math.log(2)) < 1e-12


def test_diagnostics_maximal_entropy_line():
    rng = make_rng(2, "diag")
    Z = rng.standard_normal((768, 4))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    row = epoch_diagnostics([(Z, Z)], t_neg=1e-12, tau=1.0)
    assert abs(row["entropy"] - math.log(767)) < 1e-9
    assert abs(math.log(767) - 6.6425) < 1e-4


def test_diagnostics_empty():
    with pytest.raises(EmptyValidation):
        epoch_diagnostics([], 1.0, 0.5)


# ---------------------------------------------------------------------------
# SimCLR-style training
# ---------------------------------------------------------------------------

def test_epochs_zero_returns_init():
    cfg = TrainConfig(M=8, K=2, epochs=0, seed=3)
    params, record = train_simclr_style(toy(), SPEC, cfg, AUG)
    assert len(record) == 0
    assert np.array_equal(params.flat(), init_params(SPEC, make_rng(3, "init")).flat())


def test_simclr_determinism_and_record(tmp_path):
    cfg = TrainConfig(loss=LossSpec("cacr", Temperatures(1.0, 0.9)), M=16, K=2, epochs=3, seed=4)
    seen = []
    p1, r1 = train(toy(), SPEC, cfg, AUG, on_epoch=seen.append)
    p2, r2 = train(toy(), SPEC, cfg, AUG)
    assert np.array_equal(p1.flat(), p2.flat())
    assert len(r1) == 3 and [r["epoch"] for r in r1.rows] == [1, 2, 3]
    assert seen == r1.rows
    for a, b in zip(r1.rows, r2.rows):
        assert {k: v for k, v in a.items() if k != "wall_seconds"} == {k: v for k, v in b.items() if k != "wall_seconds"}
    r1.to_csv(tmp_path / "a.csv")
    r2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(RUN_COLUMNS)


def test_record_identities_and_finiteness():
    cfg = TrainConfig(M=16, K=2, epochs=2, seed=5)
    _, record = train(toy(), SPEC, cfg, AUG)
    n = 16 - 1  # validation batches have B = M rows
    for row in record.rows:
        assert all(np.isfinite(row[c]) for c in RUN_COLUMNS)
        assert abs(row["entropy"] + row["mi"] - math.log(n)) <= 1e-10
        assert row["seconds"] == 0.0


def test_record_timing_flag():
    cfg = TrainConfig(M=16, K=1, epochs=1, record_timing=True)
    _, record = train(toy(), SPEC, cfg, AUG)
    assert record.rows[0]["seconds"] > 0.0


def test_training_lowers_loss():
    cfg = TrainConfig(loss=LossSpec("cacr", Temperatures(1.0, 0.9)), M=16, K=2, epochs=8, seed=6, lr=0.2)
    _, record = train(toy(80), SPEC, cfg, AUG)
    loss = record.column("loss")
    assert loss[-1] < loss[0]


@pytest.mark.parametrize("name", L.LOSS_NAMES)
def test_every_loss_trains(name):
    K = 1 if name in ("infonce", "align_uniform") else 2
    cfg = TrainConfig(loss=LossSpec(name), M=16, K=K, epochs=1, seed=7)
    _, record = train(toy(), SPEC, cfg, AUG)
    assert len(record) == 1 and np.isfinite(record.rows[0]["loss"])


def test_collapse_detected():
    zero = MlpParams(SPEC, [np.zeros((2, 16)), np.zeros((16, 8))], [np.zeros(16), np.zeros(8)])
    with pytest.raises(CollapseDetected):
        train(toy(), SPEC, TrainConfig(M=8, K=1, epochs=1), AUG, init=zero)


def test_non_finite_loss(monkeypatch):
    def broken(batch, *args, **kwargs):
        z = np.zeros_like(batch.queries)
        return L.LossEval(float("nan"), z, np.zeros_like(batch.positives), np.zeros_like(batch.queue))

    monkeypatch.setattr(L, "uaur_loss", broken)
    with pytest.raises(NonFiniteLoss):
        train(toy(), SPEC, TrainConfig(loss=LossSpec("uaur"), M=8, K=1, epochs=1), AUG)


def test_too_small_training_split():
    with pytest.raises(ValueError):
        train(toy(n=5), SPEC, TrainConfig(M=32, K=1, epochs=1), AUG)


# ---------------------------------------------------------------------------
# momentum-queue training
# ---------------------------------------------------------------------------

def _raw(ds, M, K, seed):
    return make_contrastive_batch(ds, AUG, M, K, make_rng(seed, "raw"))


def test_momentum_zero_tracks_online():
    cfg = TrainConfig(M=8, K=2, mode="momentum_queue", queue_size=16, ema=0.0)
    state = init_momentum_state(SPEC, cfg)
    for s in range(3):
        momentum_step(state, _raw(toy(), 8, 2, s), cfg, 0.05)
        assert np.array_equal(state.target.flat(), state.online.flat())


def test_target_changes_only_through_ema():
    cfg = TrainConfig(M=8, K=2, mode="momentum_queue", queue_size=16, ema=1.0)
    state = init_momentum_state(SPEC, cfg)
    start = state.target.flat().copy()
    for s in range(3):
        momentum_step(state, _raw(toy(), 8, 2, s), cfg, 0.05)
    assert np.array_equal(state.target.flat(), start)
    assert not np.array_equal(state.online.flat(), start)


def test_queue_support_size_after_warmup():
    M = 8
    cfg = TrainConfig(M=M, K=2, mode="momentum_queue", queue_size=M)
    state = init_momentum_state(SPEC, cfg)
    momentum_step(state, _raw(toy(), M, 2, 0), cfg, 0.05)
    assert len(state.queue) == M
    ev = momentum_step(state, _raw(toy(), M, 2, 1), cfg, 0.05)
    assert ev.grad_negatives.shape == (M, SPEC.d_out)
    zq = np.zeros((M, SPEC.d_out))
    batch = L.ContrastiveBatch(zq + 1.0, zq[:, None, :] + 1.0, state.queue.keys())
    assert batch.n_negatives == M + (M - 1)
    assert L.negative_support_index(batch).shape == (M, 2 * M - 1)


def test_momentum_gradient_paths():
    """Queue keys get no gradient, intra-batch negatives do, and the online
    parameter gradient matches finite differences with keys and queue held fixed."""
    M, K = 6, 2
    cfg = TrainConfig(loss=LossSpec("cacr", Temperatures(1.0, 0.9)), M=M, K=K, mode="momentum_queue",
                      queue_size=8, ema=0.9)
    spec = MlpSpec((2, 6, 4), "tanh")
    state = init_momentum_state(spec, cfg)
    ds = toy()
    for s in range(2):
        momentum_step(state, _raw(ds, M, K, s), cfg, 0.05)
    raw = _raw(ds, M, K, 7)
    Zq, cache = mlp_forward(state.online, raw.queries)
    Zk = mlp_forward(state.target, raw.positives.reshape(M * K, -1))[0].reshape(M, K, -1)
    queue = state.queue.keys()
    ev = cfg.loss.evaluate(L.ContrastiveBatch(Zq, Zk, queue))
    assert np.all(ev.grad_negatives == 0.0)
    no_intra = cfg.loss.evaluate(L.ContrastiveBatch(Zq, Zk, queue, intra_batch=False))
    assert np.abs(ev.grad_queries - no_intra.grad_queries).max() > 1e-6

    analytic = mlp_backward(state.online, cache, ev.grad_queries).flat()
    fp, fn = R.spec_frozen_weights(cfg.loss, Zq, Zk, queue)
    theta = state.online.flat()

    def f():
        Z = mlp_forward(MlpParams.from_flat(spec, theta), raw.queries)[0]
        return R.spec_value(cfg.loss, Z, Zk, queue, fp, fn)

    assert R.rel_err(analytic, R.central_diff(f, theta)) < 1e-5


def test_momentum_training_run():
    cfg = TrainConfig(M=16, K=2, epochs=2, mode="momentum_queue", queue_size=32, seed=8)
    p1, r1 = train_momentum_queue(toy(), SPEC, cfg, AUG)
    p2, r2 = train(toy(), SPEC, cfg, AUG)
    assert np.array_equal(p1.flat(), p2.flat())
    assert len(r1) == 2 and all(np.isfinite(r["loss"]) for r in r1.rows)
    with pytest.raises(ValueError):
        train_simclr_style(toy(), SPEC, cfg, AUG)


def test_run_record_column():
    rec = RunRecord([{c: float(i) for c in RUN_COLUMNS} for i in range(3)])
    assert rec.column("loss").tolist() == [0.0, 1.0, 2.0]
