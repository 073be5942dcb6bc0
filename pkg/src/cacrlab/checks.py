"""Named invariant groups run by ``cacrlab check``.

Each group draws its own seeded random instances, returns ``(ok, detail)``
and never raises: an exception inside a group is reported as a failure of
that group.  Kernels are always reached through the ``kernels`` module so a
patched kernel shows up in every group that depends on it.
"""

import math

import numpy as np

from . import kernels, losses, reference
from .encoder import MlpSpec, init_params
from .losses import (NEG_INNER_PRODUCT, SQUARED_EUCLIDEAN, ContrastiveBatch, CostKind, GradFlow, LossSpec,
                     Temperatures, WeightPolarity)
from .rng import make_rng

COSTS = (SQUARED_EUCLIDEAN, NEG_INNER_PRODUCT, CostKind.rbf(1.5))
FLOWS = (GradFlow(False, True), GradFlow(True, True))
K1_LOSSES = ("infonce", "align_uniform")


def random_batch(rng, M, K, d, n_queue=0):
    """Unit-norm queries, positive blocks and queue with i.i.d. Gaussian directions."""
    def unit(n):
        X = rng.standard_normal((n, d))
        return X / np.sqrt((X * X).sum(axis=1, keepdims=True))
    Q = unit(M)
    P = unit(M * K).reshape(M, K, d)
    N = unit(n_queue) if n_queue else None
    return ContrastiveBatch(Q, P, N)


def _draw(rng, max_M=6, max_K=3, max_d=5, max_queue=3, K=None):
    M = int(rng.integers(2, max_M + 1))
    K = int(rng.integers(1, max_K + 1)) if K is None else K
    d = int(rng.integers(2, max_d + 1))
    return random_batch(rng, M, K, d, int(rng.integers(0, max_queue + 1)))


def _queue(batch):
    return batch.queue if batch.queue is not None else np.zeros((0, batch.d))


def _neg_cost_rows(batch):
    """Squared distances from each query to its negative support, shape (M, n)."""
    idx = losses.negative_support_index(batch)
    Y = np.concatenate([_queue(batch), batch.queries])
    D = kernels.pairwise_sq_dist(batch.queries, Y)
    return D[np.arange(batch.M)[:, None], idx], Y[idx]


def _pos_dist(batch):
    diff = batch.positives - batch.queries[:, None, :]
    return (diff * diff).sum(axis=2)


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------

def check_normalization(n=50):
    rng = make_rng(0, "check", "normalization")
    worst = 0.0
    for _ in range(n):
        b = _draw(rng)
        t = float(rng.uniform(0.05, 5.0))
        for w in (losses.positive_weights(b, t), losses.negative_weights(b, t)):
            worst = max(worst, np.abs(w.sum(axis=1) - 1.0).max())
        S = rng.standard_normal((4, 7)) * 30
        worst = max(worst, np.abs(kernels.softmax_rows(S).sum(axis=1) - 1.0).max())
        shift = np.abs(kernels.softmax_rows(S + 123.0) - kernels.softmax_rows(S)).max()
        Z, _ = kernels.l2_normalize_rows(rng.standard_normal((5, 3)))
        unit = np.abs(np.sqrt((Z * Z).sum(axis=1)) - 1.0).max()
        diag = np.abs(np.diag(kernels.pairwise_sq_dist(Z, Z))).max()
        gram = np.abs(kernels.pairwise_sq_dist(Z, Z) - 2.0 * (1.0 - Z @ Z.T)).max()
        if shift > 1e-12 or unit > 1e-12 or diag > 1e-12 or gram > 1e-10:
            return False, f"shift {shift:.2e}, unit {unit:.2e}, diag {diag:.2e}, gram {gram:.2e}"
    return worst <= 1e-12, f"max |row sum - 1| = {worst:.2e}"


def check_oracle_equivalence(n=20):
    rng = make_rng(0, "check", "oracle")
    worst, where = 0.0, ""
    for i in range(n):
        cost = COSTS[i % len(COSTS)]
        for name in losses.LOSS_NAMES:
            b = _draw(rng, max_M=5, max_K=3 if name not in K1_LOSSES else 1, max_d=4)
            temps = Temperatures(*rng.uniform(0.2, 3.0, size=3))
            spec = LossSpec(name, temps, cost, margin=float(rng.uniform(0, 1)))
            got = spec.evaluate(b).value
            want = reference.spec_value(spec, b.queries, b.positives, _queue(b))
            err = abs(got - want) / max(1.0, abs(want))
            if err > worst:
                worst, where = err, f"{name}/{cost.kind}"
    return worst < 1e-10, f"max error {worst:.2e} ({where})"


def check_degenerate_limits(n=100):
    rng = make_rng(0, "check", "limits")
    worst = 0.0
    for _ in range(20):
        b = _draw(rng)
        tiny = losses.cacr_loss(b, Temperatures(1e-8, 1e-8)).value
        worst = max(worst, abs(tiny - losses.uaur_loss(b).value))
    if worst >= 1e-6:
        return False, f"|CACR(t=1e-8) - UAUR| = {worst:.2e}"
    for _ in range(n):
        b = _draw(rng, K=3)
        wp = losses.positive_weights(b, 50.0)
        wn = losses.negative_weights(b, 50.0)
        Dn, _ = _neg_cost_rows(b)
        if not (np.array_equal(wp.argmax(1), _pos_dist(b).argmax(1))
                and np.array_equal(wn.argmax(1), Dn.argmin(1))):
            return False, "argmax weight is not the farthest positive / closest negative at t=50"
    b = _draw(rng, K=1)
    w1 = losses.positive_weights(b, 3.0)
    ca = losses.ca_loss(b, 3.0).value
    plain = float(_pos_dist(b).mean())
    if not np.all(w1 == 1.0) or abs(ca - plain) > 1e-12:
        return False, "K=1 positive weights are not a point mass"
    return True, f"|CACR(t=1e-8) - UAUR| = {worst:.2e}; argmax limits {n}/{n}; K=1 point mass"


def check_property1(n=20):
    rng = make_rng(0, "check", "property1")
    for _ in range(n):
        b = _draw(rng)
        P = np.repeat(b.queries[:, None, :], b.K, axis=1)
        same = ContrastiveBatch(b.queries, P, b.queue)
        ev = losses.ca_loss(same, float(rng.uniform(0.1, 3.0)))
        if ev.value != 0.0 or np.abs(ev.grad_queries).max() != 0.0:
            return False, f"ca_loss at equal positives = {ev.value:.2e}"
        P2 = P.copy()
        P2[0, 0, 0] += 1e-3
        if not losses.ca_loss(ContrastiveBatch(b.queries, P2, b.queue), 1.0).value > 0.0:
            return False, "perturbed positive gives ca_loss <= 0"
    return True, f"zero iff positives equal queries on {n} batches"


def check_lemma2_identities(n=50):
    rng = make_rng(0, "check", "lemma2")
    worst = 0.0
    for _ in range(n):
        b = _draw(rng, max_M=8, max_queue=6)
        w = losses.negative_weights(b, float(rng.uniform(0.05, 5.0)))
        n_sup = w.shape[1]
        worst = max(worst, abs(losses.mutual_information(w) + losses.conditional_entropy(w) - math.log(n_sup)))
        uniform = np.full_like(w, 1.0 / n_sup)
        if abs(losses.conditional_entropy(uniform) - math.log(n_sup)) > 1e-12:
            return False, "uniform rows do not reach ln n"
        if losses.conditional_entropy(w) > math.log(n_sup) + 1e-12:
            return False, "entropy exceeds ln n"
    return worst <= 1e-10, f"max |I + H - ln n| = {worst:.2e}"


def check_lemma3_inequality(n=1000):
    rng = make_rng(0, "check", "lemma3")
    worst = np.inf
    for _ in range(n):
        b = _draw(rng, max_M=6, max_d=6, max_queue=4)
        t_neg = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        tau = float(np.exp(rng.uniform(np.log(0.05), np.log(2.0))))
        w = losses.negative_weights(b, t_neg)
        _, Y = _neg_cost_rows(b)
        S = np.einsum("id,ijd->ij", b.queries, Y) / tau
        worst = min(worst, losses.uniformity_bound_slack(S, w).min())
    return worst >= -1e-10, f"min slack {worst:.2e} over {n} draws"


def check_metric_equivalence(n=50):
    rng = make_rng(0, "check", "metric")
    worst = 0.0
    for _ in range(n):
        b = _draw(rng)
        t = float(rng.uniform(0.05, 5.0))
        for fn in (losses.positive_weights, losses.negative_weights):
            a = fn(b, t, metric="sq_euclidean")
            c = fn(b, t, metric="neg_inner")
            worst = max(worst, np.abs(a - c).max())
    return worst <= 1e-12, f"max weight difference {worst:.2e}"


def check_polarity_ablation(n=100):
    rng = make_rng(0, "check", "polarity")
    flipped = WeightPolarity(pos_sign=-1, neg_sign=1)
    for _ in range(n):
        b = _draw(rng, K=3)
        t = float(rng.uniform(0.1, 5.0))
        wp = losses.positive_weights(b, t, flipped)
        wn = losses.negative_weights(b, t, flipped)
        Dn, _ = _neg_cost_rows(b)
        if not np.array_equal(wp.argmax(1), _pos_dist(b).argmin(1)):
            return False, "flipped pos_sign: argmax is not the closest positive"
        if not np.array_equal(wn.argmax(1), Dn.argmax(1)):
            return False, "flipped neg_sign: argmax is not the farthest negative"
    return True, f"argmax flips on {n}/{n} batches"


def check_rbf_log_domain(n=50):
    rng = make_rng(0, "check", "rbf")
    worst = 0.0
    for _ in range(n):
        b = _draw(rng, max_queue=4)
        t_neg, t_rbf = rng.uniform(0.1, 4.0, size=2)
        got = losses.cr_rbf_loss(b, float(t_neg), float(t_rbf)).value
        want = reference.cr_rbf(b.queries.tolist(), _queue(b).tolist(), t_neg, t_rbf)
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    return worst <= 1e-10, f"max log-domain vs direct error {worst:.2e}"


def check_gradient_checks(n=2):
    rng = make_rng(0, "check", "gradients")
    worst, where = 0.0, ""
    for _ in range(n):
        for cost in COSTS:
            for flow in FLOWS:
                for name in losses.LOSS_NAMES:
                    b = _draw(rng, max_M=4, max_K=1 if name in K1_LOSSES else 3, max_d=4, max_queue=2)
                    spec = LossSpec(name, Temperatures(1.0, 2.0, 0.5), cost, flow=flow, margin=0.5)
                    err = reference.embedding_gradient_error(spec, b)
                    if err > worst:
                        worst, where = err, f"{name}/{cost.kind}/{flow}"
    spec_mlp = MlpSpec((3, 6, 4), "tanh")
    params = init_params(spec_mlp, rng)
    for name in ("cacr", "infonce"):
        K = 1 if name in K1_LOSSES else 2
        X = rng.standard_normal((3 * (1 + K), 3))
        err = reference.parameter_gradient_error(LossSpec(name), params, X, 3, K)
        if err > worst:
            worst, where = err, f"encoder/{name}"
    return worst < 1e-5, f"max relative error {worst:.2e} ({where})"


def check_backend_agreement():
    if not kernels.HAVE_NUMBA:
        return True, "numba unavailable; numpy backend only"
    rng = make_rng(0, "check", "backend")
    A, B = rng.standard_normal((7, 5)), rng.standard_normal((9, 5))
    S = rng.standard_normal((6, 11)) * 20
    outs = {}
    previous = kernels.set_backend("numpy")
    try:
        for name in ("numpy", "numba"):
            kernels.set_backend(name)
            outs[name] = (kernels.pairwise_sq_dist(A, B), kernels.softmax_rows(S), kernels.logsumexp_rows(S))
    finally:
        kernels.set_backend(previous)
    worst = max(np.abs(a - c).max() for a, c in zip(outs["numpy"], outs["numba"]))
    return worst <= 1e-12, f"max numba/numpy difference {worst:.2e}"


GROUPS = {
    "normalization": check_normalization,
    "oracle_equivalence": check_oracle_equivalence,
    "degenerate_limits": check_degenerate_limits,
    "property1": check_property1,
    "lemma2_identities": check_lemma2_identities,
    "lemma3_inequality": check_lemma3_inequality,
    "metric_equivalence": check_metric_equivalence,
    "polarity_ablation": check_polarity_ablation,
    "rbf_log_domain": check_rbf_log_domain,
    "gradient_checks": check_gradient_checks,
    "backend_agreement": check_backend_agreement,
}


def run_checks(names=None, out=print):
    """Run the selected groups (all by default); print one line each; return ``{name: (ok, detail)}``."""
    results = {}
    for name in names or GROUPS:
        try:
            with np.errstate(all="ignore"):
                ok, detail = GROUPS[name]()
        except Exception as exc:  # a crashing group is a failing group
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results[name] = (bool(ok), detail)
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return results
