"""Loop-based reference implementations of every loss.

Deliberately scalar Python sharing no code with the vectorized paths, so the
two can check each other (``cacrlab check`` and the test-suite both do).
``frozen`` pins the conditional weights to constants, which is how
detached-weight gradients are checked by finite differences.
"""

import math

import numpy as np


def sqd(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [x / s for x in e]


def cost(z, y, kind, t_rbf=1.0):
    if kind == "sq_euclidean":
        return sqd(z, y)
    if kind == "neg_inner":
        return -dot(z, y)
    return -math.exp(-t_rbf * sqd(z, y))


def negatives(Q, queue, i, intra=True):
    out = [list(r) for r in queue]
    if intra:
        out += [list(Q[j]) for j in range(len(Q)) if j != i]
    return out


def pos_weights(Q, P, t_pos, sign=1):
    return [softmax([sign * t_pos * sqd(Q[i], p) for p in P[i]]) for i in range(len(Q))]


def neg_weights(Q, queue, t_neg, sign=-1, intra=True):
    return [softmax([sign * t_neg * sqd(Q[i], y) for y in negatives(Q, queue, i, intra)])
            for i in range(len(Q))]


def ca_rows(Q, P, t_pos, kind, t_rbf=1.0, sign=1, frozen=None):
    W = frozen if frozen is not None else pos_weights(Q, P, t_pos, sign)
    return [sum(W[i][k] * cost(Q[i], P[i][k], kind, t_rbf) for k in range(len(P[i])))
            for i in range(len(Q))]


def cr_rows(Q, queue, t_neg, kind, t_rbf=1.0, sign=-1, frozen=None):
    W = frozen if frozen is not None else neg_weights(Q, queue, t_neg, sign)
    rows = []
    for i in range(len(Q)):
        ys = negatives(Q, queue, i)
        rows.append(sum(W[i][j] * cost(Q[i], ys[j], kind, t_rbf) for j in range(len(ys))))
    return rows


def ca(Q, P, t_pos, kind="sq_euclidean", t_rbf=1.0, frozen=None, sign=1):
    r = ca_rows(Q, P, t_pos, kind, t_rbf, sign, frozen)
    return sum(r) / len(r)


def cr(Q, queue, t_neg, kind="sq_euclidean", t_rbf=1.0, frozen=None, sign=-1):
    r = cr_rows(Q, queue, t_neg, kind, t_rbf, sign, frozen)
    return -sum(r) / len(r)


def cacr(Q, P, queue, t_pos, t_neg, kind="sq_euclidean", t_rbf=1.0, frozen_pos=None, frozen_neg=None,
         pos_sign=1, neg_sign=-1):
    return (ca(Q, P, t_pos, kind, t_rbf, frozen_pos, pos_sign)
            + cr(Q, queue, t_neg, kind, t_rbf, frozen_neg, neg_sign))


def uaur(Q, P, queue, kind="sq_euclidean", t_rbf=1.0):
    M = len(Q)
    pos = sum(sum(cost(Q[i], p, kind, t_rbf) for p in P[i]) / len(P[i]) for i in range(M)) / M
    neg = 0.0
    for i in range(M):
        ys = negatives(Q, queue, i)
        neg += sum(cost(Q[i], y, kind, t_rbf) for y in ys) / len(ys)
    return pos - neg / M


def cr_rbf(Q, queue, t_neg, t_rbf, frozen=None, sign=-1):
    """Direct (non-log-domain) evaluation."""
    W = frozen if frozen is not None else neg_weights(Q, queue, t_neg, sign)
    total = 0.0
    for i in range(len(Q)):
        ys = negatives(Q, queue, i)
        total += sum(W[i][j] * math.exp(-t_rbf * sqd(Q[i], ys[j])) for j in range(len(ys)))
    return math.log(total / len(Q))


def margin(Q, P, queue, t_pos, t_neg, m, kind="sq_euclidean", t_rbf=1.0, frozen_pos=None, frozen_neg=None,
           pos_sign=1, neg_sign=-1):
    a = ca_rows(Q, P, t_pos, kind, t_rbf, pos_sign, frozen_pos)
    r = cr_rows(Q, queue, t_neg, kind, t_rbf, neg_sign, frozen_neg)
    return sum(max(0.0, a[i] - r[i] + m) for i in range(len(Q))) / len(Q)


def infonce(Q, P, queue, tau, k=0):
    total = 0.0
    for i in range(len(Q)):
        sp = dot(Q[i], P[i][k]) / tau
        logits = [sp] + [dot(Q[i], y) / tau for y in negatives(Q, queue, i)]
        total += -math.log(math.exp(sp) / sum(math.exp(s) for s in logits))
    return total / len(Q)


def multi_infonce(Q, P, queue, tau):
    K = len(P[0])
    return sum(infonce(Q, P, queue, tau, k) for k in range(K)) / K


def align_uniform(Q, P, queue, tau, alpha=2.0):
    M = len(Q)
    align = sum(math.sqrt(sqd(Q[i], P[i][0])) ** alpha for i in range(M)) / M
    unif = 0.0
    for i in range(M):
        ys = negatives(Q, queue, i)
        unif += math.log(sum(math.exp(dot(Q[i], y) / tau) for y in ys) / len(ys))
    return align + unif / M


POS_WEIGHTED = ("cacr", "ca", "cacr_rbf", "cacr_margin")
NEG_WEIGHTED = ("cacr", "cr", "cacr_rbf", "cr_rbf", "cacr_margin")


def loss_value(name, Q, P, queue, t_pos, t_neg, tau, kind="sq_euclidean", t_rbf=1.0, m=0.0,
               frozen_pos=None, frozen_neg=None, pos_sign=1, neg_sign=-1, loss_t_rbf=None,
               align_exponent=2.0):
    """Dispatch by loss name, mirroring ``LossSpec`` names.

    ``t_rbf`` belongs to the RBF cost kind; ``loss_t_rbf`` to the log-domain
    RBF repulsion losses.
    """
    Q, P, queue = np.asarray(Q).tolist(), np.asarray(P).tolist(), np.asarray(queue).tolist()
    lt = t_rbf if loss_t_rbf is None else loss_t_rbf
    if name == "cacr":
        return cacr(Q, P, queue, t_pos, t_neg, kind, t_rbf, frozen_pos, frozen_neg, pos_sign, neg_sign)
    if name == "ca":
        return ca(Q, P, t_pos, kind, t_rbf, frozen_pos, pos_sign)
    if name == "cr":
        return cr(Q, queue, t_neg, kind, t_rbf, frozen_neg, neg_sign)
    if name == "cacr_rbf":
        return (ca(Q, P, t_pos, "sq_euclidean", 1.0, frozen_pos, pos_sign)
                + cr_rbf(Q, queue, t_neg, lt, frozen_neg, neg_sign))
    if name == "cr_rbf":
        return cr_rbf(Q, queue, t_neg, lt, frozen_neg, neg_sign)
    if name == "uaur":
        return uaur(Q, P, queue, kind, t_rbf)
    if name == "cacr_margin":
        return margin(Q, P, queue, t_pos, t_neg, m, kind, t_rbf, frozen_pos, frozen_neg, pos_sign, neg_sign)
    if name == "infonce":
        return infonce(Q, P, queue, tau)
    if name == "multi_infonce":
        return multi_infonce(Q, P, queue, tau)
    if name == "align_uniform":
        return align_uniform(Q, P, queue, tau, align_exponent)
    raise ValueError(name)


def spec_value(spec, Q, P, queue, frozen_pos=None, frozen_neg=None):
    """Reference value of a ``LossSpec`` on raw arrays."""
    t = spec.temps
    return loss_value(spec.name, Q, P, queue, t.t_pos, t.t_neg, t.tau, spec.cost.kind, spec.cost.t_rbf,
                      spec.margin, frozen_pos, frozen_neg, spec.polarity.pos_sign, spec.polarity.neg_sign,
                      spec.t_rbf, spec.align_exponent)


def spec_frozen_weights(spec, Q, P, queue):
    """Reference weights for the detached paths of ``spec`` (``None`` where live)."""
    Q, P, queue = np.asarray(Q).tolist(), np.asarray(P).tolist(), np.asarray(queue).tolist()
    t, pol, flow = spec.temps, spec.polarity, spec.flow
    fp = fn = None
    if spec.name in POS_WEIGHTED and not flow.through_pos_weights:
        fp = pos_weights(Q, P, t.t_pos, pol.pos_sign)
    if spec.name in NEG_WEIGHTED and not flow.through_neg_weights:
        fn = neg_weights(Q, queue, t.t_neg, pol.neg_sign)
    return fp, fn


def embedding_gradient_error(spec, batch, h=1e-5):
    """Max relative error between analytic and finite-difference embedding gradients.

    Detached weights are frozen at their base values in the reference, so
    the finite differences see exactly the function the analytic path
    differentiates.  The queue is treated as live here (``detach_queue`` is
    ignored) so its gradient is checked too.
    """
    from .losses import ContrastiveBatch

    Q = batch.queries.copy()
    P = batch.positives.copy()
    N = batch.queue.copy()
    live = ContrastiveBatch(Q, P, N, intra_batch=True, detach_queue=False)
    ev = spec.evaluate(live)
    fp, fn = spec_frozen_weights(spec, Q, P, N)
    f = lambda: spec_value(spec, Q, P, N, fp, fn)  # noqa: E731
    errs = [rel_err(ev.grad_queries, central_diff(f, Q, h)),
            rel_err(ev.grad_positives, central_diff(f, P, h))]
    if N.size:
        errs.append(rel_err(ev.grad_negatives, central_diff(f, N, h)))
    return max(errs)


def parameter_gradient_error(spec, params, X, M, K, h=1e-5):
    """Relative error of encoder-parameter gradients for ``loss(f_theta(X))``.

    ``X`` stacks ``M`` query inputs followed by ``M*K`` positive inputs.
    """
    from .encoder import MlpParams, mlp_backward, mlp_forward
    from .losses import ContrastiveBatch

    Z, cache = mlp_forward(params, X)
    d = Z.shape[1]
    Qz, Pz = Z[:M], Z[M:].reshape(M, K, d)
    ev = spec.evaluate(ContrastiveBatch(Qz, Pz))
    gZ = np.concatenate([ev.grad_queries, ev.grad_positives.reshape(M * K, d)])
    analytic = mlp_backward(params, cache, gZ).flat()
    empty = np.zeros((0, d))
    fp, fn = spec_frozen_weights(spec, Qz, Pz, empty)
    theta = params.flat()

    def f():
        p = MlpParams.from_flat(params.spec, theta)
        Zt = mlp_forward(p, X)[0]
        return spec_value(spec, Zt[:M], Zt[M:].reshape(M, K, d), empty, fp, fn)

    return rel_err(analytic, central_diff(f, theta, h))


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` wrt array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for n in range(flat.size):
        orig = flat[n]
        flat[n] = orig + h
        fp = f()
        flat[n] = orig - h
        fm = f()
        flat[n] = orig
        gflat[n] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)
