"""Contrastive loss family with analytic embedding gradients.

Every loss takes a :class:`ContrastiveBatch` of embeddings and returns a
:class:`LossEval` holding the value and the gradient with respect to the
queries, the positive blocks and the explicit negative bank (queue).

Internally each query ``i`` is paired with a set of partner vectors ``y_j``
(its positives, or its negative support).  Terms are functions of the squared
distance ``D_ij = ||z_i - y_j||^2`` and/or the inner product ``I_ij = z_i.y_j``,
so a loss only has to produce coefficient matrices ``dL/dD`` and ``dL/dI``;
the chain rule back to ``z`` and ``y`` is shared.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimMismatch, EmptyNegativeSupport, KMismatch

PLUS = 1
MINUS = -1


@dataclass(frozen=True)
class CostKind:
    """Point-to-point transport cost ``c(z, y)``.

    ``sq_euclidean``: ``||z - y||^2``; ``neg_inner``: ``-z.y``;
    ``rbf``: ``-exp(-t_rbf ||z - y||^2)``.
    """

    kind: str = "sq_euclidean"
    t_rbf: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sq_euclidean", "neg_inner", "rbf"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "rbf" and not self.t_rbf > 0:
            raise ValueError("t_rbf must be positive")

    @classmethod
    def rbf(cls, t_rbf):
        return cls("rbf", float(t_rbf))


SQUARED_EUCLIDEAN = CostKind("sq_euclidean")
NEG_INNER_PRODUCT = CostKind("neg_inner")


@dataclass(frozen=True)
class Temperatures:
    t_pos: float = 1.0
    t_neg: float = 2.0
    tau: float = 0.2

    def __post_init__(self):
        for name in ("t_pos", "t_neg", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class WeightPolarity:
    """Sign of the distance inside each conditional-weight exponent.

    The defaults (``+`` for positives, ``-`` for negatives) up-weight distant
    positives and close negatives.
    """

    pos_sign: int = PLUS
    neg_sign: int = MINUS

    def __post_init__(self):
        if self.pos_sign not in (PLUS, MINUS) or self.neg_sign not in (PLUS, MINUS):
            raise ValueError("polarity signs must be +1 or -1")


@dataclass(frozen=True)
class GradFlow:
    """Whether gradients pass through the softmax weights themselves."""

    through_pos_weights: bool = False
    through_neg_weights: bool = True


DEFAULT_POLARITY = WeightPolarity()
DEFAULT_FLOW = GradFlow()


@dataclass
class ContrastiveBatch:
    """Embeddings for one contrastive step.

    queries:   (M, d)
    positives: (M, K, d)
    queue:     optional (N, d) bank of extra negatives shared by every query
    intra_batch: if true, each query's other queries are also negatives
    detach_queue: if true, no gradient is reported for queue rows

    Rows are expected to be unit norm when they come from the encoder, but
    the losses are defined (and differentiated) for arbitrary vectors.
    """

    queries: np.ndarray
    positives: np.ndarray
    queue: np.ndarray = None
    intra_batch: bool = True
    detach_queue: bool = True

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64)
        if self.queries.ndim != 2:
            raise DimMismatch("queries must be (M, d)")
        if self.positives.ndim == 2:
            self.positives = self.positives[:, None, :]
        M, d = self.queries.shape
        if self.positives.ndim != 3 or self.positives.shape[0] != M or self.positives.shape[2] != d:
            raise DimMismatch(
                f"positives must be (M, K, d) = ({M}, K, {d}), got {self.positives.shape}"
            )
        if self.positives.shape[1] < 1 or M < 1:
            raise DimMismatch("need M >= 1 and K >= 1")
        if self.queue is None:
            self.queue = np.zeros((0, d))
        else:
            self.queue = np.asarray(self.queue, dtype=np.float64).reshape(-1, d)

    @property
    def M(self):
        return self.queries.shape[0]

    @property
    def K(self):
        return self.positives.shape[1]

    @property
    def d(self):
        return self.queries.shape[1]

    @property
    def n_queue(self):
        return self.queue.shape[0]

    @property
    def n_negatives(self):
        """Size of every query's negative support."""
        return self.n_queue + (self.M - 1 if self.intra_batch else 0)

    @classmethod
    def intra(cls, queries, positives):
        return cls(queries, positives)


@dataclass
class LossEval:
    value: float
    grad_queries: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray
    parts: dict = field(default_factory=dict)

    def __add__(self, other):
        parts = dict(self.parts)
        for k, v in other.parts.items():
            parts[k] = parts.get(k, 0.0) + v
        return LossEval(
            self.value + other.value,
            self.grad_queries + other.grad_queries,
            self.grad_positives + other.grad_positives,
            self.grad_negatives + other.grad_negatives,
            parts,
        )


# ---------------------------------------------------------------------------
# negative support bookkeeping
# ---------------------------------------------------------------------------

def negative_support_index(batch):
    """Column indices into ``[queue; queries]`` for each query's negatives.

    Row ``i`` lists the queue rows first, then the other queries in index
    order (skipping ``i``).  Shape ``(M, n_negatives)``.
    """
    M, N = batch.M, batch.n_queue
    cols = [np.broadcast_to(np.arange(N), (M, N))]
    if batch.intra_batch:
        other = np.array([[j for j in range(M) if j != i] for i in range(M)], dtype=np.int64)
        cols.append(other.reshape(M, M - 1) + N)
    idx = np.concatenate(cols, axis=1).astype(np.int64)
    if idx.shape[1] == 0:
        raise EmptyNegativeSupport("every query needs at least one negative")
    return idx


def _neg_geometry(batch):
    idx = negative_support_index(batch)
    Y = np.concatenate([batch.queue, batch.queries], axis=0)
    rows = np.arange(batch.M)[:, None]
    D = kernels.pairwise_sq_dist(batch.queries, Y)[rows, idx]
    I = (batch.queries @ Y.T)[rows, idx]
    return idx, Y, D, I


def _pos_geometry(batch):
    diff = batch.queries[:, None, :] - batch.positives
    D = np.einsum("ikd,ikd->ik", diff, diff)
    I = np.einsum("id,ikd->ik", batch.queries, batch.positives)
    return D, I


# ---------------------------------------------------------------------------
# conditional weights
# ---------------------------------------------------------------------------

def _weight_logits(D, I, t, sign, metric):
    if metric == "sq_euclidean":
        return sign * t * D
    if metric == "neg_inner":
        # ||z - y||^2 = 2 - 2 z.y on the sphere, so this differs from the
        # squared-distance logits by a per-row constant only
        return sign * 2.0 * t * (-I)
    raise ValueError(f"unknown weight metric {metric!r}")


def positive_weights(batch, t_pos, polarity=DEFAULT_POLARITY, metric="sq_euclidean"):
    """Row-stochastic (M, K) attraction weights over each query's positives."""
    D, I = _pos_geometry(batch)
    return kernels.softmax_rows(_weight_logits(D, I, t_pos, polarity.pos_sign, metric))


def negative_weights(batch, t_neg, polarity=DEFAULT_POLARITY, metric="sq_euclidean"):
    """Row-stochastic (M, n) repulsion weights; columns follow :func:`negative_support_index`."""
    _, _, D, I = _neg_geometry(batch)
    return kernels.softmax_rows(_weight_logits(D, I, t_neg, polarity.neg_sign, metric))


# ---------------------------------------------------------------------------
# shared term machinery
# ---------------------------------------------------------------------------

def _cost(D, I, cost):
    """Return cost matrix and its partial derivatives wrt D and I."""
    if cost.kind == "sq_euclidean":
        return D, np.ones_like(D), np.zeros_like(D)
    if cost.kind == "neg_inner":
        return -I, np.zeros_like(D), -np.ones_like(D)
    k = np.exp(-cost.t_rbf * D)
    return -k, cost.t_rbf * k, np.zeros_like(D)


def _weighted_rows(D, I, logit_scale, cost, live):
    """Per-row expected cost under softmax(logit_scale * D).

    Returns ``(rows, dD, dI, w)`` where ``dD``/``dI`` are the partials of
    ``rows[i]`` wrt ``D[i, j]`` and ``I[i, j]``.  ``live=False`` treats the
    weights as constants.
    """
    if logit_scale == 0.0:
        w = np.full(D.shape, 1.0 / D.shape[1])
    else:
        w = kernels.softmax_rows(logit_scale * D)
    C, dC_dD, dC_dI = _cost(D, I, cost)
    rows = np.einsum("ij,ij->i", w, C)
    dD = w * dC_dD
    if live and logit_scale != 0.0:
        dD = dD + logit_scale * w * (C - rows[:, None])
    dI = w * dC_dI
    return rows, dD, dI, w


def _grad_blocked(Z, P, dD, dI):
    """Chain rule for partners stored per query as ``P`` (M, K, d)."""
    diff = Z[:, None, :] - P
    gP_from_D = -2.0 * dD[:, :, None] * diff
    gZ = -gP_from_D.sum(axis=1) + np.einsum("ik,ikd->id", dI, P)
    gP = gP_from_D + dI[:, :, None] * Z[:, None, :]
    return gZ, gP


def _grad_indexed(batch, idx, Y, dD, dI):
    """Chain rule for partners taken from ``Y = [queue; queries]`` by ``idx``.

    Returns ``(grad_queries, grad_queue)``; the queries' gradient includes
    their role as intra-batch negatives of other queries.
    """
    M, N = batch.M, batch.n_queue
    rows = np.arange(M)[:, None]
    A = np.zeros((M, Y.shape[0]))
    B = np.zeros((M, Y.shape[0]))
    A[rows, idx] = dD
    B[rows, idx] = dI
    Z = batch.queries
    gZ = 2.0 * (A.sum(axis=1)[:, None] * Z - A @ Y) + B @ Y
    gY = -2.0 * (A.T @ Z - A.sum(axis=0)[:, None] * Y) + B.T @ Z
    gZ = gZ + gY[N:]
    gQ = np.zeros_like(batch.queue) if batch.detach_queue else gY[:N]
    return gZ, gQ


def _ca_terms(batch, t_pos, cost, polarity, flow):
    D, I = _pos_geometry(batch)
    return _weighted_rows(D, I, polarity.pos_sign * t_pos, cost, flow.through_pos_weights)


def _cr_terms(batch, t_neg, cost, polarity, flow):
    idx, Y, D, I = _neg_geometry(batch)
    rows, dD, dI, w = _weighted_rows(D, I, polarity.neg_sign * t_neg, cost, flow.through_neg_weights)
    return rows, dD, dI, w, idx, Y


def _assemble(batch, value, pos=None, neg=None, parts=None):
    """Build a LossEval from scaled coefficient pairs for the two partner sets."""
    gZ = np.zeros_like(batch.queries)
    gP = np.zeros_like(batch.positives)
    gQ = np.zeros_like(batch.queue)
    if pos is not None:
        dD, dI = pos
        gz, gP = _grad_blocked(batch.queries, batch.positives, dD, dI)
        gZ += gz
    if neg is not None:
        dD, dI, idx, Y = neg
        gz, gQ = _grad_indexed(batch, idx, Y, dD, dI)
        gZ += gz
    return LossEval(float(value), gZ, gP, gQ, parts or {})


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ca_loss(batch, t_pos, cost=SQUARED_EUCLIDEAN, flow=DEFAULT_FLOW, polarity=DEFAULT_POLARITY):
    """Contrastive attraction: mean over queries of the weighted positive cost."""
    rows, dD, dI, _ = _ca_terms(batch, t_pos, cost, polarity, flow)
    M = batch.M
    value = rows.mean()
    return _assemble(batch, value, pos=(dD / M, dI / M), parts={"ca": float(value), "cr": 0.0})


def cr_loss(batch, t_neg, cost=SQUARED_EUCLIDEAN, flow=DEFAULT_FLOW, polarity=DEFAULT_POLARITY):
    """Contrastive repulsion: minus the mean weighted negative cost."""
    rows, dD, dI, _, idx, Y = _cr_terms(batch, t_neg, cost, polarity, flow)
    M = batch.M
    value = -rows.mean()
    return _assemble(batch, value, neg=(-dD / M, -dI / M, idx, Y), parts={"ca": 0.0, "cr": float(value)})


def cacr_loss(batch, temps=Temperatures(), cost=SQUARED_EUCLIDEAN, polarity=DEFAULT_POLARITY,
              flow=DEFAULT_FLOW):
    return (ca_loss(batch, temps.t_pos, cost, flow, polarity)
            + cr_loss(batch, temps.t_neg, cost, flow, polarity))


def cr_rbf_loss(batch, t_neg, t_rbf, flow=DEFAULT_FLOW, polarity=DEFAULT_POLARITY):
    """Log of the mean weighted RBF kernel between queries and negatives.

    Evaluated entirely in the log domain; always <= 0.
    """
    if not t_rbf > 0:
        raise ValueError("t_rbf must be positive")
    idx, Y, D, _ = _neg_geometry(batch)
    M = batch.M
    a = polarity.neg_sign * t_neg * D
    w = kernels.softmax_rows(a)
    log_w = a - kernels.logsumexp_rows(a)[:, None]
    q = log_w - t_rbf * D
    flat = q.reshape(1, -1)
    total = kernels.logsumexp_rows(flat)[0]
    value = total - np.log(M)
    r = np.exp(q - total)
    dD = -t_rbf * r
    if flow.through_neg_weights:
        dD = dD + polarity.neg_sign * t_neg * (r - r.sum(axis=1)[:, None] * w)
    return _assemble(batch, value, neg=(dD, np.zeros_like(dD), idx, Y),
                     parts={"ca": 0.0, "cr": float(value)})


def cacr_rbf_loss(batch, temps=Temperatures(), t_rbf=2.0, flow=DEFAULT_FLOW, polarity=DEFAULT_POLARITY):
    """Squared-Euclidean attraction plus log-domain RBF repulsion."""
    return (ca_loss(batch, temps.t_pos, SQUARED_EUCLIDEAN, flow, polarity)
            + cr_rbf_loss(batch, temps.t_neg, t_rbf, flow, polarity))


def uaur_loss(batch, cost=SQUARED_EUCLIDEAN):
    """Uniformly weighted attraction minus uniformly weighted repulsion."""
    M = batch.M
    D, I = _pos_geometry(batch)
    pos_rows, pdD, pdI, _ = _weighted_rows(D, I, 0.0, cost, False)
    idx, Y, D, I = _neg_geometry(batch)
    neg_rows, ndD, ndI, _ = _weighted_rows(D, I, 0.0, cost, False)
    ca, cr = pos_rows.mean(), -neg_rows.mean()
    return _assemble(batch, ca + cr, pos=(pdD / M, pdI / M), neg=(-ndD / M, -ndI / M, idx, Y),
                     parts={"ca": float(ca), "cr": float(cr)})


def cacr_margin_loss(batch, temps=Temperatures(), cost=SQUARED_EUCLIDEAN, margin=0.0,
                     polarity=DEFAULT_POLARITY, flow=DEFAULT_FLOW):
    """Per-query hinge ``[E_pos c - E_neg c + margin]_+`` averaged over queries."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    M = batch.M
    ca_rows, pdD, pdI, _ = _ca_terms(batch, temps.t_pos, cost, polarity, flow)
    cr_rows, ndD, ndI, _, idx, Y = _cr_terms(batch, temps.t_neg, cost, polarity, flow)
    h = ca_rows - cr_rows + margin
    active = (h > 0).astype(np.float64)[:, None] / M
    value = np.maximum(h, 0.0).mean()
    return _assemble(batch, value, pos=(pdD * active, pdI * active),
                     neg=(-ndD * active, -ndI * active, idx, Y),
                     parts={"ca": float(ca_rows.mean()), "cr": float(-cr_rows.mean())})


def _require_k1(batch):
    if batch.K != 1:
        raise KMismatch(f"loss needs exactly one positive per query, got K={batch.K}")


def _infonce_single(batch, pos_col, tau):
    idx, Y, _, I = _neg_geometry(batch)
    M = batch.M
    P = batch.positives[:, pos_col:pos_col + 1, :]
    s_pos = np.einsum("id,id->i", batch.queries, P[:, 0, :]) / tau
    logits = np.concatenate([s_pos[:, None], I / tau], axis=1)
    lse = kernels.logsumexp_rows(logits)
    value = (lse - s_pos).mean()
    p = kernels.softmax_rows(logits)
    pos_dI = (p[:, :1] - 1.0) / (tau * M)
    neg_dI = p[:, 1:] / (tau * M)
    gz_pos, gP = _grad_blocked(batch.queries, P, np.zeros_like(pos_dI), pos_dI)
    gz_neg, gQ = _grad_indexed(batch, idx, Y, np.zeros_like(neg_dI), neg_dI)
    parts = {"ca": float(-s_pos.mean()), "cr": float(lse.mean())}
    return value, gz_pos + gz_neg, gP, gQ, parts


def infonce_loss(batch, tau):
    """1-vs-rest softmax cross-entropy with inner-product logits scaled by 1/tau."""
    _require_k1(batch)
    value, gZ, gP, gQ, parts = _infonce_single(batch, 0, tau)
    return LossEval(float(value), gZ, gP, gQ, parts)


def multi_positive_infonce_loss(batch, tau):
    """Average over the K positives of the single-positive InfoNCE loss."""
    K = batch.K
    total = LossEval(0.0, np.zeros_like(batch.queries), np.zeros_like(batch.positives),
                     np.zeros_like(batch.queue), {"ca": 0.0, "cr": 0.0})
    for k in range(K):
        value, gZ, gP, gQ, parts = _infonce_single(batch, k, tau)
        total.value += value / K
        total.grad_queries += gZ / K
        total.grad_positives[:, k:k + 1, :] += gP / K
        total.grad_negatives += gQ / K
        for name in parts:
            total.parts[name] += parts[name] / K
    total.value = float(total.value)
    return total


def align_uniform_loss(batch, tau, align_exponent=2.0):
    """Alignment ``mean ||z - z+||^a`` plus uniformity ``mean_i ln mean_j e^{z_i.y_j/tau}``."""
    _require_k1(batch)
    M = batch.M
    u = batch.queries - batch.positives[:, 0, :]
    r = np.sqrt(np.einsum("id,id->i", u, u))
    align = (r ** align_exponent).mean()
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(r > 0, align_exponent * r ** (align_exponent - 2.0), 0.0)
    g_align = scale[:, None] * u / M

    idx, Y, _, I = _neg_geometry(batch)
    n = idx.shape[1]
    S = I / tau
    uniform = (kernels.logsumexp_rows(S) - np.log(n)).mean()
    dI = kernels.softmax_rows(S) / (tau * M)
    gZ, gQ = _grad_indexed(batch, idx, Y, np.zeros_like(dI), dI)
    gZ = gZ + g_align
    gP = -g_align[:, None, :]
    return LossEval(float(align + uniform), gZ, gP, gQ, {"ca": float(align), "cr": float(uniform)})


# ---------------------------------------------------------------------------
# loss selector
# ---------------------------------------------------------------------------

LOSS_NAMES = ("cacr", "ca", "cr", "cacr_rbf", "cr_rbf", "uaur", "cacr_margin",
              "infonce", "multi_infonce", "align_uniform")


@dataclass(frozen=True)
class LossSpec:
    """A loss name plus every hyperparameter any loss in the family needs."""

    name: str = "cacr"
    temps: Temperatures = Temperatures()
    cost: CostKind = SQUARED_EUCLIDEAN
    polarity: WeightPolarity = DEFAULT_POLARITY
    flow: GradFlow = DEFAULT_FLOW
    margin: float = 0.0
    t_rbf: float = 2.0
    align_exponent: float = 2.0

    def __post_init__(self):
        if self.name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.name!r}; choose from {LOSS_NAMES}")

    def evaluate(self, batch):
        t = self.temps
        name = self.name
        if name == "cacr":
            return cacr_loss(batch, t, self.cost, self.polarity, self.flow)
        if name == "ca":
            return ca_loss(batch, t.t_pos, self.cost, self.flow, self.polarity)
        if name == "cr":
            return cr_loss(batch, t.t_neg, self.cost, self.flow, self.polarity)
        if name == "cacr_rbf":
            return cacr_rbf_loss(batch, t, self.t_rbf, self.flow, self.polarity)
        if name == "cr_rbf":
            return cr_rbf_loss(batch, t.t_neg, self.t_rbf, self.flow, self.polarity)
        if name == "uaur":
            return uaur_loss(batch, self.cost)
        if name == "cacr_margin":
            return cacr_margin_loss(batch, t, self.cost, self.margin, self.polarity, self.flow)
        if name == "infonce":
            return infonce_loss(batch, t.tau)
        if name == "multi_infonce":
            return multi_positive_infonce_loss(batch, t.tau)
        return align_uniform_loss(batch, t.tau, self.align_exponent)


def loss_grad_embeddings(spec, batch):
    """Evaluate ``spec`` on ``batch``; the result carries all embedding gradients."""
    return spec.evaluate(batch)


# ---------------------------------------------------------------------------
# information-theoretic diagnostics on conditional weights
# ---------------------------------------------------------------------------

def _xlogx(w):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w > 0, w * np.log(w), 0.0)


def conditional_entropy(w):
    """Mean over rows of the Shannon entropy of each weight row."""
    return float(-_xlogx(np.asarray(w)).sum(axis=1).mean())


def mutual_information(w):
    """Mean over rows of ``sum_j w ln(n w)`` against a uniform reference of size n."""
    w = np.asarray(w)
    n = w.shape[1]
    return float((_xlogx(w).sum(axis=1) + np.log(n) * w.sum(axis=1)).mean())


def uniformity_bound_slack(S, w):
    """Per-row slack of ``ln mean_j e^{S_ij} + sum_j w ln(n w) >= sum_j w S_ij``.

    ``S`` holds scaled similarities ``z_i.y_j / tau`` and ``w`` any full-support
    weight rows; the result is nonnegative up to rounding (Jensen).
    """
    S = np.asarray(S, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = S.shape[1]
    lhs = kernels.logsumexp_rows(S) - np.log(n) + _xlogx(w).sum(axis=1) + np.log(n) * w.sum(axis=1)
    return lhs - np.einsum("ij,ij->i", w, S)
