"""Dense numeric kernels shared by every other module.

Each hot kernel has two implementations: a numba ``@njit`` loop version and
a pure-numpy version.  The active backend is chosen at import time from the
``CACR_BACKEND`` environment variable (``numba`` or ``numpy``); when unset,
numba is used if it can be imported.  The numba kernels are serial loops.
Both backends agree to ~1e-15 but are not bitwise identical, so a run is
reproducible only for a fixed backend.
"""

import os

import numpy as np

from .errors import DimMismatch, ZeroNorm

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

ZERO_NORM_EPS = 1e-30


def _env_backend():
    name = os.environ.get("CACR_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"CACR_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("CACR_BACKEND=numba but numba is not importable")
    return name


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _pairwise_sq_dist_np(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _softmax_rows_np(S):
    m = S.max(axis=1, keepdims=True)
    E = np.exp(S - m)
    return E / E.sum(axis=1, keepdims=True)


def _logsumexp_rows_np(S):
    m = S.max(axis=1)
    return m + np.log(np.exp(S - m[:, None]).sum(axis=1))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _pairwise_sq_dist_nb(A, B):
        M, d = A.shape
        N = B.shape[0]
        out = np.empty((M, N))
        for i in range(M):
            for j in range(N):
                acc = 0.0
                for k in range(d):
                    t = A[i, k] - B[j, k]
                    acc += t * t
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _softmax_rows_nb(S):
        M, N = S.shape
        out = np.empty((M, N))
        for i in range(M):
            m = -np.inf
            for j in range(N):
                if S[i, j] > m:
                    m = S[i, j]
            total = 0.0
            for j in range(N):
                e = np.exp(S[i, j] - m)
                out[i, j] = e
                total += e
            for j in range(N):
                out[i, j] /= total
        return out

    @njit(cache=True)
    def _logsumexp_rows_nb(S):
        M, N = S.shape
        out = np.empty(M)
        for i in range(M):
            m = -np.inf
            for j in range(N):
                if S[i, j] > m:
                    m = S[i, j]
            total = 0.0
            for j in range(N):
                total += np.exp(S[i, j] - m)
            out[i] = m + np.log(total)
        return out


_BACKENDS = {
    "numpy": (_pairwise_sq_dist_np, _softmax_rows_np, _logsumexp_rows_np),
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (_pairwise_sq_dist_nb, _softmax_rows_nb, _logsumexp_rows_nb)

BACKEND = _env_backend()
_pairwise_impl, _softmax_impl, _lse_impl = _BACKENDS[BACKEND]


def set_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global BACKEND, _pairwise_impl, _softmax_impl, _lse_impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}")
    previous = BACKEND
    BACKEND = name
    _pairwise_impl, _softmax_impl, _lse_impl = _BACKENDS[name]
    return previous


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _as_matrix(x, name):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimMismatch(f"{name} must be 2-D, got shape {a.shape}")
    return a


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm.

    Raises ZeroNorm when ``||v|| < 1e-30``.
    """
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.dot(v, v))
    if not n >= ZERO_NORM_EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {n!r}")
    return v / n


def l2_normalize_rows(X):
    """Row-wise :func:`l2_normalize`; returns ``(Z, norms)``."""
    X = _as_matrix(X, "X")
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    bad = ~(norms >= ZERO_NORM_EPS)
    if bad.any():
        raise ZeroNorm(f"row {int(np.flatnonzero(bad)[0])} has norm below {ZERO_NORM_EPS}")
    return X / norms[:, None], norms


def pairwise_sq_dist(A, B):
    """``out[i, j] = ||A_i - B_j||^2`` computed from explicit differences."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    return _pairwise_impl(A, B)


def softmax_rows(S):
    """Row softmax with per-row max subtraction.

    Entries equal to ``-inf`` get zero weight, which is how callers mask out
    pairs; every row needs at least one finite entry.
    """
    return _softmax_impl(_as_matrix(S, "S"))


def logsumexp_rows(S):
    return _lse_impl(_as_matrix(S, "S"))


def logsumexp_row(s):
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    if s.shape[1] == 1:
        return float(s[0, 0])
    return float(logsumexp_rows(s)[0])
