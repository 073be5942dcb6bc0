"""Small MLP encoder ``R^n -> S^{d-1}`` with a hand-written backward pass."""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ChecksumMismatch, DimMismatch, ShapeMismatch
from .kernels import l2_normalize_rows

ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_MAGIC = b"CACRCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("need input width, at least one hidden width and an output width")
        if min(widths) < 1 or widths[-1] < 2:
            raise ValueError("widths must be positive and the output width at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def d_in(self):
        return self.layer_widths[0]

    @property
    def d_out(self):
        return self.layer_widths[-1]

    @property
    def shapes(self):
        w = self.layer_widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]``; ``y = x @ W + b``."""

    spec: MlpSpec
    weights: list
    biases: list

    def __post_init__(self):
        shapes = self.spec.shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ShapeMismatch("layer count does not match spec")
        for W, b, (fi, fo) in zip(self.weights, self.biases, shapes):
            if W.shape != (fi, fo) or b.shape != (fo,):
                raise ShapeMismatch(f"expected W {(fi, fo)} / b {(fo,)}, got {W.shape} / {b.shape}")

    def arrays(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return MlpParams(self.spec, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return MlpParams(self.spec, [np.zeros_like(W) for W in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, spec, vec):
        vec = np.asarray(vec, dtype=np.float64)
        need = sum(fi * fo + fo for fi, fo in spec.shapes)
        if vec.ndim != 1 or vec.size != need:
            raise ShapeMismatch(f"parameter vector has {vec.size} entries, spec needs {need}")
        weights, biases, pos = [], [], 0
        for fi, fo in spec.shapes:
            weights.append(vec[pos:pos + fi * fo].reshape(fi, fo).copy())
            pos += fi * fo
            biases.append(vec[pos:pos + fo].copy())
            pos += fo
        return cls(spec, weights, biases)

    @property
    def size(self):
        return sum(a.size for a in self.arrays())


def _check_same(a, b):
    if a.spec.shapes != b.spec.shapes:
        raise ShapeMismatch("parameter sets have different shapes")


def init_params(spec, rng):
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fi, fo in spec.shapes:
        a = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-a, a, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return MlpParams(spec, weights, biases)


def _act(name, x):
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name, pre, post):
    return (pre > 0).astype(np.float64) if name == "relu" else 1.0 - post * post


def mlp_forward(params, X):
    """Map rows of ``X`` to the unit sphere.

    Returns ``(Z, cache)``.  Raises ZeroNorm if a row's final pre-activation
    vanishes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.d_in:
        raise DimMismatch(f"input must be (B, {params.spec.d_in}), got {X.shape}")
    act = params.spec.activation
    inputs, pres = [], []
    h = X
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        pre = h @ W + b
        pres.append(pre)
        h = pre if l == last else _act(act, pre)
    Z, norms = l2_normalize_rows(h)
    return Z, {"inputs": inputs, "pres": pres, "Z": Z, "norms": norms}


def mlp_backward(params, cache, grad_Z):
    """Backpropagate ``dL/dZ`` to parameter gradients (an ``MlpParams``)."""
    Z, norms = cache["Z"], cache["norms"]
    grad_Z = np.asarray(grad_Z, dtype=np.float64)
    if grad_Z.shape != Z.shape:
        raise ShapeMismatch(f"upstream gradient {grad_Z.shape} does not match output {Z.shape}")
    act = params.spec.activation
    # d(u/|u|)/du = (I - z z^T) / |u|
    g = (grad_Z - Z * np.einsum("ij,ij->i", Z, grad_Z)[:, None]) / norms[:, None]
    L = len(params.weights)
    gW, gb = [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        gW[l] = cache["inputs"][l].T @ g
        gb[l] = g.sum(axis=0)
        if l > 0:
            h_prev = cache["inputs"][l]
            g = (g @ params.weights[l].T) * _act_grad(act, cache["pres"][l - 1], h_prev)
    return MlpParams(params.spec, gW, gb)


def ema_update(target, online, m):
    """Return ``m * target + (1 - m) * online``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    _check_same(target, online)
    if m == 1.0:
        return target.copy()
    if m == 0.0:
        return online.copy()
    return MlpParams(
        target.spec,
        [m * t + (1.0 - m) * o for t, o in zip(target.weights, online.weights)],
        [m * t + (1.0 - m) * o for t, o in zip(target.biases, online.biases)],
    )


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic "CACRCKPT" | u32 version | u32 header length | header JSON (utf-8)
#   | float64 little-endian parameter blob | sha256 of all preceding bytes
# ---------------------------------------------------------------------------

def checkpoint_bytes(params, config_hash=""):
    header = json.dumps(
        {"spec": params.spec.to_dict(), "n_params": int(params.size), "config_hash": config_hash},
        sort_keys=True,
    ).encode("utf-8")
    blob = params.flat().astype("<f8").tobytes()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + blob
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, params, config_hash=""):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, config_hash))


def parse_checkpoint(data):
    """Inverse of :func:`checkpoint_bytes`; returns ``(params, header)``."""
    if len(data) < len(CHECKPOINT_MAGIC) + 8 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise ChecksumMismatch("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch("checkpoint checksum does not match contents")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    if version != CHECKPOINT_VERSION:
        raise ChecksumMismatch(f"unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    spec = MlpSpec(tuple(header["spec"]["layer_widths"]), header["spec"]["activation"])
    vec = np.frombuffer(body[pos:], dtype="<f8").astype(np.float64)
    if vec.size != header["n_params"]:
        raise ChecksumMismatch("parameter blob length disagrees with header")
    return MlpParams.from_flat(spec, vec), header


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
