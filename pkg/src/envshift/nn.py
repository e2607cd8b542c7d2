"""Minimal dense network engine: MLP forward/backward, losses, Adam, autoencoder.

Parameters are plain numpy arrays held in :class:`MlpParams`; every update
returns new arrays so parameter snapshots can be compared and shared.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .core import RngHandle
from .errors import ConfigError, NumericalError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True, eq=False)
class MlpParams:
    weights: tuple  # each (d_in, d_out)
    biases: tuple
    activations: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        object.__setattr__(self, "activations", tuple(self.activations))
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input dim {w.shape[0]} does not chain")
            if a not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {a!r}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activations)

    def map(self, fn, *others) -> "MlpParams":
        return self.with_arrays(fn(*xs) for xs in zip(self.arrays(), *(o.arrays() for o in others)))

    def zeros_like(self) -> "MlpParams":
        return self.map(np.zeros_like)

    def layers(self, start: int, stop: Optional[int] = None) -> "MlpParams":
        sl = slice(start, stop)
        return MlpParams(self.weights[sl], self.biases[sl], self.activations[sl])

    def then(self, other: "MlpParams") -> "MlpParams":
        return MlpParams(self.weights + other.weights, self.biases + other.biases,
                         self.activations + other.activations)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equal(self, other: "MlpParams") -> bool:
        return (self.activations == other.activations
                and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())))

    def digest(self) -> str:
        return hashlib.sha256(dumps_params(self)).hexdigest()[:16]


def init_mlp(dims, activations, rng: RngHandle) -> MlpParams:
    """He-uniform weights, zero biases."""
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    if isinstance(activations, str):
        activations = [activations] * (len(dims) - 1)
    g = rng.generator()
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / d_in)
        ws.append(g.uniform(-lim, lim, size=(d_in, d_out)))
        bs.append(np.zeros(d_out))
    return MlpParams(tuple(ws), tuple(bs), tuple(activations))


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else z


def forward(p: MlpParams, X) -> np.ndarray:
    return forward_cached(p, X)[-1]


def forward_cached(p: MlpParams, X) -> list[np.ndarray]:
    """Activations of every layer; element 0 is the input."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.dims[0]:
        raise ShapeError(f"input shape {X.shape} incompatible with network input dim {p.dims[0]}")
    acts = [X]
    for w, b, a in zip(p.weights, p.biases, p.activations):
        acts.append(_act(acts[-1] @ w + b, a))
    return acts


def backward(p: MlpParams, acts: list[np.ndarray], grad_out) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate ``grad_out`` (dL/d output) through cached activations."""
    g = np.asarray(grad_out, dtype=np.float64)
    gw, gb = [None] * p.n_layers, [None] * p.n_layers
    for i in reversed(range(p.n_layers)):
        if p.activations[i] == "relu":
            g = g * (acts[i + 1] > 0)
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ p.weights[i].T
    return MlpParams(tuple(gw), tuple(gb), p.activations), g


encode = forward


# ---------------------------------------------------------------------------
# Losses: each returns (loss, dloss/doutput)
# ---------------------------------------------------------------------------

def bce_with_logits(logits, targets):
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = len(z)
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    grad = (expit(z) - y) / n
    return float(loss), grad.reshape(np.shape(logits))


def mse(out, target):
    out = np.asarray(out, dtype=np.float64)
    diff = out - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


LOSSES = {"bce": bce_with_logits, "mse": mse}


def loss_and_grad(p: MlpParams, X, target=None, loss_kind="mse"):
    """Loss and parameter gradients for one batch.

    ``loss_kind`` is ``"bce"``, ``"mse"`` or a callable ``hook(output) ->
    (loss, dloss/doutput)`` used for contrastive objectives.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ShapeError("empty batch")
    acts = forward_cached(p, X)
    if callable(loss_kind):
        loss, g_out = loss_kind(acts[-1])
    else:
        if loss_kind not in LOSSES:
            raise ConfigError(f"unknown loss kind {loss_kind!r}")
        loss, g_out = LOSSES[loss_kind](acts[-1], target)
    if not np.isfinite(loss):
        bad = _first_bad_layer(acts)
        raise NumericalError(f"non-finite loss (layer {bad})", layer=bad)
    grads, _ = backward(p, acts, g_out)
    return loss, grads


def _first_bad_layer(acts):
    for i, a in enumerate(acts[1:]):
        if not np.all(np.isfinite(a)):
            return i
    return len(acts) - 2


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, p: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        z = p.zeros_like()
        return cls(z, z, 0, lr, beta1, beta2, eps, weight_decay)


def adam_step(p: MlpParams, grads: MlpParams, st: AdamState) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam; ``weight_decay`` is added to the gradient (L2)."""
    t = st.step_count + 1
    if st.weight_decay:
        grads = grads.map(lambda g, w: g + st.weight_decay * w, p)
    m = st.first_moment.map(lambda m_, g: st.beta1 * m_ + (1 - st.beta1) * g, grads)
    v = st.second_moment.map(lambda v_, g: st.beta2 * v_ + (1 - st.beta2) * g * g, grads)
    c1 = 1 - st.beta1 ** t
    c2 = 1 - st.beta2 ** t
    new = p.map(lambda w, m_, v_: w - st.lr * (m_ / c1) / (np.sqrt(v_ / c2) + st.eps), m, v)
    return new, AdamState(m, v, t, st.lr, st.beta1, st.beta2, st.eps, st.weight_decay)


def sgd_step(p: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    return p.map(lambda w, g: w - lr * g, grads)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if int(self.batch_size) < 2:
            raise ConfigError("batch_size must be >= 2", key="batch_size")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", key="lr")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="weight_decay")


def minibatches(n: int, batch_size: int, g: np.random.Generator):
    order = g.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise NumericalError(f"{what} diverged (loss={loss})")


def train_autoencoder(X_train, cfg: TrainConfig, d_latent: int, hidden=(64,),
                      activation="relu", callback: Optional[Callable[[int, float], None]] = None):
    """Train an MLP autoencoder on ``X_train`` with MSE; return ``(encoder, decoder)``.

    The encoder has ``hidden`` layers with ``activation`` and a linear latent
    layer of width ``d_latent``; the decoder mirrors it.  ``callback`` receives
    ``(epoch, mean_epoch_loss)``.
    """
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ShapeError("autoencoder needs a 2-D matrix with at least two rows")
    d = X.shape[1]
    hidden = list(hidden)
    dims = [d] + hidden + [d_latent] + hidden[::-1] + [d]
    acts = [activation] * len(hidden) + ["identity"] + [activation] * len(hidden) + ["identity"]
    root = RngHandle(int(cfg.seed), "nn/autoencoder")
    net = init_mlp(dims, acts, root.child("init"))
    st = AdamState.init(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = root.child("batches").generator()
    for epoch in range(int(cfg.epochs)):
        total = 0.0
        for idx in minibatches(len(X), cfg.batch_size, g):
            loss, grads = loss_and_grad(net, X[idx], X[idx], "mse")
            net, st = adam_step(net, grads, st)
            total += loss * len(idx)
        total /= len(X)
        _check_finite(total, "autoencoder")
        if callback is not None:
            callback(epoch, total)
    k = len(hidden) + 1
    return net.layers(0, k), net.layers(k)


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   b"ENVSHIFT-MLP 1\n"
#   one JSON line: {"dims": [...], "activations": [...]}
#   per layer: weight (d_in*d_out) then bias (d_out), float64 little-endian,
#   row-major.
# ---------------------------------------------------------------------------

_MAGIC = b"ENVSHIFT-MLP 1\n"


def dumps_params(p: MlpParams) -> bytes:
    header = json.dumps({"dims": p.dims, "activations": list(p.activations)}, sort_keys=True)
    blocks = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in p.arrays())
    return _MAGIC + header.encode() + b"\n" + blocks


def loads_params(data: bytes) -> MlpParams:
    if not data.startswith(_MAGIC):
        raise ValueError("not an envshift model checkpoint")
    rest = data[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    buf = rest[nl + 1:]
    dims, acts = header["dims"], header["activations"]
    arrays, off = [], 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        for shape in ((d_in, d_out), (d_out,)):
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise ValueError("truncated checkpoint")
            arrays.append(np.frombuffer(buf[off:off + size], dtype="<f8").reshape(shape).astype(np.float64))
            off += size
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), tuple(acts))


def save_params(p: MlpParams, path) -> None:
    Path(path).write_bytes(dumps_params(p))


def load_params(path) -> MlpParams:
    return loads_params(Path(path).read_bytes())

