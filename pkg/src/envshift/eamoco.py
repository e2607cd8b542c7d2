"""Momentum-contrast pretraining with environment-aware positives.

EA-MoCo pipeline:

1. train an autoencoder on all train environments pooled together and
   compute L2 distances between the latent codes of every pair of train rows;
2. for each anchor, draw a different environment uniformly at random and use
   its closest row (by that fixed table) as the positive; the rest of the
   batch provides negatives; train a query encoder with InfoNCE against a
   momentum (EMA) key encoder;
3. embed with the query encoder and hand the embeddings to the detectors.

The MoCo baseline runs the same loop with augmented anchors as the only
positives and never looks at environment labels.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .core import EnvDataset, RngHandle, Split, dataset_view
from .errors import ConfigError, NumericalError, SingleEnv, ZeroVector
from .nn import (AdamState, MlpParams, TrainConfig, adam_step, backward, forward, forward_cached,
                 init_mlp, train_autoencoder)
from .pretrain import D_EMB, HIDDEN

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    momentum: float = 0.999
    use_augmented_anchor_positive: bool = True
    augment_noise_sigma: float = 0.1
    augment_mask_prob: float = 0.1
    epochs: int = 150
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 0
    ae_latent: int = 16
    ae_epochs: int = 50

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0", key="temperature")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", key="momentum")
        if self.augment_noise_sigma < 0:
            raise ConfigError("augment_noise_sigma must be >= 0", key="augment_noise_sigma")
        if not 0 <= self.augment_mask_prob < 1:
            raise ConfigError("augment_mask_prob must be in [0, 1)", key="augment_mask_prob")
        if self.batch_size < 3:
            raise ConfigError("batch_size must be >= 3", key="batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")


# ---------------------------------------------------------------------------
# Distances and positive selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistanceTable:
    dist: np.ndarray
    env: np.ndarray

    @property
    def n(self) -> int:
        return self.dist.shape[0]

    @property
    def envs(self) -> np.ndarray:
        return np.unique(self.env)

    def nearest_by_env(self) -> np.ndarray:
        """``(n, n_envs)`` table: closest row of env k to row i (lowest index on ties)."""
        envs = self.envs
        out = np.full((self.n, len(envs)), -1, dtype=np.int64)
        for k, e in enumerate(envs):
            cols = np.flatnonzero(self.env == e)
            out[:, k] = cols[np.argmin(self.dist[:, cols], axis=1)]
        return out


def build_distance_table(ae_embeddings, env_vector) -> DistanceTable:
    Z = np.asarray(ae_embeddings, dtype=np.float64)
    env = np.asarray(env_vector)
    if Z.ndim != 2 or Z.shape[0] != len(env):
        raise ConfigError("embeddings and env vector must align")
    D = cdist(Z, Z)
    D = np.triu(D, 1)
    D = D + D.T  # exact symmetry, zero diagonal
    D.setflags(write=False)
    env = env.copy()
    env.setflags(write=False)
    return DistanceTable(D, env)


def _other_env_index(own: int, n_envs: int, g: np.random.Generator) -> int:
    k = int(g.integers(n_envs - 1))
    return k + 1 if k >= own else k


def select_positive(anchor_idx: int, dt: DistanceTable, rng) -> int:
    """Closest row to the anchor inside a uniformly drawn other environment."""
    g = rng.generator() if isinstance(rng, RngHandle) else rng
    envs = dt.envs
    if len(envs) < 2:
        raise SingleEnv("positive selection needs at least two train environments")
    own = int(np.searchsorted(envs, dt.env[anchor_idx]))
    target = envs[_other_env_index(own, len(envs), g)]
    cols = np.flatnonzero(dt.env == target)
    return int(cols[np.argmin(dt.dist[anchor_idx, cols])])


def draw_positives(nearest: np.ndarray, env_index: np.ndarray, g: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`select_positive` for every row, one env draw per row."""
    n_envs = nearest.shape[1]
    k = g.integers(n_envs - 1, size=len(env_index))
    k = np.where(k >= env_index, k + 1, k)
    return nearest[np.arange(len(env_index)), k]


def save_distance_table(dt: DistanceTable, path, ae_hash: str) -> None:
    """Binary cache: header ``n``, 16-byte AE hash, env ids, then the upper triangle."""
    iu = np.triu_indices(dt.n, 1)
    digest = hashlib.sha256(ae_hash.encode()).digest()[:16]
    with open(path, "wb") as fh:
        fh.write(b"ENVSHIFT-DIST 1\n")
        fh.write(struct.pack("<Q", dt.n))
        fh.write(digest)
        fh.write(np.asarray(dt.env, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(dt.dist[iu], dtype="<f8").tobytes())


def load_distance_table(path, ae_hash: Optional[str] = None) -> DistanceTable:
    data = Path(path).read_bytes()
    magic = b"ENVSHIFT-DIST 1\n"
    if not data.startswith(magic):
        raise ValueError("not a distance table cache")
    off = len(magic)
    (n,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    digest = data[off:off + 16]
    off += 16
    if ae_hash is not None and digest != hashlib.sha256(ae_hash.encode()).digest()[:16]:
        raise ValueError("distance table was built from a different autoencoder")
    env = np.frombuffer(data[off:off + 8 * n], dtype="<i8").astype(np.int64)
    off += 8 * n
    tri = np.frombuffer(data[off:], dtype="<f8")
    D = np.zeros((n, n))
    D[np.triu_indices(n, 1)] = tri
    D = D + D.T
    D.setflags(write=False)
    return DistanceTable(D, env)


# ---------------------------------------------------------------------------
# Augmentation and InfoNCE
# ---------------------------------------------------------------------------

def augment(x, cfg: ContrastiveConfig, rng) -> np.ndarray:
    """Gaussian jitter plus independent coordinate masking; works row-wise on matrices."""
    g = rng.generator() if isinstance(rng, RngHandle) else rng
    x = np.asarray(x, dtype=np.float64)
    noise = g.standard_normal(x.shape) * cfg.augment_noise_sigma
    keep = g.uniform(size=x.shape) >= cfg.augment_mask_prob
    return (x + noise) * keep


def _normalize(V):
    norms = np.linalg.norm(V, axis=-1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise ZeroVector("cannot normalise a (near) zero vector")
    return V / norms, norms


def info_nce(q, positives, negatives, tau: float) -> float:
    """Mean over positives of ``-log(e^{q.k+/t} / (e^{q.k+/t} + sum e^{q.k-/t}))``."""
    if len(positives) < 1 or len(negatives) < 1:
        raise ConfigError("need at least one positive and one negative")
    qn, _ = _normalize(np.asarray(q, dtype=np.float64)[None, :])
    P, _ = _normalize(np.asarray(positives, dtype=np.float64))
    N, _ = _normalize(np.asarray(negatives, dtype=np.float64))
    sp = (P @ qn[0]) / tau
    sn = (N @ qn[0]) / tau
    neg = logsumexp(sn)
    return float(np.mean(np.logaddexp(sp, neg) - sp))


def batch_info_nce(Q, key_sets, tau: float):
    """InfoNCE for a batch and its gradient w.r.t. the raw (unnormalised) queries.

    ``key_sets`` is a list of ``(B, d)`` key matrices; ``key_sets[p][i]`` is
    positive number ``p`` of anchor ``i``.  Negatives of anchor ``i`` are all
    keys of every other anchor.  Keys carry no gradient.
    """
    Q = np.asarray(Q, dtype=np.float64)
    B = Q.shape[0]
    P = len(key_sets)
    Qn, qnorm = _normalize(Q)
    K = np.concatenate([_normalize(np.asarray(k, dtype=np.float64))[0] for k in key_sets])
    S = Qn @ K.T / tau                                   # (B, P*B)
    own = np.zeros((B, P * B), dtype=bool)
    for p in range(P):
        own[np.arange(B), p * B + np.arange(B)] = True
    S_neg = np.where(own, -np.inf, S)
    neg = logsumexp(S_neg, axis=1)                       # (B,)
    pos = np.stack([S[np.arange(B), p * B + np.arange(B)] for p in range(P)], axis=1)  # (B, P)
    tot = np.logaddexp(pos, neg[:, None])
    loss = float(np.mean(tot - pos))

    w_pos = np.exp(pos - tot)                            # (B, P)
    # dl/dS_c for a negative column c: sum_p exp(S_c - tot_p) / (B P)
    dS = np.exp(S_neg[:, None, :] - tot[:, :, None]).sum(axis=1) / (B * P)
    for p in range(P):
        dS[np.arange(B), p * B + np.arange(B)] = (w_pos[:, p] - 1.0) / (B * P)
    dQn = dS @ K / tau
    # back through q / ||q||
    dQ = (dQn - Qn * np.sum(dQn * Qn, axis=1, keepdims=True)) / qnorm
    return loss, dQ


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def contrastive_encoder(d_x: int, seed: int, d_emb: int = D_EMB) -> MlpParams:
    """Same widths as the supervised encoder; linear output so embeddings can be normalised."""
    dims = [d_x, *HIDDEN, d_emb]
    acts = ["relu"] * len(HIDDEN) + ["identity"]
    return init_mlp(dims, acts, RngHandle(int(seed), "contrastive/init"))


def ema_update(key: MlpParams, query: MlpParams, m: float) -> MlpParams:
    return key.map(lambda k, q: m * k + (1.0 - m) * q, query)


def _contrastive_loop(X, cfg: ContrastiveConfig, positive_fn, callback, trace):
    q_net = contrastive_encoder(X.shape[1], cfg.seed)
    k_net = q_net
    st = AdamState.init(q_net, lr=cfg.lr)
    root = RngHandle(int(cfg.seed), "contrastive")
    g_batch = root.child("batches").generator()
    g_aug = root.child("augment").generator()
    g_pos = root.child("positives").generator()
    n = len(X)
    for epoch in range(cfg.epochs):
        pos_idx = positive_fn(g_pos)  # redrawn each epoch; None for the baseline
        total, count = 0.0, 0
        order = g_batch.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 3:
                continue
            key_inputs = []
            if pos_idx is not None:
                key_inputs.append(X[pos_idx[idx]])
            if pos_idx is None or cfg.use_augmented_anchor_positive:
                key_inputs.append(augment(X[idx], cfg, g_aug))
            keys = [forward(k_net, xk) for xk in key_inputs]
            acts = forward_cached(q_net, X[idx])
            loss, dQ = batch_info_nce(acts[-1], keys, cfg.temperature)
            if not np.isfinite(loss):
                raise NumericalError(f"InfoNCE diverged at epoch {epoch}")
            grads, _ = backward(q_net, acts, dQ)
            q_net, st = adam_step(q_net, grads, st)
            k_net = ema_update(k_net, q_net, cfg.momentum)
            if trace is not None:
                trace.append({"batch": idx, "n_positives": len(keys), "loss": loss,
                              "query": q_net, "key": k_net})
            total += loss * len(idx)
            count += len(idx)
        if callback:
            callback(epoch, total / max(count, 1))
    return q_net


def train_autoencoder_for_distances(ds: EnvDataset, cfg: ContrastiveConfig):
    """Autoencoder on the pooled train split (every train env, no filtering)."""
    X, _, _ = dataset_view(ds, Split.TRAIN)
    tc = TrainConfig(epochs=cfg.ae_epochs, batch_size=64, lr=1e-3, seed=cfg.seed)
    encoder, _ = train_autoencoder(X, tc, cfg.ae_latent)
    return encoder


def train_ea_moco(ds: EnvDataset, ae: MlpParams, cfg: ContrastiveConfig = ContrastiveConfig(),
                  callback: Optional[Callable[[int, float], None]] = None,
                  trace: Optional[list] = None, env_override=None) -> MlpParams:
    """Contrastive training whose positives come from other environments.

    The distance table is computed once from ``ae`` before training starts.
    ``env_override`` replaces the train env labels (row-aligned), which the
    permutation tests use.
    """
    X, _, env = dataset_view(ds, Split.TRAIN)
    if env_override is not None:
        env = np.asarray(env_override)
    if len(np.unique(env)) < 2:
        raise SingleEnv("EA-MoCo needs at least two train environments")
    dt = build_distance_table(forward(ae, X), env)
    nearest = dt.nearest_by_env()
    env_index = np.searchsorted(dt.envs, env)
    return _contrastive_loop(X, cfg, lambda g: draw_positives(nearest, env_index, g), callback, trace)


def train_moco_baseline(ds: EnvDataset, cfg: ContrastiveConfig = ContrastiveConfig(),
                        callback: Optional[Callable[[int, float], None]] = None,
                        trace: Optional[list] = None) -> MlpParams:
    X, _, _ = dataset_view(ds, Split.TRAIN)
    return _contrastive_loop(X, cfg, lambda g: None, callback, trace)


def fit_ea_moco(ds: EnvDataset, cfg: ContrastiveConfig = ContrastiveConfig(), **kwargs) -> MlpParams:
    """Autoencoder, then distance table, then contrastive training."""
    ae = train_autoencoder_for_distances(ds, cfg)
    return train_ea_moco(ds, ae, cfg, **kwargs)
