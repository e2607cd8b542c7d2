"""Supervised pretext pretraining (normal class 0 vs 1) and the random baseline.

Every trainer builds ``encoder -> linear head``, trains it on the train split
only and returns the encoder; its (post-ReLU) output is the embedding handed
to the detectors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .core import ContentLabel, EnvDataset, RngHandle, Split, dataset_view
from .errors import ConfigError, MissingClass, PairingError, SingleEnv
from .nn import (AdamState, MlpParams, TrainConfig, adam_step, bce_with_logits,
                 forward_cached, init_mlp, loss_and_grad, minibatches, sgd_step)

HIDDEN = (64, 64)
D_EMB = 32


class PretrainerKind(str, enum.Enum):
    RANDOM = "random"
    ERM = "erm"
    IRM = "irm"
    FISH = "fish"
    LISA = "lisa"
    MOCO = "moco"
    EAMOCO = "eamoco"

    @property
    def title(self) -> str:
        return _TITLES[self]

    @property
    def group(self) -> str:
        if self is PretrainerKind.RANDOM:
            return "None"
        if self in (PretrainerKind.MOCO, PretrainerKind.EAMOCO):
            return "Unsupervised"
        return "Supervised"


_TITLES = {
    PretrainerKind.RANDOM: "Random", PretrainerKind.ERM: "ERM", PretrainerKind.IRM: "IRM",
    PretrainerKind.FISH: "Fish", PretrainerKind.LISA: "Lisa", PretrainerKind.MOCO: "MoCo",
    PretrainerKind.EAMOCO: "EA-MoCo",
}
# column order of the rendered table: None | Supervised | Unsupervised
TABLE_ORDER = [PretrainerKind.RANDOM, PretrainerKind.ERM, PretrainerKind.FISH, PretrainerKind.IRM,
               PretrainerKind.LISA, PretrainerKind.EAMOCO, PretrainerKind.MOCO]


@dataclass(frozen=True)
class PenaltyConfig:
    irm_lambda: float = 100.0
    irm_warmup_epochs: int = 10
    irm_warmup_lambda: float = 1.0
    fish_meta_lr: float = 0.5
    fish_inner_steps: int = 3
    fish_inner_lr: float = 0.05
    lisa_alpha: float = 2.0
    lisa_strategy: str = "intra_label_cross_env"

    def __post_init__(self):
        vals = [self.irm_lambda, self.irm_warmup_lambda, self.fish_meta_lr, self.fish_inner_lr,
                self.lisa_alpha]
        if not all(np.isfinite(vals)):
            raise ConfigError("penalty settings must be finite")
        if self.irm_lambda < 0:
            raise ConfigError("irm_lambda must be >= 0", key="irm_lambda")
        if self.fish_inner_steps < 1:
            raise ConfigError("fish_inner_steps must be >= 1", key="fish_inner_steps")
        if not self.lisa_alpha > 0:
            raise ConfigError("lisa_alpha must be > 0", key="lisa_alpha")
        if self.lisa_strategy != "intra_label_cross_env":
            raise ConfigError(f"unsupported lisa_strategy {self.lisa_strategy!r}", key="lisa_strategy")


def make_pretext_labels(ds: EnvDataset) -> np.ndarray:
    """Binary pretext labels (Normal0 -> 0, Normal1 -> 1) for the train rows."""
    m = ds.mask(Split.TRAIN)
    labels = ds.labels[m]
    for cls in (ContentLabel.NORMAL0, ContentLabel.NORMAL1):
        if not np.any(labels == cls):
            raise MissingClass(f"train split has no {cls.name} samples")
    return (labels == ContentLabel.NORMAL1).astype(np.int64)


def _train_arrays(ds: EnvDataset):
    y = make_pretext_labels(ds)
    X, _, env = dataset_view(ds, Split.TRAIN)
    return X, y, env


def _network(d_x: int, seed: int, d_emb: int = D_EMB, hidden=HIDDEN) -> MlpParams:
    dims = [d_x, *hidden, d_emb, 1]
    acts = ["relu"] * (len(hidden) + 1) + ["identity"]
    return init_mlp(dims, acts, RngHandle(int(seed), "pretrain/init"))


def _encoder(net: MlpParams, return_head: bool = False) -> MlpParams:
    return net if return_head else net.layers(0, net.n_layers - 1)


def random_encoder(d_x: int, d_emb: int = D_EMB, seed: int = 0) -> MlpParams:
    """Untrained encoder with the same initialisation the trainers start from."""
    return _encoder(_network(d_x, seed, d_emb))


class EnvBatchSampler:
    """Per-env batches of equal size, cycling through a fresh permutation of each env."""

    def __init__(self, env: np.ndarray, per_env: int, g: np.random.Generator):
        self.envs = sorted(np.unique(env).tolist())
        self.rows = {e: np.flatnonzero(env == e) for e in self.envs}
        self.per_env = per_env
        self.g = g
        self._queue = {e: np.empty(0, dtype=np.int64) for e in self.envs}

    def draw(self, e) -> np.ndarray:
        out = []
        need = self.per_env
        while need:
            if not len(self._queue[e]):
                self._queue[e] = self.g.permutation(self.rows[e])
            take = self._queue[e][:need]
            self._queue[e] = self._queue[e][need:]
            out.append(take)
            need -= len(take)
        return np.concatenate(out)

    def batch(self) -> list[np.ndarray]:
        return [self.draw(e) for e in self.envs]


def _require_envs(env, what):
    if len(np.unique(env)) < 2:
        raise SingleEnv(f"{what} needs at least two train environments")


def _steps_per_epoch(n, batch_size):
    return max(1, n // batch_size)


# ---------------------------------------------------------------------------
# ERM
# ---------------------------------------------------------------------------

def train_erm(ds: EnvDataset, cfg: TrainConfig, env_balanced: bool = False,
              callback: Optional[Callable[[int, float], None]] = None, d_emb: int = D_EMB,
              return_head: bool = False) -> MlpParams:
    """Pooled BCE on the pretext task; ``env_balanced`` switches to per-env batches."""
    X, y, env = _train_arrays(ds)
    net = _network(X.shape[1], cfg.seed, d_emb)
    st = AdamState.init(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = RngHandle(int(cfg.seed), "pretrain/batches").generator()
    if env_balanced:
        return _train_per_env(X, y, env, cfg, net, st, g, lambda e: 0.0, callback,
                              return_head=return_head)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(X), cfg.batch_size, g):
            loss, grads = loss_and_grad(net, X[idx], y[idx], "bce")
            net, st = adam_step(net, grads, st)
            total += loss * len(idx)
        if callback:
            callback(epoch, total / len(X))
    return _encoder(net, return_head)


# ---------------------------------------------------------------------------
# IRM (IRMv1 penalty)
# ---------------------------------------------------------------------------

def irm_penalty(logits, y):
    """Squared derivative of the env risk w.r.t. a dummy logit scale at 1.

    Returns ``(penalty, dpenalty/dlogits)``.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(z)
    s = expit(z)
    grad_scale = np.mean((s - y) * z)
    dgrad = (s * (1 - s) * z + s - y) / n
    return grad_scale ** 2, 2.0 * grad_scale * dgrad


def irm_objective(logits, y, groups, lam):
    """Mean per-group BCE + ``lam`` * mean per-group IRM penalty, with gradient."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(z)
    total = 0.0
    for rows in groups:
        loss, g_loss = bce_with_logits(z[rows], y[rows])
        pen, g_pen = irm_penalty(z[rows], y[rows])
        total += loss + lam * pen
        grad[rows] += g_loss + lam * g_pen
    k = len(groups)
    return total / k, (grad / k).reshape(np.shape(logits))


def _train_per_env(X, y, env, cfg, net, st, g, lam_for_epoch, callback, on_epoch_start=None,
                   return_head=False):
    sampler = EnvBatchSampler(env, max(1, cfg.batch_size // len(np.unique(env))), g)
    steps = _steps_per_epoch(len(X), cfg.batch_size)
    for epoch in range(cfg.epochs):
        if on_epoch_start is not None:
            st = on_epoch_start(epoch, net, st)
        lam = lam_for_epoch(epoch)
        total = 0.0
        for _ in range(steps):
            parts = sampler.batch()
            idx = np.concatenate(parts)
            bounds = np.cumsum([0] + [len(p) for p in parts])
            groups = [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
            yb = y[idx]
            loss, grads = loss_and_grad(net, X[idx],
                                        loss_kind=lambda out: irm_objective(out, yb, groups, lam))
            net, st = adam_step(net, grads, st)
            total += loss
        if callback:
            callback(epoch, total / steps)
    return _encoder(net, return_head)


def train_irm(ds: EnvDataset, cfg: TrainConfig, pc: PenaltyConfig = PenaltyConfig(),
              callback: Optional[Callable[[int, float], None]] = None, d_emb: int = D_EMB,
              return_head: bool = False) -> MlpParams:
    X, y, env = _train_arrays(ds)
    _require_envs(env, "IRM")
    net = _network(X.shape[1], cfg.seed, d_emb)
    st = AdamState.init(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = RngHandle(int(cfg.seed), "pretrain/batches").generator()
    warm = int(pc.irm_warmup_epochs)

    def lam(epoch):
        if pc.irm_lambda == 0:
            return 0.0
        return pc.irm_warmup_lambda if epoch < warm else pc.irm_lambda

    def reset_adam(epoch, net_, st_):
        # the jump in penalty weight makes stale Adam moments harmful
        if pc.irm_lambda and epoch == warm and warm > 0:
            return AdamState.init(net_, lr=cfg.lr, weight_decay=cfg.weight_decay)
        return st_

    return _train_per_env(X, y, env, cfg, net, st, g, lam, callback, reset_adam, return_head)


# ---------------------------------------------------------------------------
# Fish (Reptile-style inter-env gradient matching)
# ---------------------------------------------------------------------------

def fish_meta_step(net: MlpParams, X, y, env_batches, inner_steps: int, inner_lr: float,
                   meta_lr: float) -> tuple[MlpParams, float]:
    """One meta-update: SGD on a clone over the env batches in order, then move towards it.

    ``env_batches`` holds, per env, a list of ``inner_steps`` index arrays.
    """
    clone = net
    last = 0.0
    for batches in env_batches:
        for idx in batches[:inner_steps]:
            last, grads = loss_and_grad(clone, X[idx], y[idx], "bce")
            clone = sgd_step(clone, grads, inner_lr)
    return net.map(lambda w, c: w + meta_lr * (c - w), clone), last


def train_fish(ds: EnvDataset, cfg: TrainConfig, pc: PenaltyConfig = PenaltyConfig(),
               callback: Optional[Callable[[int, float], None]] = None, d_emb: int = D_EMB,
               return_head: bool = False) -> MlpParams:
    X, y, env = _train_arrays(ds)
    _require_envs(env, "Fish")
    net = _network(X.shape[1], cfg.seed, d_emb)
    g = RngHandle(int(cfg.seed), "pretrain/batches").generator()
    n_envs = len(np.unique(env))
    sampler = EnvBatchSampler(env, cfg.batch_size, g)
    meta_steps = max(1, len(X) // (cfg.batch_size * n_envs))
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(meta_steps):
            order = g.permutation(n_envs)
            env_batches = [[sampler.draw(sampler.envs[k]) for _ in range(pc.fish_inner_steps)]
                           for k in order]
            net, loss = fish_meta_step(net, X, y, env_batches, pc.fish_inner_steps,
                                       pc.fish_inner_lr, pc.fish_meta_lr)
            total += loss
        if callback:
            callback(epoch, total / meta_steps)
    return _encoder(net, return_head)


# ---------------------------------------------------------------------------
# LISA (intra-label, cross-env mixup)
# ---------------------------------------------------------------------------

def lisa_partners(y, env) -> dict:
    """For each (label, env): candidate partner rows with that label in other envs."""
    table = {}
    for lab in np.unique(y):
        lab_envs = np.unique(env[y == lab])
        if len(lab_envs) < 2:
            raise PairingError(f"pretext label {lab} occurs in a single environment")
        for e in lab_envs:
            table[(int(lab), int(e))] = np.flatnonzero((y == lab) & (env != e))
    return table


def train_lisa(ds: EnvDataset, cfg: TrainConfig, pc: PenaltyConfig = PenaltyConfig(),
               callback: Optional[Callable[[int, float], None]] = None, d_emb: int = D_EMB,
               mix_log: Optional[list] = None, fixed_lambda: Optional[float] = None,
               return_head: bool = False) -> MlpParams:
    """Mixup of same-label pairs from different envs with ``lam ~ Beta(a, a)``.

    ``mix_log`` (if given) receives ``(anchor_rows, partner_rows, lam, mixed_x)``
    per batch; ``fixed_lambda`` overrides the Beta draw.
    """
    X, y, env = _train_arrays(ds)
    partners = lisa_partners(y, env)
    net = _network(X.shape[1], cfg.seed, d_emb)
    st = AdamState.init(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = RngHandle(int(cfg.seed), "pretrain/batches").generator()
    gm = RngHandle(int(cfg.seed), "pretrain/lisa").generator()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(X), cfg.batch_size, g):
            cands = [partners[(int(y[i]), int(env[i]))] for i in idx]
            part = np.array([c[gm.integers(len(c))] for c in cands])
            lam = gm.beta(pc.lisa_alpha, pc.lisa_alpha, size=len(idx))
            if fixed_lambda is not None:
                lam = np.full(len(idx), float(fixed_lambda))
            xm = lam[:, None] * X[idx] + (1 - lam[:, None]) * X[part]
            if mix_log is not None:
                mix_log.append((idx, part, lam, xm))
            loss, grads = loss_and_grad(net, xm, y[idx], "bce")
            net, st = adam_step(net, grads, st)
            total += loss * len(idx)
        if callback:
            callback(epoch, total / len(X))
    return _encoder(net, return_head)


def pretext_accuracy(net: MlpParams, X, y) -> float:
    """Accuracy of a full network (``return_head=True``) on the pretext task."""
    logits = forward_cached(net, X)[-1].reshape(-1)
    return float(np.mean((logits > 0) == (np.asarray(y) == 1)))

