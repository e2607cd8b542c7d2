"""Multi-environment Content/Style datasets.

Observation model for a sample of content class ``c`` in environment ``e``::

    x = W_C (mu_c + eps_C) + W_S (m_e + s_{e,c} + sigma_e * eps_S) + eta

``W_C``/``W_S`` have jointly orthonormal columns, ``m_e`` is the env style
mean, ``s_{e,c}`` a class-conditional style shift (the spurious correlation)
and ``eta ~ N(0, noise_sigma^2 I)``.  Class 2 (``mu_2``) is the anomaly and
only occurs in test environments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .core import ContentLabel, EnvDataset, RngHandle, Split
from .errors import ConfigError

REGIMES = ("A", "B", "C", "D")

# Style is mostly an environment-level property: env means are spread wide
# (N(0, TRAIN_STYLE_SPREAD^2 I)) while within-env style scales are small.
TRAIN_STYLE_SPREAD = 2.0
STYLE_SCALE_RANGE = (0.2, 0.6)
# Shifted test styles move along the directions in which train styles vary.
TEST_SHIFT_IN_TRAIN_SPAN = True
# Per-train-env multiplier on spurious_strength (mean 1), so the strength of
# the shortcut differs between train envs.
SPURIOUS_STRENGTH_RANGE = (0.0, 2.0)
MIN_PROTOTYPE_GAP = 2.0
_GAP_RETRIES = 64


@dataclass(frozen=True)
class ScenarioConfig:
    regime: str = "D"
    n_train_envs: int = 6
    n_test_envs: int = 3
    samples_per_env: int = 200
    anomaly_fraction_test: float = 0.25
    d_content: int = 4
    d_style: int = 8
    d_x: int = 32
    style_shift_scale: float = 4.0
    spurious_strength: float = 3.0
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        regime = str(self.regime).upper()
        object.__setattr__(self, "regime", regime)
        if regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}", key="regime")
        for name in ("n_train_envs", "n_test_envs", "samples_per_env", "d_content", "d_x"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        if self.d_style < 0:
            raise ConfigError("d_style must be >= 0", key="d_style")
        if self.d_x < self.d_content + self.d_style:
            raise ConfigError(
                f"d_x={self.d_x} < d_content + d_style = {self.d_content + self.d_style}", key="d_x")
        if self.samples_per_env < 4:
            raise ConfigError("samples_per_env must be >= 4 (two per normal class)",
                              key="samples_per_env")
        if self.style_shift_scale < 0:
            raise ConfigError("style_shift_scale must be >= 0", key="style_shift_scale")
        if self.spurious_strength < 0:
            raise ConfigError("spurious_strength must be >= 0", key="spurious_strength")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0", key="noise_sigma")
        if regime in ("A", "B"):
            object.__setattr__(self, "anomaly_fraction_test", 0.0)
        elif not 0.0 < self.anomaly_fraction_test < 1.0:
            raise ConfigError(
                f"regime {regime} needs anomaly_fraction_test in (0, 1), "
                f"got {self.anomaly_fraction_test}", key="anomaly_fraction_test")

    @property
    def style_ood(self) -> bool:
        return self.regime in ("B", "D")

    @classmethod
    def from_mapping(cls, values: dict) -> "ScenarioConfig":
        """Build from string or typed values keyed by field name."""
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown scenario key {sorted(unknown)[0]!r}", key=sorted(unknown)[0])
        parsed = {}
        for key, raw in values.items():
            kind = kinds[key]
            try:
                if kind == "str":
                    parsed[key] = str(raw)
                elif kind == "int":
                    parsed[key] = int(raw)
                else:
                    parsed[key] = float(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}", key=key) from exc
        return cls(**parsed)

    def as_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class EnvParams:
    env_id: int
    style_mean: np.ndarray
    style_scale: np.ndarray
    spurious_shift: np.ndarray  # (3, d_style): one row per content class


@dataclass(frozen=True)
class MixingModel:
    W_C: np.ndarray
    W_S: np.ndarray
    content_prototypes: np.ndarray  # (3, d_content); row 2 is the anomaly class


def build_mixing_model(cfg: ScenarioConfig, rng: RngHandle) -> MixingModel:
    if cfg.d_x < cfg.d_content + cfg.d_style:
        raise ConfigError("d_x < d_content + d_style", key="d_x")
    g = rng.generator()
    k = cfg.d_content + cfg.d_style
    Q, R = np.linalg.qr(g.standard_normal((cfg.d_x, k)))
    Q = Q * np.sign(np.diag(R))  # unique QR
    protos = g.standard_normal((3, cfg.d_content)) * 1.5
    gaps = [np.linalg.norm(protos[i] - protos[j]) for i in range(3) for j in range(i + 1, 3)]
    if min(gaps) < MIN_PROTOTYPE_GAP:
        protos = protos * (MIN_PROTOTYPE_GAP / max(min(gaps), 1e-12))
    return MixingModel(W_C=Q[:, :cfg.d_content], W_S=Q[:, cfg.d_content:], content_prototypes=protos)


def _unit(g, d):
    v = g.standard_normal(d)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.eye(d)[0]


def spurious_axis(cfg: ScenarioConfig) -> np.ndarray:
    """Style direction along which the class shift points in every train env."""
    if cfg.d_style == 0:
        return np.zeros(0)
    return _unit(RngHandle(int(cfg.seed), "synthgen/spurious_axis").generator(), cfg.d_style)


def _train_env_params(cfg: ScenarioConfig, env_id: int, rng: RngHandle) -> EnvParams:
    g = rng.generator()
    ds = cfg.d_style
    mean = g.standard_normal(ds) * TRAIN_STYLE_SPREAD
    scale = g.uniform(*STYLE_SCALE_RANGE, size=ds)
    # shared spurious axis with a per-env tilt and strength; the sign never
    # flips across train envs, so pooled learners can exploit it
    u = spurious_axis(cfg)
    tilt = g.standard_normal(ds) * 0.25
    d = u + tilt
    if ds:
        d = d / np.linalg.norm(d)
    strength = cfg.spurious_strength * g.uniform(*SPURIOUS_STRENGTH_RANGE)
    shift = np.zeros((3, ds))
    shift[ContentLabel.NORMAL0] = -0.5 * strength * d
    shift[ContentLabel.NORMAL1] = 0.5 * strength * d
    return EnvParams(env_id, mean, scale, shift)


def sample_env_params(cfg: ScenarioConfig, env_id: int, is_test: bool, rng: RngHandle,
                      train_params: list[EnvParams] | None = None) -> EnvParams:
    """Draw the parameters of one environment.

    Train envs are drawn independently.  Test envs start from train env
    ``(env_id - n_train_envs) mod n_train_envs``; in regimes A/C that copy is
    returned unchanged, in B/D the style mean is pushed at least
    ``style_shift_scale`` away from every train style mean and the spurious
    shift gets a fresh random direction and sign.
    """
    if not is_test:
        return _train_env_params(cfg, env_id, rng)
    if not train_params:
        raise ConfigError("test environments need the train environment parameters")
    base = train_params[(env_id - cfg.n_train_envs) % len(train_params)]
    if not cfg.style_ood or cfg.d_style == 0:
        return replace(base, env_id=env_id)

    g = rng.child("style_gap").generator()
    train_means = np.stack([p.style_mean for p in train_params])
    gap = cfg.style_shift_scale

    def min_gap(m):
        return float(np.min(np.linalg.norm(train_means - m, axis=1)))

    basis = np.eye(cfg.d_style)
    if TEST_SHIFT_IN_TRAIN_SPAN and len(train_params) > 1:
        U, sv, _ = np.linalg.svd((train_means - train_means.mean(axis=0)).T, full_matrices=False)
        basis = U[:, sv > 1e-9 * sv.max()]

    def direction():
        return basis @ _unit(g, basis.shape[1])

    mean = None
    for _ in range(_GAP_RETRIES):
        cand = base.style_mean + gap * (1.0 + 0.5 * g.uniform()) * direction()
        if min_gap(cand) >= gap:
            mean = cand
            break
    if mean is None:
        # radial projection away from the train centroid until the gap holds
        centre = train_means.mean(axis=0)
        direction = cand - centre
        direction = direction / max(np.linalg.norm(direction), 1e-12)
        t = 0.0
        mean = cand
        while min_gap(mean) < gap:
            t += 0.25 * max(gap, 1e-3)
            mean = cand + t * direction

    gs = rng.child("spurious").generator()
    d = _unit(gs, cfg.d_style) * (1.0 if gs.uniform() < 0.5 else -1.0)
    strength = cfg.spurious_strength * gs.uniform(0.75, 1.25)
    shift = np.zeros((3, cfg.d_style))
    shift[ContentLabel.NORMAL0] = -0.5 * strength * d
    shift[ContentLabel.NORMAL1] = 0.5 * strength * d
    return EnvParams(env_id, mean, base.style_scale.copy(), shift)


def _env_labels(cfg: ScenarioConfig, is_test: bool, g: np.random.Generator) -> np.ndarray:
    n = cfg.samples_per_env
    n_anom = int(round(cfg.anomaly_fraction_test * n)) if is_test else 0
    n_norm = n - n_anom
    labels = np.concatenate([
        np.full(n_norm // 2, ContentLabel.NORMAL0),
        np.full(n_norm - n_norm // 2, ContentLabel.NORMAL1),
        np.full(n_anom, ContentLabel.ANOMALY),
    ]).astype(np.int64)
    return g.permutation(labels)


def sample_env(cfg: ScenarioConfig, mix: MixingModel, params: EnvParams, is_test: bool,
               rng: RngHandle) -> tuple[np.ndarray, np.ndarray]:
    g = rng.generator()
    labels = _env_labels(cfg, is_test, g)
    n = len(labels)
    eps_c = g.standard_normal((n, cfg.d_content))
    eps_s = g.standard_normal((n, cfg.d_style))
    eta = g.standard_normal((n, cfg.d_x)) * cfg.noise_sigma
    content = mix.content_prototypes[labels] + eps_c
    style = params.style_mean + params.spurious_shift[labels] + params.style_scale * eps_s
    X = content @ mix.W_C.T + style @ mix.W_S.T + eta
    return X, labels


def generate_scenario(cfg: ScenarioConfig) -> EnvDataset:
    root = RngHandle(int(cfg.seed), "synthgen")
    mix = build_mixing_model(cfg, root.child("mixing"))
    train_ids = list(range(cfg.n_train_envs))
    test_ids = list(range(cfg.n_train_envs, cfg.n_train_envs + cfg.n_test_envs))
    train_params = [sample_env_params(cfg, e, False, root.child(f"env/{e}")) for e in train_ids]
    test_params = [sample_env_params(cfg, e, True, root.child(f"env/{e}"), train_params)
                   for e in test_ids]

    feats, envs, labels, splits = [], [], [], []
    for params, is_test in [(p, False) for p in train_params] + [(p, True) for p in test_params]:
        X, y = sample_env(cfg, mix, params, is_test, root.child(f"samples/{params.env_id}"))
        feats.append(X)
        labels.append(y)
        envs.append(np.full(len(y), params.env_id))
        splits.append(np.full(len(y), Split.TEST if is_test else Split.TRAIN))
    return EnvDataset(np.concatenate(feats), np.concatenate(envs), np.concatenate(labels),
                      np.concatenate(splits), set(train_ids), set(test_ids),
                      regime=cfg.regime, seed=int(cfg.seed))


def scenario_parts(cfg: ScenarioConfig):
    """Mixing model and env params exactly as :func:`generate_scenario` draws them."""
    root = RngHandle(int(cfg.seed), "synthgen")
    mix = build_mixing_model(cfg, root.child("mixing"))
    train_params = [sample_env_params(cfg, e, False, root.child(f"env/{e}"))
                    for e in range(cfg.n_train_envs)]
    test_params = [sample_env_params(cfg, e, True, root.child(f"env/{e}"), train_params)
                   for e in range(cfg.n_train_envs, cfg.n_train_envs + cfg.n_test_envs)]
    return mix, train_params, test_params
