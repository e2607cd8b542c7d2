"""Eight shallow anomaly detectors behind one fit/score contract.

Scores are oriented so that higher means more anomalous.  Hyperparameters
default to the settings tuned for the benchmark (see ``DEFAULT_CONFIGS``).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import RngHandle
from ..errors import ConfigError, InsufficientData, ShapeError
from .ensemble import INNE, LODA, IsolationForest
from .linear import PCA, OneClassSVM
from .proximity import KDE, KNN, LOF


class DetectorKind(str, enum.Enum):
    ISOFOREST = "isoforest"
    INNE = "inne"
    LODA = "loda"
    OCSVM = "ocsvm"
    PCA = "pca"
    LOF5 = "lof5"
    KNN = "knn"
    KDE = "kde"

    @property
    def title(self) -> str:
        return _TITLES[self]


_TITLES = {
    DetectorKind.ISOFOREST: "IsoForest", DetectorKind.INNE: "INNE", DetectorKind.LODA: "LODA",
    DetectorKind.OCSVM: "OCSVM", DetectorKind.PCA: "PCA", DetectorKind.LOF5: "LOF5",
    DetectorKind.KNN: "KNN", DetectorKind.KDE: "KDE",
}
DETECTOR_ORDER = list(DetectorKind)

# kind -> (estimator class, use_scaler, params)
DEFAULT_CONFIGS = {
    DetectorKind.ISOFOREST: (IsolationForest, False, {"n_estimators": 100, "max_samples": 256}),
    DetectorKind.INNE: (INNE, False, {"n_estimators": 51, "max_samples": 8}),
    DetectorKind.LODA: (LODA, True, {"n_bins": 25, "n_random_cuts": 100}),
    DetectorKind.OCSVM: (OneClassSVM, True, {"gamma": "auto", "nu": 0.5, "tol": 1e-4,
                                             "max_iter": 10_000}),
    DetectorKind.PCA: (PCA, True, {"whiten": True}),
    DetectorKind.LOF5: (LOF, True, {"n_neighbors": 5}),
    DetectorKind.KNN: (KNN, False, {"n_neighbors": 5}),
    DetectorKind.KDE: (KDE, False, {"bandwidth": 1.0}),
}


def parse_kind(name) -> DetectorKind:
    if isinstance(name, DetectorKind):
        return name
    key = str(name).strip().lower()
    for kind in DetectorKind:
        if key in (kind.value, kind.title.lower()):
            return kind
    valid = ", ".join(k.value for k in DetectorKind)
    raise ConfigError(f"unknown detector {name!r}; valid names: {valid}", key="detectors")


@dataclass(frozen=True)
class DetectorConfig:
    kind: DetectorKind
    use_scaler: bool
    params: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def default(cls, kind, seed: int = 0, **overrides) -> "DetectorConfig":
        kind = parse_kind(kind)
        _, scaler, params = DEFAULT_CONFIGS[kind]
        params = dict(params)
        use_scaler = overrides.pop("use_scaler", scaler)
        unknown = set(overrides) - set(params) - {"bandwidth_rule"}
        if unknown:
            raise ConfigError(f"unknown {kind.value} parameter {sorted(unknown)[0]!r}")
        params.update(overrides)
        return cls(kind, use_scaler, params, seed)

    def describe(self) -> str:
        items = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        scaler = "with_scaler" if self.use_scaler else "without_scaler"
        return f"{self.kind.title}({items}) {scaler}"


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    # columns whose std falls below this are left unscaled (divided by 1)
    FLOOR = 1e-12

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            raise InsufficientData("standardizer needs at least one row", minimum=1)
        std = X.std(axis=0)
        std = np.where(std < cls.FLOOR, 1.0, std)
        return cls(X.mean(axis=0), std)

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def fit_standardizer(X_train) -> Standardizer:
    return Standardizer.fit(X_train)


@dataclass(frozen=True, eq=False)
class DetectorModel:
    config: DetectorConfig
    estimator: object
    scaler: Optional[Standardizer]
    n_features: int
    train_fingerprint: str

    @property
    def kind(self) -> DetectorKind:
        return self.config.kind


def _fingerprint(X) -> str:
    return hashlib.sha256(np.ascontiguousarray(X, dtype=np.float64).tobytes()).hexdigest()[:16]


def fit_detector(cfg: DetectorConfig, X_train) -> DetectorModel:
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("training data must be a 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise ShapeError("training data contains non-finite values")
    cls = DEFAULT_CONFIGS[cfg.kind][0]
    est = cls(**cfg.params)
    if X.shape[0] < est.min_rows:
        raise InsufficientData(
            f"{cfg.kind.title} needs at least {est.min_rows} training rows, got {X.shape[0]}",
            minimum=est.min_rows)
    scaler = Standardizer.fit(X) if cfg.use_scaler else None
    Xs = scaler.apply(X) if scaler else X
    est.fit(Xs, RngHandle(int(cfg.seed), f"detectors/{cfg.kind.value}"))
    return DetectorModel(cfg, est, scaler, X.shape[1], _fingerprint(X))


def score_detector(m: DetectorModel, X_test) -> np.ndarray:
    X = np.asarray(X_test, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ShapeError(f"expected {m.n_features} features, got shape {X.shape}")
    if m.scaler is not None:
        X = m.scaler.apply(X)
    return m.estimator.score(X)


def default_suite(seed: int = 0, kinds=None) -> list[DetectorConfig]:
    kinds = DETECTOR_ORDER if kinds is None else [parse_kind(k) for k in kinds]
    return [DetectorConfig.default(k, seed=seed) for k in kinds]


__all__ = [
    "DetectorKind", "DetectorConfig", "DetectorModel", "Standardizer", "DEFAULT_CONFIGS",
    "DETECTOR_ORDER", "fit_detector", "score_detector", "fit_standardizer", "default_suite",
    "parse_kind", "IsolationForest", "INNE", "LODA", "OneClassSVM", "PCA", "LOF", "KNN",
    "KDE",
]
