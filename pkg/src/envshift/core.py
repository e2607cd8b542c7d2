"""Shared data model: samples, multi-environment datasets and seeded RNG streams.

Label convention used everywhere: anomaly label 1 / higher score means more
anomalous.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, EmptySelection, UnknownEnv

FORMAT_MAGIC = "envshift-dataset 1"


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _label_words(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4))


@dataclass(frozen=True)
class RngHandle:
    """A named, reproducible random stream.

    The stream is fully determined by ``(seed, stream_label)``; children made
    with :func:`split_rng` get their own label and hence an independent
    PCG64 state.
    """

    seed: int
    stream_label: str = ""

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}", key="seed")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=_label_words(self.stream_label))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "RngHandle":
        return split_rng(self, label)


def split_rng(parent: RngHandle, label: str) -> RngHandle:
    if not label:
        raise ValueError("stream label must be non-empty")
    full = f"{parent.stream_label}/{label}" if parent.stream_label else label
    return RngHandle(parent.seed, full)


# ---------------------------------------------------------------------------
# Samples and datasets
# ---------------------------------------------------------------------------

class ContentLabel(enum.IntEnum):
    NORMAL0 = 0
    NORMAL1 = 1
    ANOMALY = 2


class Split(enum.IntEnum):
    TRAIN = 0
    TEST = 1


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    env_id: int
    content_label: ContentLabel
    split: Split


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EnvDataset:
    """Column-oriented, immutable collection of environment-labelled samples."""

    features: np.ndarray
    env_ids: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    train_envs: frozenset
    test_envs: frozenset
    regime: str = "D"
    seed: int = 0
    d_x: int = field(init=False)

    def __post_init__(self):
        feats = _frozen(self.features, np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "env_ids", _frozen(self.env_ids, np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "splits", _frozen(self.splits, np.int64))
        object.__setattr__(self, "train_envs", frozenset(int(e) for e in self.train_envs))
        object.__setattr__(self, "test_envs", frozenset(int(e) for e in self.test_envs))
        object.__setattr__(self, "d_x", feats.shape[1])
        n = feats.shape[0]
        if not (len(self.env_ids) == len(self.labels) == len(self.splits) == n):
            raise ValueError("column lengths differ")
        self._check()

    def _check(self):
        declared = self.train_envs | self.test_envs
        if not set(np.unique(self.env_ids).tolist()) <= declared:
            raise ValueError("sample env_id outside declared environments")
        train = self.splits == Split.TRAIN
        if np.any(self.labels[train] == ContentLabel.ANOMALY):
            raise ValueError("train split contains anomalies")
        if self.test_envs and np.any(np.isin(self.env_ids[train], sorted(self.test_envs - self.train_envs))):
            raise ValueError("train sample drawn from a test-only environment")

    def __len__(self):
        return self.features.shape[0]

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(self.features[i], int(self.env_ids[i]), ContentLabel(int(self.labels[i])),
                   Split(int(self.splits[i])))
            for i in range(len(self))
        ]

    @classmethod
    def from_samples(cls, samples: Iterable[Sample], train_envs, test_envs, regime="D", seed=0):
        samples = list(samples)
        return cls(
            features=np.stack([s.features for s in samples]),
            env_ids=[s.env_id for s in samples],
            labels=[int(s.content_label) for s in samples],
            splits=[int(s.split) for s in samples],
            train_envs=train_envs,
            test_envs=test_envs,
            regime=regime,
            seed=seed,
        )

    def mask(self, split: Optional[Split] = None, envs=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if split is not None:
            m &= self.splits == int(split)
        if envs is not None:
            envs = {int(e) for e in envs}
            unknown = envs - (self.train_envs | self.test_envs)
            if unknown:
                raise UnknownEnv(f"environments {sorted(unknown)} are not declared in the dataset")
            m &= np.isin(self.env_ids, sorted(envs))
        return m

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_dataset(self).encode()).hexdigest()[:16]


def dataset_view(ds: EnvDataset, split: Split, envs=None):
    """Return ``(X, y_ad, env)`` for the selected rows, in original order.

    ``y_ad`` is 1 for anomalies and 0 for both normal classes.
    """
    m = ds.mask(split, envs)
    if not m.any():
        raise EmptySelection(f"no samples for split={Split(split).name} envs={envs}")
    X = ds.features[m]
    y = (ds.labels[m] == ContentLabel.ANOMALY).astype(np.int64)
    return X, y, ds.env_ids[m]


# ---------------------------------------------------------------------------
# On-disk format
#
#   line 1: "envshift-dataset 1"
#   line 2: d_x=<int> regime=<A|B|C|D> seed=<int> train_envs=<ids,> test_envs=<ids,> n=<int>
#   then n lines: env_id split(train|test) label(normal0|normal1|anomaly) x_1 ... x_dx
#
# Floats use 17 significant digits, which round-trips IEEE doubles exactly.
# ---------------------------------------------------------------------------

_SPLIT_NAMES = {Split.TRAIN: "train", Split.TEST: "test"}
_LABEL_NAMES = {ContentLabel.NORMAL0: "normal0", ContentLabel.NORMAL1: "normal1",
                ContentLabel.ANOMALY: "anomaly"}


def _ids(s):
    return ",".join(str(e) for e in sorted(s))


def dumps_dataset(ds: EnvDataset) -> str:
    out = io.StringIO()
    out.write(FORMAT_MAGIC + "\n")
    out.write(f"d_x={ds.d_x} regime={ds.regime} seed={ds.seed} "
              f"train_envs={_ids(ds.train_envs)} test_envs={_ids(ds.test_envs)} n={len(ds)}\n")
    for i in range(len(ds)):
        vals = " ".join("%.17g" % v for v in ds.features[i])
        out.write(f"{ds.env_ids[i]} {_SPLIT_NAMES[Split(ds.splits[i])]} "
                  f"{_LABEL_NAMES[ContentLabel(ds.labels[i])]} {vals}\n")
    return out.getvalue()


def loads_dataset(text: str) -> EnvDataset:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_MAGIC:
        raise ValueError("not an envshift dataset file")
    header = dict(tok.split("=", 1) for tok in lines[1].split())
    d_x = int(header["d_x"])
    n = int(header["n"])

    def parse_ids(v):
        return {int(t) for t in v.split(",") if t}

    split_of = {v: k for k, v in _SPLIT_NAMES.items()}
    label_of = {v: k for k, v in _LABEL_NAMES.items()}
    rows = lines[2:2 + n]
    if len(rows) != n:
        raise ValueError(f"expected {n} sample records, found {len(rows)}")
    feats = np.empty((n, d_x))
    env = np.empty(n, dtype=np.int64)
    lab = np.empty(n, dtype=np.int64)
    spl = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        parts = row.split()
        if len(parts) != 3 + d_x:
            raise ValueError(f"record {i} has {len(parts) - 3} features, expected {d_x}")
        env[i] = int(parts[0])
        spl[i] = split_of[parts[1]]
        lab[i] = label_of[parts[2]]
        feats[i] = [float(v) for v in parts[3:]]
    return EnvDataset(feats, env, lab, spl, parse_ids(header["train_envs"]),
                      parse_ids(header["test_envs"]), regime=header["regime"],
                      seed=int(header["seed"]))


def save_dataset(ds: EnvDataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def load_dataset(path) -> EnvDataset:
    return loads_dataset(Path(path).read_text())
