"""Proximity and density detectors: kNN distance, LOF (novelty mode), Gaussian KDE."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp


def _knn(D, k):
    """Indices and distances of the k smallest entries per row (stable on ties)."""
    idx = np.argsort(D, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(D, idx, axis=1)


class KNN:
    """Distance to the k-th nearest training point."""

    def __init__(self, n_neighbors=5):
        self.n_neighbors = int(n_neighbors)

    @property
    def min_rows(self):
        return self.n_neighbors + 1

    def fit(self, X, rng=None):
        self.X_ = X
        return self

    def score(self, X):
        _, dist = _knn(cdist(X, self.X_), self.n_neighbors)
        return dist[:, -1]


class LOF:
    """Local outlier factor of unseen points w.r.t. the training neighbourhoods."""

    # keeps lrd finite when k neighbours coincide
    EPS = 1e-10

    def __init__(self, n_neighbors=5):
        self.n_neighbors = int(n_neighbors)

    @property
    def min_rows(self):
        return self.n_neighbors + 1

    def fit(self, X, rng=None):
        k = self.n_neighbors
        D = cdist(X, X)
        np.fill_diagonal(D, np.inf)
        idx, dist = _knn(D, k)
        self.X_ = X
        self.k_distance_ = dist[:, -1]
        reach = np.maximum(self.k_distance_[idx], dist)
        self.lrd_ = 1.0 / (reach.mean(axis=1) + self.EPS)
        return self

    def score(self, X):
        idx, dist = _knn(cdist(X, self.X_), self.n_neighbors)
        reach = np.maximum(self.k_distance_[idx], dist)
        lrd = 1.0 / (reach.mean(axis=1) + self.EPS)
        return self.lrd_[idx].mean(axis=1) / lrd


class KDE:
    """Negative log of a Gaussian kernel density estimate.

    ``bandwidth_rule="scott"`` replaces the fixed bandwidth with Scott's rule
    on the mean feature std.
    """

    min_rows = 1

    def __init__(self, bandwidth=1.0, bandwidth_rule=None):
        self.bandwidth = float(bandwidth)
        self.bandwidth_rule = bandwidth_rule

    def fit(self, X, rng=None):
        n, d = X.shape
        h = self.bandwidth
        if self.bandwidth_rule == "scott":
            spread = float(np.mean(X.std(axis=0, ddof=1))) if n > 1 else 1.0
            h = max(spread, 1e-12) * n ** (-1.0 / (d + 4))
        self.h_ = h
        self.X_ = X
        return self

    def log_density(self, X):
        n, d = self.X_.shape
        sq = cdist(X, self.X_, "sqeuclidean")
        return (logsumexp(-sq / (2 * self.h_ ** 2), axis=1) - np.log(n)
                - 0.5 * d * np.log(2 * np.pi * self.h_ ** 2))

    def score(self, X):
        return -self.log_density(X)
