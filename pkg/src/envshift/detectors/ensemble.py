"""Ensemble detectors: isolation forest, iNNE and LODA.

Each estimator (tree, hypersphere set, projection) draws from its own child
RNG stream, so the structure of estimator ``t`` never depends on how many
others were built before it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.distance import cdist

EULER_GAMMA = 0.5772156649015329


def average_path_length(n):
    """Expected path length of an unsuccessful BST search over ``n`` points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    out[big] = 2.0 * (np.log(n[big] - 1.0) + EULER_GAMMA) - 2.0 * (n[big] - 1.0) / n[big]
    return out


class _Tree:
    __slots__ = ("feature", "threshold", "left", "right", "size", "depth")

    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.size, self.depth = ([] for _ in range(6))

    def add(self, size, depth):
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1),
                       (self.size, size), (self.depth, depth)):
            lst.append(v)
        return len(self.size) - 1

    def freeze(self):
        self.feature = np.array(self.feature, dtype=np.int64)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.size = np.array(self.size, dtype=np.int64)
        self.depth = np.array(self.depth, dtype=np.int64)
        return self


def _grow_tree(X, max_depth, g):
    tree = _Tree()
    root = tree.add(len(X), 0)
    stack = [(root, np.arange(len(X)))]
    while stack:
        node, rows = stack.pop()
        depth = tree.depth[node]
        if depth >= max_depth or len(rows) <= 1:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        usable = np.flatnonzero(hi > lo)
        if not len(usable):
            continue
        f = int(usable[g.integers(len(usable))])
        t = g.uniform(lo[f], hi[f])
        go_left = sub[:, f] < t
        li = tree.add(int(go_left.sum()), depth + 1)
        ri = tree.add(int((~go_left).sum()), depth + 1)
        tree.feature[node], tree.threshold[node] = f, t
        tree.left[node], tree.right[node] = li, ri
        stack.append((ri, rows[~go_left]))
        stack.append((li, rows[go_left]))
    return tree.freeze()


def _path_lengths(tree, X):
    node = np.zeros(len(X), dtype=np.int64)
    while True:
        inner = tree.feature[node] >= 0
        if not inner.any():
            break
        idx = np.flatnonzero(inner)
        nd = node[idx]
        left = X[idx, tree.feature[nd]] < tree.threshold[nd]
        node[idx] = np.where(left, tree.left[nd], tree.right[nd])
    return tree.depth[node] + average_path_length(tree.size[node])


class IsolationForest:
    """Isolation forest; score ``2 ** (-E[h(x)] / c(psi))``."""

    min_rows = 2

    def __init__(self, n_estimators=100, max_samples=256):
        self.n_estimators = int(n_estimators)
        self.max_samples = int(max_samples)

    def fit(self, X, rng):
        n = len(X)
        self.psi_ = min(self.max_samples, n)
        max_depth = int(math.ceil(math.log2(max(self.psi_, 2))))
        self.trees_ = []
        for t in range(self.n_estimators):
            g = rng.child(f"tree{t}").generator()
            rows = g.choice(n, self.psi_, replace=False)
            self.trees_.append(_grow_tree(X[rows], max_depth, g))
        return self

    def score(self, X):
        depth = np.mean([_path_lengths(t, X) for t in self.trees_], axis=0)
        return 2.0 ** (-depth / average_path_length(np.array([self.psi_]))[0])


class INNE:
    """Isolation using nearest-neighbour ensembles.

    Each estimator samples ``psi`` points; point ``c`` owns a hypersphere of
    radius ``tau(c)`` = distance to its nearest other sampled point.  A query
    covered by several spheres uses the smallest one (``cnn``) and gets
    ``1 - tau(nn(cnn)) / tau(cnn)``; uncovered queries score 1.
    """

    min_rows = 2

    def __init__(self, n_estimators=51, max_samples=8):
        self.n_estimators = int(n_estimators)
        self.max_samples = int(max_samples)

    def fit(self, X, rng):
        n = len(X)
        psi = min(self.max_samples, n)
        self.centres_, self.radii_, self.ratio_ = [], [], []
        for t in range(self.n_estimators):
            g = rng.child(f"estimator{t}").generator()
            C = X[g.choice(n, psi, replace=False)]
            D = cdist(C, C)
            np.fill_diagonal(D, np.inf)
            nn = np.argmin(D, axis=1)
            tau = D[np.arange(psi), nn]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(tau > 0, tau[nn] / tau, 1.0)
            self.centres_.append(C)
            self.radii_.append(tau)
            self.ratio_.append(ratio)
        return self

    def score(self, X):
        total = np.zeros(len(X))
        for C, tau, ratio in zip(self.centres_, self.radii_, self.ratio_):
            D = cdist(X, C)
            covered = D <= tau
            masked = np.where(covered, tau, np.inf)
            cnn = np.argmin(masked, axis=1)
            hit = covered.any(axis=1)
            total += np.where(hit, 1.0 - ratio[cnn], 1.0)
        return total / self.n_estimators


class LODA:
    """Lightweight on-line detector of anomalies (batch form).

    Sparse Gaussian projections with ``ceil(sqrt(d))`` non-zeros, one
    equal-width histogram per projection over the training range with +1
    Laplace smoothing; values outside the range fall in an empty bin.  Score
    is the negative mean log density across projections.
    """

    min_rows = 2

    def __init__(self, n_bins=25, n_random_cuts=100):
        self.n_bins = int(n_bins)
        self.n_random_cuts = int(n_random_cuts)

    def fit(self, X, rng):
        n, d = X.shape
        k = int(math.ceil(math.sqrt(d)))
        W = np.zeros((self.n_random_cuts, d))
        for j in range(self.n_random_cuts):
            g = rng.child(f"cut{j}").generator()
            cols = g.choice(d, k, replace=False)
            W[j, cols] = g.standard_normal(k)
        Z = X @ W.T
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        flat = hi <= lo
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        width = (hi - lo) / self.n_bins
        counts = np.zeros((self.n_random_cuts, self.n_bins))
        for j in range(self.n_random_cuts):
            counts[j] = np.bincount(self._bin(Z[:, j], lo[j], width[j]), minlength=self.n_bins)
        self.projections_ = W
        self.lo_, self.hi_, self.width_ = lo, hi, width
        self.counts_ = counts
        self.n_train_ = n
        return self

    def _bin(self, z, lo, width):
        b = np.floor((z - lo) / width).astype(np.int64)
        return np.clip(b, 0, self.n_bins - 1)

    def log_density(self, X):
        Z = X @ self.projections_.T
        out = np.empty_like(Z)
        norm = self.n_train_ + self.n_bins
        for j in range(self.n_random_cuts):
            z = Z[:, j]
            counts = self.counts_[j][self._bin(z, self.lo_[j], self.width_[j])]
            outside = (z < self.lo_[j]) | (z > self.hi_[j])
            counts = np.where(outside, 0.0, counts)
            out[:, j] = np.log((counts + 1.0) / norm) - np.log(self.width_[j])
        return out

    def score(self, X):
        return -self.log_density(X).mean(axis=1)
