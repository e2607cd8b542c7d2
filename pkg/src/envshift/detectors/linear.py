"""Linear-model detectors: one-class SVM (SMO) and whitened PCA."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial.distance import cdist


def rbf_kernel(A, B, gamma):
    return np.exp(-gamma * cdist(A, B, "sqeuclidean"))


def smo_one_class(K, nu, tol=1e-4, max_iter=10_000):
    """Solve the nu one-class SVM dual with maximal-violating-pair SMO.

    Dual (libsvm scaling)::

        min 1/2 a^T K a   s.t.  0 <= a_i <= 1,  sum a = nu * n

    Returns ``(alpha, rho, n_iter, converged)``; the decision function is
    ``K(x, X) @ alpha - rho``.
    """
    n = K.shape[0]
    total = nu * n
    alpha = np.zeros(n)
    n_full = int(np.floor(total))
    alpha[:n_full] = 1.0
    if n_full < n:
        alpha[n_full] = total - n_full
    G = K @ alpha
    diag = np.diag(K)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        up = alpha < 1.0
        low = alpha > 0.0
        i = int(np.flatnonzero(up)[np.argmin(G[up])])
        j = int(np.flatnonzero(low)[np.argmax(G[low])])
        gap = G[j] - G[i]
        if gap < tol:
            converged = True
            break
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        delta = min(gap / eta, alpha[j], 1.0 - alpha[i])
        alpha[i] += delta
        alpha[j] -= delta
        G += delta * (K[:, i] - K[:, j])
    if converged:
        alpha, G = _polish(K, alpha, G, total, tol)
    free = (alpha > 1e-12) & (alpha < 1.0 - 1e-12)
    if free.any():
        rho = float(np.mean(G[free]))
    else:
        at_upper = alpha >= 1.0 - 1e-12
        ub = np.min(G[~at_upper]) if (~at_upper).any() else np.max(G)
        lb = np.max(G[at_upper]) if at_upper.any() else np.min(G)
        rho = 0.5 * (ub + lb)
    return alpha, rho, it, converged


def _polish(K, alpha, G, total, tol):
    """Solve the KKT system exactly on the active set SMO settled on.

    Bound variables stay fixed; free ones satisfy ``(K a)_F = rho`` and the
    sum constraint.  SMO only reaches ``tol``, so without this step the
    answer depends on the order rows were visited.  The polished point is
    kept only if it is feasible and still satisfies KKT.
    """
    free = np.flatnonzero((alpha > 1e-8) & (alpha < 1.0 - 1e-8))
    if free.size == 0:
        return alpha, G
    upper = alpha >= 1.0 - 1e-8
    m = free.size
    A = np.zeros((m + 1, m + 1))
    A[:m, :m] = K[np.ix_(free, free)]
    A[:m, m] = -1.0
    A[m, :m] = 1.0
    rhs = np.empty(m + 1)
    rhs[:m] = -K[np.ix_(free, np.flatnonzero(upper))].sum(axis=1)
    rhs[m] = total - upper.sum()
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return alpha, G
    a_free, rho = sol[:m], sol[m]
    if np.any(a_free <= 0.0) or np.any(a_free >= 1.0):
        return alpha, G
    new = np.where(upper, 1.0, 0.0)
    new[free] = a_free
    G_new = K @ new
    lower = ~upper
    lower[free] = False
    if np.any(G_new[upper] > rho + tol) or np.any(G_new[lower] < rho - tol):
        return alpha, G
    return new, G_new


class OneClassSVM:
    """RBF one-class SVM; score is the negative decision function."""

    min_rows = 2

    def __init__(self, gamma="auto", nu=0.5, tol=1e-4, max_iter=10_000):
        self.gamma = gamma
        self.nu = float(nu)
        self.tol = float(tol)
        self.max_iter = int(max_iter)

    def fit(self, X, rng=None):
        self.gamma_ = 1.0 / X.shape[1] if self.gamma == "auto" else float(self.gamma)
        K = rbf_kernel(X, X, self.gamma_)
        alpha, rho, self.n_iter_, self.converged_ = smo_one_class(K, self.nu, self.tol, self.max_iter)
        if not self.converged_:
            warnings.warn(f"one-class SVM stopped after {self.n_iter_} SMO iterations", RuntimeWarning)
        sv = alpha > 0
        self.support_vectors_ = X[sv]
        self.dual_coef_ = alpha[sv]
        self.rho_ = rho
        return self

    def decision_function(self, X):
        return rbf_kernel(X, self.support_vectors_, self.gamma_) @ self.dual_coef_ - self.rho_

    def score(self, X):
        return -self.decision_function(X)


class PCA:
    """Mahalanobis-style PCA score keeping every component.

    ``score(x) = sum_j ((x - mean) . v_j)^2 / lambda_j`` with eigenvalues
    floored at ``1e-9 * lambda_max`` so rank-deficient training data stays
    finite.
    """

    min_rows = 2
    REL_FLOOR = 1e-9

    def __init__(self, whiten=True):
        self.whiten = bool(whiten)

    def fit(self, X, rng=None):
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (len(X) - 1)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1]
        vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
        self.explained_variance_ = vals
        self.components_ = vecs.T
        top = vals[0] if vals[0] > 0 else 1.0
        self.scale_ = np.maximum(vals, self.REL_FLOOR * top) if self.whiten else np.ones_like(vals)
        return self

    def score(self, X):
        proj = (X - self.mean_) @ self.components_.T
        return np.sum(proj ** 2 / self.scale_, axis=1)
