"""Penalized matrix-factorization clustering objective and its helpers.

Data is column-major: ``X`` is ``m x n`` with one sample per column, the
centroid matrix ``W`` is ``m x k`` and the indicator matrix ``H`` is
``k x n``.  For one client the objective is

    ||X - W H||_F^2 + rho/2 * sum_j [(1'h_j)^2 - ||h_j||^2]
                    + mu_h/2 ||H||_F^2 + mu_w/2 ||W||_F^2

where the ``rho`` term is applied column by column and vanishes exactly
when each column of ``H`` has at most one nonzero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class ProblemParams:
    k: int
    rho: float = 0.0
    mu_h: float = 0.0
    mu_w: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name in ("rho", "mu_h", "mu_w"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class FactorPair:
    W: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        if self.W.shape[1] != self.H.shape[0]:
            raise ValueError(f"W is {self.W.shape}, H is {self.H.shape}: inner dimensions differ")
        if np.any(self.H < 0):
            raise ValueError("H must be elementwise nonnegative")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.H))):
            raise ValueError("factors must be finite")


@dataclass(frozen=True)
class StepPolicy:
    """Step-size rule: ``gamma = gamma_scale * L_H`` and ``eta = eta_scale * L_W``.

    ``L_H`` and ``L_W`` are the Lipschitz constants of the H- and W-gradients,
    built from power-iteration estimates of ``lambda_max(W'W)`` and
    ``lambda_max(H H')``.
    """

    gamma_scale: float = 0.5
    eta_scale: float = 5.0
    power_iters: int = 100
    eig_floor: float = 1e-8

    def __post_init__(self):
        if self.gamma_scale <= 0 or self.eta_scale <= 0:
            raise ValueError("step scales must be > 0")
        if self.eig_floor <= 0:
            raise ValueError("eig_floor must be > 0")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


def _check_dims(W, H, X):
    if W.ndim != 2 or H.ndim != 2 or X.ndim != 2:
        raise ValueError("W, H and X must be 2-D")
    m, k = W.shape
    if H.shape[0] != k:
        raise ValueError(f"H has {H.shape[0]} rows, W has {k} columns")
    if X.shape != (m, H.shape[1]):
        raise ValueError(f"X is {X.shape}, expected {(m, H.shape[1])}")


def penalty(H: np.ndarray) -> float:
    """Column-wise sum of ``(1'h)^2 - ||h||^2``; zero iff every column is 1-sparse."""
    col_sums = H.sum(axis=0)
    return float(np.dot(col_sums, col_sums) - np.vdot(H, H))


def objective_local(W, H, X, params: ProblemParams) -> float:
    _check_dims(W, H, X)
    R = X - W @ H
    return float(
        np.vdot(R, R)
        + 0.5 * params.rho * penalty(H)
        + 0.5 * params.mu_h * np.vdot(H, H)
        + 0.5 * params.mu_w * np.vdot(W, W)
    )


def objective_global(W, Hs: Sequence[np.ndarray], Xs: Sequence[np.ndarray], params: ProblemParams) -> float:
    if len(Hs) != len(Xs) or not Hs:
        raise ValueError("need one H and one X per client, at least one client")
    return float(np.mean([objective_local(W, H, X, params) for H, X in zip(Hs, Xs)]))


def grad_H(W, H, X, params: ProblemParams) -> np.ndarray:
    _check_dims(W, H, X)
    G = 2.0 * (W.T @ (W @ H - X))
    # rho * (11' - I) H, applied per column
    G += params.rho * (H.sum(axis=0, keepdims=True) - H)
    G += params.mu_h * H
    return G


def grad_W_stochastic(W, H, X, batch, params: ProblemParams) -> np.ndarray:
    """Minibatch estimate of the W-gradient of the local objective.

    The data term is rescaled by ``n_i / |batch|`` so the estimate is unbiased
    for the sum-form objective.  ``batch=None`` means every column.
    """
    _check_dims(W, H, X)
    n_i = X.shape[1]
    if batch is None:
        HB, XB, scale = H, X, 1.0
    else:
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise ValueError("empty minibatch")
        if batch.min() < 0 or batch.max() >= n_i:
            raise IndexError(f"minibatch index out of range [0, {n_i})")
        HB, XB, scale = H[:, batch], X[:, batch], n_i / batch.size
    G = (2.0 * scale) * ((W @ HB - XB) @ HB.T)
    if params.mu_w:
        G += params.mu_w * W
    return G


def grad_W(W, H, X, params: ProblemParams) -> np.ndarray:
    return grad_W_stochastic(W, H, X, None, params)


def project_nonneg(M: np.ndarray) -> np.ndarray:
    return np.maximum(M, 0.0)


def top_eigenvalue(A: np.ndarray, iters: int) -> float:
    """Power iteration on a symmetric PSD matrix from the normalized all-ones vector."""
    v = np.full(A.shape[0], 1.0 / np.sqrt(A.shape[0]))
    for _ in range(iters):
        u = A @ v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
    return float(v @ A @ v)


def estimate_L_H(W: np.ndarray, policy: StepPolicy) -> float:
    """Estimate of ``lambda_max(W'W)``, floored at ``policy.eig_floor``."""
    return max(top_eigenvalue(W.T @ W, policy.power_iters), policy.eig_floor)


def estimate_L_W(H: np.ndarray, policy: StepPolicy) -> float:
    """Estimate of ``lambda_max(H H')``, floored at ``policy.eig_floor``."""
    return max(top_eigenvalue(H @ H.T, policy.power_iters), policy.eig_floor)


def lipschitz_H(W, params: ProblemParams, policy: StepPolicy) -> float:
    # Hessian in each column is 2 W'W + rho (11' - I) + mu_h I.
    return 2.0 * estimate_L_H(W, policy) + params.rho * (params.k - 1) + params.mu_h


def lipschitz_W(H, params: ProblemParams, policy: StepPolicy) -> float:
    return 2.0 * estimate_L_W(H, policy) + params.mu_w


def sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """``n x k`` matrix of squared distances between columns of X and of C."""
    d = (X * X).sum(axis=0)[:, None] - 2.0 * (X.T @ C) + (C * C).sum(axis=0)[None, :]
    return np.maximum(d, 0.0)


def kmeans_objective(X, W, assignments) -> float:
    R = X - W[:, assignments]
    return float(np.vdot(R, R))


def indicator(assignments, k: int) -> np.ndarray:
    H = np.zeros((k, len(assignments)))
    H[assignments, np.arange(len(assignments))] = 1.0
    return H


def repair_empty(X, assignments, k: int, centroids=None) -> np.ndarray:
    """Give every empty cluster the point farthest from the largest cluster's centre.

    Repeats until no cluster is empty.  Requires ``k <= n``.
    """
    labels = np.array(assignments, copy=True)
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return labels
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        centre = X[:, members].mean(axis=1) if centroids is None else centroids[:, largest]
        d = ((X[:, members] - centre[:, None]) ** 2).sum(axis=0)
        labels[members[int(np.argmax(d))]] = empty[0]
        # centroid of the donor cluster moved; recompute from members next pass
        centroids = None


def kmeanspp_seeds(X, k: int, rng: np.random.Generator) -> np.ndarray:
    """Column indices chosen by distance-squared seeding."""
    n = X.shape[1]
    chosen = [int(rng.integers(n))]
    d = sq_distances(X, X[:, chosen]).ravel()
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with a seed
            pool = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(pool))
        else:
            nxt = int(rng.choice(n, p=d / total))
        chosen.append(nxt)
        d = np.minimum(d, sq_distances(X, X[:, [nxt]]).ravel())
    return np.array(chosen)


def kmeans_centralized(X, k: int, max_iters: int = 100, seed: int = 0, init="kmeanspp", history=None):
    """Lloyd's algorithm on the columns of ``X``.

    ``init`` is ``"kmeanspp"``, ``"random-samples"`` or an explicit ``m x k``
    array of starting centroids.  Returns ``(FactorPair, assignments)`` where
    ``H`` is the binary indicator matrix.  If ``history`` is a list, the
    objective ``||X - WH||_F^2`` after every iteration is appended to it.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    if isinstance(init, str):
        if init == "kmeanspp":
            W = X[:, kmeanspp_seeds(X, k, rng)].copy()
        elif init == "random-samples":
            W = X[:, rng.choice(n, size=k, replace=False)].copy()
        else:
            raise ValueError(f"unknown init {init!r}")
    else:
        W = np.array(init, dtype=float)
        if W.shape != (X.shape[0], k):
            raise ValueError(f"initial centroids must be {(X.shape[0], k)}, got {W.shape}")

    labels = None
    for _ in range(max(max_iters, 1)):
        new = np.argmin(sq_distances(X, W), axis=1)
        new = repair_empty(X, new, k, centroids=W)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        W = (X @ indicator(labels, k).T) / counts
        if history is not None:
            history.append(kmeans_objective(X, W, labels))
    return FactorPair(W, indicator(labels, k)), labels


def extract_assignments(H: np.ndarray) -> np.ndarray:
    """Row index of each column's maximum; ties go to the lowest row."""
    if H.ndim != 2 or H.shape[0] < 1:
        raise ValueError("H must be 2-D with at least one row")
    return np.argmax(H, axis=0)


def confusion_matrix(assignments, labels, k: int) -> np.ndarray:
    k_true = int(labels.max()) + 1 if len(labels) else 1
    C = np.zeros((k, k_true), dtype=np.int64)
    np.add.at(C, (assignments, labels), 1)
    return C


def clustering_accuracy(assignments, labels, k: int) -> float:
    """Fraction of samples correctly clustered under the best cluster-to-label map."""
    assignments = np.asarray(assignments, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if assignments.shape != labels.shape:
        raise ValueError(f"length mismatch: {assignments.shape} vs {labels.shape}")
    if assignments.size == 0:
        raise ValueError("no samples")
    if assignments.min() < 0 or assignments.max() >= k:
        raise ValueError(f"assignments must lie in [0, {k})")
    C = confusion_matrix(assignments, labels, k)
    size = max(C.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: C.shape[0], : C.shape[1]] = C
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum()) / assignments.size


def gap_H(W, Hs, Xs, gammas, params: ProblemParams) -> float:
    total = 0.0
    for H, X, g in zip(Hs, Xs, gammas, strict=True):
        if g <= 0:
            raise ValueError("step parameters gamma must be > 0")
        D = H - project_nonneg(H - grad_H(W, H, X, params) / g)
        total += g * g * float(np.vdot(D, D))
    return total


def global_grad_W(W, Hs, Xs, params: ProblemParams) -> np.ndarray:
    return sum(grad_W(W, H, X, params) for H, X in zip(Hs, Xs, strict=True)) / len(Hs)


def gap_W(W, Hs, Xs, params: ProblemParams) -> float:
    G = global_grad_W(W, Hs, Xs, params)
    return float(np.vdot(G, G))


def measure_noniid(W, Hs, Xs, params: ProblemParams) -> float:
    """Largest Frobenius distance between a client's W-gradient and the average."""
    grads = [grad_W(W, H, X, params) for H, X in zip(Hs, Xs, strict=True)]
    mean = sum(grads) / len(grads)
    return max(float(np.linalg.norm(g - mean)) for g in grads)
