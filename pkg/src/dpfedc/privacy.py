"""Gaussian-mechanism calibration, subsampling amplification and budget accounting.

Per round, client ``i`` releases its centroid matrix after ``Q2`` clipped SGD
steps of size ``1/eta`` on ``Q2 * b`` samples drawn without replacement from
its ``n_i`` local samples.  The release has L2 sensitivity ``2 G Q2 / eta``;
the sampling ratio ``q = Q2 b / n_i`` amplifies the per-round guarantee, and
the closed-form accountant maps a per-client total budget to a per-round
``epsilon``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class PrivacyError(ValueError):
    """A privacy configuration that voids the stated guarantee."""


@dataclass(frozen=True)
class DpConfig:
    eps_total: float = 20.0
    delta: float = 1e-4
    clip_G: float = 10.0
    c0: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.enabled:
            return
        if not self.eps_total > 0:
            raise PrivacyError(f"eps_total must be > 0, got {self.eps_total}")
        if not 0 < self.delta <= 1:
            raise PrivacyError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.clip_G > 0:
            raise PrivacyError(f"clip_G must be > 0, got {self.clip_G}")
        if not self.c0 > 0:
            raise PrivacyError(f"c0 must be > 0, got {self.c0}")

    @classmethod
    def off(cls) -> "DpConfig":
        return cls(eps_total=math.inf, clip_G=math.inf, enabled=False)


@dataclass(frozen=True)
class RoundNoiseSpec:
    client_id: int
    round: int
    q_it: float
    sigma2: float
    s_it: float


def sensitivity(G: float, Q2_t: int, eta_t: float) -> float:
    """L2 sensitivity ``2 G Q2 / eta`` of one round's uploaded centroids."""
    if G < 0 or Q2_t <= 0 or eta_t <= 0:
        raise PrivacyError(f"need G >= 0, Q2 > 0, eta > 0; got G={G}, Q2={Q2_t}, eta={eta_t}")
    return 2.0 * G * Q2_t / eta_t


def amplify(eps: float, delta: float, q: float) -> tuple[float, float]:
    """Guarantee of an ``(eps, delta)`` mechanism run on a ``q``-fraction subsample."""
    if not 0 < q <= 1:
        raise PrivacyError(f"sampling ratio must lie in (0, 1], got {q}")
    if not 0 < eps <= 1:
        raise PrivacyError(f"amplification bound requires 0 < eps <= 1, got {eps}")
    return 2.0 * q * eps, q * delta


def gaussian_sigma2(s: float, eps: float, delta: float) -> float:
    """Classical Gaussian-mechanism variance ``2 s^2 ln(1.25/delta) / eps^2``."""
    if eps <= 0 or not 0 < delta < 1.25:
        raise PrivacyError(f"need eps > 0 and 0 < delta < 1.25, got eps={eps}, delta={delta}")
    return 2.0 * s * s * math.log(1.25 / delta) / (eps * eps)


def round_sigma2(G: float, Q2_t: int, q_it: float, eta_t: float, eps: float, delta: float) -> float:
    """Per-entry noise variance that makes one round ``(eps, delta)``-DP after amplification."""
    if not 0 < eps <= 1:
        raise PrivacyError(f"per-round eps must lie in (0, 1], got {eps}")
    if not 0 < delta <= 1:
        raise PrivacyError(f"delta must lie in (0, 1], got {delta}")
    if not 0 < q_it <= 1:
        raise PrivacyError(f"sampling ratio must lie in (0, 1], got {q_it}")
    ratio = 1.25 * q_it / delta
    if ratio <= 1:
        raise PrivacyError(f"1.25*q/delta = {ratio} <= 1 makes the log term nonpositive")
    if G < 0 or Q2_t <= 0 or eta_t <= 0:
        raise PrivacyError(f"need G >= 0, Q2 > 0, eta > 0; got G={G}, Q2={Q2_t}, eta={eta_t}")
    num = 32.0 * G * G * Q2_t * Q2_t * q_it * q_it * math.log(ratio)
    return num / (eta_t * eta_t * eps * eps)


def aggregate_ratio(q_values: Iterable[float]) -> float:
    """Worst-case ``q^2 / sqrt(1 - q)`` over all clients and rounds."""
    worst = 0.0
    seen = False
    for q in q_values:
        seen = True
        if not 0 < q < 1:
            raise PrivacyError(
                f"sampling ratio q={q} is outside (0, 1); the accountant needs q < 1 "
                "(reduce b or Q_hat, or give clients more samples)"
            )
        worst = max(worst, q * q / math.sqrt(1.0 - q))
    if not seen:
        raise PrivacyError("no sampling ratios supplied")
    return worst


def total_loss(eps: float, R: int, p: float, q_agg: float, c0: float) -> float:
    """Total privacy loss ``c0 * q_agg * eps * sqrt(p R)`` after ``R`` rounds."""
    if not 0 < p <= 1:
        raise PrivacyError(f"client sampling probability must lie in (0, 1], got {p}")
    if R < 0 or q_agg <= 0 or c0 <= 0:
        raise PrivacyError(f"need R >= 0, q_agg > 0, c0 > 0; got R={R}, q_agg={q_agg}, c0={c0}")
    return c0 * q_agg * eps * math.sqrt(p * R)


def per_round_epsilon(eps_total: float, R: int, p: float, q_agg: float, c0: float) -> float:
    """Invert :func:`total_loss` for the per-round ``eps``; it must land in (0, 1]."""
    if R < 1:
        raise PrivacyError(f"need R >= 1 rounds, got {R}")
    scale = total_loss(1.0, R, p, q_agg, c0)
    eps = eps_total / scale
    if not eps > 0:
        raise PrivacyError(f"per-round eps = {eps} is not positive")
    if eps > 1:
        raise PrivacyError(
            f"per-round eps = {eps:.6g} > 1 voids the amplification bound; "
            f"lower eps_total (max feasible {scale:.6g}) or raise c0, R, p or the sampling ratio"
        )
    return eps


def clip_gradient(M: np.ndarray, G: float) -> np.ndarray:
    """Rescale ``M`` to Frobenius norm ``G`` when it is larger."""
    if not G > 0:
        raise ValueError(f"clip bound must be > 0, got {G}")
    norm = float(np.linalg.norm(M))
    if norm <= G:
        return M
    return M * (G / norm)


def gaussian_noise(rows: int, cols: int, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    if sigma2 < 0:
        raise ValueError(f"variance must be >= 0, got {sigma2}")
    if sigma2 == 0:
        return np.zeros((rows, cols))
    return math.sqrt(sigma2) * rng.standard_normal((rows, cols))
