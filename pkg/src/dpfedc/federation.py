"""Round engine for differentially private federated clustering.

Each round ``t``:

1. the server holds ``W^t`` (the average of last round's noisy uploads, or
   ``W^0`` at ``t = 1``) and samples ``K`` of the ``N`` clients;
2. every client runs ``Q1`` projected-gradient steps on its indicator matrix
   ``H_i`` at fixed ``W^t``, then ``Q2^t = floor(Q_hat / t) + 1`` clipped
   minibatch SGD steps on its local copy of ``W``;
3. sampled clients add Gaussian noise to their local ``W`` and upload;
   the server averages the uploads into ``W^{t+1}``.

Non-sampled clients still update ``H_i`` (and compute a local ``W`` that is
discarded), so every client's indicator tracks the broadcast centroids.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import model
from .data import ClientShard, DataMatrix
from .model import ProblemParams, StepPolicy
from .privacy import (
    DpConfig,
    PrivacyError,
    RoundNoiseSpec,
    aggregate_ratio,
    clip_gradient,
    gaussian_noise,
    gaussian_sigma2,
    per_round_epsilon,
    round_sigma2,
    sensitivity,
)
from .rng import substream

INIT_MODES = ("kmeanspp", "kmeanspp-pooled", "gaussian")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    N: int
    K: int
    R: int
    params: ProblemParams
    Q1: int = 10
    Q_hat: int = 10
    b: int | None = 50  # None: every local step uses all local samples
    seed: int = 0
    dp: DpConfig = field(default_factory=DpConfig.off)
    policy: StepPolicy = field(default_factory=StepPolicy)
    init: str = "kmeanspp"
    bootstrap: int | None = None  # samples visible to the server for seeding; default 10 k
    workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if not 1 <= self.K <= self.N:
            raise ConfigError(f"need 1 <= K <= N, got K={self.K}, N={self.N}")
        if self.Q1 < 1:
            raise ConfigError(f"Q1 must be >= 1, got {self.Q1}")
        if self.R < 0 or self.Q_hat < 0:
            raise ConfigError("R and Q_hat must be >= 0")
        if self.b is not None and self.b < 1:
            raise ConfigError(f"minibatch size must be >= 1, got {self.b}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def p(self) -> float:
        return self.K / self.N

    @property
    def bootstrap_size(self) -> int:
        return self.bootstrap if self.bootstrap is not None else 10 * self.params.k


@dataclass
class Client:
    client_id: int
    X: np.ndarray
    indices: np.ndarray

    @property
    def n_i(self) -> int:
        return self.X.shape[1]


def make_clients(data: DataMatrix, shards: Sequence[ClientShard]) -> list[Client]:
    clients = []
    for i, shard in enumerate(shards):
        if shard.client_id != i:
            raise ConfigError(f"shard {i} carries client_id {shard.client_id}")
        idx = np.asarray(shard.sample_indices, dtype=np.intp)
        if idx.size == 0:
            raise ConfigError(f"client {i} owns no samples")
        clients.append(Client(i, np.ascontiguousarray(data.values[:, idx]), idx))
    return clients


def q2_schedule(Q_hat: int, t: int) -> int:
    """Number of W-steps in round ``t``: ``floor(Q_hat / t) + 1``."""
    if t < 1:
        raise ValueError(f"rounds are numbered from 1, got t={t}")
    if Q_hat < 0:
        raise ValueError(f"Q_hat must be >= 0, got {Q_hat}")
    return Q_hat // t + 1


def sampling_ratio(Q2_t: int, b: int | None, n_i: int) -> float:
    return 1.0 if b is None else Q2_t * b / n_i


@dataclass(frozen=True)
class PrivacyPlan:
    eps_round: float
    q_agg: float
    p: float

    @classmethod
    def disabled(cls) -> "PrivacyPlan":
        return cls(math.inf, math.nan, math.nan)


def plan_privacy(cfg: FedConfig, sizes: Sequence[int]) -> PrivacyPlan:
    """Resolve the per-round epsilon for ``cfg`` given every client's sample count."""
    if not cfg.dp.enabled:
        return PrivacyPlan.disabled()
    if cfg.b is None:
        raise PrivacyError("full-batch local steps sample every point (q = 1); the accountant needs q < 1")
    n_min = min(sizes)
    # q^2/sqrt(1-q) grows with q, so the smallest client dominates each round
    q_agg = aggregate_ratio(sampling_ratio(q2_schedule(cfg.Q_hat, t), cfg.b, n_min) for t in range(1, cfg.R + 1))
    eps = per_round_epsilon(cfg.dp.eps_total, cfg.R, cfg.p, q_agg, cfg.dp.c0)
    return PrivacyPlan(eps, q_agg, cfg.p)


def check_feasible(cfg: FedConfig, sizes: Sequence[int]) -> PrivacyPlan:
    if len(sizes) != cfg.N:
        raise ConfigError(f"config has N={cfg.N} clients but {len(sizes)} shards were given")
    if cfg.b is not None and cfg.R >= 1:
        need = q2_schedule(cfg.Q_hat, 1) * cfg.b
        small = min(sizes)
        if need > small:
            raise ConfigError(
                f"round 1 draws Q2*b = {need} samples without replacement but the smallest client "
                f"has {small}; lower b or Q_hat"
            )
    return plan_privacy(cfg, sizes)


def h_step(W, params: ProblemParams, policy: StepPolicy) -> float:
    """Inverse step size ``gamma`` for the H update at broadcast centroids ``W``."""
    return policy.gamma_scale * model.lipschitz_H(W, params, policy)


def local_update_H(W, H, X, Q1: int, policy: StepPolicy, params: ProblemParams, gamma=None) -> np.ndarray:
    """``Q1`` projected-gradient steps on ``H`` with ``W`` held fixed."""
    if gamma is None:
        gamma = h_step(W, params, policy)
    for _ in range(Q1):
        H = model.project_nonneg(H - model.grad_H(W, H, X, params) / gamma)
    return H


def draw_batches(n_i: int, Q2_t: int, b: int | None, rng: np.random.Generator) -> list:
    """``Q2_t`` disjoint minibatches of size ``b`` drawn without replacement."""
    if b is None:
        return [None] * Q2_t
    if Q2_t * b > n_i:
        raise ConfigError(f"cannot draw {Q2_t} x {b} distinct samples from {n_i}")
    return list(rng.choice(n_i, size=Q2_t * b, replace=False).reshape(Q2_t, b))


def local_update_W(W, H, X, Q2_t: int, b, eta_t: float, dp: DpConfig, rng, params: ProblemParams) -> np.ndarray:
    """``Q2_t`` SGD steps on the local centroid copy with ``H`` frozen.

    Iterates are formed as ``W - (g_1 + ... + g_r) / eta`` so the upload is
    exactly the broadcast minus the accumulated gradient sum.
    """
    clip = math.isfinite(dp.clip_G)
    acc = np.zeros_like(W)
    W_r = W
    for batch in draw_batches(X.shape[1], Q2_t, b, rng):
        g = model.grad_W_stochastic(W_r, H, X, batch, params)
        if clip:
            g = clip_gradient(g, dp.clip_G)
        acc = acc + g
        W_r = W - acc / eta_t
    return W_r


@dataclass
class RoundMetrics:
    round: int
    objective: float
    gap_H: float
    gap_W: float
    accuracy: float
    zeta: float
    epsilon_round: float
    sigma2_max: float
    wall_ms: float


CSV_COLUMNS = [f.name for f in fields(RoundMetrics)]


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass
class MetricsLog:
    rows: list[RoundMetrics] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    W: np.ndarray | None = None
    H: list | None = None

    def append(self, row: RoundMetrics):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def final(self) -> RoundMetrics:
        return self.rows[-1]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        with open(path, newline="") as fh:
            rows = [
                RoundMetrics(int(r["round"]), *(float(r[c]) for c in CSV_COLUMNS[1:]))
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


@dataclass
class RoundInfo:
    """Diagnostics of the last round (not part of the protocol state)."""

    sampled: list[int]
    Q2: int
    eta: float
    gamma: float
    noise: list[RoundNoiseSpec]
    W_clean: np.ndarray
    uploads: dict


@dataclass
class FedState:
    W: np.ndarray
    H: list[np.ndarray]
    t: int = 0
    gamma: float = math.nan
    last: RoundInfo | None = None


def sample_clients(N: int, K: int, rng: np.random.Generator) -> list[int]:
    """Uniform K-subset of ``range(N)`` without replacement, sorted."""
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    return sorted(int(i) for i in rng.choice(N, size=K, replace=False))


def _map(cfg: FedConfig, fn, items):
    if cfg.workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, items))


def run_round(state: FedState, t: int, cfg: FedConfig, clients: Sequence[Client], plan: PrivacyPlan) -> FedState:
    """Execute round ``t`` and return the next state (the input is not modified)."""
    params, policy, dp = cfg.params, cfg.policy, cfg.dp
    W_t = state.W
    sampled = sample_clients(cfg.N, cfg.K, substream(cfg.seed, "clients", t))

    gamma = h_step(W_t, params, policy)
    H_new = _map(cfg, lambda c: local_update_H(W_t, state.H[c.client_id], c.X, cfg.Q1, policy, params, gamma), clients)

    # no client sees every H_i; the sampled clients' local estimates are pooled by max
    eta = policy.eta_scale * max(model.lipschitz_W(H_new[i], params, policy) for i in sampled)
    Q2 = q2_schedule(cfg.Q_hat, t)

    def w_update(c: Client):
        rng = substream(cfg.seed, "batches", t, c.client_id)
        return local_update_W(W_t, H_new[c.client_id], c.X, Q2, cfg.b, eta, dp, rng, params)

    W_local = _map(cfg, w_update, clients)

    noise_specs = []
    uploads = {}
    for i in sampled:
        upload = W_local[i]
        if dp.enabled:
            q = sampling_ratio(Q2, cfg.b, clients[i].n_i)
            sigma2 = round_sigma2(dp.clip_G, Q2, q, eta, plan.eps_round, dp.delta)
            noise_specs.append(RoundNoiseSpec(i, t, q, sigma2, sensitivity(dp.clip_G, Q2, eta)))
            upload = upload + gaussian_noise(*upload.shape, sigma2, substream(cfg.seed, "noise", t, i))
        uploads[i] = upload
    W_next = sum(uploads[i] for i in sampled) / cfg.K
    W_clean = sum(W_local[i] for i in sampled) / cfg.K
    info = RoundInfo(sampled, Q2, eta, gamma, noise_specs, W_clean, uploads)
    return FedState(W_next, H_new, t, gamma, info)


def _assignments(H: Sequence[np.ndarray], clients: Sequence[Client], n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.intp)
    for c, H_i in zip(clients, H):
        out[c.indices] = model.extract_assignments(H_i)
    return out


def evaluate(state: FedState, cfg: FedConfig, clients, labels, plan: PrivacyPlan, wall_ms: float = 0.0) -> RoundMetrics:
    params = cfg.params
    Xs = [c.X for c in clients]
    gamma = state.gamma if math.isfinite(state.gamma) else h_step(state.W, params, cfg.policy)
    accuracy = math.nan
    if labels is not None:
        n = sum(c.n_i for c in clients)
        accuracy = model.clustering_accuracy(_assignments(state.H, clients, n), labels, params.k)
    sigma2_max = 0.0
    if state.last is not None and state.last.noise:
        sigma2_max = max(s.sigma2 for s in state.last.noise)
    return RoundMetrics(
        round=state.t,
        objective=model.objective_global(state.W, state.H, Xs, params),
        gap_H=model.gap_H(state.W, state.H, Xs, [gamma] * len(Xs), params),
        gap_W=model.gap_W(state.W, state.H, Xs, params),
        accuracy=accuracy,
        zeta=model.measure_noniid(state.W, state.H, Xs, params),
        epsilon_round=plan.eps_round,
        sigma2_max=sigma2_max,
        wall_ms=wall_ms if cfg.record_wall_time else 0.0,
    )


def initial_centroids(cfg: FedConfig, clients: Sequence[Client], m: int) -> np.ndarray:
    k = cfg.params.k
    rng = substream(cfg.seed, "init", 0)
    if cfg.init == "gaussian":
        return rng.standard_normal((m, k))
    if cfg.init == "kmeanspp":
        pool = clients[0].X[:, : cfg.bootstrap_size]
    else:
        per = -(-cfg.bootstrap_size // len(clients))
        pool = np.concatenate([c.X[:, :per] for c in clients], axis=1)
    if pool.shape[1] < k:
        raise ConfigError(f"bootstrap holds {pool.shape[1]} samples, fewer than k={k}")
    return pool[:, model.kmeanspp_seeds(pool, k, rng)].copy()


def initial_state(cfg: FedConfig, clients: Sequence[Client], m: int) -> FedState:
    W0 = initial_centroids(cfg, clients, m)
    k = cfg.params.k
    gamma = h_step(W0, cfg.params, cfg.policy)
    H0 = [local_update_H(W0, np.full((k, c.n_i), 1.0 / k), c.X, 1, cfg.policy, cfg.params, gamma) for c in clients]
    return FedState(W0, H0, 0, gamma)


def run_experiment(cfg: FedConfig, data: DataMatrix, shards: Sequence[ClientShard]) -> MetricsLog:
    """Initialize, run ``cfg.R`` rounds and return per-round metrics (round 0 = initial point)."""
    clients = make_clients(data, shards)
    plan = check_feasible(cfg, [c.n_i for c in clients])
    labels = data.labels
    state = initial_state(cfg, clients, data.m)
    log = MetricsLog(meta={"eps_round": plan.eps_round, "q_agg": plan.q_agg, "p": cfg.p})
    log.append(evaluate(state, cfg, clients, labels, plan))
    for t in range(1, cfg.R + 1):
        start = time.perf_counter()
        state = run_round(state, t, cfg, clients, plan)
        log.append(evaluate(state, cfg, clients, labels, plan, 1000.0 * (time.perf_counter() - start)))
    log.W, log.H = state.W, state.H
    return log


def baseline_fed_kmeans(data: DataMatrix, shards: Sequence[ClientShard], cfg: FedConfig, local_iters: int = 100) -> MetricsLog:
    """Federated k-means stand-in: local Lloyd runs, server clusters the uploaded centroids.

    Round 1 clients seed with k-means++; later rounds start from the global
    centroids.  With DP on, each upload gets Gaussian noise for sensitivity
    ``2 G / eta`` (``eta`` from the local binary indicator under the same step
    policy) at the per-round epsilon of the matching DP-FedC run.  This
    calibration is a convention and carries no formal guarantee.
    """
    clients = make_clients(data, shards)
    k = cfg.params.k
    if k > min(c.n_i for c in clients):
        raise ConfigError(f"k={k} exceeds the smallest client's {min(c.n_i for c in clients)} samples")
    plan = check_feasible(cfg, [c.n_i for c in clients])
    dp = cfg.dp
    n = data.n
    Xs = [c.X for c in clients]
    W = initial_centroids(cfg, clients, data.m)
    log = MetricsLog(meta={"eps_round": plan.eps_round, "q_agg": plan.q_agg, "certified": False})

    def metrics(t, W, sigma2_max, wall_ms):
        Hs = [model.indicator(np.argmin(model.sq_distances(X, W), axis=1), k) for X in Xs]
        acc = math.nan
        if data.labels is not None:
            acc = model.clustering_accuracy(_assignments(Hs, clients, n), data.labels, k)
        obj = model.objective_global(W, Hs, Xs, cfg.params)
        return RoundMetrics(t, obj, math.nan, math.nan, acc, math.nan, plan.eps_round, sigma2_max,
                            wall_ms if cfg.record_wall_time else 0.0)

    log.append(metrics(0, W, 0.0, 0.0))
    for t in range(1, cfg.R + 1):
        start = time.perf_counter()
        sampled = sample_clients(cfg.N, cfg.K, substream(cfg.seed, "clients", t))
        uploads = []
        sigma2_max = 0.0
        for i in sampled:
            seed_i = int(substream(cfg.seed, "kmeans", t, i).integers(2**31))
            init = "kmeanspp" if t == 1 else W
            local, _ = model.kmeans_centralized(Xs[i], k, max_iters=local_iters, seed=seed_i, init=init)
            C = local.W
            if dp.enabled:
                eta = cfg.policy.eta_scale * model.lipschitz_W(local.H, cfg.params, cfg.policy)
                sigma2 = gaussian_sigma2(2.0 * dp.clip_G / eta, plan.eps_round, dp.delta)
                sigma2_max = max(sigma2_max, sigma2)
                C = C + gaussian_noise(*C.shape, sigma2, substream(cfg.seed, "noise", t, i))
            uploads.append(C)
        pooled = np.concatenate(uploads, axis=1)
        seed_s = int(substream(cfg.seed, "kmeans", t, cfg.N).integers(2**31))
        global_fit, _ = model.kmeans_centralized(pooled, k, max_iters=local_iters, seed=seed_s,
                                                 init="kmeanspp" if t == 1 else W)
        W = global_fit.W
        log.append(metrics(t, W, sigma2_max, 1000.0 * (time.perf_counter() - start)))
    log.W = W
    return log
