import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfedc import model
from dpfedc.data import ClientShard, DataMatrix, generate_blobs, partition_iid
from dpfedc.federation import (
    ConfigError,
    FedConfig,
    MetricsLog,
    RoundMetrics,
    baseline_fed_kmeans,
    check_feasible,
    draw_batches,
    initial_centroids,
    initial_state,
    local_update_H,
    local_update_W,
    make_clients,
    plan_privacy,
    q2_schedule,
    run_experiment,
    run_round,
    sample_clients,
)
from dpfedc.model import ProblemParams, StepPolicy
from dpfedc.privacy import DpConfig, PrivacyError
from dpfedc.rng import substream

OFF = DpConfig.off()


def blobs_setup(n=400, N=4, seed=0, k=4, m=6, spread=0.5):
    d = generate_blobs(m, k, n, 10.0, spread, seed)
    shards = partition_iid(n, N, seed)
    f = float(np.vdot(d.values, d.values)) / N
    return d, shards, ProblemParams(k, rho=1e-7 * f, mu_h=1e-10 * f)


# ---- schedule and sampling ----------------------------------------------------------

def test_q2_schedule_examples():
    assert q2_schedule(10, 1) == 11
    assert q2_schedule(10, 3) == 4
    assert all(q2_schedule(10, t) == 1 for t in range(11, 30))
    with pytest.raises(ValueError):
        q2_schedule(10, 0)


def test_sample_clients_full_and_deterministic():
    assert sample_clients(7, 7, substream(0, "clients", 1)) == list(range(7))
    a = sample_clients(50, 10, substream(3, "clients", 2))
    b = sample_clients(50, 10, substream(3, "clients", 2))
    assert a == b and len(set(a)) == 10
    with pytest.raises(ValueError):
        sample_clients(3, 4, substream(0, "clients", 1))


def test_sample_clients_uniform_frequency():
    hits = sum(sample_clients(2, 1, substream(11, "clients", t))[0] for t in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


# ---- local H update --------------------------------------------------------------------

def test_local_update_H_identity_cases():
    X = np.array([[1.0, 2.0], [0.0, 1.0]])
    W = np.eye(2)
    H = X.copy()  # exact fit, no regularisers: gradient is zero
    p = ProblemParams(2)
    assert np.array_equal(local_update_H(W, H, X, 5, StepPolicy(), p), H)
    H0 = np.ones((2, 2))
    assert local_update_H(W, H0, X, 0, StepPolicy(), p) is H0


def test_local_update_H_one_step_matches_hand_computation():
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    X = np.array([[1.0, 0.0], [3.0, 1.0]])
    H = np.array([[1.0, 0.5], [1.0, 2.0]])
    p = ProblemParams(2, rho=1.0)
    # W'W = diag(4, 1) -> L_H = 2*4 + rho*(k-1) = 9; gamma = 0.5 * 9
    gamma = 4.5
    grad = 2 * W.T @ (W @ H - X) + 1.0 * (H.sum(axis=0) - H)
    expected = np.maximum(H - grad / gamma, 0)
    out = local_update_H(W, H, X, 1, StepPolicy(power_iters=200), p)
    assert np.allclose(out, expected, rtol=1e-12)
    assert np.any(expected == 0)  # the projection is active in this instance


@given(st.integers(0, 10_000), st.floats(0.5, 4.0))
@settings(max_examples=40, deadline=None)
def test_local_update_H_descends_and_stays_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((4, 9))
    W = rng.standard_normal((4, 3))
    H = rng.uniform(0, 1, (3, 9))
    p = ProblemParams(3, rho=rng.uniform(0, 1), mu_h=rng.uniform(0, 0.1))
    pol = StepPolicy(gamma_scale=scale)
    prev = model.objective_local(W, H, X, p)
    for _ in range(10):
        H = local_update_H(W, H, X, 1, pol, p)
        assert np.all(H >= 0)
        cur = model.objective_local(W, H, X, p)
        assert cur <= prev + 1e-8 * max(1.0, abs(prev))
        prev = cur


# ---- local W update ----------------------------------------------------------------------

def test_draw_batches_distinct_exhaustive():
    # n_i = 4, Q2 = 2, b = 2 uses every sample exactly once; all 4! orders reachable
    seen = set()
    for s in range(400):
        batches = draw_batches(4, 2, 2, np.random.default_rng(s))
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == [0, 1, 2, 3]
        seen.add(tuple(flat.tolist()))
    assert len(seen) == 24
    with pytest.raises(ConfigError):
        draw_batches(4, 3, 2, np.random.default_rng(0))
    assert draw_batches(4, 3, None, None) == [None, None, None]


def test_local_update_W_zero_gradient_unchanged():
    X = np.array([[1.0, 2.0, 3.0]])
    W = np.array([[1.0]])
    H = X.copy()
    out = local_update_W(W, H, X, 1, 3, 7.0, DpConfig(), np.random.default_rng(0), ProblemParams(1))
    assert np.array_equal(out, W)


def test_local_update_W_single_full_batch_step():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((3, 5))
    W = rng.standard_normal((3, 2))
    H = rng.uniform(0, 1, (2, 5))
    p = ProblemParams(2, mu_w=0.1)
    eta = 13.0
    expected = W - (2 * (W @ H - X) @ H.T + 0.1 * W) / eta
    out = local_update_W(W, H, X, 1, None, eta, OFF, None, p)
    assert np.allclose(out, expected, rtol=1e-13)
    # b = n_i draws every column (in some order): same step
    out_b = local_update_W(W, H, X, 1, 5, eta, OFF, np.random.default_rng(0), p)
    assert np.allclose(out_b, expected, rtol=1e-12)


def test_local_update_W_telescoping_identity_exact():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, 40))
    W = rng.standard_normal((3, 2))
    H = rng.uniform(0, 1, (2, 40))
    p = ProblemParams(2)
    eta = 50.0
    out = local_update_W(W, H, X, 4, 6, eta, OFF, substream(1, "batches", 1, 0), p)
    # independent replay: same batches, iterate kept explicitly
    batches = draw_batches(40, 4, 6, substream(1, "batches", 1, 0))
    total = np.zeros_like(W)
    W_r = W
    for B in batches:
        total = total + model.grad_W_stochastic(W_r, H, X, B, p)
        W_r = W - total / eta
    assert np.array_equal(out, W - total / eta)


def test_local_update_W_clips_each_step():
    X = 100 * np.ones((2, 4))
    W = np.zeros((2, 1))
    H = np.ones((1, 4))
    dp = DpConfig(clip_G=1.0)
    out = local_update_W(W, H, X, 3, 1, 2.0, dp, np.random.default_rng(0), ProblemParams(1))
    # every step moves by exactly G / eta in Frobenius norm along the same direction
    assert np.linalg.norm(out) == pytest.approx(3 * 1.0 / 2.0)


def test_local_update_W_infeasible_draw():
    X = np.zeros((1, 5))
    with pytest.raises(ConfigError):
        local_update_W(np.zeros((1, 1)), np.ones((1, 5)), X, 3, 2, 1.0, OFF, np.random.default_rng(0), ProblemParams(1))


# ---- configuration ----------------------------------------------------------------------

def test_fed_config_validation():
    p = ProblemParams(2)
    with pytest.raises(ConfigError):
        FedConfig(N=3, K=4, R=1, params=p)
    with pytest.raises(ConfigError):
        FedConfig(N=3, K=1, R=-1, params=p)
    with pytest.raises(ConfigError):
        FedConfig(N=3, K=1, R=1, params=p, b=0)
    with pytest.raises(ConfigError):
        FedConfig(N=3, K=1, R=1, params=p, init="nope")
    assert FedConfig(N=4, K=1, R=1, params=p).p == 0.25


def test_check_feasible_errors():
    p = ProblemParams(2)
    with pytest.raises(ConfigError, match="smallest client"):
        check_feasible(FedConfig(N=2, K=2, R=5, params=p, b=10, Q_hat=10), [100, 100])
    with pytest.raises(ConfigError, match="N=3"):
        check_feasible(FedConfig(N=3, K=2, R=5, params=p, b=1), [100, 100])
    dp = DpConfig(eps_total=1000.0)
    with pytest.raises(PrivacyError, match="> 1"):
        check_feasible(FedConfig(N=2, K=2, R=5, params=p, b=5, dp=dp), [100, 100])
    with pytest.raises(PrivacyError, match="full-batch"):
        check_feasible(FedConfig(N=2, K=2, R=5, params=p, b=None, dp=dp), [100, 100])
    assert math.isinf(check_feasible(FedConfig(N=2, K=2, R=5, params=p, b=None), [3, 3]).eps_round)


def test_plan_privacy_uses_smallest_client():
    p = ProblemParams(2)
    cfg = FedConfig(N=2, K=1, R=10, params=p, b=5, Q_hat=3, dp=DpConfig(eps_total=0.2))
    plan = plan_privacy(cfg, [60, 200])
    q1 = 4 * 5 / 60
    assert plan.q_agg == pytest.approx(q1 * q1 / math.sqrt(1 - q1))
    assert plan.eps_round == pytest.approx(0.2 / (plan.q_agg * math.sqrt(0.5 * 10)))


# ---- rounds ------------------------------------------------------------------------------

def test_run_round_pure_and_nonnegative():
    d, shards, p = blobs_setup()
    cfg = FedConfig(N=4, K=2, R=3, params=p, b=5, seed=1)
    clients = make_clients(d, shards)
    plan = check_feasible(cfg, [c.n_i for c in clients])
    s0 = initial_state(cfg, clients, d.m)
    W0 = s0.W.copy()
    s1 = run_round(s0, 1, cfg, clients, plan)
    assert np.array_equal(s0.W, W0)
    assert s1.t == 1 and len(s1.last.sampled) == 2
    assert all(np.all(H >= 0) for H in s1.H)
    # the aggregate is the mean of the sampled uploads
    assert np.allclose(s1.W, sum(s1.last.uploads.values()) / 2)


def test_noise_variance_of_aggregate():
    # per-entry variance of (noisy - clean aggregate) is sigma2 / K
    d, shards, p = blobs_setup(n=400, N=4)
    clients = make_clients(d, shards)
    z = []
    for seed in range(200):
        cfg = FedConfig(N=4, K=2, R=1, params=p, b=50, Q_hat=0, seed=seed, dp=DpConfig(eps_total=0.2))
        plan = check_feasible(cfg, [c.n_i for c in clients])
        s = run_round(initial_state(cfg, clients, d.m), 1, cfg, clients, plan)
        sigma2 = {spec.sigma2 for spec in s.last.noise}
        assert len(sigma2) == 1  # equal client sizes share one calibration
        z.append((s.W - s.last.W_clean).ravel() / math.sqrt(sigma2.pop() / cfg.K))
    z = np.concatenate(z)
    assert z.var() == pytest.approx(1.0, rel=0.10)


def centralized_alternating(X, cfg, W0, H0):
    """Single-machine alternating schedule with the engine's step rules."""
    p, pol = cfg.params, cfg.policy
    W, H = W0, H0
    for t in range(1, cfg.R + 1):
        gamma = pol.gamma_scale * model.lipschitz_H(W, p, pol)
        for _ in range(cfg.Q1):
            H = np.maximum(H - model.grad_H(W, H, X, p) / gamma, 0.0)
        eta = pol.eta_scale * model.lipschitz_W(H, p, pol)
        Q2 = cfg.Q_hat // t + 1
        rng = substream(cfg.seed, "batches", t, 0)
        idx = rng.choice(X.shape[1], size=Q2 * cfg.b, replace=False).reshape(Q2, cfg.b)
        total = np.zeros_like(W)
        W_r = W
        for B in idx:
            total = total + model.grad_W_stochastic(W_r, H, X, B, p)
            W_r = W - total / eta
        W = W_r
    return W, H


def test_single_client_matches_centralized_oracle():
    d, _, p = blobs_setup(n=300, N=1)
    shards = [ClientShard(0, np.arange(300))]
    cfg = FedConfig(N=1, K=1, R=6, params=p, b=20, Q_hat=5, seed=3)
    log = run_experiment(cfg, d, shards)
    clients = make_clients(d, shards)
    s0 = initial_state(cfg, clients, d.m)
    W, H = centralized_alternating(clients[0].X, cfg, s0.W, s0.H[0])
    assert np.array_equal(log.W, W)
    assert np.array_equal(log.H[0], H)


def test_noiseless_full_participation_descent():
    d, shards, p = blobs_setup(n=400, N=4)
    cfg = FedConfig(N=4, K=4, R=25, params=p, b=None, seed=0)
    obj = run_experiment(cfg, d, shards).column("objective")
    assert np.all(np.diff(obj) <= 1e-8 * np.maximum(1.0, np.abs(obj[:-1])))


# ---- experiments -----------------------------------------------------------------------

def test_run_experiment_zero_rounds():
    d, shards, p = blobs_setup()
    log = run_experiment(FedConfig(N=4, K=2, R=0, params=p, b=5), d, shards)
    assert len(log.rows) == 1 and log.rows[0].round == 0


def test_run_experiment_deterministic_across_workers():
    d, shards, p = blobs_setup()
    dp = DpConfig(eps_total=0.5)
    base = FedConfig(N=4, K=2, R=5, params=p, b=5, seed=2, dp=dp)
    a = run_experiment(base, d, shards).to_csv()
    b = run_experiment(base, d, shards).to_csv()
    c = run_experiment(FedConfig(N=4, K=2, R=5, params=p, b=5, seed=2, dp=dp, workers=4), d, shards).to_csv()
    assert a == b == c
    other = run_experiment(FedConfig(N=4, K=2, R=5, params=p, b=5, seed=3, dp=dp), d, shards).to_csv()
    assert other != a


def test_metrics_csv_roundtrip(tmp_path):
    d, shards, p = blobs_setup()
    log = run_experiment(FedConfig(N=4, K=2, R=2, params=p, b=5), d, shards)
    text = log.to_csv(tmp_path / "m.csv")
    assert text.splitlines()[0] == "round,objective,gap_H,gap_W,accuracy,zeta,epsilon_round,sigma2_max,wall_ms"
    back = MetricsLog.from_csv(tmp_path / "m.csv")
    assert back.rows == log.rows
    assert isinstance(back.rows[0], RoundMetrics)


def test_wall_time_recorded_only_on_request():
    d, shards, p = blobs_setup()
    log = run_experiment(FedConfig(N=4, K=2, R=2, params=p, b=5), d, shards)
    assert np.all(log.column("wall_ms") == 0)
    log = run_experiment(FedConfig(N=4, K=2, R=2, params=p, b=5, record_wall_time=True), d, shards)
    assert np.all(log.column("wall_ms")[1:] > 0)


@pytest.mark.parametrize("mode", ["kmeanspp", "kmeanspp-pooled", "gaussian"])
def test_initial_centroids_modes(mode):
    d, shards, p = blobs_setup()
    cfg = FedConfig(N=4, K=2, R=1, params=p, init=mode, seed=4)
    clients = make_clients(d, shards)
    W0 = initial_centroids(cfg, clients, d.m)
    assert W0.shape == (d.m, p.k)
    assert np.array_equal(W0, initial_centroids(cfg, clients, d.m))
    if mode == "kmeanspp":
        boot = clients[0].X[:, : cfg.bootstrap_size]
        assert all(any(np.array_equal(W0[:, j], boot[:, i]) for i in range(boot.shape[1])) for j in range(p.k))


def test_make_clients_rejects_bad_shards():
    d = DataMatrix(np.zeros((2, 4)))
    with pytest.raises(ConfigError):
        make_clients(d, [ClientShard(1, np.arange(4))])
    with pytest.raises(ConfigError):
        make_clients(d, [ClientShard(0, np.array([], dtype=int))])


# ---- baseline ----------------------------------------------------------------------------

def test_baseline_single_client_is_centralized_kmeans():
    d, _, p = blobs_setup(n=200, N=1)
    shards = [ClientShard(0, np.arange(200))]
    log = baseline_fed_kmeans(d, shards, FedConfig(N=1, K=1, R=1, params=p, b=None))
    # the global centroids are a Lloyd fixed point of the full data
    labels = np.argmin(model.sq_distances(d.values, log.W), axis=1)
    means = np.stack([d.values[:, labels == c].mean(axis=1) for c in range(p.k)], axis=1)
    assert np.allclose(means, log.W)
    _, ref = model.kmeans_centralized(d.values, p.k, seed=0)
    assert log.final.accuracy == pytest.approx(model.clustering_accuracy(ref, d.labels, p.k), abs=0.05)


def test_baseline_iid_close_to_centralized():
    d, shards, p = blobs_setup(n=1000, N=10, spread=2.0)
    log = baseline_fed_kmeans(d, shards, FedConfig(N=10, K=5, R=5, params=p, b=None, seed=1))
    _, ref = model.kmeans_centralized(d.values, p.k, seed=1)
    assert abs(log.final.accuracy - model.clustering_accuracy(ref, d.labels, p.k)) <= 0.05


def test_baseline_dp_metadata():
    d, shards, p = blobs_setup()
    cfg = FedConfig(N=4, K=2, R=2, params=p, b=5, dp=DpConfig(eps_total=0.3))
    log = baseline_fed_kmeans(d, shards, cfg)
    assert log.meta["certified"] is False
    assert np.all(log.column("sigma2_max")[1:] > 0)
    assert len(log.rows) == 3
