import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfedc.privacy import (
    DpConfig,
    PrivacyError,
    aggregate_ratio,
    amplify,
    clip_gradient,
    gaussian_noise,
    gaussian_sigma2,
    per_round_epsilon,
    round_sigma2,
    sensitivity,
    total_loss,
)

getcontext().prec = 50


def D(x):
    return Decimal(repr(float(x)))


def test_sensitivity_examples():
    assert sensitivity(1.0, 1, 1.0) == 2.0
    assert sensitivity(10.0, 11, 5.0) == 44.0
    assert sensitivity(0.0, 3, 2.0) == 0.0


@pytest.mark.parametrize("args", [(-1.0, 1, 1.0), (1.0, 0, 1.0), (1.0, 1, 0.0)])
def test_sensitivity_rejects_bad_domain(args):
    with pytest.raises(PrivacyError):
        sensitivity(*args)


def test_amplify_examples():
    assert amplify(1.0, 1e-5, 0.1) == pytest.approx((0.2, 1e-6), rel=1e-15)
    assert amplify(0.5, 1e-4, 1.0) == (1.0, 1e-4)


@pytest.mark.parametrize("eps,q", [(1.5, 0.1), (0.0, 0.1), (0.5, 0.0), (0.5, 1.2)])
def test_amplify_rejects(eps, q):
    with pytest.raises(PrivacyError):
        amplify(eps, 1e-5, q)


def test_round_sigma2_hand_value():
    # G=1, Q2=1, q=0.1, eta=1, eps=1, delta=1e-4:
    # 32 * 0.01 * ln(1250) / 1 = 0.32 ln 1250
    expected = 0.32 * math.log(1250.0)
    assert round_sigma2(1.0, 1, 0.1, 1.0, 1.0, 1e-4) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(2.2818876, rel=1e-7)


def test_gaussian_sigma2_hand_value():
    # s = 0.08, eps = 1: 2 * 0.0064 * ln(1.25/1e-3) = 0.0128 ln 1250
    assert gaussian_sigma2(0.08, 1.0, 1e-3) == pytest.approx(0.0128 * math.log(1250), rel=1e-14)
    assert 0.0128 * math.log(1250) == pytest.approx(0.0912755, rel=1e-6)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(eps=1.5),
        dict(eps=0.0),
        dict(q=0.0),
        dict(q=1.5),
        dict(delta=0.0),
        dict(q=1e-5, delta=0.9),  # 1.25 q / delta <= 1
        dict(eta=0.0),
        dict(G=-1.0),
    ],
)
def test_round_sigma2_rejects(kwargs):
    args = dict(G=1.0, Q2=2, q=0.5, eta=1.0, eps=0.5, delta=1e-4)
    args.update(kwargs)
    with pytest.raises(PrivacyError):
        round_sigma2(args["G"], args["Q2"], args["q"], args["eta"], args["eps"], args["delta"])


@given(
    G=st.floats(0.01, 100),
    Q2=st.integers(1, 20),
    q=st.floats(0.01, 0.99),
    eta=st.floats(0.01, 1e4),
    eps=st.floats(0.01, 1.0),
    delta=st.floats(1e-8, 1e-2),
)
@settings(max_examples=200, deadline=None)
def test_round_sigma2_is_gaussian_mechanism_at_unamplified_budget(G, Q2, q, eta, eps, delta):
    # running the base mechanism at (eps/(2q), delta/q) amplifies to exactly (eps, delta)
    base_eps, base_delta = eps / (2 * q), delta / q
    if base_eps <= 1:
        assert amplify(base_eps, base_delta, q) == pytest.approx((eps, delta), rel=1e-12)
    direct = gaussian_sigma2(sensitivity(G, Q2, eta), base_eps, base_delta)
    assert round_sigma2(G, Q2, q, eta, eps, delta) == pytest.approx(direct, rel=1e-10)


@given(
    G=st.floats(0.01, 100),
    Q2=st.integers(1, 20),
    q=st.floats(0.01, 0.99),
    eta=st.floats(0.1, 100),
    eps=st.floats(0.01, 1.0),
)
@settings(max_examples=100, deadline=None)
def test_round_sigma2_monotone(G, Q2, q, eta, eps):
    delta = 1e-4
    base = round_sigma2(G, Q2, q, eta, eps, delta)
    assert round_sigma2(G * 2, Q2, q, eta, eps, delta) > base
    assert round_sigma2(G, Q2, q, eta * 2, eps, delta) < base
    assert round_sigma2(G, Q2, q, eta, eps / 2, delta) > base


def test_aggregate_ratio_is_worst_case():
    qs = [0.1, 0.5, 0.3]
    assert aggregate_ratio(qs) == pytest.approx(0.25 / math.sqrt(0.5), rel=1e-15)
    with pytest.raises(PrivacyError):
        aggregate_ratio([0.5, 1.0])
    with pytest.raises(PrivacyError):
        aggregate_ratio([])


def test_total_loss_roundtrip_and_errors():
    eps = per_round_epsilon(20.0, 100, 0.3, 3.95, 1.0)
    assert total_loss(eps, 100, 0.3, 3.95, 1.0) == pytest.approx(20.0, rel=1e-14)
    with pytest.raises(PrivacyError, match="> 1"):
        per_round_epsilon(20.0, 100, 0.3, 1.0, 1.0)
    with pytest.raises(PrivacyError):
        total_loss(1.0, 100, 0.0, 1.0, 1.0)
    with pytest.raises(PrivacyError):
        per_round_epsilon(1.0, 0, 0.3, 1.0, 1.0)


def test_total_loss_matches_decimal_evaluation():
    rng = np.random.default_rng(3)
    for _ in range(50):
        eps, p, q_agg, c0 = rng.uniform(0.01, 1.0, size=4)
        R = int(rng.integers(1, 500))
        exact = D(c0) * D(q_agg) * D(eps) * (D(p) * R).sqrt()
        assert total_loss(eps, R, p, q_agg, c0) == pytest.approx(float(exact), rel=1e-13)


def test_clip_gradient():
    M = np.array([[3.0, 4.0]])
    assert np.allclose(clip_gradient(M, 1.0), [[0.6, 0.8]])
    assert clip_gradient(M, 5.0) is M
    assert clip_gradient(M, 10.0) is M
    with pytest.raises(ValueError):
        clip_gradient(M, 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(1e-3, 1e3))
def test_clip_gradient_norm_bound(entries, G):
    M = np.array(entries)[None, :]
    out = clip_gradient(M, G)
    assert np.linalg.norm(out) <= G * (1 + 1e-12)
    if np.linalg.norm(M) > 0:
        # direction preserved
        assert np.allclose(out * np.linalg.norm(M), M * np.linalg.norm(out))


def test_gaussian_noise_moments():
    rng = np.random.default_rng(0)
    Z = gaussian_noise(200, 500, 2.5, rng)
    assert Z.shape == (200, 500)
    assert abs(Z.mean()) < 0.01
    assert Z.var() == pytest.approx(2.5, rel=0.01)
    assert np.array_equal(gaussian_noise(2, 3, 0.0, rng), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        gaussian_noise(2, 3, -1.0, rng)


def test_dp_config_validation_and_off():
    off = DpConfig.off()
    assert not off.enabled and math.isinf(off.clip_G) and math.isinf(off.eps_total)
    with pytest.raises(PrivacyError):
        DpConfig(eps_total=0.0)
    with pytest.raises(PrivacyError):
        DpConfig(delta=2.0)
    with pytest.raises(PrivacyError):
        DpConfig(clip_G=0.0)
