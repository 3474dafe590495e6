import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsmle.bounds import (
    BoundError,
    bracket_from_matrices,
    bracket_process_eval,
    bracket_score,
    concentration_radius,
    concentration_radius_varying,
    confidence_critical,
    entropy_q,
    err_bound,
    lower_maximizer,
    quad_tail,
    quad_tail_prob,
    spread_bound,
    spread_bound_prob,
    spread_empirical,
    tau_alpha,
    upper_maximizer,
)
from fsmle.geometry import Spd, spectral_stats

from oracles import err_level, q_of_p, spd_inv_sqrt, z_level

I2 = Spd(np.eye(2))
TAIL10 = spectral_stats(I2, I2, g=10.0)


def test_entropy_q():
    assert entropy_q(1) == 2.7 and entropy_q(2) == 4.0 and entropy_q(5) == 10.0


def test_err_bound_spot_values():
    assert err_bound(1.3, 1, 10.0) == pytest.approx(9.0, abs=1e-12)
    assert err_bound(97.3, 1, 10.0) == pytest.approx(901.0, abs=1e-9)
    assert err_bound(0.0, 1, 3.0, Q=0.0) == 1.0
    with pytest.raises(BoundError):
        err_bound(1.0, 2, 2.9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 200.0), st.integers(1, 10), st.floats(3.0, 50.0))
def test_err_bound_oracle(x, p, g):
    assert err_bound(x, p, g) == pytest.approx(err_level(x, q_of_p(p), g), rel=1e-12)


def test_quad_tail_spot_values():
    assert quad_tail(0.1, TAIL10) == pytest.approx(2 + 4 * math.sqrt(0.1), abs=1e-12)
    assert quad_tail(1.0, TAIL10) == pytest.approx(8.0, abs=1e-12)
    # exact constants give 228.0321; rounding xc to 72.90 gives 228.04
    assert quad_tail(73.90, TAIL10) == pytest.approx(228.0321, abs=1e-4)
    assert quad_tail(73.90, TAIL10) == pytest.approx(228.04, abs=1e-2)


def test_quad_tail_probabilities():
    assert quad_tail_prob(1.0, TAIL10) == pytest.approx(2 * math.exp(-1) + 8.4 * math.exp(-TAIL10.xc))
    assert quad_tail_prob(80.0, TAIL10) == pytest.approx(8.4 * math.exp(-80.0))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 150.0), st.integers(0, 10**6), st.floats(6.0, 40.0))
def test_quad_tail_oracle(x, seed, g):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    B = A @ A.T / 3 + 0.2 * np.eye(3)
    tail = spectral_stats(Spd(np.eye(3)), Spd(B), g=g)
    assert quad_tail(x, tail) == pytest.approx(z_level(x, B, g), rel=1e-12)


def test_quad_tail_monotone_within_branches():
    xc = TAIL10.xc
    for lo, hi in ((1e-3, TAIL10.vA / 18), (TAIL10.vA / 18 + 1e-9, xc), (xc + 1e-9, 200.0)):
        z = [quad_tail(x, TAIL10) for x in np.linspace(lo, hi, 200)]
        assert np.all(np.diff(z) > 0)
    # the outer branch restarts at yc^2, below the middle branch at xc
    assert quad_tail(xc + 1e-9, TAIL10) == pytest.approx(TAIL10.yc**2, rel=1e-6)
    assert quad_tail(xc, TAIL10) > quad_tail(xc + 1e-9, TAIL10)


def test_tau_alpha_spot_values():
    assert tau_alpha(0, 0, 7.0) == (0.0, 0.0)
    t, a = tau_alpha(0.1, 0.05, 1.0)
    assert (t, a) == pytest.approx((0.15, 0.30691), abs=5e-6)
    t, a = tau_alpha(0.1, 0.05, 2.0)
    assert (t, a) == pytest.approx((0.3, 0.65934), abs=5e-6)
    with pytest.raises(BoundError):
        tau_alpha(0.9, 0.2, 1.0)


def test_spread_bound_spot_values():
    assert spread_bound(0, 5.0, 0, 1.0, 8.0) == 0.0
    assert spread_bound(0.01, 9.0, 0.1, 1.0, 8.0) == pytest.approx(0.98)
    assert spread_bound(0, 9.0, 0.3, 2.0, 8.0) == pytest.approx(0.3 * 2 * 8)
    assert spread_bound_prob(2.0, 72.9) == pytest.approx(1 - 4 * math.exp(-2) - 8.4 * math.exp(-72.9))


def test_bracket_spot_values():
    br = bracket_from_matrices(np.eye(2), np.eye(2), 0.0, 0.0)
    assert np.allclose(br.Db2, np.eye(2)) and np.allclose(br.Ds2, np.eye(2))
    br = bracket_from_matrices(np.eye(2), np.eye(2), 0.1, 0.05)
    assert np.allclose(br.Db2, 0.85 * np.eye(2)) and np.allclose(br.Ds2, 1.15 * np.eye(2))
    assert not bracket_from_matrices(np.eye(2), np.eye(2), 1.2, 0.0).valid
    with pytest.raises(BoundError):
        bracket_from_matrices(np.eye(2), np.eye(2), 1.2, 0.0).db


def test_bracket_score_scalar():
    br = bracket_from_matrices(np.eye(1), np.eye(1), 0.1, 0.0)
    xb, xs = bracket_score(br, [2.0])
    assert xb[0] == pytest.approx(2 / math.sqrt(0.9), abs=1e-12)
    assert xb[0] == pytest.approx(2.1082, abs=5e-5)
    assert xs[0] == pytest.approx(2 / math.sqrt(1.1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 0.5), st.floats(0.0, 0.2))
def test_bracket_score_ordering_and_process(seed, delta, omega):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    D2 = A @ A.T + 2 * np.eye(3)
    V2 = 0.5 * D2
    br = bracket_from_matrices(D2, V2, delta, omega)
    g = rng.standard_normal(3)
    xb, xs = bracket_score(br, g)
    xi = spd_inv_sqrt(D2) @ g
    assert xb @ xb >= xi @ xi - 1e-10 >= xs @ xs - 2e-10
    ts = rng.standard_normal(3)
    th = ts + rng.standard_normal((20, 3))
    lb, ls = bracket_process_eval(br, g, th, ts)
    assert np.all(lb >= ls - 1e-12)
    assert bracket_process_eval(br, g, ts, ts) == (0.0, 0.0)
    up = upper_maximizer(br, g, ts)
    assert bracket_process_eval(br, g, up, ts)[0] == pytest.approx(0.5 * xb @ xb, rel=1e-9)
    assert np.all(lb <= 0.5 * xb @ xb + 1e-9)
    lo = lower_maximizer(br, g, ts)
    assert bracket_process_eval(br, g, lo, ts)[1] == pytest.approx(0.5 * xs @ xs, rel=1e-9)


def test_spread_empirical_glm_identity():
    delta = 0.2
    D2 = np.diag([3.0, 5.0])
    br = bracket_from_matrices(D2, D2, delta, 0.0)
    g = np.array([1.0, -2.0])
    xb, xs = bracket_score(br, g)
    xi = spd_inv_sqrt(D2) @ g
    rep = spread_empirical(0.0, 0.0, xb, xs)
    assert rep.spread == pytest.approx(delta / (1 - delta**2) * xi @ xi, rel=1e-12)
    br0 = bracket_from_matrices(D2, D2, 0.0, 0.0)
    xb, xs = bracket_score(br0, g)
    assert spread_empirical(0.3, 0.4, xb, xs).spread == pytest.approx(0.7)


def test_confidence_critical():
    assert confidence_critical(2.0, TAIL10) == pytest.approx(14.0)
    assert confidence_critical(2.0, TAIL10, 0.5) == pytest.approx(14.5)
    assert confidence_critical(3.0, TAIL10) > confidence_critical(2.0, TAIL10)


def test_concentration_radius_examples():
    r0, ok = concentration_radius(2.0, 2, 1.0, 0.5, 100.0)
    assert r0 == pytest.approx(12 * math.sqrt(6), abs=1e-12) and ok
    r1, ok1 = concentration_radius(2.0, 2, 1.0, 1.0, 100.0)
    assert r1 == pytest.approx(14.697, abs=5e-4) and ok1
    res = concentration_radius(2.0, 2, 1.0, 1.0, 0.1)
    assert not res.feasible and "1 + sqrt" in res.reason
    assert "e^-x" in res.to_dict()["guarantee"]


def test_concentration_varying_constant_b():
    res = concentration_radius_varying(2.0, 2, 1.0, 1.0, 100.0)
    assert res.feasible
    assert res.r0 == pytest.approx(concentration_radius(2.0, 2, 1.0, 1.0, 100.0).r0, rel=1e-9)


def test_concentration_varying_capped_drift_terminates():
    res = concentration_radius_varying(2.0, 2, 1.0, lambda r: min(1.0, 10.0 / r), 100.0)
    # r b(r) <= 10 < 6 sqrt(6): no admissible radius, and the search ends
    assert not res.feasible and "r b(r)" in res.reason
    res = concentration_radius_varying(2.0, 2, 1.0, lambda r: min(1.0, 40.0 / r), 1e3)
    assert res.feasible and len(res.schedule) >= 1
    ks = [s["k"] for s in res.schedule]
    assert ks == list(range(len(ks)))


def test_concentration_varying_rejects_decreasing():
    res = concentration_radius_varying(2.0, 2, 1.0, lambda r: 1.0 / r**2, 100.0)
    assert not res.feasible and "precondition" in res.reason
