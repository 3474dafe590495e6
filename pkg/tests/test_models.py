import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fsmle.models import (
    DomainError,
    Law,
    ModelError,
    RankDeficientDesign,
    TruthSpec,
    build_glm,
    build_iid,
    build_lad,
    check_design,
    glm_cumulant,
    normal_design,
    orthonormal_design,
    sample_data,
)

from oracles import fd_grad, fd_hess


def test_cumulant_spot_values():
    assert glm_cumulant("logistic", 0.0) == pytest.approx((math.log(2), 0.5, 0.25), abs=1e-15)
    assert glm_cumulant("poisson", 0.0) == (1.0, 1.0, 1.0)
    assert glm_cumulant("gaussian", 3.0) == (4.5, 3.0, 1.0)


def test_cumulant_errors():
    with pytest.raises(DomainError):
        glm_cumulant("exponential", 0.0)
    with pytest.raises(ValueError):
        glm_cumulant("probit", 0.0)


@pytest.mark.parametrize("kind,w", [("logistic", 0.7), ("poisson", -0.3), ("exponential", 1.7),
                                    ("gaussian", -2.0), ("logistic", -30.0)])
def test_cumulant_derivatives_match_finite_differences(kind, w):
    d, d1, d2 = glm_cumulant(kind, w)
    h = 1e-5
    assert d1 == pytest.approx((glm_cumulant(kind, w + h)[0] - glm_cumulant(kind, w - h)[0]) / (2 * h),
                               rel=1e-6, abs=1e-12)
    assert d2 == pytest.approx((glm_cumulant(kind, w + h)[1] - glm_cumulant(kind, w - h)[1]) / (2 * h),
                               rel=1e-6, abs=1e-12)


def test_logistic_cumulant_no_overflow():
    d, d1, d2 = glm_cumulant("logistic", np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(d)) and d[1] == 800.0
    assert d1[1] == 1.0 and d2[1] == 0.0


def test_orthonormal_gaussian_hessian():
    m = build_glm(orthonormal_design(2, 50), "gaussian", TruthSpec.in_family([0.0, 0.0]))
    y = sample_data(m, 1)
    for th in ([0.0, 0.0], [3.0, -7.0]):
        assert np.allclose(m.hess(y, np.array(th)), -50 * np.eye(2))


def test_logistic_per_observation_hessian_at_zero():
    X = orthonormal_design(2, 5)
    m = build_glm(X, "logistic", TruthSpec.in_family([0.0, 0.0]))
    y = sample_data(m, 0)
    H = m.hess_obs(y, np.zeros(2))
    for i in range(X.shape[0]):
        assert np.allclose(H[i], -0.25 * np.outer(X[i], X[i]))


def test_custom_mean_gives_valid_misspecified_model():
    X = normal_design(50, 2, 3)
    mean = stats.norm.cdf(X @ [0.4, 0.1])
    m = build_glm(X, "logistic", TruthSpec.custom_mean(mean, Law("bernoulli")))
    assert m.population.theta_true is None
    assert np.allclose(m.population.expected(), mean)


@pytest.mark.parametrize("kind,theta", [("logistic", [0.3, -0.2]), ("poisson", [0.2, 0.1]),
                                        ("gaussian", [1.0, -1.0]), ("exponential", [2.0, 1.0])])
def test_glm_gradient_and_hessian_match_fd(kind, theta):
    X = np.abs(normal_design(40, 2, 5)) + 0.1 if kind == "exponential" else normal_design(40, 2, 5)
    m = build_glm(X, kind, TruthSpec.in_family(theta))
    y = sample_data(m, 11)
    th = np.asarray(theta) * 1.1
    assert np.allclose(m.grad(y, th), fd_grad(lambda t: m.loglik(y, t), th), rtol=1e-6, atol=1e-6)
    assert np.allclose(m.hess(y, th), fd_hess(lambda t: m.grad(y, t), th), rtol=1e-5, atol=1e-5)
    assert np.allclose(m.expected_grad(th), fd_grad(m.expected_loglik, th), rtol=1e-6, atol=1e-6)


def test_glm_stochastic_gradient_is_centered_and_constant():
    X = normal_design(30, 2, 2)
    m = build_glm(X, "logistic", TruthSpec.in_family([0.5, 0.5]))
    y = sample_data(m, 4)
    a = m.stochastic_grad(y, np.zeros(2))
    b = m.stochastic_grad(y, np.array([3.0, -1.0]))
    assert np.allclose(a, b)
    assert np.allclose(a, X.T @ (y - m.population.expected()))


def test_exponential_glm_domain():
    X = np.ones((5, 1))
    m = build_glm(X, "exponential", TruthSpec.in_family([1.0]))
    with pytest.raises(DomainError):
        m.loglik(sample_data(m, 0), np.array([-1.0]))


def test_rank_deficient_design():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(RankDeficientDesign):
        check_design(X)
    with pytest.raises(RankDeficientDesign):
        build_glm(X, "gaussian", TruthSpec.in_family([1.0, 1.0]))


def test_lad_laplace_density_and_b():
    m = build_lad(orthonormal_design(2, 5), TruthSpec.in_family([1.0, -1.0]))
    assert np.allclose(m.residual_density(0.0, np.array([1.0, -1.0])), 0.5)
    assert np.allclose(m.b(np.array([1.0, -1.0])), 0.5)


def test_lad_normal_density_at_zero():
    m = build_lad(orthonormal_design(2, 5), TruthSpec.in_family([0.0, 0.0], Law("normal")))
    assert np.allclose(m.residual_density(0.0, np.zeros(2)), 0.3989, atol=5e-5)


def test_lad_kde_only_when_allowed():
    base = TruthSpec.in_family([0.0, 0.0], Law("laplace"))
    t = TruthSpec.contaminated(base, 0.1, Law("student_t", df=3.0))
    m = build_lad(orthonormal_design(2, 10), t)
    assert m.density_source in ("analytic", "kde")
    bern = TruthSpec.custom_mean(np.full(20, 0.3), Law("bernoulli"))
    with pytest.raises(ModelError):
        build_lad(orthonormal_design(2, 10), bern, allow_kde=False)


def test_sample_data_deterministic():
    m = build_glm(normal_design(20, 2, 0), "poisson", TruthSpec.in_family([0.1, 0.2]))
    assert np.array_equal(sample_data(m, 5), sample_data(m, 5))
    assert not np.array_equal(sample_data(m, 5), sample_data(m, 6))


def test_gaussian_noise_mean_lln():
    n = 10**5
    X = normal_design(n, 2, 1)
    th = np.array([0.3, -0.7])
    m = build_glm(X, "gaussian", TruthSpec.in_family(th))
    y = sample_data(m, 2)
    assert abs(np.mean(y - X @ th)) <= 3 / math.sqrt(n)


def test_contaminant_count_binomial():
    n = 10**4
    base = TruthSpec.in_family([0.0], Law("normal"))
    t = TruthSpec.contaminated(base, 0.1, Law("laplace", scale=5.0))
    m = build_lad(np.ones((n, 1)), t)
    _, flags = m.population.sample(np.random.default_rng(3), return_labels=True)
    lo, hi = stats.binom.interval(0.99, n, 0.1)
    assert lo <= flags.sum() <= hi


def test_nested_contamination_rejected():
    base = TruthSpec.contaminated(TruthSpec.in_family([0.0]), 0.1, Law("normal"))
    with pytest.raises(ModelError):
        TruthSpec.contaminated(base, 0.1, Law("normal"))


@pytest.mark.parametrize("law", [Law("normal", 1.3), Law("laplace", 0.7), Law("student_t", 1.0, 4.0),
                                 Law("neg_exponential")])
@pytest.mark.parametrize("t", [-1.2, 0.0, 0.4])
def test_abs_dev_matches_quadrature(law, t):
    mean = 0.5 if law.name != "neg_exponential" else -0.8
    f = lambda u: abs(u - t) * float(law.pdf(u, mean))
    lo, hi = (-np.inf, 0.0) if law.name == "neg_exponential" else (-np.inf, np.inf)
    val = integrate.quad(f, lo, t if t < hi else hi)[0] + (integrate.quad(f, t, hi)[0] if t < hi else 0)
    assert float(law.abs_dev(t, mean)) == pytest.approx(val, rel=1e-7, abs=1e-9)


def test_abs_dev_discrete():
    b = Law("bernoulli")
    assert float(b.abs_dev(0.25, 0.3)) == pytest.approx(0.7 * 0.25 + 0.3 * 0.75)
    p = Law("poisson")
    k = np.arange(0, 200)
    ref = np.sum(np.abs(k - 2.5) * stats.poisson.pmf(k, 3.0))
    assert float(p.abs_dev(2.5, 3.0)) == pytest.approx(ref, rel=1e-10)


def test_iid_normal_expected_quantities():
    m = build_iid("normal", 100, TruthSpec.in_family([1.0, math.log(2.0)]))
    th = np.array([0.8, 0.5])
    assert np.allclose(m.expected_grad(th), fd_grad(m.expected_loglik, th), rtol=1e-6, atol=1e-6)
    assert np.allclose(m.expected_hess(th), fd_hess(m.expected_grad, th), rtol=1e-5, atol=1e-4)
    assert np.allclose(m.expected_grad(np.array([1.0, math.log(2.0)])), 0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_iid_normal_grad_matches_fd(a, b):
    m = build_iid("normal", 30, TruthSpec.in_family([0.2, 0.1]))
    y = sample_data(m, 1)
    th = np.array([a, b])
    assert np.allclose(m.grad(y, th), fd_grad(lambda t: m.loglik(y, t), th), rtol=1e-5, atol=1e-5)


def test_iid_under_other_law():
    m = build_iid("exponential", 50, TruthSpec.custom_mean(np.full(50, 2.0), Law("poisson")))
    # rate is 1 / mean under any law with the right mean
    assert np.allclose(m.expected_grad(np.array([math.log(0.5)])), 0, atol=1e-10)
