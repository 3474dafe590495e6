import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from fsmle.bounds import make_bracket
from fsmle.geometry import Spd, spectral_stats
from fsmle.models import Law, TruthSpec, build_glm, normal_design
from fsmle.verify import (
    SANDWICH_TOL,
    Scenario,
    binomial_ci,
    check_concentration,
    check_coverage,
    check_quad_tail,
    check_risk_moments,
    check_wilks,
    derive_seed,
    prepare,
    rate_report,
    records_to_csv,
    replicate,
    run_checks,
    run_replications,
    summary,
    synthetic_scores,
)


@pytest.fixture(scope="module")
def gauss():
    m = build_glm(normal_design(200, 3, 5), "gaussian", TruthSpec.in_family([1.0, -0.5, 0.25]))
    sc = Scenario(m, R=100, master_seed=11)
    ctx = prepare(sc)
    return ctx, run_replications(sc, ctx=ctx)


@pytest.fixture(scope="module")
def logit():
    m = build_glm(normal_design(500, 2, 1), "logistic", TruthSpec.in_family([0.5, -0.5]))
    sc = Scenario(m, R=100, master_seed=3)
    ctx = prepare(sc)
    return ctx, run_replications(sc, ctx=ctx)


def with_bracket(ctx, br):
    return replace(ctx, bracket=br, Db=br.db.sqrt(), Db_inv=br.db.inv_sqrt(),
                   Ds_inv=br.ds.inv_sqrt(), Ds_inv2=br.ds.inv())


def test_seeds_are_counter_based():
    a = np.random.default_rng(derive_seed(4, 7)).random(3)
    b = np.random.default_rng(derive_seed(4, 7)).random(3)
    c = np.random.default_rng(derive_seed(4, 7, "start")).random(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_scenario_validation():
    m = build_glm(normal_design(20, 1, 0), "gaussian", TruthSpec.in_family([0.0]))
    with pytest.raises(ValueError):
        Scenario(m, R=99)
    with pytest.raises(ValueError):
        Scenario(m, r=0.0)


def test_gaussian_exact_zeros(gauss):
    ctx, recs = gauss
    assert ctx.bracket.delta == pytest.approx(0.0, abs=1e-12) and ctx.bracket.omega == 0
    for r in recs:
        assert r.converged
        assert abs(r.err_upper_emp) <= 1e-8 and abs(r.err_lower_emp) <= 1e-8
        assert r.sandwich_excess <= 1e-8
        assert r.fisher_residual <= 1e-8
        assert abs(2 * r.excess - r.xi2) <= 1e-8 * (1 + r.xi2)


def test_gaussian_checks_pass(gauss):
    ctx, recs = gauss
    reps = run_checks(ctx, recs)
    s = summary(ctx, recs, reps)
    assert s["all_pass"] and s["failure_fraction"] == 0.0
    assert {c.check for c in reps} >= {"sandwich", "wilks", "fisher", "concentration"}
    # g = g1 sqrt(N) is below the level needed for the quadratic tail here
    assert ctx.tail is None and "coverage" not in {c.check for c in reps}


def test_determinism_across_workers(logit):
    ctx, recs = logit
    par = run_replications(ctx.scenario, workers=2, ctx=ctx)
    assert records_to_csv(recs, 2) == records_to_csv(par, 2)


def test_logistic_bracket_holds(logit):
    ctx, recs = logit
    assert ctx.bracket.valid
    assert all(r.sandwich_excess <= SANDWICH_TOL for r in recs if r.converged)
    assert check_wilks(recs).passed


def test_widening_omega_decreases_upper_error(logit):
    ctx, _ = logit
    wide = with_bracket(ctx, make_bracket(ctx.geometry, ctx.r, omega=ctx.bracket.omega + 0.05))
    for k in range(5):
        a, b = replicate(ctx, k), replicate(wide, k)
        assert b.err_upper_emp <= a.err_upper_emp + 1e-12
        assert b.xib2 >= a.xib2


def test_finer_grid_raises_the_grid_sup(logit):
    ctx, _ = logit
    coarse = prepare(replace(ctx.scenario, J=1, r=ctx.r, geometry=ctx.geometry))
    assert coarse.grid.shape[0] < ctx.grid.shape[0]
    for k in range(5):
        assert replicate(ctx, k).err_upper_emp >= replicate(coarse, k).err_upper_emp - 1e-12


def test_excluded_records_are_counted(logit):
    _, recs = logit
    bad = [replace(r, converged=False) if r.rep < 7 else r for r in recs]
    rep = check_coverage(bad, 10.0)[0]
    assert rep.n_excluded == 7 and rep.n_used == len(recs) - 7
    conc = check_concentration(bad, 1e9, 2.0)[0]
    # non-converged fits count against concentration
    assert conc.empirical == pytest.approx(7 / len(recs))


def test_binomial_ci():
    lo, hi = binomial_ci(0, 100)
    assert lo == 0.0 and hi == pytest.approx(0.036217, abs=1e-6)
    lo, hi = binomial_ci(5, 100)
    assert lo < 0.05 < hi
    assert binomial_ci(0, 0) == (0.0, 1.0)


def test_rate_report_rule():
    assert rate_report("t", 1.0, 0, 100, 0.0).passed
    assert not rate_report("t", 1.0, 1, 100, 0.0).passed
    assert rate_report("t", 1.0, 40, 1000, 0.03).passed
    assert not rate_report("t", 1.0, 80, 1000, 0.03).passed


def test_csv_round_trip(logit):
    _, recs = logit
    text = records_to_csv(recs, 2)
    assert text == records_to_csv(recs, 2)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == len(recs)
    assert float(rows[3]["excess"]) == recs[3].excess
    assert float(rows[3]["xi_b_1"]) == recs[3].xi_b[1]


def test_synthetic_quad_tail():
    tail = spectral_stats(Spd(np.eye(2)), Spd(np.diag([1.0, 0.5])), g=10.0)
    xi = synthetic_scores(tail, 20000, seed=1)
    reps = check_quad_tail(xi, tail, (1.0, 2.0, 3.0))
    assert all(c.passed for c in reps)
    assert reps[-1].empirical == pytest.approx(1.5, abs=0.05)


def test_infinite_critical_value_covers(logit):
    _, recs = logit
    rep = check_coverage(recs, math.inf)[0]
    assert rep.empirical == 0.0 and rep.passed


def test_larger_radius_fewer_exceedances(logit):
    _, recs = logit
    d = np.median([r.dist_v for r in recs])
    a = check_concentration(recs, d, 2.0)[0].empirical
    b = check_concentration(recs, 2 * d, 2.0)[0].empirical
    assert b <= a


def test_empty_locality_gives_zero_moment(logit):
    _, recs = logit
    out = [replace(r, in_locality=False) for r in recs]
    reps = check_risk_moments(out, (1, 2))
    for c in reps:
        if c.check.startswith("risk_excess"):
            assert c.empirical == 0.0 and c.passed


def test_invalid_bracket_marks_checks_inapplicable():
    X = normal_design(500, 2, 1)
    mean = stats.norm.cdf(X @ [0.5, -0.5])
    m = build_glm(X, "logistic", TruthSpec.custom_mean(mean, Law("bernoulli")))
    ctx = prepare(Scenario(m, R=100))
    assert not ctx.bracket.valid
    recs = [replicate(ctx, k) for k in range(100)]
    reps = run_checks(ctx, recs)
    na = {c.check for c in reps if c.passed is None}
    assert {"wilks", "fisher"} <= na
    assert any(c.check == "concentration" and c.passed is not None for c in reps)
