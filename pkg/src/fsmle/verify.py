"""Monte Carlo replication engine and empirical checks of the bounds.

A :class:`Scenario` fixes the model, the number of replications and the
seed.  :func:`prepare` computes everything shared by the replications
(geometry, locality radius, bracket, probe grid) and
:func:`run_replications` produces one :class:`ReplicationRecord` per
replication.  The ``check_*`` functions turn records into
:class:`CheckReport` values.
"""
from __future__ import annotations

import csv
import io
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import stats

from .bounds import (
    Bracket,
    BoundError,
    RadiusResult,
    auto_radius,
    bracket_score,
    confidence_critical,
    err_bound,
    make_bracket,
    quad_tail,
    quad_tail_prob,
    tau_alpha,
)
from .estimation import FitOptions, fit_qmle
from .geometry import (
    LocalGeometry,
    TailParams,
    build_geometry,
    compute_target,
    fisher_matrices,
    sphere_points,
)
from .models import DomainError, GlmModel, LadModel, Model, glm_cumulant_value

SANDWICH_TOL = 1e-7
STREAMS = {"data": 1, "start": 2, "synthetic": 3}


def derive_seed(master_seed: int, k: int, stream: str = "data") -> np.random.SeedSequence:
    """Counter-based seed for replication ``k`` of a given stream."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(k), STREAMS[stream]))


@dataclass
class Scenario:
    model: Model
    R: int = 1000
    master_seed: int = 0
    x_levels: tuple = (1.0, 2.0, 3.0)
    r: float | None = None  # None: concentration radius at level r_x
    r_x: float = 2.0
    K: int = 64
    J: int = 8
    nu: float = 1.0
    g1: float = 0.5
    fit_options: FitOptions = field(default_factory=FitOptions)
    geometry: LocalGeometry | None = None

    def __post_init__(self):
        if self.R < 100:
            raise ValueError("R must be at least 100")
        if any(x <= 0 for x in self.x_levels):
            raise ValueError("x_levels must be positive")
        if self.r is not None and not self.r > 0:
            raise ValueError("r must be positive")


@dataclass
class Context:
    """Quantities shared by all replications of a scenario."""

    scenario: Scenario
    geometry: LocalGeometry
    r: float
    radius: RadiusResult | None
    bracket: Bracket
    grid: np.ndarray  # probe points in Theta0(r), shape (K*J, p)
    grid_el: np.ndarray  # E L(theta, theta*) at the probe points
    grid_v2: np.ndarray  # |V(theta - theta*)|^2
    el_star: float
    D_inv: np.ndarray
    Db: np.ndarray | None  # bracket matrices; None when the bracket is invalid
    Db_inv: np.ndarray | None
    Ds_inv: np.ndarray | None
    Ds_inv2: np.ndarray | None
    V_half: np.ndarray
    tau: float | None
    alpha: float | None

    @property
    def model(self) -> Model:
        return self.scenario.model

    @property
    def tail(self) -> TailParams | None:
        return self.geometry.tail

    def err_level(self, x: float):
        """omega z_Q(x); ``None`` when the error bound is inapplicable."""
        om = self.bracket.omega
        try:
            return om * err_bound(x, self.geometry.p, self.geometry.g, self.geometry.nu)
        except BoundError:
            return 0.0 if om == 0 else None


def _loglik_many(model: Model, y, thetas) -> np.ndarray:
    """L(theta) for each row of ``thetas``; -inf outside the domain."""
    if isinstance(model, GlmModel):
        W = model.design @ thetas.T
        if model.kind == "exponential":
            bad = np.any(W <= 1e-8, axis=0)
            W = np.where(W <= 1e-8, 1.0, W)
            out = y @ W - glm_cumulant_value(model.kind, W).sum(axis=0)
            return np.where(bad, -np.inf, out)
        with np.errstate(over="ignore"):
            return y @ W - glm_cumulant_value(model.kind, W).sum(axis=0)
    if isinstance(model, LadModel):
        W = model.design @ thetas.T
        return -0.5 * np.abs(y[:, None] - W).sum(axis=0)
    out = np.empty(thetas.shape[0])
    for j, th in enumerate(thetas):
        try:
            out[j] = model.loglik(y, th)
        except DomainError:
            out[j] = -np.inf
    return out


def _el(model: Model, th) -> float:
    try:
        with np.errstate(over="ignore"):
            v = model.expected_loglik(th)
    except DomainError:
        return -np.inf
    return v


def prepare(scenario: Scenario) -> Context:
    model = scenario.model
    geo = scenario.geometry or build_geometry(model, nu=scenario.nu, g1=scenario.g1, K=scenario.K)
    radius = None
    if scenario.r is None:
        radius = auto_radius(geo, scenario.r_x)
        if not np.isfinite(radius.r0):
            raise ValueError(f"automatic radius unavailable: {radius.reason}")
        r = radius.r0
    else:
        r = float(scenario.r)
    br = make_bracket(geo, r)
    dirs = geo.dirs[: scenario.K] if geo.p > 1 else geo.dirs
    radii = np.geomspace(r / 2.0 ** (scenario.J - 1), r, scenario.J) if scenario.J > 1 else np.array([r])
    grid = np.vstack([sphere_points(geo.theta_star, geo.V2, rj, dirs) for rj in radii])
    v2 = np.repeat(radii**2, dirs.shape[0])
    el_star = model.expected_loglik(geo.theta_star)
    grid_el = np.array([_el(model, th) for th in grid]) - el_star
    keep = np.isfinite(grid_el)
    try:
        tau, alpha = tau_alpha(br.delta, br.omega, geo.a)
    except BoundError:
        tau = alpha = None
    if br.valid:
        mats = (br.db.sqrt(), br.db.inv_sqrt(), br.ds.inv_sqrt(), br.ds.inv())
    else:
        mats = (None,) * 4
    return Context(
        scenario, geo, r, radius, br, grid[keep], grid_el[keep], v2[keep], el_star,
        geo.D2.inv_sqrt(), *mats, geo.V2.sqrt(), tau, alpha,
    )


# ---------------------------------------------------------------------- #
# records
# ---------------------------------------------------------------------- #


@dataclass
class ReplicationRecord:
    rep: int
    converged: bool
    theta_hat: np.ndarray
    excess: float
    xi: np.ndarray
    xi_b: np.ndarray
    xi_s: np.ndarray
    dist_v: float  # |V(theta_hat - theta*)|
    in_locality: bool
    lower_solution_local: bool
    err_upper_emp: float
    err_lower_emp: float
    sandwich_excess: float  # > 0 means the sandwich fails on the grid
    fisher_residual: float  # |Db(theta_hat - theta*) - xi_b|^2
    fisher_plain: float  # |D(theta_hat - theta*) - xi|^2
    loss_b: float  # |Db(theta_hat - theta*)|
    spread: float

    @property
    def in_c(self) -> bool:
        return bool(self.converged and self.in_locality and self.lower_solution_local)

    @property
    def xi2(self) -> float:
        return float(self.xi @ self.xi)

    @property
    def xib2(self) -> float:
        return float(self.xi_b @ self.xi_b)

    @property
    def xis2(self) -> float:
        return float(self.xi_s @ self.xi_s)


def _nan_record(k, p):
    nan = np.full(p, np.nan)
    return ReplicationRecord(
        k, False, nan, np.nan, nan, nan, nan, np.nan, False, False,
        np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan,
    )


def replicate(ctx: Context, k: int) -> ReplicationRecord:
    """Replication ``k``: a pure function of the context and ``k``."""
    sc = ctx.scenario
    model = sc.model
    ts = ctx.geometry.theta_star
    p = model.p
    rng = np.random.default_rng(derive_seed(sc.master_seed, k, "data"))
    y = model.population.sample(rng)
    try:
        fit = fit_qmle(model, y, sc.fit_options)
    except DomainError:
        return _nan_record(k, p)
    if not fit.converged:
        rec = _nan_record(k, p)
        rec.theta_hat = fit.theta_hat
        return rec
    th = fit.theta_hat
    grad = model.grad(y, ts)
    xi = ctx.D_inv @ grad
    L_star = model.loglik(y, ts)
    exc = fit.loglik_at_max - L_star
    om = ctx.bracket.omega
    r = ctx.r

    h = th - ts
    dist_v = float(np.linalg.norm(ctx.V_half @ h))
    in_loc = dist_v <= r
    D = ctx.geometry.D2.sqrt()
    fisher_plain = float(np.sum((D @ h - xi) ** 2))
    if not ctx.bracket.valid:
        rec = _nan_record(k, p)
        rec.converged, rec.theta_hat, rec.excess, rec.xi = True, th, float(exc), xi
        rec.dist_v, rec.in_locality, rec.fisher_plain = dist_v, bool(in_loc), fisher_plain
        return rec
    xi_b, xi_s = ctx.Db_inv @ grad, ctx.Ds_inv @ grad
    th_s = ts + ctx.Ds_inv2 @ grad
    dist_s = float(np.linalg.norm(ctx.V_half @ (th_s - ts)))
    low_loc = dist_s <= r

    # residual process on the probe grid, plus theta_hat and the lower
    # maximizer when they lie in the local set
    pts = [ctx.grid]
    el = [ctx.grid_el]
    v2 = [ctx.grid_v2]
    for extra, dv, inside in ((th, dist_v, in_loc), (th_s, dist_s, low_loc)):
        if inside:
            e = _el(model, extra)
            if np.isfinite(e):
                pts.append(extra[None, :])
                el.append(np.array([e - ctx.el_star]))
                v2.append(np.array([dv**2]))
    P = np.vstack(pts)
    EL = np.concatenate(el)
    VV = np.concatenate(v2)
    Lp = _loglik_many(model, y, P) - L_star
    H = P - ts
    lin = H @ grad
    stoch = Lp - EL - lin
    resid_u = stoch - 0.5 * om * VV
    resid_l = -stoch - 0.5 * om * VV
    err_u = max(0.0, float(resid_u.max()))
    err_l = max(0.0, float(resid_l.max()))
    qb = np.einsum("ij,jk,ik->i", H, ctx.bracket.Db2, H)
    qs = np.einsum("ij,jk,ik->i", H, ctx.bracket.Ds2, H)
    upper_gap = Lp - (lin - 0.5 * qb + err_u)
    lower_gap = (lin - 0.5 * qs - err_l) - Lp
    sandwich = float(max(upper_gap.max(), lower_gap.max()))

    fisher = float(np.sum((ctx.Db @ h - xi_b) ** 2))
    loss_b = float(np.linalg.norm(ctx.Db @ h))
    spread = err_u + err_l + 0.5 * (xi_b @ xi_b - xi_s @ xi_s)
    return ReplicationRecord(
        k, True, th, float(exc), xi, xi_b, xi_s, dist_v, bool(in_loc), bool(low_loc),
        err_u, err_l, sandwich, fisher, fisher_plain, loss_b, float(spread),
    )


_WORKER_CTX: Context | None = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_chunk(ks):
    return [replicate(_WORKER_CTX, k) for k in ks]


def run_replications(scenario: Scenario, workers: int = 1, ctx: Context | None = None):
    """All replications of a scenario, in index order.

    Results do not depend on ``workers``: replication ``k`` draws its data
    from a seed derived from ``(master_seed, k)`` only.
    """
    ctx = ctx or prepare(scenario)
    ks = list(range(scenario.R))
    if workers <= 1:
        return [replicate(ctx, k) for k in ks]
    chunks = [ks[i : i + 50] for i in range(0, len(ks), 50)]
    with ProcessPoolExecutor(
        max_workers=workers,
        mp_context=mp.get_context("fork"),
        initializer=_init_worker,
        initargs=(ctx,),
    ) as pool:
        out = []
        for part in pool.map(_run_chunk, chunks):
            out.extend(part)
    return out


# ---------------------------------------------------------------------- #
# reports
# ---------------------------------------------------------------------- #


def binomial_ci(k: int, m: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    if m == 0:
        return 0.0, 1.0
    a = 1 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, m - k + 1))
    hi = 1.0 if k == m else float(stats.beta.ppf(1 - a / 2, k + 1, m - k))
    return lo, hi


@dataclass
class CheckReport:
    """Outcome of one check.

    For violation-rate checks ``passed`` means the empirical rate is at most
    the bound plus three binomial standard errors of the bound and the
    lower edge of the 95% interval does not exceed the bound.  Checks that
    cannot be evaluated carry ``passed = None``.
    """

    check: str
    x: float | None
    empirical: float
    bound: float
    ci_lo: float
    ci_hi: float
    passed: bool | None
    n_used: int = 0
    n_excluded: int = 0
    note: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "x": self.x,
            "empirical": _clean(self.empirical),
            "bound": _clean(self.bound),
            "ci_lo": _clean(self.ci_lo),
            "ci_hi": _clean(self.ci_hi),
            "passed": self.passed,
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "note": self.note,
            "extra": {k: _clean(v) for k, v in self.extra.items()},
        }


def _clean(v):
    if isinstance(v, (list, tuple)):
        return [_clean(u) for u in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def rate_report(name, x, hits: int, m: int, bound: float, excluded: int = 0, note="", extra=None):
    emp = hits / m if m else 0.0
    lo, hi = binomial_ci(hits, m)
    sig = math.sqrt(max(bound * (1 - bound), 0.0) / m) if m else 0.0
    ok = (emp <= bound + 3 * sig + 1e-15) and (lo <= bound + 1e-15)
    return CheckReport(name, x, emp, bound, lo, hi, bool(ok), m, excluded, note, extra or {})


def _ok(records):
    return [r for r in records if r.converged]


def check_bracketing(records, ctx: Context, x: float) -> list[CheckReport]:
    """Sandwich on the probe grid and the tail of the error terms."""
    ok = _ok(records)
    m = len(ok)
    viol = sum(r.sandwich_excess > SANDWICH_TOL for r in ok)
    worst = max((r.sandwich_excess for r in ok), default=0.0)
    out = [
        rate_report("sandwich", None, viol, m, 0.0, len(records) - m,
                    f"tolerance {SANDWICH_TOL:g}", {"max_excess": worst})
    ]
    lev = ctx.err_level(x)
    if lev is None:
        out.append(CheckReport("error_tail", x, math.nan, math.nan, math.nan, math.nan, None,
                               m, len(records) - m, "error bound inapplicable: g nu < 3"))
        return out
    for name, attr in (("error_tail", "err_upper_emp"), ("error_tail_lower", "err_lower_emp")):
        hits = sum(getattr(r, attr) > lev + SANDWICH_TOL for r in ok)
        out.append(rate_report(name, x, hits, m, math.exp(-x), len(records) - m,
                               "grid maxima under-estimate the sup", {"level": lev}))
    return out


def check_wilks(records, x: float | None = None) -> CheckReport:
    """|xi_s|^2/2 - err_l <= L(theta_hat, theta*) <= |xi_b|^2/2 + err_u on C(r)."""
    inc = [r for r in records if r.in_c]
    hits = 0
    for r in inc:
        hi = r.xib2 / 2 + r.err_upper_emp + SANDWICH_TOL * (1 + abs(r.excess))
        lo = r.xis2 / 2 - r.err_lower_emp - SANDWICH_TOL * (1 + abs(r.excess))
        hits += not (lo <= r.excess <= hi)
    return rate_report("wilks", x, hits, len(inc), 0.0, len(records) - len(inc),
                       "records outside C(r) excluded")


def check_fisher(records, spread_values=None) -> CheckReport:
    """|Db(theta_hat - theta*) - xi_b|^2 <= 2 spread on C(r)."""
    inc = [r for r in records if r.in_c]
    spreads = spread_values if spread_values is not None else [r.spread for r in inc]
    hits = sum(r.fisher_residual > 2 * s + SANDWICH_TOL * (1 + r.xib2) for r, s in zip(inc, spreads))
    med = float(np.median([r.fisher_residual for r in inc])) if inc else math.nan
    return rate_report("fisher", None, hits, len(inc), 0.0, len(records) - len(inc),
                       "records outside C(r) excluded", {"median_residual": med})


def check_coverage(records, z_crit: float, x: float | None = None, tail: TailParams | None = None):
    """Non-coverage {2L > z, theta_hat in Theta0(r)} against the tail bound
    and against the frequency of {|xi_b|^2 >= z - 2 err_u}."""
    ok = _ok(records)
    m = len(ok)
    miss = sum((2 * r.excess > z_crit) and r.in_locality for r in ok)
    rhs = sum(r.xib2 >= z_crit - 2 * r.err_upper_emp for r in ok)
    out = []
    if tail is not None and x is not None:
        out.append(rate_report("coverage", x, miss, m, quad_tail_prob(x, tail), len(records) - m,
                               "bound 2e^-x + 8.4e^-xc", {"z_crit": z_crit}))
    emp = miss / m if m else 0.0
    rb = rhs / m if m else 0.0
    lo, hi = binomial_ci(miss, m)
    out.append(CheckReport("coverage_score", x, emp, rb, lo, hi, bool(miss <= rhs), m,
                           len(records) - m, "bound is the empirical P(|xi_b|^2 >= z - 2 err)",
                           {"z_crit": z_crit}))
    return out


def check_concentration(records, r0: float, x: float, z: float | None = None) -> list[CheckReport]:
    """P(|V(theta_hat - theta*)| > r0) against e^-x, and the local variant."""
    m = len(records)
    # non-converged fits count as exceedances
    hits = sum((not r.converged) or r.dist_v > r0 for r in records)
    c_freq = sum(r.in_c for r in records) / m if m else 0.0
    out = [rate_report("concentration", x, hits, m, math.exp(-x), 0, f"r0 = {r0:.6g}",
                       {"r0": r0, "C_frequency": c_freq})]
    if z is not None:
        ok = _ok(records)
        lhs = sum(r.loss_b > z and r.in_c for r in ok)
        rhs = sum(math.sqrt(r.xib2) > z - math.sqrt(max(2 * r.spread, 0.0)) for r in ok)
        lo, hi = binomial_ci(lhs, len(ok))
        out.append(CheckReport("concentration_local", x, lhs / max(len(ok), 1), rhs / max(len(ok), 1),
                               lo, hi, bool(lhs <= rhs), len(ok), m - len(ok),
                               "bound is the empirical P(|xi_b| > z - sqrt(2 spread))", {"z": z}))
    return out


def check_quad_tail(records_or_xi, tail: TailParams, x_levels) -> list[CheckReport]:
    """P(|xi|^2 / lambda_0 >= z(x, B)) against 2e^-x + 8.4e^-xc, and the mean
    of |xi|^2 against dim_A.

    ``records_or_xi`` is a list of records or an array of score vectors.
    """
    if isinstance(records_or_xi, np.ndarray):
        q = np.sum(records_or_xi**2, axis=1)
    else:
        q = np.array([r.xi2 for r in records_or_xi if r.converged])
    m = q.size
    out = []
    for x in x_levels:
        z = quad_tail(x, tail)
        hits = int(np.sum(q / tail.lambda0 >= z))
        out.append(rate_report("quad_tail", float(x), hits, m, quad_tail_prob(x, tail), 0, "",
                               {"z": z}))
    mean = float(q.mean())
    se = float(q.std(ddof=1) / math.sqrt(m))
    out.append(CheckReport("quad_mean", None, mean, tail.dimA, mean - 1.96 * se, mean + 1.96 * se,
                           bool(mean <= tail.dimA + 3 * se), m, 0, "E|xi|^2 <= dim_A", {"se": se}))
    return out


def synthetic_scores(tail: TailParams, draws: int = 10**5, seed: int = 0) -> np.ndarray:
    """Exactly Gaussian scores with covariance B."""
    rng = np.random.default_rng(derive_seed(seed, 0, "synthetic"))
    z = rng.standard_normal((draws, tail.B.dim))
    return z @ tail.B.sqrt()


def check_risk_moments(records, lossp_levels=(1, 2), x: float | None = None) -> list[CheckReport]:
    """E[L^r 1(Theta0)] <= E[(|xi_b|^2/2 + err_u)^r] and the loss analogue."""
    ok = _ok(records)
    out = []
    for rr in lossp_levels:
        if rr not in (1, 2):
            raise ValueError("lossp levels must be 1 or 2")
        lhs = np.array([(max(r.excess, 0.0) ** rr) * r.in_locality for r in ok])
        rhs = np.array([(r.xib2 / 2 + r.err_upper_emp) ** rr for r in ok])
        out.append(_moment_report(f"risk_excess_r{rr}", x, lhs, rhs, len(records) - len(ok)))
        lhs = np.array([(r.loss_b**rr) * r.in_c for r in ok])
        rhs = np.array([(math.sqrt(r.xib2) + math.sqrt(max(2 * r.spread, 0.0))) ** rr for r in ok])
        out.append(_moment_report(f"risk_loss_r{rr}", x, lhs, rhs, len(records) - len(ok)))
    return out


def _moment_report(name, x, lhs, rhs, excluded):
    m = lhs.size
    if m == 0:
        return CheckReport(name, x, 0.0, 0.0, 0.0, 0.0, True, 0, excluded, "empty")
    d = rhs - lhs
    se = float(d.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    a, b = float(lhs.mean()), float(rhs.mean())
    return CheckReport(name, x, a, b, a - 1.96 * se, a + 1.96 * se,
                       bool(a <= b + 3 * se + 1e-12 * (1 + abs(b))), m, excluded,
                       "bound is the Monte Carlo mean of the upper quantity")


@dataclass
class ScalingRecord:
    rep: int
    converged: bool
    excess: float
    xi2: float
    fisher_plain: float


def scaling_records(model: Model, R: int, master_seed: int = 0,
                    opts: FitOptions = FitOptions()) -> list[ScalingRecord]:
    """Excess, |xi|^2 and the plain Fisher gap per replication; no bracket."""
    geo_t = compute_target(model)
    D2, _ = fisher_matrices(model, geo_t)
    D, D_inv = D2.sqrt(), D2.inv_sqrt()
    out = []
    for k in range(R):
        rng = np.random.default_rng(derive_seed(master_seed, k, "data"))
        y = model.population.sample(rng)
        fit = fit_qmle(model, y, opts)
        if not fit.converged:
            out.append(ScalingRecord(k, False, math.nan, math.nan, math.nan))
            continue
        xi = D_inv @ model.grad(y, geo_t)
        h = fit.theta_hat - geo_t
        out.append(ScalingRecord(k, True, fit.loglik_at_max - model.loglik(y, geo_t),
                                 float(xi @ xi), float(np.sum((D @ h - xi) ** 2))))
    return out


def dimension_scaling_summary(records_by_p: dict) -> CheckReport:
    """Medians of |2L - |xi|^2| and |D(theta_hat - theta*) - xi|^2 per p;
    passes when the first median divided by p is non-increasing in p."""
    ps = sorted(records_by_p)
    med_w, med_f, fails = [], [], 0
    for p in ps:
        ok = [r for r in records_by_p[p] if r.converged]
        fails += len(records_by_p[p]) - len(ok)
        med_w.append(float(np.median([abs(2 * r.excess - r.xi2) for r in ok])))
        med_f.append(float(np.median([r.fisher_plain for r in ok])))
    ratio = [w / p for w, p in zip(med_w, ps)]
    mono = all(b <= a for a, b in zip(ratio, ratio[1:]))
    return CheckReport("dimension_scaling", None, ratio[-1], ratio[0], min(ratio), max(ratio), mono,
                       len(ps), fails, "median |2L - |xi|^2| / p must be non-increasing in p",
                       {"p": ps, "median_wilks_gap": med_w, "median_wilks_gap_per_p": ratio,
                        "median_fisher_gap": med_f})


def check_dimension_scaling(make_model, ps=(2, 4, 8), n_per_p: int = 50, R: int = 1000,
                            master_seed: int = 0) -> CheckReport:
    """One model per p with n = n_per_p * p, built by ``make_model(p, n)``."""
    out = {p: scaling_records(make_model(p, n_per_p * p), R, master_seed) for p in ps}
    return dimension_scaling_summary(out)


def inapplicable(name: str, x: float | None, note: str, m: int = 0) -> CheckReport:
    return CheckReport(name, x, math.nan, math.nan, math.nan, math.nan, None, m, 0, note)


BRACKET_CHECKS = ("sandwich", "error_tail", "error_tail_lower", "wilks", "fisher",
                  "coverage_score", "concentration_local", "risk_excess_r1", "risk_loss_r1",
                  "risk_excess_r2", "risk_loss_r2")


def run_checks(ctx: Context, records) -> list[CheckReport]:
    """Every check that applies to a scenario.

    Checks that need the bracket are reported as inapplicable when the
    bracket at the chosen radius is invalid.
    """
    sc = ctx.scenario
    tail = ctx.tail
    valid = ctx.bracket.valid
    why = f"bracket invalid at r = {ctx.r:.6g} (delta = {ctx.bracket.delta:.4g})"
    reps = []
    for i, x in enumerate(sc.x_levels):
        if valid:
            reps.extend(c for c in check_bracketing(records, ctx, x) if i == 0 or c.check != "sandwich")
    reps.append(check_wilks(records) if valid else inapplicable("wilks", None, why))
    reps.append(check_fisher(records) if valid else inapplicable("fisher", None, why))
    if tail is not None:
        for x in sc.x_levels:
            lev = ctx.err_level(x) if valid else None
            z = confidence_critical(x, tail, lev if lev is not None else 0.0)
            if valid:
                reps.extend(check_coverage(records, z, x, tail))
            elif ctx.bracket.omega == 0:
                reps.extend(c for c in check_coverage(records, z, x, tail) if c.check == "coverage")
    r0 = ctx.radius.r0 if ctx.radius is not None else ctx.r
    zloc = math.sqrt(tail.lambda0 * quad_tail(sc.r_x, tail)) if (tail is not None and valid) else None
    reps.extend(check_concentration(records, r0, sc.r_x, zloc))
    if tail is not None:
        reps.extend(check_quad_tail(records, tail, sc.x_levels))
    if valid:
        reps.extend(check_risk_moments(records, (1, 2)))
    else:
        reps.extend(inapplicable(n, None, why) for n in BRACKET_CHECKS if n.startswith("risk"))
    return reps


# ---------------------------------------------------------------------- #
# serialization
# ---------------------------------------------------------------------- #


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def record_columns(p: int) -> list[str]:
    cols = ["rep", "converged"]
    cols += [f"theta_hat_{j}" for j in range(p)]
    cols += ["excess"]
    for name in ("xi", "xi_b", "xi_s"):
        cols += [f"{name}_{j}" for j in range(p)]
    cols += ["dist_v", "in_locality", "lower_solution_local", "err_upper_emp", "err_lower_emp",
             "sandwich_excess", "fisher_residual", "fisher_plain", "loss_b", "spread"]
    return cols


def records_to_csv(records, p: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(record_columns(p))
    for r in records:
        row = [r.rep, r.converged, *r.theta_hat, r.excess, *r.xi, *r.xi_b, *r.xi_s, r.dist_v,
               r.in_locality, r.lower_solution_local, r.err_upper_emp, r.err_lower_emp,
               r.sandwich_excess, r.fisher_residual, r.fisher_plain, r.loss_b, r.spread]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def reports_to_long_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "x", "empirical", "bound", "ci_lo", "ci_hi"])
    for c in reports:
        w.writerow([c.check, "" if c.x is None else _fmt(c.x), _fmt(c.empirical), _fmt(c.bound),
                    _fmt(c.ci_lo), _fmt(c.ci_hi)])
    return buf.getvalue()


def failure_fraction(records) -> float:
    return sum(not r.converged for r in records) / len(records) if records else 0.0


def summary(ctx: Context, records, reports) -> dict:
    applicable = [c for c in reports if c.passed is not None]
    return {
        "r": ctx.r,
        "radius": None if ctx.radius is None else ctx.radius.to_dict(),
        "bracket": ctx.bracket.to_dict(),
        "tau": ctx.tau,
        "alpha": ctx.alpha,
        "conditions": ctx.geometry.conditions_at(ctx.r),
        "replications": len(records),
        "failure_fraction": failure_fraction(records),
        "C_frequency": sum(r.in_c for r in records) / max(len(records), 1),
        "outside_C": sum(not r.in_c for r in records),
        "checks": [c.to_dict() for c in reports],
        "all_pass": all(c.passed for c in applicable),
    }
