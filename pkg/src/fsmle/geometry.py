"""Local geometry at the target: theta*, D^2, V^2, normalized scores,
spectral constants of B = D^{-1} V^2 D^{-1}, local moduli and the global
drift constant."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats
from scipy.stats import qmc

from .estimation import FitOptions, newton_ascent
from .models import DomainError, GlmModel, IidModel, LadModel, Model

MU_C = 2.0 / 3.0
CLIP = 1e-10
DEFAULT_G1 = 0.5


class GeometryError(Exception):
    """Singular curvature, failed target search or similar."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class TailError(ValueError):
    """Tail constants are undefined (g^2 < 2 dim_A)."""


# ---------------------------------------------------------------------- #
# symmetric positive semidefinite matrices
# ---------------------------------------------------------------------- #


class Spd:
    """Symmetric positive semidefinite matrix with a cached eigendecomposition.

    Eigenvalues down to ``-1e-10 * lambda_max`` are clipped to zero;
    anything more negative is rejected.
    """

    def __init__(self, matrix, name: str = "matrix"):
        M = np.atleast_2d(np.asarray(matrix, dtype=float))
        if M.shape[0] != M.shape[1]:
            raise ValueError(f"{name} must be square")
        scale = max(np.abs(M).max(), 1e-300)
        if np.abs(M - M.T).max() > 1e-12 * scale:
            raise ValueError(f"{name} is not symmetric")
        M = 0.5 * (M + M.T)
        w, U = np.linalg.eigh(M)
        top = max(w[-1], 0.0)
        if w[0] < -CLIP * top or top == 0 and w[0] < 0:
            raise ValueError(f"{name} is not positive semidefinite")
        w = np.where(w < CLIP * top, np.maximum(w, 0.0), w)
        self.name = name
        self.matrix = M
        self.eigvals = w
        self.eigvecs = U

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def lam_max(self) -> float:
        return float(self.eigvals[-1])

    @property
    def lam_min(self) -> float:
        return float(self.eigvals[0])

    @property
    def singular(self) -> bool:
        return self.eigvals[0] < CLIP * self.eigvals[-1] or self.eigvals[-1] <= 0

    def _fn(self, f):
        return (self.eigvecs * f(self.eigvals)) @ self.eigvecs.T

    def sqrt(self) -> np.ndarray:
        return self._fn(np.sqrt)

    def inv_sqrt(self) -> np.ndarray:
        self._need_regular()
        return self._fn(lambda w: 1.0 / np.sqrt(w))

    def inv(self) -> np.ndarray:
        self._need_regular()
        return self._fn(lambda w: 1.0 / w)

    def _need_regular(self):
        if self.singular:
            raise GeometryError(f"{self.name} is singular")

    def to_list(self) -> list:
        return [[float(v) for v in row] for row in self.matrix]


# ---------------------------------------------------------------------- #
# target and information matrices
# ---------------------------------------------------------------------- #


def compute_target(model: Model, method: str = "exact", M: int = 10**6, seed: int = 0) -> np.ndarray:
    """The maximizer theta* of E L(theta).

    In-family GLM and i.i.d. truths return the true parameter.  Otherwise
    the estimating equation ``grad E L = 0`` is solved by Newton's method
    on the exact expectation.  ``method='monte_carlo'`` (i.i.d. only)
    maximizes an average over ``M`` oracle draws instead; use
    :func:`target_monte_carlo` to also get the standard error.
    """
    pop = model.population
    if method == "monte_carlo":
        return target_monte_carlo(model, M, seed)[0]
    if pop.theta_true is not None and not isinstance(model, LadModel):
        return pop.theta_true.copy()
    if isinstance(model, LadModel):
        start = pop.theta_true if pop.theta_true is not None else np.linalg.lstsq(
            model.design, pop.expected(), rcond=None
        )[0]
    elif isinstance(model, IidModel):
        m = pop.raw_moments(2)[0]
        start = model.family.mom_start(m[0], m[1])
    elif isinstance(model, GlmModel):
        from .estimation import _glm_start

        start = _glm_start(model, pop.expected())
    else:
        start = np.zeros(model.p)
    opts = FitOptions(max_iterations=200, gradient_tolerance=1e-13)
    try:
        theta, _, ok, _, msg = newton_ascent(
            model.expected_loglik, model.expected_grad, model.expected_hess, start, opts
        )
    except DomainError as exc:
        raise GeometryError(f"target search failed: {exc}", start) from exc
    g = np.linalg.norm(model.expected_grad(theta))
    if not ok and g > 1e-7 * (1 + abs(model.expected_loglik(theta))):
        raise GeometryError(f"target search did not converge: {msg}", theta)
    return theta


def target_monte_carlo(model: Model, M: int = 10**6, seed: int = 0):
    """theta* from ``M`` oracle draws (i.i.d. models), with standard errors."""
    if not isinstance(model, IidModel):
        raise ValueError("Monte Carlo target is implemented for i.i.d. models")
    pop = model.population
    one = type(pop)(np.full(M, pop.means[0]), pop.law, pop.fraction, pop.contaminant, pop.contaminant_mean)
    ys = one.sample(np.random.default_rng(seed))
    f = lambda t: model.loglik(ys, t) / M
    g = lambda t: model.grad(ys, t) / M
    h = lambda t: model.hess(ys, t) / M
    theta, _, ok, _, msg = newton_ascent(
        f, g, h, model.moment_start(ys), FitOptions(gradient_tolerance=1e-12)
    )
    if not ok:
        raise GeometryError(f"Monte Carlo target did not converge: {msg}", theta)
    G = model.grad_obs(ys, theta)
    Hinv = np.linalg.inv(h(theta))
    cov = Hinv @ np.cov(G.T).reshape(model.p, model.p) @ Hinv / M
    return theta, np.sqrt(np.diag(cov))


def fisher_matrices(model: Model, theta_star) -> tuple[Spd, Spd]:
    """D^2 = -Hessian of E L at theta*, V^2 = Var grad L(theta*)."""
    theta_star = np.asarray(theta_star, dtype=float)
    if isinstance(model, GlmModel):
        X = model.design
        D2 = -model.expected_hess(theta_star)
        V2 = (X.T * model.S**2) @ X
    elif isinstance(model, LadModel):
        X = model.design
        dens = model.residual_density(0.0, theta_star)
        D2 = (X.T * dens) @ X
        V2 = 0.25 * X.T @ X
    elif isinstance(model, IidModel):
        D2 = -model.expected_hess(theta_star)
        _, C = model.suff_moments()
        J = model.family.jac(theta_star)
        V2 = model.n * J.T @ C @ J
    else:
        raise TypeError("unsupported model")
    try:
        D = Spd(D2, "D2")
        V = Spd(V2, "V2")
    except ValueError as exc:
        raise GeometryError(str(exc)) from exc
    if D.singular:
        raise GeometryError("D2 is singular")
    if V.singular:
        raise GeometryError("V2 is singular")
    return D, V


def score_at(model: Model, data, theta_star) -> np.ndarray:
    """grad L(theta*) for one data vector."""
    return model.grad(np.asarray(data, dtype=float), np.asarray(theta_star, dtype=float))


def normalized_score(model: Model, data, theta_star, D2: Spd) -> np.ndarray:
    """xi = D^{-1} grad L(theta*)."""
    return D2.inv_sqrt() @ score_at(model, data, theta_star)


def identifiability_constant(D2: Spd, V2: Spd) -> float:
    """Smallest a with a^2 D^2 >= V^2, i.e. sqrt(lambda_max(B))."""
    Di = D2.inv_sqrt()
    B = Di @ V2.matrix @ Di
    return float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (B + B.T))[-1], 0.0)))


# ---------------------------------------------------------------------- #
# tail constants
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class TailParams:
    B: Spd
    dimA: float
    vA2: float
    lambda0: float
    yc: float
    gc: float
    xc: float
    nu: float
    g: float
    mu_c: float = MU_C

    @property
    def vA(self) -> float:
        return float(np.sqrt(self.vA2))

    def to_dict(self) -> dict:
        return {
            "B": self.B.to_list(),
            "dimA": self.dimA,
            "vA2": self.vA2,
            "lambda0": self.lambda0,
            "mu_c": self.mu_c,
            "yc": self.yc,
            "gc": self.gc,
            "xc": self.xc,
            "nu": self.nu,
            "g": self.g,
        }


def spectral_stats(D2: Spd, V2: Spd, nu: float = 1.0, g: float = np.inf) -> TailParams:
    """Constants of the quadratic-form deviation bound for B = D^{-1}V^2D^{-1}."""
    Di = D2.inv_sqrt()
    B = Spd(Di @ V2.matrix @ Di, "B")
    w = B.eigvals
    dimA = float(w.sum())
    vA2 = float(2 * (w**2).sum())
    lam0 = float(w[-1])
    if not g**2 >= 2 * dimA:
        raise TailError(f"tail constants undefined: g^2 = {g**2:.6g} < 2 dim_A = {2 * dimA:.6g}")
    if np.isinf(g):
        return TailParams(B, dimA, vA2, lam0, np.inf, np.inf, np.inf, nu, g)
    yc2 = g**2 / MU_C**2 - dimA / MU_C
    gc = float(np.sqrt(g**2 - MU_C * dimA))
    # B^2 / lambda0^2 keeps the matrix positive for any scale of B
    logdet = float(np.sum(np.log1p(-MU_C * (w / lam0) ** 2)))
    xc = 0.5 * (MU_C * yc2 + logdet)
    return TailParams(B, dimA, vA2, lam0, float(np.sqrt(yc2)), gc, float(xc), nu, g)


# ---------------------------------------------------------------------- #
# probes
# ---------------------------------------------------------------------- #


def directions(K: int, p: int, seed: int = 2718) -> np.ndarray:
    """K unit vectors from a scrambled Sobol sequence (deterministic).

    For p = 1 the only directions are +1 and -1.
    """
    if p == 1:
        return np.array([[1.0], [-1.0]])
    u = qmc.Sobol(d=p, scramble=True, seed=seed).random(K)
    z = special.ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def sphere_points(theta_star, V2: Spd, r: float, dirs) -> np.ndarray:
    """Points theta with |V (theta - theta*)| = r along the given directions."""
    return np.asarray(theta_star) + r * dirs @ V2.inv_sqrt()


def curvature_at(model: Model, theta, theta_star) -> np.ndarray:
    """D^2(theta) = -Hessian of E L at theta (LAD: shifted densities)."""
    if isinstance(model, LadModel):
        u = model.design @ (np.asarray(theta) - theta_star)
        dens = model.residual_density(u, theta_star)
        return (model.design.T * dens) @ model.design
    return -model.expected_hess(theta)


def _delta_at(model, D2: Spd, pts, theta_star) -> float:
    Di = D2.inv_sqrt()
    p = D2.dim
    worst = 0.0
    for th in pts:
        try:
            with np.errstate(over="raise", invalid="raise"):
                C = curvature_at(model, th, theta_star)
        except (DomainError, FloatingPointError):
            return np.inf
        if not np.all(np.isfinite(C)):
            return np.inf
        E = np.eye(p) - Di @ C @ Di
        worst = max(worst, float(np.abs(np.linalg.eigvalsh(0.5 * (E + E.T))).max()))
    return worst


def _rho_at(model, V2: Spd, pts, theta_star) -> float:
    if isinstance(model, GlmModel):
        return 0.0
    if isinstance(model, LadModel):
        b0 = model.b(theta_star)
        return 4.0 * max(float(np.abs(model.b(th) - b0).max()) for th in pts)
    # i.i.d.: sd of the score increment relative to V, i.e. a variance proxy
    _, C = model.suff_moments()
    Vi = V2.inv_sqrt()
    J0 = model.family.jac(theta_star)
    worst = 0.0
    for th in pts:
        dJ = model.family.jac(th) - J0
        Mx = Vi @ (model.n * dJ.T @ C @ dJ) @ Vi
        worst = max(worst, float(np.sqrt(max(np.linalg.eigvalsh(Mx)[-1], 0.0))))
    return worst


def _drift_at(model, pts, theta_star, r) -> float:
    el0 = model.expected_loglik(theta_star)
    best = np.inf
    for th in pts:
        try:
            with np.errstate(over="ignore"):
                el = model.expected_loglik(th)
        except DomainError:
            continue
        if not np.isfinite(el):
            continue
        best = min(best, -(el - el0) / (0.5 * r**2))
    return best


def local_moduli(model: Model, theta_star, D2: Spd, V2: Spd, r_grid, dirs=None):
    """Tabulate delta(r) and rho(r) on an increasing grid of radii.

    The sup over the sphere |V(theta - theta*)| = r is replaced by a max
    over the probe directions, so the tables are lower bounds of the true
    suprema.  Both tables are made nondecreasing by a running maximum.

    For i.i.d. models the linear forms delta* r / sqrt(n), rho* r / sqrt(n)
    are returned with delta*, rho* calibrated on the unit local sphere
    (r = sqrt(n)) and its dyadic fractions.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    if np.any(r_grid <= 0) or np.any(np.diff(r_grid) <= 0):
        raise ValueError("r_grid must be positive and increasing")
    theta_star = np.asarray(theta_star, dtype=float)
    if dirs is None:
        dirs = directions(64, model.p)
    if isinstance(model, IidModel):
        dstar, rstar = iid_slopes(model, theta_star, D2, V2, dirs)
        s = r_grid / np.sqrt(model.n)
        return dstar * s, rstar * s
    delta = np.empty_like(r_grid)
    rho = np.empty_like(r_grid)
    for j, r in enumerate(r_grid):
        pts = sphere_points(theta_star, V2, r, dirs)
        delta[j] = _delta_at(model, D2, pts, theta_star)
        rho[j] = _rho_at(model, V2, pts, theta_star)
    return np.maximum.accumulate(delta), np.maximum.accumulate(rho)


def iid_slopes(model: IidModel, theta_star, D2: Spd, V2: Spd, dirs) -> tuple[float, float]:
    """Calibrate delta*, rho* so that delta(r) = delta* r / sqrt(n)."""
    rn = np.sqrt(model.n)
    dstar = rstar = 0.0
    for t in (0.125, 0.25, 0.5, 1.0):
        pts = sphere_points(theta_star, V2, t * rn, dirs)
        dstar = max(dstar, _delta_at(model, D2, pts, theta_star) / t)
        rstar = max(rstar, _rho_at(model, V2, pts, theta_star) / t)
    return dstar, rstar


def drift_table(model: Model, theta_star, V2: Spd, r_grid, dirs=None) -> np.ndarray:
    """b(r) = min over probes of -E L(theta, theta*) / (|V(theta - theta*)|^2 / 2)."""
    theta_star = np.asarray(theta_star, dtype=float)
    if dirs is None:
        dirs = directions(64, model.p)
    return np.array(
        [_drift_at(model, sphere_points(theta_star, V2, r, dirs), theta_star, r) for r in r_grid]
    )


def monotone_drift(r_grid, b) -> np.ndarray:
    """Largest minorant of ``b`` on the grid with ``r b(r)`` nondecreasing."""
    r_grid = np.asarray(r_grid, dtype=float)
    rb = np.asarray(b, dtype=float) * r_grid
    return np.minimum.accumulate(rb[::-1])[::-1] / r_grid


def glm_effective_n(design, S, V2) -> float:
    """N with N^{-1/2} = max_i S_i sqrt(psi_i' V^{-2} psi_i)."""
    X = np.asarray(design, dtype=float)
    V2m = V2.matrix if isinstance(V2, Spd) else np.asarray(V2, dtype=float)
    q = np.einsum("ij,jk,ik->i", X, np.linalg.inv(V2m), X)
    S = np.broadcast_to(np.asarray(S, dtype=float), q.shape)
    return float(1.0 / np.max(S**2 * q))


def lad_effective_n(design, V2) -> float:
    """N for linear median regression: N^{-1/2} = max_i |psi_i|_{V^{-2}} / 2."""
    return glm_effective_n(design, 0.5, V2)


def bernoulli_log_mgf(lam, b):
    """log E exp(lam (1(U <= b) - b)) for U uniform."""
    lam = np.asarray(lam, dtype=float)
    return np.logaddexp(np.log(b) + lam * (1 - b), np.log1p(-b) - lam * b)


def probe_exp_moment(
    model: Model,
    theta,
    gamma,
    lambda_grid,
    M: int = 10_000,
    seed: int = 0,
    V2: Spd | None = None,
    theta_star=None,
    rho: float | None = None,
) -> float:
    """Empirical nu^2: max over the grid of log E exp(lam s) / (lam^2 / 2).

    ``s = gamma' grad zeta(theta) / |V gamma|``.  With ``theta_star`` and
    ``rho`` given, the increment ``grad zeta(theta) - grad zeta(theta*)``
    scaled by ``rho |V gamma|`` is used instead.  Grid points where the
    exponent overflows are dropped with a warning.
    """
    if M < 10_000:
        raise ValueError("M must be at least 1e4")
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if V2 is None:
        ts = theta_star if theta_star is not None else compute_target(model)
        V2 = fisher_matrices(model, ts)[1]
    norm = float(np.sqrt(gamma @ V2.matrix @ gamma))
    rng = np.random.default_rng(seed)
    s = np.empty(M)
    for k in range(M):
        y = model.population.sample(rng)
        gz = model.stochastic_grad(y, theta)
        if theta_star is not None:
            gz = gz - model.stochastic_grad(y, theta_star)
        s[k] = gamma @ gz
    if theta_star is not None:
        if np.all(s == 0):
            return 0.0
        s = s / (rho * norm)
    else:
        s = s / norm
    best = -np.inf
    for lam in np.asarray(lambda_grid, dtype=float):
        if lam == 0:
            continue
        e = lam * s
        if e.max() > 700:
            warnings.warn(f"exponent overflow at lambda = {lam}; grid point dropped")
            continue
        est = special.logsumexp(e) - np.log(M)
        best = max(best, est / (0.5 * lam**2))
    return float(best)


# ---------------------------------------------------------------------- #
# assembled geometry
# ---------------------------------------------------------------------- #


def default_r_grid(p: int, n_points: int = 48) -> np.ndarray:
    return np.geomspace(0.05 * np.sqrt(p), 2.0**12, n_points)


@dataclass
class LocalGeometry:
    model_class: str
    theta_star: np.ndarray
    D2: Spd
    V2: Spd
    a: float
    nu: float
    g1: float
    g: float
    N: float
    r_grid: np.ndarray
    delta: np.ndarray
    rho: np.ndarray
    b: np.ndarray
    dirs: np.ndarray
    tail: TailParams | None = None
    tail_error: str | None = None
    target_se: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.D2.dim

    def _lookup(self, table, r) -> float:
        # conservative: value at the first grid radius >= r
        if r <= 0:
            return 0.0
        j = int(np.searchsorted(self.r_grid, r - 1e-12 * r))
        if j >= self.r_grid.size:
            return np.inf
        return float(table[j])

    def delta_of_r(self, r) -> float:
        return self._lookup(self.delta, r)

    def rho_of_r(self, r) -> float:
        return self._lookup(self.rho, r)

    def b_of_r(self, r) -> float:
        """Drift constant, linearly interpolated in r."""
        return float(np.interp(r, self.r_grid, self.b))

    def g_of_r(self, r) -> float:
        return self.g

    def conditions_at(self, r) -> dict:
        """Which of delta(r), rho(r) exceed the cap 1/2."""
        d, q = self.delta_of_r(r), self.rho_of_r(r)
        return {
            "delta": d,
            "rho": q,
            "violated": bool(d > 0.5 or q > 0.5),
            "reason": "conditions violated at r" if (d > 0.5 or q > 0.5) else "",
        }

    def to_dict(self) -> dict:
        def flt(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        r_mono = self.r_grid * self.b
        return {
            "model_class": self.model_class,
            "theta_star": flt(self.theta_star),
            "target_se": None if self.target_se is None else flt(self.target_se),
            "D2": self.D2.to_list(),
            "V2": self.V2.to_list(),
            "a": self.a,
            "nu": self.nu,
            "g1": self.g1,
            "g": self.g,
            "N": self.N,
            "tail": None if self.tail is None else self.tail.to_dict(),
            "tail_error": self.tail_error,
            "moduli": {
                "r": flt(self.r_grid),
                "delta": flt(self.delta),
                "rho": flt(self.rho),
                "b": flt(self.b),
                "r_b_nondecreasing": bool(np.all(np.diff(r_mono) >= -1e-9 * np.abs(r_mono[1:]))),
            },
            "probe_directions": int(self.dirs.shape[0]),
            "notes": list(self.notes),
        }


def build_geometry(
    model: Model,
    nu: float = 1.0,
    g1: float = DEFAULT_G1,
    r_grid=None,
    K: int = 64,
    target_method: str = "exact",
    seed: int = 0,
) -> LocalGeometry:
    """Compute everything the bounds need for one model."""
    se = None
    if target_method == "monte_carlo":
        theta_star, se = target_monte_carlo(model, seed=seed)
    else:
        theta_star = compute_target(model)
    D2, V2 = fisher_matrices(model, theta_star)
    a = identifiability_constant(D2, V2)
    if isinstance(model, GlmModel):
        N = glm_effective_n(model.design, model.S, V2)
    elif isinstance(model, LadModel):
        N = lad_effective_n(model.design, V2)
    else:
        N = float(model.n)
    g = g1 * np.sqrt(N)
    if r_grid is None:
        r_grid = default_r_grid(model.p)
    r_grid = np.asarray(r_grid, dtype=float)
    dirs = directions(K, model.p)
    delta, rho = local_moduli(model, theta_star, D2, V2, r_grid, dirs)
    b = monotone_drift(r_grid, drift_table(model, theta_star, V2, r_grid, dirs))
    notes = []
    if isinstance(model, LadModel):
        notes.append(f"residual densities: {model.density_source}")
    tail, terr = None, None
    try:
        tail = spectral_stats(D2, V2, nu, g)
    except TailError as exc:
        terr = str(exc)
    return LocalGeometry(
        model.model_class,
        theta_star,
        D2,
        V2,
        a,
        nu,
        g1,
        float(g),
        N,
        r_grid,
        delta,
        rho,
        b,
        dirs,
        tail,
        terr,
        se,
        notes,
    )
