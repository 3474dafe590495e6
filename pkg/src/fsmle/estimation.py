"""Quasi-MLE computation: damped Newton for smooth models, IRLS for LAD."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .models import DomainError, GlmModel, IidModel, LadModel, Model, check_design


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings.

    ``gradient_tolerance`` is relative: a smooth fit is accepted when
    ``|grad L| <= tol * (1 + |L|)``.
    """

    max_iterations: int = 200
    gradient_tolerance: float = 1e-9
    line_search_shrink: float = 0.5
    armijo: float = 1e-4
    start: np.ndarray | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.line_search_shrink < 1:
            raise ValueError("line_search_shrink must lie in (0, 1)")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    loglik_at_max: float
    converged: bool
    iterations: int
    excess: float | None = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "theta_hat": [float(v) for v in self.theta_hat],
            "loglik_at_max": float(self.loglik_at_max),
            "excess": None if self.excess is None else float(self.excess),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "message": self.message,
        }


def _safe(f, x):
    try:
        v = f(x)
    except DomainError:
        return -np.inf
    return v if np.isfinite(v) else -np.inf


def newton_ascent(f, grad, hess, x0, opts: FitOptions):
    """Maximize ``f`` by Newton steps with Armijo backtracking.

    Where ``-hess`` is not positive definite it is shifted until it is, so
    every direction is an ascent direction.  Returns ``(x, fx, converged,
    iterations, message)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = _safe(f, x)
    if not np.isfinite(fx):
        raise DomainError("starting point outside the domain of the log-likelihood")
    for it in range(1, opts.max_iterations + 1):
        g = grad(x)
        if np.linalg.norm(g) <= opts.gradient_tolerance * (1 + abs(fx)):
            return x, fx, True, it - 1, "gradient tolerance reached"
        H = -hess(x)
        H = 0.5 * (H + H.T)
        lam_min = np.linalg.eigvalsh(H)[0]
        scale = max(np.abs(np.diag(H)).max(), 1.0)
        if lam_min <= 1e-12 * scale:
            H = H + (1e-12 * scale - lam_min + 1e-8 * scale) * np.eye(len(x))
        step = np.linalg.solve(H, g)
        slope = g @ step
        t = 1.0
        while True:
            x_new = x + t * step
            f_new = _safe(f, x_new)
            if f_new >= fx + opts.armijo * t * slope:
                break
            t *= opts.line_search_shrink
            if t < 1e-14:
                return x, fx, False, it, "line search failed"
        x, fx = x_new, f_new
    g = grad(x)
    ok = np.linalg.norm(g) <= opts.gradient_tolerance * (1 + abs(fx))
    return x, fx, bool(ok), opts.max_iterations, "maximum iterations reached"


def lad_objective(design, y, theta) -> float:
    """sum_i |y_i - psi_i' theta|."""
    return float(np.abs(np.asarray(y) - np.asarray(design) @ theta).sum())


def _vertex_polish(X, y, theta):
    """Try the vertex through the p smallest residuals; keep it if no worse."""
    n, p = X.shape
    order = np.argsort(np.abs(y - X @ theta), kind="stable")
    rows = []
    for i in order:
        cand = rows + [i]
        if np.linalg.matrix_rank(X[cand]) == len(cand):
            rows = cand
        if len(rows) == p:
            break
    if len(rows) < p:
        return theta
    vert = np.linalg.solve(X[rows], y[rows])
    if lad_objective(X, y, vert) <= lad_objective(X, y, theta):
        return vert
    return theta


def solve_lad(design, y, opts: FitOptions = FitOptions()) -> np.ndarray:
    """Least absolute deviation fit by smoothed IRLS.

    The objective ``sum sqrt(r_i^2 + tau^2)`` is minimized by reweighted
    least squares while ``tau`` decreases geometrically to 1e-8; the
    result is then snapped to the nearest vertex of the piecewise-linear
    objective when that does not increase it.
    """
    X = check_design(design)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if opts.start is not None:
        theta = np.asarray(opts.start, dtype=float).copy()
    else:
        theta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ theta
    tau = max(float(np.mean(np.abs(r))), 1e-8)
    while True:
        for _ in range(opts.max_iterations):
            wts = 1.0 / np.sqrt(r**2 + tau**2)
            sw = np.sqrt(wts)
            new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
            delta = np.abs(new - theta).max()
            theta = new
            r = y - X @ theta
            if delta <= 1e-12 * (1 + np.abs(theta).max()):
                break
        if tau <= 1e-8:
            break
        tau = max(tau * 0.1, 1e-8)
    return _vertex_polish(X, y, theta)


def _glm_start(model: GlmModel, y) -> np.ndarray:
    if model.kind != "exponential":
        return np.zeros(model.p)
    # zero is outside the domain of -log(w); regress the moment guess
    # w_i = -1 / y_i on the design
    X = model.design
    target = -1.0 / np.minimum(y, -1e-3)
    theta = np.linalg.lstsq(X, target, rcond=None)[0]
    if np.all(X @ theta > 1e-8):
        return theta
    # otherwise any theta with X theta >= 1, rescaled to the data
    lp = optimize.linprog(
        np.zeros(model.p), A_ub=-X, b_ub=-np.ones(model.n), bounds=[(None, None)] * model.p
    )
    if lp.status != 0:
        raise DomainError("no feasible starting point for the exponential GLM")
    w = X @ lp.x
    return lp.x * float(np.median(target) / np.median(w))


def fit_qmle(model: Model, data, opts: FitOptions = FitOptions(), theta_star=None) -> FitResult:
    """Compute the quasi-MLE ``argmax_theta L(theta)``.

    For GLMs the fit is also declared non-converged when the curvature at
    the returned point has (numerically) vanished, which is how a
    maximizer at infinity such as separated logistic data shows up.
    """
    y = np.asarray(data, dtype=float)
    if y.shape != (model.n,):
        raise ValueError(f"data must have length n = {model.n}")

    if isinstance(model, LadModel):
        theta = solve_lad(model.design, y, opts)
        res = FitResult(theta, model.loglik(y, theta), True, 0, message="lad")
    else:
        if opts.start is not None:
            start = np.asarray(opts.start, dtype=float)
        elif isinstance(model, GlmModel):
            start = _glm_start(model, y)
        elif isinstance(model, IidModel):
            start = model.moment_start(y)
        else:
            start = np.zeros(model.p)
        f = lambda t: model.loglik(y, t)
        g = lambda t: model.grad(y, t)
        h = lambda t: model.hess(y, t)
        theta, fx, ok, its, msg = newton_ascent(f, g, h, start, opts)
        if ok and isinstance(model, GlmModel):
            curv = np.linalg.eigvalsh(-h(theta))[0]
            gram = np.linalg.eigvalsh(model.design.T @ model.design)[-1]
            if curv < 1e-8 * gram:
                ok, msg = False, "curvature vanished: maximizer at infinity"
        if ok and isinstance(model, IidModel):
            if np.linalg.eigvalsh(-h(theta))[0] <= 0:
                theta, fx, ok, its, msg = _multistart(f, g, h, theta, opts, (theta, fx, ok, its, msg))
        res = FitResult(theta, fx, ok, its, message=msg)
    if theta_star is not None:
        res.excess = excess(model, y, res.theta_hat, theta_star)
    return res


def _multistart(f, g, h, theta, opts, best):
    """Restart from 5 deterministic perturbations and keep the best optimum."""
    rng = np.random.default_rng(0)
    for _ in range(5):
        start = theta + rng.standard_normal(theta.shape) * (0.5 + np.abs(theta))
        try:
            cand = newton_ascent(f, g, h, start, replace(opts, start=None))
        except DomainError:
            continue
        if cand[2] and cand[1] > best[1]:
            best = cand
    return best


def excess(model: Model, data, theta_hat, theta_star) -> float:
    """L(theta_hat) - L(theta_star)."""
    y = np.asarray(data, dtype=float)
    return model.loglik(y, theta_hat) - model.loglik(y, theta_star)
