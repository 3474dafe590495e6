"""Bracketing objects and the explicit bound functions.

All functions here are plain arithmetic on their inputs.  Probability
guarantees are returned next to the numbers they qualify.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import GeometryError, LocalGeometry, Spd, TailParams

LOG2 = float(np.log(2.0))


class BoundError(ValueError):
    """A bound is not applicable to the given inputs."""


def entropy_q(p: int) -> float:
    """Q = c p with c = 2 for p >= 2 and c = 2.7 for p = 1."""
    if p < 1:
        raise ValueError("p must be positive")
    return 2.7 if p == 1 else 2.0 * p


# ---------------------------------------------------------------------- #
# bracket
# ---------------------------------------------------------------------- #


@dataclass
class Bracket:
    """Shrunk and stretched curvature matrices.

    ``Db2 = (1 - delta) D^2 - omega V^2`` and ``Ds2 = (1 + delta) D^2 + omega V^2``.
    """

    delta: float
    omega: float
    Db2: np.ndarray
    Ds2: np.ndarray
    valid: bool
    _db: Spd | None = field(default=None, repr=False)
    _ds: Spd | None = field(default=None, repr=False)

    def need_valid(self):
        if not self.valid:
            raise BoundError("invalid bracket: Db2 is not positive semidefinite")

    @property
    def db(self) -> Spd:
        self.need_valid()
        return self._db

    @property
    def ds(self) -> Spd:
        self.need_valid()
        return self._ds

    def to_dict(self) -> dict:
        return {
            "delta": float(self.delta),
            "omega": float(self.omega),
            "valid": bool(self.valid),
            "Db2": [[float(v) for v in row] for row in self.Db2],
            "Ds2": [[float(v) for v in row] for row in self.Ds2],
        }


def bracket_from_matrices(D2, V2, delta: float, omega: float) -> Bracket:
    """Bracket for explicit (delta, omega)."""
    if delta < 0 or omega < 0:
        raise ValueError("delta and omega must be nonnegative")
    D = D2.matrix if isinstance(D2, Spd) else np.asarray(D2, dtype=float)
    V = V2.matrix if isinstance(V2, Spd) else np.asarray(V2, dtype=float)
    Db2 = (1 - delta) * D - omega * V
    Ds2 = (1 + delta) * D + omega * V
    w = np.linalg.eigvalsh(0.5 * (Db2 + Db2.T))
    top = np.abs(np.linalg.eigvalsh(0.5 * (Ds2 + Ds2.T))).max()
    valid = bool(np.isfinite(delta) and w[0] >= -1e-10 * top)
    db = Spd(Db2, "Db2") if valid else None
    ds = Spd(Ds2, "Ds2") if valid else None
    return Bracket(float(delta), float(omega), Db2, Ds2, valid, db, ds)


def make_bracket(geometry: LocalGeometry, r: float, delta=None, omega=None) -> Bracket:
    """Bracket at radius r with the minimal choices delta(r), 3 nu rho(r).

    Callers may pass wider ``delta`` or ``omega``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    d_min = geometry.delta_of_r(r)
    o_min = 3 * geometry.nu * geometry.rho_of_r(r)
    d = d_min if delta is None else max(float(delta), d_min)
    o = o_min if omega is None else max(float(omega), o_min)
    return bracket_from_matrices(geometry.D2, geometry.V2, d, o)


def bracket_score(bracket: Bracket, grad_at_star) -> tuple[np.ndarray, np.ndarray]:
    """(xi_b, xi_s) = (Db^{-1} grad, Ds^{-1} grad)."""
    g = np.asarray(grad_at_star, dtype=float)
    try:
        return bracket.db.inv_sqrt() @ g, bracket.ds.inv_sqrt() @ g
    except GeometryError as exc:
        raise BoundError(f"bracket is singular: {exc}") from exc


def bracket_process_eval(bracket: Bracket, grad_at_star, theta, theta_star):
    """L_b and L_s at theta (rows of a 2-D ``theta`` give a vector result).

    ``L_.(theta, theta*) = (theta - theta*)' grad - |D_.(theta - theta*)|^2 / 2``
    """
    h = np.asarray(theta, dtype=float) - np.asarray(theta_star, dtype=float)
    g = np.asarray(grad_at_star, dtype=float)
    lin = h @ g
    qb = np.einsum("...i,ij,...j->...", h, bracket.Db2, h)
    qs = np.einsum("...i,ij,...j->...", h, bracket.Ds2, h)
    return lin - 0.5 * qb, lin - 0.5 * qs


def upper_maximizer(bracket: Bracket, grad_at_star, theta_star) -> np.ndarray:
    """argmax of L_b: theta* + Db^{-2} grad."""
    return np.asarray(theta_star) + bracket.db.inv() @ np.asarray(grad_at_star)


def lower_maximizer(bracket: Bracket, grad_at_star, theta_star) -> np.ndarray:
    """argmax of L_s over R^p: theta* + Ds^{-2} grad."""
    return np.asarray(theta_star) + bracket.ds.inv() @ np.asarray(grad_at_star)


# ---------------------------------------------------------------------- #
# explicit bounds
# ---------------------------------------------------------------------- #


def err_bound(x: float, p: int, g: float, nu: float = 1.0, Q: float | None = None) -> float:
    """z_Q(x, Q), the level exceeded by err/omega with probability <= e^{-x}.

    ``Q`` defaults to :func:`entropy_q`.  Needs ``g nu >= 3``.
    """
    gd = g * nu
    if not gd >= 3:
        raise BoundError(f"bound inapplicable: g nu = {gd:.6g} < 3")
    q = entropy_q(p) if Q is None else float(Q)
    s = np.sqrt(x + q)
    if 1 + s <= gd:
        return float((1 + s) ** 2)
    return float(1 + (2 * (x + q) / gd + gd) ** 2)


def quad_tail(x: float, tail: TailParams) -> float:
    """z(x, B): P(|xi|^2 / lambda_0 >= z) <= :func:`quad_tail_prob`."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    vA = tail.vA
    if x <= vA / 18:
        return float(tail.dimA + 2 * vA * np.sqrt(x))
    if x <= tail.xc:
        return float(tail.dimA + 6 * x)
    return float((tail.yc + 2 * (x - tail.xc) / tail.gc) ** 2)


def quad_tail_prob(x: float, tail: TailParams) -> float:
    """Probability attached to :func:`quad_tail`."""
    if x <= tail.xc:
        return float(2 * np.exp(-x) + 8.4 * np.exp(-tail.xc))
    return float(8.4 * np.exp(-x))


def tau_alpha(delta: float, omega: float, a: float) -> tuple[float, float]:
    """tau = delta + omega a^2 and alpha = 2 tau / (1 - tau^2)."""
    tau = float(delta + omega * a**2)
    if not tau < 1:
        raise BoundError(f"bracket too wide: tau = {tau:.6g} >= 1")
    return tau, float(2 * tau / (1 - tau**2))


def spread_bound(omega: float, zq: float, alpha: float, lambda0: float, z: float) -> float:
    """2 omega z_Q + alpha lambda_0 z."""
    if min(omega, zq, alpha, lambda0, z) < 0:
        raise ValueError("inputs must be nonnegative")
    return float(2 * omega * zq + alpha * lambda0 * z)


def spread_bound_prob(x: float, xc: float) -> float:
    """Probability attached to :func:`spread_bound` (union of four events)."""
    return float(1 - 4 * np.exp(-x) - 8.4 * np.exp(-xc))


@dataclass
class SpreadReport:
    err_upper: float
    err_lower: float
    half_norm_gap: float
    spread: float
    tau: float | None = None
    alpha: float | None = None

    def to_dict(self) -> dict:
        return {k: (None if v is None else float(v)) for k, v in self.__dict__.items()}


def spread_empirical(err_upper, err_lower, xi_b, xi_s, tau=None, alpha=None) -> SpreadReport:
    """err_upper + err_lower + (|xi_b|^2 - |xi_s|^2) / 2."""
    gap = 0.5 * (float(np.dot(xi_b, xi_b)) - float(np.dot(xi_s, xi_s)))
    return SpreadReport(
        float(err_upper), float(err_lower), gap, float(err_upper + err_lower + gap), tau, alpha
    )


def confidence_critical(x: float, tail: TailParams, err_upper_bound: float = 0.0) -> float:
    """z = lambda_0 z(x, B) + err_upper_bound."""
    return float(tail.lambda0 * quad_tail(x, tail) + err_upper_bound)


# ---------------------------------------------------------------------- #
# concentration radius
# ---------------------------------------------------------------------- #


@dataclass
class RadiusResult:
    r0: float
    feasible: bool
    reason: str = ""
    prob: float = 0.0
    schedule: list = field(default_factory=list)

    def __iter__(self):
        yield self.r0
        yield self.feasible

    def to_dict(self) -> dict:
        return {
            "r0": float(self.r0),
            "feasible": bool(self.feasible),
            "reason": self.reason,
            "guarantee": f"P(theta_hat outside Theta0(r0)) <= e^-x = {self.prob:.6g}",
            "schedule": self.schedule,
        }


def _as_fn(v) -> Callable[[float], float]:
    return v if callable(v) else (lambda r, _v=float(v): _v)


def concentration_radius(x: float, p: int, nu: float, b: float, g_of_r) -> RadiusResult:
    """r0 = 6 nu sqrt(x + Q) / b for a drift constant b fixed for all r >= r0."""
    if not b > 0:
        raise ValueError("b must be positive")
    q = entropy_q(p)
    s = np.sqrt(x + q)
    r0 = float(6 * nu * s / b)
    g = _as_fn(g_of_r)(r0)
    reasons = []
    if x + q < 2.5:
        reasons.append(f"x + Q = {x + q:.6g} < 2.5")
    if not 1 + s <= 3 * nu**2 * g / b:
        reasons.append(f"1 + sqrt(x + Q) = {1 + s:.6g} > 3 nu^2 g(r0) / b = {3 * nu**2 * g / b:.6g}")
    return RadiusResult(r0, not reasons, "; ".join(reasons), float(np.exp(-x)))


def concentration_radius_varying(
    x: float,
    p: int,
    nu: float,
    b_of_r,
    g_of_r,
    r_grid=None,
    k_max: int | None = None,
) -> RadiusResult:
    """Smallest r0 passing the dyadic conditions for a radius-dependent drift.

    Radii ``r_k = r0 2^k`` satisfy ``b(r_k) >= b(r0) 2^{-k}`` whenever
    ``r b(r)`` is nondecreasing.  Conditions are checked at level
    ``x + Q + k log 2`` for ``k = 0..k_max``; ``k_max`` defaults to the
    last k with ``r_k`` inside ``r_grid`` (the parameter set is taken to
    be bounded by the largest grid radius).
    """
    b_fn = _as_fn(b_of_r)
    g_fn = _as_fn(g_of_r)
    q = entropy_q(p)
    if r_grid is None:
        r_grid = np.geomspace(1e-3, 1e6, 400)
    r_grid = np.asarray(r_grid, dtype=float)
    rb = np.array([r * b_fn(r) for r in r_grid])
    if np.any(np.diff(rb) < -1e-9 * np.abs(rb[1:])):
        return RadiusResult(np.nan, False, "precondition failed: r b(r) is not nondecreasing")
    r_max = float(r_grid[-1])

    def check(r0):
        ks = k_max if k_max is not None else max(int(np.floor(np.log2(r_max / r0))), 0)
        sched = []
        b0 = b_fn(r0)
        for k in range(0, ks + 1):
            rk = r0 * 2.0**k
            bk = b_fn(rk)
            lev = x + q + LOG2 * k
            ok1 = 1 + np.sqrt(lev) <= 3 * nu**2 * g_fn(rk) / bk
            ok2 = 6 * nu * np.sqrt(lev) <= rk * bk
            ok3 = bk >= b0 * 2.0**-k * (1 - 1e-12)
            sched.append({"k": k, "r": float(rk), "b": float(bk), "level": float(lev),
                          "g_condition": bool(ok1), "r_condition": bool(ok2)})
            if not (ok1 and ok2 and ok3):
                return False, sched
        return True, sched

    if x + q < 2.5:
        return RadiusResult(np.nan, False, f"x + Q = {x + q:.6g} < 2.5")
    # feasibility is monotone in r0, so bisect between grid points
    target = 6 * nu * np.sqrt(x + q)
    idx = np.nonzero(rb >= target)[0]
    if idx.size == 0:
        return RadiusResult(np.nan, False, "no radius on the grid with r b(r) >= 6 nu sqrt(x + Q)")
    lo_i = idx[0]
    feas = [j for j in range(lo_i, r_grid.size) if check(r_grid[j])[0]]
    if not feas:
        return RadiusResult(np.nan, False, "no feasible r0 on the grid", float(np.exp(-x)),
                            check(r_grid[lo_i])[1])
    hi = float(r_grid[feas[0]])
    lo = float(r_grid[feas[0] - 1]) if feas[0] > 0 else hi
    for _ in range(60):
        if hi - lo <= 1e-12 * hi:
            break
        mid = 0.5 * (lo + hi)
        if mid * b_fn(mid) >= target * (1 - 1e-15) and check(mid)[0]:
            hi = mid
        else:
            lo = mid
    ok, sched = check(hi)
    return RadiusResult(hi, ok, "" if ok else "boundary", float(np.exp(-x)), sched)


def auto_radius(geometry: LocalGeometry, x: float) -> RadiusResult:
    """Locality radius from the tabulated drift of a geometry."""
    return concentration_radius_varying(
        x, geometry.p, geometry.nu, geometry.b_of_r, geometry.g_of_r, geometry.r_grid
    )
