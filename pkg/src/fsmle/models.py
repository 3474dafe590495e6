"""Model classes for quasi maximum likelihood.

Three classes are provided:

* :class:`GlmModel` -- canonical exponential family regression with
  per-observation log-density ``y * w - d(w)``, ``w = psi' theta``;
* :class:`LadModel` -- linear median regression, ``-|y - psi' theta| / 2``;
* :class:`IidModel` -- smooth i.i.d. families written in exponential form.

The data generating law (the *truth*) is described separately by
:class:`TruthSpec` and may lie outside the parametric family.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

GLM_KINDS = ("logistic", "poisson", "exponential", "gaussian")
IID_FAMILIES = ("normal", "exponential", "poisson")
IID_P = {"normal": 2, "exponential": 1, "poisson": 1}
LAW_NAMES = (
    "normal",
    "laplace",
    "student_t",
    "bernoulli",
    "poisson",
    "neg_exponential",
    "exponential",
)
# exponential-kind GLM: reject linear predictors at or below this value
EXP_GUARD = 1e-8


class ModelError(ValueError):
    """Raised when a model cannot be constructed."""


class RankDeficientDesign(ModelError):
    """The Gram matrix of the design is singular."""


class DomainError(ValueError):
    """Parameter outside the domain of the log-density."""


# ---------------------------------------------------------------------- #
# cumulants
# ---------------------------------------------------------------------- #


def glm_cumulant(kind: str, w):
    """Cumulant ``d`` of a canonical GLM and its first two derivatives.

    Parameters
    ----------
    kind : {'logistic', 'poisson', 'exponential', 'gaussian'}
    w : float or array_like
        Canonical parameter.

    Returns
    -------
    d, d1, d2 : float or ndarray
    """
    scalar = np.ndim(w) == 0
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise DomainError("non-finite canonical parameter")
    if kind == "logistic":
        d = np.logaddexp(0.0, w)
        d1 = special.expit(w)
        d2 = d1 * special.expit(-w)
    elif kind == "poisson":
        d = np.exp(w)
        d1 = d
        d2 = d
    elif kind == "exponential":
        if np.any(w <= 0):
            raise DomainError("exponential cumulant -log(w) needs w > 0")
        d = -np.log(w)
        d1 = -1.0 / w
        d2 = 1.0 / w**2
    elif kind == "gaussian":
        d = 0.5 * w**2
        d1 = w.copy()
        d2 = np.ones_like(w)
    else:
        raise ValueError(f"unknown GLM kind {kind!r}")
    if scalar:
        return float(d), float(d1), float(d2)
    return d, d1, d2


def glm_cumulant_value(kind: str, w) -> np.ndarray:
    """Cumulant ``d(w)`` alone, elementwise; no domain checks."""
    if kind == "logistic":
        return np.logaddexp(0.0, w)
    if kind == "poisson":
        return np.exp(w)
    if kind == "exponential":
        return -np.log(w)
    if kind == "gaussian":
        return 0.5 * np.square(w)
    raise ValueError(f"unknown GLM kind {kind!r}")


def _mean_map(kind: str, w):
    return glm_cumulant(kind, w)[1]


def family_law(kind: str) -> "Law":
    """Observation law of a GLM kind, indexed by its mean."""
    return {
        "logistic": Law("bernoulli"),
        "poisson": Law("poisson"),
        "exponential": Law("neg_exponential"),
        "gaussian": Law("normal", scale=1.0),
    }[kind]


# ---------------------------------------------------------------------- #
# designs
# ---------------------------------------------------------------------- #


def check_design(design) -> np.ndarray:
    """Return the design as a float array, rejecting rank-deficient input."""
    X = np.atleast_2d(np.asarray(design, dtype=float))
    if X.ndim != 2 or X.shape[0] == 0:
        raise ModelError("design must be a non-empty 2-D array")
    if not np.all(np.isfinite(X)):
        raise ModelError("design contains non-finite entries")
    eig = np.linalg.eigvalsh(X.T @ X)
    if eig[-1] <= 0 or eig[0] <= 1e-10 * eig[-1]:
        raise RankDeficientDesign(
            f"design Gram matrix is singular (rank < p = {X.shape[1]})"
        )
    return X


def orthonormal_design(p: int, m: int) -> np.ndarray:
    """Rows e_1, ..., e_p, the whole block repeated ``m`` times (n = m p)."""
    return np.tile(np.eye(p), (m, 1))


def normal_design(n: int, p: int, seed: int) -> np.ndarray:
    """Standard normal rows drawn with a fixed seed."""
    return np.random.default_rng(seed).standard_normal((n, p))


def load_design(path) -> np.ndarray:
    """Read a headerless CSV with one row per observation."""
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)


# ---------------------------------------------------------------------- #
# observation laws
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class Law:
    """A law for one observation, indexed by its mean.

    ``normal``, ``laplace`` and ``student_t`` are location families with a
    ``scale``; ``bernoulli`` and ``poisson`` are determined by the mean;
    ``neg_exponential`` is the law of ``-E`` with ``E`` exponential (mean < 0)
    and ``exponential`` is the usual positive one (mean > 0).
    """

    name: str
    scale: float = 1.0
    df: float | None = None

    def __post_init__(self):
        if self.name not in LAW_NAMES:
            raise ModelError(f"unknown law {self.name!r}")
        if not self.scale > 0:
            raise ModelError("law scale must be positive")
        if self.name == "student_t" and not (self.df is not None and self.df > 2):
            raise ModelError("student_t law needs df > 2")

    @property
    def discrete(self) -> bool:
        return self.name in ("bernoulli", "poisson")

    def _std(self):
        if self.name == "normal":
            return stats.norm
        if self.name == "laplace":
            return stats.laplace
        return stats.t(self.df)

    def check_mean(self, mean):
        m = np.asarray(mean, dtype=float)
        if self.name == "bernoulli" and np.any((m < 0) | (m > 1)):
            raise ModelError("bernoulli mean outside [0, 1]")
        if self.name in ("poisson", "exponential") and np.any(m <= 0):
            raise ModelError(f"{self.name} mean must be positive")
        if self.name == "neg_exponential" and np.any(m >= 0):
            raise ModelError("neg_exponential mean must be negative")
        return m

    def sample(self, mean, rng: np.random.Generator) -> np.ndarray:
        m = np.asarray(mean, dtype=float)
        size = m.shape
        if self.name == "normal":
            return m + self.scale * rng.standard_normal(size)
        if self.name == "laplace":
            return m + rng.laplace(0.0, self.scale, size)
        if self.name == "student_t":
            return m + self.scale * rng.standard_t(self.df, size)
        if self.name == "bernoulli":
            return (rng.random(size) < m).astype(float)
        if self.name == "poisson":
            return rng.poisson(m).astype(float)
        if self.name == "exponential":
            return rng.exponential(m)
        return -rng.exponential(-m)

    def var(self, mean) -> np.ndarray:
        m = np.asarray(mean, dtype=float)
        if self.name == "normal":
            v = self.scale**2
        elif self.name == "laplace":
            v = 2 * self.scale**2
        elif self.name == "student_t":
            v = self.scale**2 * self.df / (self.df - 2)
        elif self.name == "bernoulli":
            return m * (1 - m)
        elif self.name == "poisson":
            return m.copy()
        else:
            return m**2
        return np.full_like(m, v)

    def raw_moments(self, mean, k: int = 4) -> np.ndarray:
        """E Y^j for j = 1..k, stacked along the last axis."""
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        uniq, inv = np.unique(m, return_inverse=True)
        table = np.array([[float(self._frozen(u).moment(j)) for j in range(1, k + 1)] for u in uniq])
        return table[inv.reshape(m.shape)]

    def _frozen(self, mean: float):
        if self.name == "normal":
            return stats.norm(mean, self.scale)
        if self.name == "laplace":
            return stats.laplace(mean, self.scale)
        if self.name == "student_t":
            return stats.t(self.df, mean, self.scale)
        if self.name == "bernoulli":
            return stats.bernoulli(mean)
        if self.name == "poisson":
            return stats.poisson(mean)
        if self.name == "exponential":
            return stats.expon(scale=mean)
        # -E with E ~ Exp(mean -m): Y = loc - scale * E' is not in scipy,
        # but its moments are (-1)^j times those of E
        return _Reflected(stats.expon(scale=-mean))

    def cdf(self, t, mean) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        m = np.asarray(mean, dtype=float)
        if self.name in ("normal", "laplace", "student_t"):
            return self._std().cdf((t - m) / self.scale)
        if self.name == "bernoulli":
            return np.where(t < 0, 0.0, np.where(t < 1, 1 - m, 1.0))
        if self.name == "poisson":
            return stats.poisson.cdf(t, m)
        if self.name == "exponential":
            return stats.expon.cdf(t, scale=m)
        return stats.expon.sf(-t, scale=-m)

    def pdf(self, t, mean) -> np.ndarray:
        if self.discrete:
            raise ModelError(f"{self.name} law has no density")
        t = np.asarray(t, dtype=float)
        m = np.asarray(mean, dtype=float)
        if self.name in ("normal", "laplace", "student_t"):
            return self._std().pdf((t - m) / self.scale) / self.scale
        if self.name == "exponential":
            return stats.expon.pdf(t, scale=m)
        return stats.expon.pdf(-t, scale=-m)

    def abs_dev(self, t, mean) -> np.ndarray:
        """E|Y - t|."""
        t = np.asarray(t, dtype=float)
        m = np.asarray(mean, dtype=float)
        s = self.scale
        if self.name == "normal":
            u = (t - m) / s
            return s * (u * (2 * special.ndtr(u) - 1) + 2 * stats.norm.pdf(u))
        if self.name == "laplace":
            a = np.abs(t - m)
            return a + s * np.exp(-a / s)
        if self.name == "student_t":
            nu = self.df
            u = (t - m) / s
            tail = (nu + u**2) / (nu - 1) * stats.t.pdf(u, nu)
            return s * (u * (2 * stats.t.cdf(u, nu) - 1) + 2 * tail)
        if self.name == "bernoulli":
            return m * np.abs(1 - t) + (1 - m) * np.abs(t)
        if self.name in ("exponential", "neg_exponential"):
            sign = 1.0 if self.name == "exponential" else -1.0
            beta = sign * m
            u = sign * t
            # E|E - u| for E ~ Exp(mean beta)
            return np.where(u <= 0, beta - u, u - beta + 2 * beta * np.exp(-u / beta))
        # poisson: E|Y - t| = E(Y - t) + 2 E(t - Y)^+
        t_b, m_b = np.broadcast_arrays(t, m)
        out = np.empty(t_b.shape)
        for idx in np.ndindex(t_b.shape):
            ti, mi = t_b[idx], m_b[idx]
            ks = np.arange(0, max(int(np.floor(ti)), -1) + 1)
            out[idx] = mi - ti + 2 * np.sum((ti - ks) * stats.poisson.pmf(ks, mi))
        return out


class _Reflected:
    """Moments of -X for a frozen scipy law X."""

    def __init__(self, base):
        self.base = base

    def moment(self, j):
        return (-1) ** j * self.base.moment(j)


# ---------------------------------------------------------------------- #
# truth
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class TruthSpec:
    """Description of the data generating law.

    Use the constructors :meth:`in_family`, :meth:`custom_mean` and
    :meth:`contaminated`.
    """

    kind: str
    theta: np.ndarray | None = None
    mean: np.ndarray | None = None
    law: Law | None = None
    base: "TruthSpec | None" = None
    fraction: float = 0.0
    contaminant: Law | None = None
    contaminant_mean: float = 0.0

    @classmethod
    def in_family(cls, theta, law: Law | None = None) -> "TruthSpec":
        """Truth inside the model; ``law`` gives the LAD residual law."""
        return cls("in_family", theta=np.asarray(theta, dtype=float), law=law)

    @classmethod
    def custom_mean(cls, mean, law: Law) -> "TruthSpec":
        return cls("custom_mean", mean=np.asarray(mean, dtype=float), law=law)

    @classmethod
    def contaminated(
        cls, base: "TruthSpec", fraction: float, contaminant: Law, contaminant_mean=0.0
    ) -> "TruthSpec":
        if base.kind == "contaminated":
            raise ModelError("nested contamination is not supported")
        if not 0 <= fraction <= 1:
            raise ModelError("contamination fraction must lie in [0, 1]")
        return cls(
            "contaminated",
            base=base,
            fraction=float(fraction),
            contaminant=contaminant,
            contaminant_mean=float(contaminant_mean),
        )


@dataclass(frozen=True, eq=False)
class Population:
    """Per-observation law resolved from a truth spec.

    Observation ``i`` follows ``law`` with mean ``means[i]``; with
    probability ``fraction`` it is replaced by a draw from ``contaminant``.
    """

    means: np.ndarray
    law: Law
    fraction: float = 0.0
    contaminant: Law | None = None
    contaminant_mean: float = 0.0
    theta_true: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def _cmean(self):
        return np.full(self.n, self.contaminant_mean)

    def sample(self, rng: np.random.Generator, return_labels: bool = False):
        y = self.law.sample(self.means, rng)
        flags = np.zeros(self.n, dtype=bool)
        if self.fraction > 0:
            flags = rng.random(self.n) < self.fraction
            yc = self.contaminant.sample(self._cmean(), rng)
            y = np.where(flags, yc, y)
        if return_labels:
            return y, flags
        return y

    def _mix(self, fn_base, fn_cont):
        out = fn_base()
        if self.fraction > 0:
            out = (1 - self.fraction) * out + self.fraction * fn_cont()
        return out

    def expected(self) -> np.ndarray:
        """E Y_i."""
        return self._mix(lambda: self.means.copy(), self._cmean)

    def raw_moments(self, k: int = 4) -> np.ndarray:
        """E Y_i^j, shape (n, k)."""
        return self._mix(
            lambda: self.law.raw_moments(self.means, k),
            lambda: self.contaminant.raw_moments(self._cmean(), k),
        )

    def var(self) -> np.ndarray:
        vb = self.law.var(self.means)
        if self.fraction == 0:
            return vb
        f = self.fraction
        cm = self._cmean()
        second = (1 - f) * (vb + self.means**2) + f * (self.contaminant.var(cm) + cm**2)
        return second - self.expected() ** 2

    def cdf(self, t) -> np.ndarray:
        return self._mix(
            lambda: self.law.cdf(t, self.means),
            lambda: self.contaminant.cdf(t, self._cmean()),
        )

    def pdf(self, t) -> np.ndarray:
        return self._mix(
            lambda: self.law.pdf(t, self.means),
            lambda: self.contaminant.pdf(t, self._cmean()),
        )

    def abs_dev(self, t) -> np.ndarray:
        return self._mix(
            lambda: self.law.abs_dev(t, self.means),
            lambda: self.contaminant.abs_dev(t, self._cmean()),
        )

    @property
    def has_density(self) -> bool:
        if self.law.discrete:
            return False
        return not (self.fraction > 0 and self.contaminant.discrete)


def _resolve(truth: TruthSpec, n: int, mean_of_theta, default_law: Law | None):
    if truth.kind == "contaminated":
        base = _resolve(truth.base, n, mean_of_theta, default_law)
        if truth.contaminant is None:
            raise ModelError("contaminated truth needs a contaminant law")
        truth.contaminant.check_mean(truth.contaminant_mean)
        return Population(
            base.means, base.law, truth.fraction, truth.contaminant, truth.contaminant_mean
        )
    if truth.kind == "in_family":
        law = truth.law if truth.law is not None else default_law
        if law is None:
            raise ModelError("in-family truth needs a residual law for this model")
        means = np.broadcast_to(mean_of_theta(truth.theta), (n,)).astype(float)
        return Population(means, law, theta_true=truth.theta.copy())
    if truth.kind == "custom_mean":
        if truth.law is None:
            raise ModelError("custom-mean truth needs a law")
        means = np.broadcast_to(np.asarray(truth.mean, dtype=float), (n,)).copy()
        truth.law.check_mean(means)
        return Population(means, truth.law)
    raise ModelError(f"unknown truth kind {truth.kind!r}")


# ---------------------------------------------------------------------- #
# models
# ---------------------------------------------------------------------- #


class Model(ABC):
    """Quasi log-likelihood ``L(theta) = sum_i l(y_i, theta)`` plus its truth."""

    model_class: str = ""
    design: np.ndarray | None
    population: Population

    @property
    @abstractmethod
    def p(self) -> int: ...

    @property
    def n(self) -> int:
        return self.population.n

    @abstractmethod
    def loglik_obs(self, y, theta) -> np.ndarray:
        """Per-observation log-density, shape (n,)."""

    @abstractmethod
    def grad_obs(self, y, theta) -> np.ndarray:
        """Per-observation gradient, shape (n, p)."""

    @abstractmethod
    def hess_obs(self, y, theta) -> np.ndarray:
        """Per-observation Hessian, shape (n, p, p)."""

    def loglik(self, y, theta) -> float:
        return float(np.sum(self.loglik_obs(y, theta)))

    def grad(self, y, theta) -> np.ndarray:
        return self.grad_obs(y, theta).sum(axis=0)

    def hess(self, y, theta) -> np.ndarray:
        return self.hess_obs(y, theta).sum(axis=0)

    @abstractmethod
    def expected_loglik(self, theta) -> float:
        """E L(theta) under the truth, up to a constant free of theta."""

    @abstractmethod
    def expected_hess(self, theta) -> np.ndarray:
        """Hessian of E L at theta (the matrix -D^2(theta))."""

    def stochastic_grad(self, y, theta) -> np.ndarray:
        """Gradient of zeta = L - E L at theta."""
        return self.grad(y, theta) - self.expected_grad(theta)

    @abstractmethod
    def expected_grad(self, theta) -> np.ndarray: ...

    def sample(self, seed) -> np.ndarray:
        return sample_data(self, seed)


def sample_data(model: Model, seed) -> np.ndarray:
    """Draw one data vector; deterministic given ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return model.population.sample(rng)


class GlmModel(Model):
    """Canonical GLM ``l(y, theta) = y psi' theta - d(psi' theta)``."""

    model_class = "glm"

    def __init__(self, design, kind: str, population: Population, S):
        self.design = design
        self.kind = kind
        self.population = population
        self.S = S

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def _w(self, theta) -> np.ndarray:
        w = self.design @ np.asarray(theta, dtype=float)
        if self.kind == "exponential" and np.any(w <= EXP_GUARD):
            raise DomainError("exponential GLM needs psi' theta > 1e-8 for all i")
        return w

    def loglik_obs(self, y, theta):
        w = self._w(theta)
        return y * w - glm_cumulant(self.kind, w)[0]

    def grad_obs(self, y, theta):
        w = self._w(theta)
        return (y - glm_cumulant(self.kind, w)[1])[:, None] * self.design

    def hess_obs(self, y, theta):
        w = self._w(theta)
        d2 = glm_cumulant(self.kind, w)[2]
        X = self.design
        return -d2[:, None, None] * X[:, :, None] * X[:, None, :]

    def loglik(self, y, theta):
        w = self._w(theta)
        return float(y @ w - glm_cumulant(self.kind, w)[0].sum())

    def grad(self, y, theta):
        w = self._w(theta)
        return self.design.T @ (y - glm_cumulant(self.kind, w)[1])

    def hess(self, y, theta):
        w = self._w(theta)
        d2 = glm_cumulant(self.kind, w)[2]
        return -(self.design.T * d2) @ self.design

    def expected_loglik(self, theta):
        return self.loglik(self.population.expected(), theta)

    def expected_grad(self, theta):
        return self.grad(self.population.expected(), theta)

    def expected_hess(self, theta):
        return self.hess(None, theta)

    def stochastic_grad(self, y, theta=None):
        # linear in theta: sum_i psi_i (y_i - E y_i)
        return self.design.T @ (y - self.population.expected())


def build_glm(design, kind: str, truth: TruthSpec, S=None) -> GlmModel:
    """Construct a canonical GLM.

    ``S`` defaults to the standard deviation of each observation under the
    truth.
    """
    if kind not in GLM_KINDS:
        raise ModelError(f"unknown GLM kind {kind!r}")
    X = check_design(design)
    n, p = X.shape
    if truth.kind == "in_family" or (truth.base is not None and truth.base.kind == "in_family"):
        th = truth.theta if truth.kind == "in_family" else truth.base.theta
        if th.shape != (p,):
            raise ModelError(f"theta_true must have length p = {p}")

    def mean_of_theta(theta):
        return _mean_map(kind, X @ theta)

    pop = _resolve(truth, n, mean_of_theta, family_law(kind))
    if S is None:
        S = np.sqrt(pop.var())
    S = np.broadcast_to(np.asarray(S, dtype=float), (n,)).copy()
    if not np.all(S > 0):
        raise ModelError("S must be strictly positive")
    return GlmModel(X, kind, pop, S)


# ---------------------------------------------------------------------- #
# LAD
# ---------------------------------------------------------------------- #

KDE_DRAWS = 100_000
KDE_MAX_GROUPS = 64


@dataclass(eq=False)
class KdeDensity:
    """Gaussian kernel estimate of each observation's law (Silverman bandwidth).

    Observations sharing a mean share one estimate.
    """

    keys: np.ndarray
    grids: list = field(default_factory=list)
    cdfs: list = field(default_factory=list)
    pdfs: list = field(default_factory=list)
    absdevs: list = field(default_factory=list)

    @classmethod
    def fit(cls, population: Population, seed: int = 20240917) -> "KdeDensity":
        uniq, keys = np.unique(population.means, return_inverse=True)
        if uniq.size > KDE_MAX_GROUPS:
            raise ModelError(
                "residual density unavailable: too many distinct laws for a kernel estimate"
            )
        obj = cls(keys)
        rng = np.random.default_rng(seed)
        for j, m in enumerate(uniq):
            one = Population(
                np.full(KDE_DRAWS, m),
                population.law,
                population.fraction,
                population.contaminant,
                population.contaminant_mean,
            )
            draws = one.sample(rng)
            kde = stats.gaussian_kde(draws, bw_method="silverman")
            h = float(np.sqrt(kde.covariance[0, 0]))
            grid = np.linspace(draws.min() - 6 * h, draws.max() + 6 * h, 4001)
            pts = np.sort(draws)
            cdf = np.empty_like(grid)
            pdf = np.empty_like(grid)
            ad = np.empty_like(grid)
            for a in range(0, grid.size, 200):
                u = (grid[a : a + 200, None] - pts[None, :]) / h
                phi = stats.norm.pdf(u)
                Phi = special.ndtr(u)
                cdf[a : a + 200] = Phi.mean(axis=1)
                pdf[a : a + 200] = phi.mean(axis=1) / h
                ad[a : a + 200] = (h * (u * (2 * Phi - 1) + 2 * phi)).mean(axis=1)
            obj.grids.append(grid)
            obj.cdfs.append(cdf)
            obj.pdfs.append(pdf)
            obj.absdevs.append((ad, float(draws.mean())))
        return obj

    def _eval(self, t, which):
        t = np.asarray(t, dtype=float)
        tb = np.broadcast_to(t, np.broadcast_shapes(t.shape, self.keys.shape))
        out = np.empty(tb.shape)
        for j in range(len(self.grids)):
            sel = self.keys == j
            g = self.grids[j]
            tj = tb[..., sel]
            if which == "cdf":
                out[..., sel] = np.interp(tj, g, self.cdfs[j], left=0.0, right=1.0)
            elif which == "pdf":
                out[..., sel] = np.interp(tj, g, self.pdfs[j], left=0.0, right=0.0)
            else:
                ad, mu = self.absdevs[j]
                inside = np.interp(tj, g, ad)
                outside = np.abs(tj - mu)
                out[..., sel] = np.where((tj < g[0]) | (tj > g[-1]), outside, inside)
        return out

    def cdf(self, t):
        return self._eval(t, "cdf")

    def pdf(self, t):
        return self._eval(t, "pdf")

    def abs_dev(self, t):
        return self._eval(t, "absdev")


class LadModel(Model):
    """Linear median regression ``l(y, theta) = -|y - psi' theta| / 2``."""

    model_class = "lad"

    def __init__(self, design, population: Population, kde: KdeDensity | None = None):
        self.design = design
        self.population = population
        self.kde = kde

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def density_source(self) -> str:
        return "kde" if self.kde is not None else "analytic"

    def loglik_obs(self, y, theta):
        return -0.5 * np.abs(y - self.design @ theta)

    def grad_obs(self, y, theta):
        return 0.5 * np.sign(y - self.design @ theta)[:, None] * self.design

    def hess_obs(self, y, theta):
        n, p = self.design.shape
        return np.zeros((n, p, p))

    def loglik(self, y, theta):
        return float(-0.5 * np.abs(y - self.design @ theta).sum())

    def grad(self, y, theta):
        return 0.5 * self.design.T @ np.sign(y - self.design @ theta)

    def hess(self, y, theta):
        p = self.p
        return np.zeros((p, p))

    # truth-side quantities
    def cdf(self, t):
        return self.kde.cdf(t) if self.kde is not None else self.population.cdf(t)

    def pdf(self, t):
        return self.kde.pdf(t) if self.kde is not None else self.population.pdf(t)

    def b(self, theta) -> np.ndarray:
        """b_i(theta) = P(Y_i - psi_i' theta <= 0)."""
        return self.cdf(self.design @ theta)

    def residual_density(self, u, theta_star) -> np.ndarray:
        """p_i(u): density of Y_i - psi_i' theta_star at u."""
        return self.pdf(self.design @ theta_star + u)

    def expected_loglik(self, theta):
        w = self.design @ np.asarray(theta, dtype=float)
        src = self.kde if self.kde is not None else self.population
        return float(-0.5 * src.abs_dev(w).sum())

    def expected_grad(self, theta):
        # d/dtheta of -E|Y - w|/2 is (1/2 - F(w)) psi
        return self.design.T @ (0.5 - self.b(theta))

    def expected_hess(self, theta):
        dens = self.pdf(self.design @ theta)
        return -(self.design.T * dens) @ self.design


def build_lad(design, truth: TruthSpec, allow_kde: bool = True, kde_seed: int = 20240917) -> LadModel:
    """Construct a linear median regression model.

    Residual densities are analytic for the continuous named laws; for
    other laws a kernel estimate is built from an oracle sample when
    ``allow_kde`` is true.
    """
    X = check_design(design)
    n, p = X.shape
    pop = _resolve(truth, n, lambda th: X @ th, Law("laplace"))
    if pop.theta_true is not None and pop.theta_true.shape != (p,):
        raise ModelError(f"theta_true must have length p = {p}")
    kde = None
    if not pop.has_density:
        if not allow_kde:
            raise ModelError("residual density unavailable and no oracle sample allowed")
        kde = KdeDensity.fit(pop, kde_seed)
    return LadModel(X, pop, kde)


# ---------------------------------------------------------------------- #
# i.i.d. exponential-form families
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class _Family:
    """l(y, theta) = T(y)' eta(theta) - A(theta) + h(y)."""

    name: str
    p: int
    k: int  # highest raw moment needed for Cov T
    T: Callable
    eta: Callable
    jac: Callable  # (kT, p)
    hess_eta: Callable  # (kT, p, p)
    A: Callable
    gA: Callable
    hA: Callable
    h: Callable
    mom_start: Callable  # data or moments (m1, m2) -> theta
    mean_of: Callable  # theta -> (law, mean) of the in-family law


def _normal_family():
    def eta(t):
        e = np.exp(-2 * t[1])
        return np.array([t[0] * e, -0.5 * e])

    def jac(t):
        e = np.exp(-2 * t[1])
        return np.array([[e, -2 * t[0] * e], [0.0, e]])

    def hess_eta(t):
        e = np.exp(-2 * t[1])
        return np.array(
            [[[0.0, -2 * e], [-2 * e, 4 * t[0] * e]], [[0.0, 0.0], [0.0, -2 * e]]]
        )

    def A(t):
        return 0.5 * t[0] ** 2 * np.exp(-2 * t[1]) + t[1]

    def gA(t):
        e = np.exp(-2 * t[1])
        return np.array([t[0] * e, -t[0] ** 2 * e + 1])

    def hA(t):
        e = np.exp(-2 * t[1])
        return np.array([[e, -2 * t[0] * e], [-2 * t[0] * e, 2 * t[0] ** 2 * e]])

    return _Family(
        "normal",
        2,
        4,
        lambda y: np.stack([y, y**2], axis=-1),
        eta,
        jac,
        hess_eta,
        A,
        gA,
        hA,
        lambda y: np.full(np.shape(y), -0.5 * np.log(2 * np.pi)),
        lambda m1, m2: np.array([m1, 0.5 * np.log(max(m2 - m1**2, 1e-300))]),
        lambda t: (Law("normal", scale=float(np.exp(t[1]))), float(t[0])),
    )


def _exponential_family():
    return _Family(
        "exponential",
        1,
        2,
        lambda y: np.asarray(y)[..., None],
        lambda t: np.array([-np.exp(t[0])]),
        lambda t: np.array([[-np.exp(t[0])]]),
        lambda t: np.array([[[-np.exp(t[0])]]]),
        lambda t: -t[0],
        lambda t: np.array([-1.0]),
        lambda t: np.zeros((1, 1)),
        lambda y: np.zeros(np.shape(y)),
        lambda m1, m2: np.array([-np.log(m1)]),
        lambda t: (Law("exponential"), float(np.exp(-t[0]))),
    )


def _poisson_family():
    return _Family(
        "poisson",
        1,
        2,
        lambda y: np.asarray(y)[..., None],
        lambda t: np.array([t[0]]),
        lambda t: np.array([[1.0]]),
        lambda t: np.zeros((1, 1, 1)),
        lambda t: np.exp(t[0]),
        lambda t: np.array([np.exp(t[0])]),
        lambda t: np.array([[np.exp(t[0])]]),
        lambda y: -special.gammaln(np.asarray(y) + 1),
        lambda m1, m2: np.array([np.log(m1)]),
        lambda t: (Law("poisson"), float(np.exp(t[0]))),
    )


_FAMILIES = {
    "normal": _normal_family,
    "exponential": _exponential_family,
    "poisson": _poisson_family,
}


class IidModel(Model):
    """I.i.d. observations from a smooth parametric family.

    The families are written as ``T(y)' eta(theta) - A(theta) + h(y)``:

    * ``normal``: theta = (mean, log sd);
    * ``exponential``: theta = log rate;
    * ``poisson``: theta = log rate.
    """

    model_class = "iid"
    design = None

    def __init__(self, family: _Family, population: Population):
        self.family = family
        self.population = population
        self._suff = None

    @property
    def p(self) -> int:
        return self.family.p

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p,) or not np.all(np.isfinite(theta)):
            raise DomainError("parameter has wrong shape or is not finite")
        return theta

    def loglik_obs(self, y, theta):
        f = self.family
        theta = self._check(theta)
        return f.T(y) @ f.eta(theta) - f.A(theta) + f.h(y)

    def grad_obs(self, y, theta):
        f = self.family
        theta = self._check(theta)
        return f.T(y) @ f.jac(theta) - f.gA(theta)

    def hess_obs(self, y, theta):
        f = self.family
        theta = self._check(theta)
        return np.einsum("nk,kij->nij", f.T(y), f.hess_eta(theta)) - f.hA(theta)

    def loglik(self, y, theta):
        f = self.family
        theta = self._check(theta)
        return float(f.T(y).sum(axis=0) @ f.eta(theta) - y.size * f.A(theta) + f.h(y).sum())

    def grad(self, y, theta):
        f = self.family
        theta = self._check(theta)
        return f.T(y).sum(axis=0) @ f.jac(theta) - y.size * f.gA(theta)

    def hess(self, y, theta):
        f = self.family
        theta = self._check(theta)
        tsum = f.T(y).sum(axis=0)
        return np.einsum("k,kij->ij", tsum, f.hess_eta(theta)) - y.size * f.hA(theta)

    # moments of the sufficient statistic under the truth
    def suff_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of T(Y_1) under the truth."""
        if self._suff is None:
            self._suff = self._suff_moments()
        return self._suff

    def _suff_moments(self):
        mom = self.population.raw_moments(self.family.k)[0]
        if not np.all(np.isfinite(mom)):
            raise ModelError("truth lacks the moments needed by this family")
        if self.family.name == "normal":
            m1, m2, m3, m4 = mom
            mean = np.array([m1, m2])
            cov = np.array([[m2 - m1**2, m3 - m1 * m2], [m3 - m1 * m2, m4 - m2**2]])
        else:
            m1, m2 = mom
            mean = np.array([m1])
            cov = np.array([[m2 - m1**2]])
        return mean, cov

    def expected_loglik(self, theta):
        f = self.family
        theta = self._check(theta)
        mT, _ = self.suff_moments()
        return float(self.n * (mT @ f.eta(theta) - f.A(theta)))

    def expected_grad(self, theta):
        f = self.family
        theta = self._check(theta)
        mT, _ = self.suff_moments()
        return self.n * (mT @ f.jac(theta) - f.gA(theta))

    def expected_hess(self, theta):
        f = self.family
        theta = self._check(theta)
        mT, _ = self.suff_moments()
        return self.n * (np.einsum("k,kij->ij", mT, f.hess_eta(theta)) - f.hA(theta))

    def moment_start(self, y) -> np.ndarray:
        """Method-of-moments starting value from data."""
        m1 = float(np.mean(y))
        m2 = float(np.mean(y**2))
        if self.family.name in ("exponential", "poisson") and m1 <= 0:
            return np.zeros(self.p)
        return self.family.mom_start(m1, m2)


def build_iid(family: str, n: int, truth: TruthSpec) -> IidModel:
    """Construct an i.i.d. model with ``n`` observations."""
    if family not in _FAMILIES:
        raise ModelError(f"unknown i.i.d. family {family!r}")
    fam = _FAMILIES[family]()
    if n < 1:
        raise ModelError("n must be positive")

    def resolve(t: TruthSpec) -> Population:
        if t.kind == "in_family":
            if t.theta.shape != (fam.p,):
                raise ModelError(f"theta_true must have length p = {fam.p}")
            law, m = fam.mean_of(t.theta)
            return Population(np.full(n, m), law, theta_true=t.theta.copy())
        if t.kind == "custom_mean":
            means = np.broadcast_to(np.asarray(t.mean, dtype=float), (n,)).copy()
            if not np.all(means == means[0]):
                raise ModelError("i.i.d. truth needs a common mean")
            t.law.check_mean(means)
            return Population(means, t.law)
        base = resolve(t.base)
        return Population(base.means, base.law, t.fraction, t.contaminant, t.contaminant_mean)

    return IidModel(fam, resolve(truth))
