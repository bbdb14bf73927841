"""Random-effects relaxed clock.

Branch rates are ``r_i = mu * eps_i`` with i.i.d. lognormal effects of mean 1
and variance ``psi**2``; branch lengths are ``b_i = r_i * (t_i - t_parent(i))``.
Sampling and optimization work on the unconstrained vector

    x = (log mu, log psi, log eps_1, ..., log eps_{2N-2})

and the log-posterior carries the Jacobian of that log transform.

Samplers may instead move in rate coordinates
``y = (log mu, log psi, log r_1, ..., log r_{2N-2})`` with
``log r_i = log mu + log eps_i``.  The map is linear with unit Jacobian, so
densities agree; the data pin the rates directly, so a diagonal mass matrix
fits this geometry far better than the effects layout, where ``mu`` and every
``eps_i`` are strongly anti-correlated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import LikelihoodEngine, LikelihoodError
from .tree import Tree

MU, PSI, EPS0 = 0, 1, 2


def lognormal_hyperparams(psi: float) -> tuple[float, float]:
    """Location and scale of the lognormal with mean 1 and variance ``psi**2``."""
    if psi < 0:
        raise ValueError("psi must be nonnegative")
    v = math.log1p(psi * psi)
    return -0.5 * v, math.sqrt(v)


@dataclass
class ClockParameterization:
    mu: float
    psi: float
    epsilon: np.ndarray

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=float)
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.psi < 0:
            raise ValueError("psi must be nonnegative")
        if np.any(self.epsilon <= 0):
            raise ValueError("random effects must be positive")

    @classmethod
    def strict(cls, mu: float, branch_count: int) -> "ClockParameterization":
        return cls(mu, 0.0, np.ones(branch_count))

    @property
    def rates(self) -> np.ndarray:
        return self.mu * self.epsilon

    def to_unconstrained(self) -> np.ndarray:
        if self.psi == 0:
            raise ValueError("psi = 0 has no unconstrained image; use the strict profile")
        return np.concatenate([[math.log(self.mu), math.log(self.psi)], np.log(self.epsilon)])

    @classmethod
    def from_unconstrained(cls, x) -> "ClockParameterization":
        x = np.asarray(x, dtype=float)
        return cls(math.exp(x[MU]), math.exp(x[PSI]), np.exp(x[EPS0:]))

    def copy(self) -> "ClockParameterization":
        return ClockParameterization(self.mu, self.psi, self.epsilon.copy())


def branch_lengths_from_clock(tree: Tree, clock: ClockParameterization) -> np.ndarray:
    if tree.node_time is None:
        raise ValueError("clock branch lengths need node times")
    return clock.rates * tree.durations()


def sample_clock(tree: Tree, mu: float, psi: float, rng: np.random.Generator) -> ClockParameterization:
    """Draw random effects from their lognormal prior."""
    loc, scale = lognormal_hyperparams(psi)
    return ClockParameterization(mu, psi, np.exp(rng.normal(loc, scale, tree.branch_count)))


@dataclass
class ClockPriors:
    """Prior choices.

    ``mu_prior`` is ``"flat_log"`` (density ``1/mu``, i.e. flat in ``log mu``)
    or ``"lognormal"`` with ``mu_meanlog``/``mu_sdlog``.  ``psi`` has an
    exponential prior with mean ``psi_mean``.  ``flat=True`` drops every prior
    and Jacobian term; ``likelihood=False`` samples the prior alone.
    """

    mu_prior: str = "flat_log"
    mu_meanlog: float = 0.0
    mu_sdlog: float = 1.0
    psi_mean: float = 1.0 / 3.0
    flat: bool = False
    likelihood: bool = True

    def __post_init__(self):
        if self.mu_prior not in ("flat_log", "lognormal"):
            raise ValueError(f"unknown mu prior {self.mu_prior!r}")
        if self.mu_sdlog <= 0 or self.psi_mean <= 0:
            raise ValueError("prior scales must be positive")

    @classmethod
    def flat_testing(cls) -> "ClockPriors":
        return cls(flat=True)


class ClockPosterior:
    """Log-posterior and derivatives over the unconstrained clock vector.

    ``fixed`` pins ``"mu"`` and/or ``"psi"`` at given values; ``strict=True``
    freezes every random effect at 1 (the ``psi = 0`` boundary) leaving only
    ``log mu`` free.  Methods suffixed ``_free`` act on the free sub-vector
    of the sampling coordinates, which are the effects layout by default or
    rate coordinates with ``coordinates="rates"``.  Methods without the suffix
    always take the full effects-layout vector.
    """

    def __init__(
        self,
        engine: Optional[LikelihoodEngine],
        tree: Tree,
        priors: Optional[ClockPriors] = None,
        fixed: Optional[dict] = None,
        strict: bool = False,
        coordinates: str = "effects",
    ):
        if coordinates not in ("effects", "rates"):
            raise ValueError("coordinates must be 'effects' or 'rates'")
        self.engine = engine
        self.tree = tree
        self.durations = tree.durations()
        self.priors = priors or ClockPriors()
        if self.priors.likelihood and engine is None:
            raise ValueError("an engine is required unless the likelihood is disabled")
        self.strict = strict
        # with every effect frozen the two coordinate systems coincide
        self.rate_coordinates = coordinates == "rates" and not strict
        self.fixed = dict(fixed or {})
        if strict:
            self.fixed["psi"] = 0.0
        self.dim = 2 + tree.branch_count
        free = np.ones(self.dim, dtype=bool)
        self.base = np.zeros(self.dim)
        if "mu" in self.fixed:
            free[MU] = False
            self.base[MU] = math.log(self.fixed["mu"])
        if strict:
            free[PSI] = False
            free[EPS0:] = False
            self.base[PSI] = -np.inf
        elif "psi" in self.fixed:
            free[PSI] = False
            self.base[PSI] = math.log(self.fixed["psi"])
        self.free = np.flatnonzero(free)
        self.evaluations = 0

    # -- layout helpers -----------------------------------------------------

    def to_sampling(self, x) -> np.ndarray:
        """Effects-layout vector to sampling coordinates."""
        y = np.array(x, dtype=float)
        if self.rate_coordinates:
            y[EPS0:] += y[MU]
        return y

    def from_sampling(self, y) -> np.ndarray:
        x = np.array(y, dtype=float)
        if self.rate_coordinates:
            x[EPS0:] -= x[MU]
        return x

    def expand(self, z) -> np.ndarray:
        """Free sampling coordinates to the full effects-layout vector."""
        y = self.to_sampling(self.base)
        y[self.free] = z
        return self.from_sampling(y)

    def restrict(self, x) -> np.ndarray:
        """Full effects-layout vector to free sampling coordinates."""
        return self.to_sampling(x)[self.free]

    def initial_state(self, clock: ClockParameterization) -> np.ndarray:
        x = self.base.copy()
        x[MU] = math.log(clock.mu)
        if not self.strict:
            x[PSI] = math.log(clock.psi) if "psi" not in self.fixed else self.base[PSI]
            x[EPS0:] = np.log(clock.epsilon)
        if "mu" in self.fixed:
            x[MU] = self.base[MU]
        return x

    def clock(self, x) -> ClockParameterization:
        x = np.asarray(x, dtype=float)
        if self.strict:
            return ClockParameterization.strict(math.exp(x[MU]), self.tree.branch_count)
        return ClockParameterization.from_unconstrained(x)

    def branch_lengths(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        log_r = x[MU] + (0.0 if self.strict else x[EPS0:])
        with np.errstate(over="ignore"):
            return np.exp(log_r) * self.durations

    # -- prior pieces ---------------------------------------------------------

    def _prior_terms(self, x, order: int):
        """Log prior plus Jacobian, its gradient, and optionally its Hessian diagonal."""
        p = self.priors
        grad = np.zeros(self.dim)
        hess = np.zeros(self.dim)
        if p.flat:
            return 0.0, grad, hess
        lp = 0.0
        if p.mu_prior == "lognormal":
            d = x[MU] - p.mu_meanlog
            lp += -0.5 * math.log(2 * math.pi * p.mu_sdlog**2) - 0.5 * d * d / p.mu_sdlog**2
            grad[MU] = -d / p.mu_sdlog**2
            hess[MU] = -1.0 / p.mu_sdlog**2
        if self.strict:
            return lp, grad, hess
        # Exponential(mean psi_mean) on psi plus the log-psi Jacobian.
        psi = math.exp(x[PSI]) if x[PSI] < 700 else math.inf
        v = math.log1p(psi * psi)
        # below 1e-100 the cubic term in the curvature underflows
        if not (1e-100 < v < math.inf):
            return -math.inf, grad * np.nan, hess * np.nan
        rate = 1.0 / p.psi_mean
        lp += math.log(rate) - rate * psi + x[PSI]
        grad[PSI] = 1.0 - rate * psi
        hess[PSI] = -rate * psi
        # Lognormal effects: log eps_i ~ Normal(-v/2, v) with v = log(1 + psi^2).
        e = x[EPS0:]
        n = e.size
        s1, s2 = e.sum(), (e * e).sum()
        lp += -0.5 * n * math.log(2 * math.pi * v) - s2 / (2 * v) - 0.5 * s1 - n * v / 8
        grad[EPS0:] = -e / v - 0.5
        hess[EPS0:] = -1.0 / v
        dv = 2 * psi * psi / (1 + psi * psi)
        d2v = 4 * psi * psi / ((1 + psi * psi) * (1 + psi * psi))
        f1 = -n / (2 * v) + s2 / (2 * v * v) - n / 8
        f2 = n / (2 * v * v) - s2 / v**3
        grad[PSI] += f1 * dv
        hess[PSI] += f2 * dv * dv + f1 * d2v
        return lp, grad, hess

    # -- posterior ------------------------------------------------------------

    def log_likelihood(self, x) -> float:
        if not self.priors.likelihood:
            return 0.0
        return self.engine.log_likelihood(self.branch_lengths(x))

    def log_posterior(self, x) -> float:
        x = np.asarray(x, dtype=float)
        self.evaluations += 1
        try:
            with np.errstate(all="ignore"):  # extreme proposals are rejected as -inf
                ll = self.log_likelihood(x)
        except (LikelihoodError, ValueError):
            return -np.inf
        return ll + self._prior_terms(x, 0)[0]

    def value_and_gradient(self, x, hessian: bool = False):
        """``(log posterior, gradient[, hessian diagonal])`` over the full vector."""
        x = np.asarray(x, dtype=float)
        self.evaluations += 1
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            lp, grad, hess = self._prior_terms(x, 2 if hessian else 1)
        if not np.isfinite(lp):
            return (lp, grad, hess) if hessian else (lp, grad)
        if self.priors.likelihood:
            b = self.branch_lengths(x)
            try:
                with np.errstate(all="ignore"):
                    report = self.engine.gradient(b, hessian=hessian)
            except (LikelihoodError, ValueError):
                nan = np.full(self.dim, np.nan)
                return (-np.inf, nan, nan) if hessian else (-np.inf, nan)
            lp += report.log_likelihood
            bg = b * report.branch_gradient  # d loglik / d log b_i
            grad[MU] += bg.sum()
            if not self.strict:
                grad[EPS0:] += bg
            if hessian:
                d2 = b * b * report.hessian_diagonal + bg
                # off-diagonal likelihood curvature is not available; diagonal sum only
                hess[MU] += d2.sum()
                if not self.strict:
                    hess[EPS0:] += d2
        return (lp, grad, hess) if hessian else (lp, grad)

    def gradient(self, x) -> np.ndarray:
        return self.value_and_gradient(x)[1]

    # free-coordinate views used by the optimizers and samplers
    def log_posterior_free(self, z) -> float:
        return self.log_posterior(self.expand(z))

    def _gradient_to_sampling(self, g):
        if self.rate_coordinates:
            g = g.copy()
            g[MU] -= g[EPS0:].sum()
        return g

    def value_and_gradient_free(self, z):
        lp, g = self.value_and_gradient(self.expand(z))
        return lp, self._gradient_to_sampling(g)[self.free]

    def hessian_diagonal_free(self, z) -> np.ndarray:
        """Hessian diagonal in sampling coordinates.

        In rate coordinates the likelihood does not depend on ``log mu`` or
        ``log psi``, so their entries are exact prior second derivatives.
        """
        x = self.expand(z)
        h = self.value_and_gradient(x, hessian=True)[2]
        if self.rate_coordinates:
            prior_h = self._prior_terms(x, 2)[2]
            h = h.copy()
            h[MU] = prior_h[MU] + prior_h[EPS0:].sum()
        return h[self.free]

    def rate_columns(self, z) -> np.ndarray:
        """Branch rates ``mu * eps_i`` for a free-coordinate state."""
        return self.rates_from_states(self.expand(z)[None, :])[0]

    def rates_from_states(self, states) -> np.ndarray:
        """Branch rates for rows of full effects-layout vectors."""
        states = np.atleast_2d(states)
        if self.strict:
            return np.exp(np.repeat(states[:, MU : MU + 1], self.tree.branch_count, axis=1))
        return np.exp(states[:, MU : MU + 1] + states[:, EPS0:])

    def coordinate_names(self) -> list[str]:
        """Column names of the full effects-layout vector."""
        return ["log_mu", "log_psi"] + [f"log_eps_{i}" for i in range(self.tree.branch_count)]


def log_posterior(tree, alignment, model, categories, clock: ClockParameterization, priors=None) -> float:
    engine = LikelihoodEngine(tree, alignment, model, categories)
    strict = clock.psi == 0
    post = ClockPosterior(engine, tree, priors, strict=strict)
    return post.log_posterior(post.initial_state(clock))


def gradient_unconstrained(tree, alignment, model, categories, clock: ClockParameterization, priors=None) -> np.ndarray:
    engine = LikelihoodEngine(tree, alignment, model, categories)
    post = ClockPosterior(engine, tree, priors)
    return post.gradient(clock.to_unconstrained())


def node_time_gradient(engine: LikelihoodEngine, tree: Tree, clock: ClockParameterization) -> np.ndarray:
    """d loglik / d t_k for every internal node ``k`` (tip times held fixed).

    Returned as a length ``N-1`` vector ordered by internal node index.
    """
    b = branch_lengths_from_clock(tree, clock)
    g = engine.gradient(b).branch_gradient
    r = clock.rates
    out = np.zeros(tree.node_count)
    out[:-1] += r * g
    np.subtract.at(out, tree.parent[:-1], r * g)
    return out[tree.tip_count :]
