"""Simulation studies: strict-clock MLE recovery and sampler efficiency comparison."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .alignment import SitePatternAlignment, compress_patterns, simulate_alignment
from .clock import ClockParameterization, ClockPosterior, ClockPriors, branch_lengths_from_clock, sample_clock
from .engine import LikelihoodEngine, LikelihoodError
from .inference import (
    HmcConfig,
    LbfgsConfig,
    UnivariateConfig,
    ess_table,
    hmc_sample,
    lbfgs_minimize,
    univariate_baseline_sample,
)
from .substitution import RateCategories, SubstitutionModel, build_named_model
from .tree import Tree, random_coalescent_tree

log = logging.getLogger(__name__)

KERNELS = ("univariate", "vhmc", "phmc")


@dataclass
class ClockDataset:
    tree: Tree
    alignment: SitePatternAlignment
    model: SubstitutionModel
    categories: RateCategories
    clock: ClockParameterization
    branch_lengths: np.ndarray


def simulate_clock_dataset(
    n_tips: int,
    sites: int,
    *,
    mu: float = 0.003,
    psi: float = 0.0,
    time_scale: float = 25.0,
    model: Optional[SubstitutionModel] = None,
    categories: Optional[RateCategories] = None,
    seed: int = 0,
) -> ClockDataset:
    """Coalescent tree with node times, clock rates and a simulated alignment."""
    rng = np.random.default_rng(seed)
    tree = random_coalescent_tree(n_tips, rng, scale=time_scale)
    model = model or build_named_model("HKY85", {"kappa": 2.0}, [0.3, 0.2, 0.2, 0.3])
    categories = categories or RateCategories.single()
    clock = sample_clock(tree, mu, psi, rng) if psi > 0 else ClockParameterization.strict(mu, tree.branch_count)
    b = branch_lengths_from_clock(tree, clock)
    raw = simulate_alignment(tree, model, categories, sites, rng, branch_lengths=b)
    return ClockDataset(tree, compress_patterns(raw), model, categories, clock, b)


# -- maximum likelihood ----------------------------------------------------------


def fit_branch_lengths(engine: LikelihoodEngine, b0, config: Optional[LbfgsConfig] = None):
    """Maximize the likelihood over log branch lengths with L-BFGS."""

    def objective(z):
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            b = np.exp(z)
            try:
                report = engine.gradient(b)
            except (LikelihoodError, ValueError):
                # the line search backs off from non-finite values
                return np.inf, np.full(z.size, np.nan)
        return -report.log_likelihood, -(b * report.branch_gradient)

    return lbfgs_minimize(objective, np.log(np.asarray(b0, dtype=float)), config)


def observed_information(engine: LikelihoodEngine, b, h: float = 1e-6) -> np.ndarray:
    """Negative Hessian over branch lengths by central differences of the analytic gradient."""
    b = np.asarray(b, dtype=float)
    n = b.size
    H = np.empty((n, n))
    for i in range(n):
        step = h * max(b[i], 1e-3)
        e = np.zeros(n)
        e[i] = step
        gp = engine.gradient(b + e).branch_gradient
        gm = engine.gradient(np.maximum(b - e, 0.0)).branch_gradient
        H[i] = (gp - gm) / (2 * step)
    return -0.5 * (H + H.T)


# -- posterior sampling ------------------------------------------------------------


def run_kernels(
    posterior: ClockPosterior,
    z0: np.ndarray,
    kernels: Sequence[str] = KERNELS,
    *,
    iterations: int = 500,
    n_steps: int = 20,
    seed: int = 0,
    warmup: Optional[int] = None,
    matched_seconds: Optional[float] = None,
    match_wall_time: bool = True,
    hmc_options: Optional[dict] = None,
):
    """Run the requested kernels from ``z0``; returns ``{kernel: Chain}``.

    HMC kernels run ``iterations`` draws.  With ``match_wall_time`` the
    univariate kernel gets the same sampling wall time as the slowest HMC
    kernel (or ``matched_seconds``), so its draw count depends on timing;
    otherwise it records ``iterations`` sweeps and the run is reproducible.
    ``hmc_options`` passes extra ``HmcConfig`` fields.
    Chains record the full effects-layout state ``(log mu, log psi, log eps)``.
    """
    chains = {}
    record = posterior.expand
    for name in kernels:
        if name == "univariate":
            continue
        cfg = HmcConfig(
            n_steps=n_steps,
            iterations=iterations,
            warmup=warmup,
            mass="adaptive_diagonal" if name == "phmc" else "identity",
            seed=seed + KERNELS.index(name),
            **(hmc_options or {}),
        )
        log.info("running %s", name)
        chains[name] = hmc_sample(
            posterior.value_and_gradient_free, z0, cfg, posterior.hessian_diagonal_free, record=record
        )
    if "univariate" in kernels:
        budget = None
        if match_wall_time:
            budget = matched_seconds or max((c.seconds for c in chains.values()), default=None)
        cfg = UnivariateConfig(
            iterations=10**9 if budget else iterations,
            warmup=warmup if warmup is not None else max(iterations // 5, 1),
            seed=seed + 100,
            max_seconds=budget,
        )
        log.info("running univariate for %.1fs", budget or float("nan"))
        chains["univariate"] = univariate_baseline_sample(posterior.log_posterior_free, z0, cfg, record=record)
    return {name: chains[name] for name in kernels if name in chains}


def kernel_ess_table(chains, posterior: ClockPosterior) -> list[dict]:
    """Min/median ESS per second over branch rates, one row per kernel."""
    return ess_table({name: (posterior.rates_from_states(c.samples), c.seconds) for name, c in chains.items()})
