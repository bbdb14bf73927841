"""Hamiltonian Monte Carlo with an optional Hessian-informed diagonal mass matrix.

The mass matrix ``M`` is the momentum covariance, so a diagonal ``M`` close
to the expected negative Hessian of the log density equalizes the scales the
integrator sees.  During warm-up the sampler evaluates the Hessian diagonal
every ``adapt_interval`` iterations, keeps a running average of the negated
values, clamps it into ``[mass_min, mass_max]`` and installs it as the new
mass.  The step size is tuned by dual averaging.  Both are frozen once
warm-up ends, so retained draws come from a fixed, exactly invariant kernel.

Each iteration scales the step by a uniform draw from ``1 +- step_jitter``.
With a well-matched mass every coordinate oscillates with period ``2 pi`` in
integrator time, so a fixed trajectory length close to a multiple of the
period returns near its start; jitter spreads the integration time and
breaks that resonance without changing the stationary distribution.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

LogpGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class HmcConfig:
    step_size: float = 0.1
    n_steps: int = 20
    mass: str = "identity"  # or "adaptive_diagonal"
    adapt_interval: int = 10
    mass_min: Optional[float] = None  # absolute clamps; default is relative to the median
    mass_max: Optional[float] = None
    relative_clamp: float = 100.0
    target_accept: float = 0.8
    adapt_step_size: bool = True
    iterations: int = 1000
    warmup: Optional[int] = None  # default 20% of iterations
    seed: int = 0
    max_energy_error: float = 1000.0
    step_jitter: float = 0.5  # per-iteration step factor drawn from U(1 - j, 1 + j)

    def __post_init__(self):
        if not self.step_size > 0 or self.n_steps < 1:
            raise ValueError("step size must be positive and n_steps at least 1")
        if self.mass not in ("identity", "adaptive_diagonal"):
            raise ValueError("mass must be 'identity' or 'adaptive_diagonal'")
        if self.mass_min is not None and self.mass_max is not None and not 0 < self.mass_min < self.mass_max:
            raise ValueError("need 0 < mass_min < mass_max")
        if self.adapt_interval < 1 or self.relative_clamp <= 1:
            raise ValueError("invalid adaptation settings")
        if not 0 <= self.step_jitter < 1:
            raise ValueError("step_jitter must lie in [0, 1)")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    @property
    def warmup_iterations(self) -> int:
        return int(0.2 * self.iterations) if self.warmup is None else self.warmup


@dataclass
class Chain:
    """Retained draws (warm-up excluded) and run statistics."""

    samples: np.ndarray
    log_density: np.ndarray
    accepted: np.ndarray
    step_size: float
    mass: np.ndarray
    divergences: int
    gradient_evaluations: int
    seconds: float
    warmup_seconds: float = 0.0
    mass_history: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else float("nan")


def leapfrog(x, p, grad, step: float, n_steps: int, logp_grad: LogpGrad, inv_mass):
    """``n_steps`` leapfrog steps; returns the end state, its log density and gradient."""
    x = x.copy()
    p = p + 0.5 * step * grad
    logp = None
    for k in range(n_steps):
        x = x + step * inv_mass * p
        logp, grad = logp_grad(x)
        if not np.isfinite(logp):
            return x, p, grad, -np.inf
        if k < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return x, p, grad, logp


def kinetic_energy(p, inv_mass) -> float:
    return 0.5 * float(np.sum(inv_mass * p * p))


class DualAveraging:
    """Nesterov dual averaging of ``log step`` toward a target acceptance rate."""

    def __init__(self, step: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10 * step)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_step_bar = 0.0
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_prob)
        log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_step_bar = w * log_step + (1 - w) * self.log_step_bar
        return math.exp(log_step)

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar)


def clamp_mass(h: np.ndarray, mass_min: Optional[float], mass_max: Optional[float], relative: float) -> np.ndarray:
    positive = h[h > 0]
    ref = float(np.median(positive)) if positive.size else 1.0
    lo = ref / relative if mass_min is None else mass_min
    hi = ref * relative if mass_max is None else mass_max
    return np.clip(np.where(h > 0, h, lo), lo, hi)


def _initial_step(x, logp, grad, logp_grad, inv_mass, rng, step):
    """Double or halve the step until one-step acceptance crosses 1/2."""
    p = rng.standard_normal(x.size) / np.sqrt(inv_mass)
    h0 = logp - kinetic_energy(p, inv_mass)

    def accept_log(s):
        _, p1, _, lp1 = leapfrog(x, p, grad, s, 1, logp_grad, inv_mass)
        return (lp1 - kinetic_energy(p1, inv_mass) - h0) if np.isfinite(lp1) else -np.inf

    a = accept_log(step)
    direction = 1.0 if a > math.log(0.5) else -1.0
    for _ in range(50):
        nxt = step * 2.0**direction
        a = accept_log(nxt)
        if (direction > 0 and not a > math.log(0.5)) or (direction < 0 and a > math.log(0.5)):
            return step if direction > 0 else nxt
        step = nxt
    return step


def hmc_sample(
    logp_grad: LogpGrad,
    x0,
    config: Optional[HmcConfig] = None,
    hessian_diagonal: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    record: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Chain:
    """Run HMC from ``x0``.

    ``hessian_diagonal(x)`` returns the diagonal of the Hessian of the log
    density (required for ``mass="adaptive_diagonal"``).  ``record`` maps a
    state to the row stored in ``Chain.samples`` (default: the state itself).
    """
    config = config or HmcConfig()
    if config.mass == "adaptive_diagonal" and hessian_diagonal is None:
        raise ValueError("adaptive_diagonal mass needs a hessian_diagonal callable")
    rng = np.random.default_rng(config.seed)
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    mass = np.ones(d)
    inv_mass = 1.0 / mass
    logp, grad = logp_grad(x)
    if not np.isfinite(logp):
        raise ValueError("log density is not finite at the starting point")
    n_grad = 1
    warmup = config.warmup_iterations
    mass_phase_end = int(0.7 * warmup) if config.mass == "adaptive_diagonal" else 0
    step = config.step_size
    if config.adapt_step_size and warmup > 0:
        step = _initial_step(x, logp, grad, logp_grad, inv_mass, rng, step)
    averager = DualAveraging(step, config.target_accept)
    h_sum = np.zeros(d)
    h_count = 0
    mass_history = []
    keep = record or (lambda z: z)
    rows, lps, acc = [], [], []
    divergences = 0
    t0 = time.perf_counter()
    t_warm = 0.0

    for it in range(1, config.iterations + 1):
        p0 = rng.standard_normal(d) * np.sqrt(mass)
        h0 = logp - kinetic_energy(p0, inv_mass)
        eps = step * rng.uniform(1 - config.step_jitter, 1 + config.step_jitter) if config.step_jitter else step
        x1, p1, g1, lp1 = leapfrog(x, p0, grad, eps, config.n_steps, logp_grad, inv_mass)
        n_grad += config.n_steps
        h1 = lp1 - kinetic_energy(p1, inv_mass) if np.isfinite(lp1) else -np.inf
        log_ratio = h1 - h0
        if not np.isfinite(log_ratio) or -log_ratio > config.max_energy_error:
            divergences += 1
            accept_prob = 0.0
        else:
            accept_prob = math.exp(min(0.0, log_ratio))
        accepted = rng.random() < accept_prob
        if accepted:
            x, logp, grad = x1, lp1, g1

        if it <= warmup:
            if config.adapt_step_size:
                step = averager.update(accept_prob)
            if it <= mass_phase_end and it % config.adapt_interval == 0:
                h_sum += -hessian_diagonal(x)
                h_count += 1
                new_mass = clamp_mass(h_sum / h_count, config.mass_min, config.mass_max, config.relative_clamp)
                mass_history.append(new_mass.copy())
                if config.adapt_step_size:
                    # rescale the step to the new geometry, then keep averaging from there
                    step = _initial_step(x, logp, grad, logp_grad, 1.0 / new_mass, rng, step)
                    averager = DualAveraging(step, config.target_accept)
                mass, inv_mass = new_mass, 1.0 / new_mass
            if it == mass_phase_end and config.adapt_step_size:
                averager = DualAveraging(step, config.target_accept)
            if it == warmup:
                if config.adapt_step_size:
                    step = averager.final_step
                t_warm = time.perf_counter() - t0
            continue
        rows.append(keep(x))
        lps.append(logp)
        acc.append(accepted)

    seconds = time.perf_counter() - t0
    return Chain(
        samples=np.array(rows).reshape(len(rows), -1),
        log_density=np.array(lps),
        accepted=np.array(acc, dtype=bool),
        step_size=step,
        mass=mass,
        divergences=divergences,
        gradient_evaluations=n_grad,
        seconds=seconds - t_warm,
        warmup_seconds=t_warm,
        mass_history=mass_history,
    )
