"""Random-scan single-coordinate random-walk Metropolis (comparison baseline)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hmc import Chain


@dataclass
class UnivariateConfig:
    iterations: int = 1000  # recorded states
    thin: Optional[int] = None  # single-coordinate updates per recorded state (default: dimension)
    initial_scale: float = 0.5
    target_accept: float = 0.44
    batch: int = 50  # proposals per coordinate between scale adjustments
    warmup: Optional[int] = None  # recorded-state units; default 20%
    seed: int = 0
    max_seconds: Optional[float] = None  # stop early once this much sampling time is spent

    @property
    def warmup_iterations(self) -> int:
        return int(0.2 * self.iterations) if self.warmup is None else self.warmup


def univariate_baseline_sample(
    logp: Callable[[np.ndarray], float],
    x0,
    config: Optional[UnivariateConfig] = None,
    record: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Chain:
    """Per-coordinate proposal scales adapt in batches during warm-up only."""
    config = config or UnivariateConfig()
    rng = np.random.default_rng(config.seed)
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    thin = config.thin or d
    log_scale = np.full(d, math.log(config.initial_scale))
    tries = np.zeros(d, dtype=int)
    hits = np.zeros(d, dtype=int)
    batches = np.zeros(d, dtype=int)
    lp = logp(x)
    if not np.isfinite(lp):
        raise ValueError("log density is not finite at the starting point")
    keep = record or (lambda z: z)
    warmup = config.warmup_iterations
    rows, lps, acc = [], [], []
    t0 = time.perf_counter()
    t_warm = 0.0
    for it in range(1, config.iterations + 1):
        n_acc = 0
        for _ in range(thin):
            i = rng.integers(d)
            prop = x.copy()
            prop[i] += math.exp(log_scale[i]) * rng.standard_normal()
            lp_prop = logp(prop)
            ok = np.isfinite(lp_prop) and math.log(rng.random()) < lp_prop - lp
            if ok:
                x, lp = prop, lp_prop
                n_acc += 1
            if it <= warmup:
                tries[i] += 1
                hits[i] += ok
                if tries[i] == config.batch:
                    batches[i] += 1
                    delta = min(0.1, 1.0 / math.sqrt(batches[i]))
                    log_scale[i] += delta if hits[i] / tries[i] > config.target_accept else -delta
                    tries[i] = hits[i] = 0
        if it == warmup:
            t_warm = time.perf_counter() - t0
        if it > warmup:
            rows.append(keep(x))
            lps.append(lp)
            acc.append(n_acc / thin)
            if config.max_seconds is not None and time.perf_counter() - t0 - t_warm >= config.max_seconds:
                break
    seconds = time.perf_counter() - t0
    return Chain(
        samples=np.array(rows).reshape(len(rows), -1),
        log_density=np.array(lps),
        accepted=np.array(acc),
        step_size=float("nan"),
        mass=np.exp(log_scale),
        divergences=0,
        gradient_evaluations=0,
        seconds=seconds - t_warm,
        warmup_seconds=t_warm,
    )
