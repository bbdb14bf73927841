"""Independent oracles and the gradient scaling benchmark.

Nothing here shares code paths with :mod:`treegrad.engine`: the brute-force
likelihood enumerates internal states directly and builds its own transition
matrices, and the finite-difference gradient only calls a likelihood function.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .alignment import SitePatternAlignment, compress_patterns, simulate_alignment
from .engine import LikelihoodEngine
from .substitution import RateCategories, SubstitutionModel, build_named_model
from .tree import Tree, caterpillar_tree, random_coalescent_tree

log = logging.getLogger(__name__)

MAX_BRUTE_FORCE_TIPS = 6


def brute_force_likelihood(
    tree: Tree,
    alignment: SitePatternAlignment,
    model: SubstitutionModel,
    categories: Optional[RateCategories] = None,
    branch_lengths=None,
) -> float:
    """Log-likelihood by summing the joint probability over every internal-state assignment."""
    if tree.tip_count > MAX_BRUTE_FORCE_TIPS:
        raise ValueError(f"brute force is limited to {MAX_BRUTE_FORCE_TIPS} tips")
    categories = categories or RateCategories.single()
    b = tree.branch_length if branch_lengths is None else np.asarray(branch_lengths, dtype=float)
    m = model.state_count
    n_tips = tree.tip_count
    tips = alignment.bind(tree.tip_names)  # (N, S, m)
    internal = range(n_tips, tree.node_count)
    site = np.zeros(alignment.pattern_count)
    for rate, prob in zip(categories.rates, categories.probabilities):
        P = [scipy.linalg.expm(model.generator_for(k) * b[k] * rate) for k in range(tree.branch_count)]
        # tip factors: sum over the (possibly ambiguous) observed tip state
        tip_factor = [P[k] @ tips[k].T for k in range(n_tips)]  # (m parent states, S)
        cat_site = np.zeros(alignment.pattern_count)
        for states in itertools.product(range(m), repeat=tree.node_count - n_tips):
            y = dict(zip(internal, states))
            term = model.root_distribution[y[tree.root]] * np.ones(alignment.pattern_count)
            for k in range(tree.branch_count):
                ya = y[tree.parent[k]]
                if k < n_tips:
                    term = term * tip_factor[k][ya]
                else:
                    term = term * P[k][ya, y[k]]
            cat_site += term
        site += prob * cat_site
    return float(alignment.weights @ np.log(site))


class CountingFunction:
    """Wraps ``f`` and counts calls."""

    def __init__(self, f: Callable[[np.ndarray], float]):
        self.f = f
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.f(x)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences; exactly ``2 * len(x)`` evaluations of ``f``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ArithmeticError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def finite_difference_hessian_diagonal(f, x, h: float = 1e-4) -> np.ndarray:
    """Second-order central differences ``(f(x+h) - 2f(x) + f(x-h)) / h^2`` per coordinate."""
    x = np.asarray(x, dtype=float)
    f0 = f(x)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - 2 * f0 + f(x - e)) / h**2
    return out


def log_space_fd_branch_gradient(engine: LikelihoodEngine, branch_lengths, h: float = 1e-5) -> np.ndarray:
    """Branch gradient from central differences in log-branch-length space."""
    b = np.asarray(branch_lengths, dtype=float)
    g_log = finite_difference_gradient(lambda x: engine.log_likelihood(np.exp(x)), np.log(b), h)
    return g_log / b


# -- scaling benchmark -----------------------------------------------------------


@dataclass
class BenchmarkRecord:
    N: int
    method: str
    wall_time: float
    node_visits: int
    repetitions: int


def benchmark_problem(n_tips: int, sites: int, seed: int, shape: str = "coalescent"):
    rng = np.random.default_rng(seed)
    if shape == "caterpillar":
        tree = caterpillar_tree(n_tips, branch_length=0.02)
    else:
        tree = random_coalescent_tree(n_tips, rng, scale=0.2)
        tree = tree.with_branch_lengths(np.maximum(tree.branch_length, 1e-3))
    model = build_named_model("HKY85", {"kappa": 2.0}, [0.3, 0.2, 0.2, 0.3])
    raw = simulate_alignment(tree, model, RateCategories.single(), sites, seed=rng)
    return tree, compress_patterns(raw), model


def time_gradient(engine: LikelihoodEngine, b: np.ndarray, method: str, repetitions: int) -> BenchmarkRecord:
    times = []
    visits = 0
    for _ in range(repetitions):
        v0 = engine.visits
        t0 = time.perf_counter()
        if method == "analytic":
            engine.gradient(b)
        else:
            log_space_fd_branch_gradient(engine, b)
        times.append(time.perf_counter() - t0)
        visits = engine.visits - v0
    median = float(np.median(times))
    if median < 1e-3:
        log.warning("median time %.2e s for %s is below timer-stable resolution", median, method)
    return BenchmarkRecord(engine.tree.tip_count, method, median, visits, repetitions)


def fit_exponent(ns: Sequence[int], times: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(ns), np.log(times), 1)
    return float(slope)


def scaling_benchmark(
    ns: Sequence[int],
    sites: int = 1000,
    repetitions: int = 3,
    fd_repetitions: int = 1,
    seed: int = 1,
    shape: str = "coalescent",
    methods: Sequence[str] = ("analytic", "finite_difference"),
):
    """Time full gradients against tip count; returns records and a summary.

    The summary holds the fitted log-log exponent per method and the per-N
    speedup of the analytic gradient over finite differences.
    """
    records: list[BenchmarkRecord] = []
    for n in ns:
        tree, aln, model = benchmark_problem(n, sites, seed + n, shape)
        engine = LikelihoodEngine(tree, aln, model)
        for method in methods:
            reps = repetitions if method == "analytic" else fd_repetitions
            records.append(time_gradient(engine, tree.branch_length, method, reps))
            log.info("N=%d %s %.4fs", n, method, records[-1].wall_time)
    summary: dict = {"exponents": {}, "speedup": {}}
    for method in methods:
        rs = [r for r in records if r.method == method]
        summary["exponents"][method] = fit_exponent([r.N for r in rs], [r.wall_time for r in rs])
    if set(methods) >= {"analytic", "finite_difference"}:
        for n in ns:
            a = next(r for r in records if r.N == n and r.method == "analytic")
            f = next(r for r in records if r.N == n and r.method == "finite_difference")
            summary["speedup"][int(n)] = f.wall_time / a.wall_time
    return records, summary


def write_benchmark(records: Sequence[BenchmarkRecord], summary: dict, csv_path, json_path=None, header: Optional[str] = None):
    with open(csv_path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(["N", "method", "median_seconds", "visits", "repetitions"])
        for r in records:
            writer.writerow([r.N, r.method, repr(r.wall_time), r.node_visits, r.repetitions])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"records": [asdict(r) for r in records], **summary}, fh, indent=2)
