"""Command-line interface: ``treegrad MODE [CONFIG] [flags]``.

Modes are loglik, gradient, optimize, sample, simulate and bench.  Settings
come from one YAML run configuration (see ``treegrad.config``); flags
override single values.  Summaries go to stdout, data to files in the output
directory, and every file carries the configuration hash.  Failures exit
nonzero after printing a JSON error object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from typing import Optional

import numpy as np
import yaml

from .alignment import AlignmentError, compress_patterns, read_alignment, simulate_alignment, write_fasta
from .clock import ClockParameterization, ClockPosterior, ClockPriors
from .config import MODES, ConfigError, config_hash, load_config
from .engine import LikelihoodEngine, LikelihoodError
from .experiments import fit_branch_lengths, kernel_ess_table, run_kernels, simulate_clock_dataset
from .inference import LbfgsConfig
from .substitution import (
    ModelError,
    RateCategories,
    SubstitutionModel,
    build_named_model,
    discrete_gamma_categories,
)
from .tree import NewickError, TreeError, read_newick, serialize_newick
from .validation import scaling_benchmark, write_benchmark

log = logging.getLogger("treegrad")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


class RunContext:
    """Resolved configuration plus provenance shared by every mode."""

    def __init__(self, config: dict, workers: int = 1):
        self.config = config
        self.workers = workers
        self.hash = config_hash(config)
        self.seed = config["seed"]
        self.out_dir = config["paths"]["output_dir"]

    @property
    def stamp(self) -> str:
        return f"treegrad config_hash={self.hash} seed={self.seed} mode={self.config['mode']}"

    def path(self, name: str) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, name)

    def write_json(self, name: str, payload: dict) -> str:
        path = self.path(name)
        with open(path, "w") as fh:
            json.dump({"config_hash": self.hash, "seed": self.seed, **payload}, fh, indent=2, default=_jsonable)
            fh.write("\n")
        return path

    def csv_writer(self, fh):
        fh.write(f"# {self.stamp}\n")
        return csv.writer(fh, lineterminator="\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


# -- builders ----------------------------------------------------------------------


def _load_matrix(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def build_model(model_cfg: dict) -> tuple[SubstitutionModel, RateCategories]:
    name = model_cfg["name"]
    if name == "custom":
        Q = _load_matrix(model_cfg["generator"])
        m = Q.shape[0]
        pi = model_cfg["root_distribution"] or [1.0 / m] * m
        model = SubstitutionModel(Q, np.asarray(pi, dtype=float), name="custom")
    else:
        model = build_named_model(name, model_cfg["parameters"], model_cfg["frequencies"])
        if model_cfg["root_distribution"] is not None:
            model = model.with_root_distribution(model_cfg["root_distribution"])
    if model_cfg["branch_generators"]:
        model = model.with_branch_generators(
            {int(k): _load_matrix(v) for k, v in model_cfg["branch_generators"].items()}
        )
    if model_cfg["alpha"] is None:
        categories = RateCategories.single()
    else:
        categories = discrete_gamma_categories(model_cfg["alpha"], model_cfg["categories"])
    return model, categories


def load_problem(ctx: RunContext):
    cfg = ctx.config
    tree = read_newick(cfg["paths"]["tree"])
    alignment = compress_patterns(read_alignment(cfg["paths"]["alignment"]))
    model, categories = build_model(cfg["model"])
    return tree, alignment, model, categories


def _engine(ctx: RunContext, tree, alignment, model, categories) -> LikelihoodEngine:
    return LikelihoodEngine(tree, alignment, model, categories, ctx.config["scaling"], workers=ctx.workers)


# -- modes -----------------------------------------------------------------------------


def run_loglik(ctx: RunContext, out) -> None:
    tree, alignment, model, categories = load_problem(ctx)
    engine = _engine(ctx, tree, alignment, model, categories)
    ll = engine.log_likelihood()
    print(f"log_likelihood {ll:.18g}", file=out)
    print(f"taxa {len(alignment.taxa)}", file=out)
    print(f"sites {alignment.site_count}", file=out)
    print(f"patterns {alignment.pattern_count}", file=out)
    print(f"config_hash {ctx.hash}", file=out)


def run_gradient(ctx: RunContext, out) -> None:
    tree, alignment, model, categories = load_problem(ctx)
    engine = _engine(ctx, tree, alignment, model, categories)
    want_hessian = ctx.config["inference"]["hessian"]
    report = engine.gradient(hessian=want_hessian)
    b = tree.branch_length
    path = ctx.path("gradient.csv")
    with open(path, "w", newline="") as fh:
        writer = ctx.csv_writer(fh)
        header = ["branch", "name", "branch_length", "gradient", "log_gradient"]
        writer.writerow(header + (["hessian_diagonal"] if want_hessian else []))
        for i in range(tree.branch_count):
            name = tree.tip_names[i] if tree.is_tip(i) else (tree.node_labels[i] or "")
            row = [i, name, repr(float(b[i])), repr(float(report.branch_gradient[i])),
                   repr(float(b[i] * report.branch_gradient[i]))]
            if want_hessian:
                row.append(repr(float(report.hessian_diagonal[i])))
            writer.writerow(row)
    print(f"log_likelihood {report.log_likelihood:.18g}", file=out)
    print(f"gradient_inf_norm {np.abs(report.branch_gradient).max():.18g}", file=out)
    print(f"log_gradient_inf_norm {np.abs(b * report.branch_gradient).max():.18g}", file=out)
    print(f"wrote {path}", file=out)


def run_optimize(ctx: RunContext, out) -> None:
    tree, alignment, model, categories = load_problem(ctx)
    engine = _engine(ctx, tree, alignment, model, categories)
    lb = ctx.config["inference"]["lbfgs"]
    config = LbfgsConfig(memory=lb["memory"], max_iterations=lb["max_iterations"],
                         gradient_tolerance=lb["gradient_tolerance"])
    b0 = np.maximum(tree.branch_length, 1e-6)
    t0 = time.perf_counter()
    result = fit_branch_lengths(engine, b0, config)
    seconds = time.perf_counter() - t0
    b = np.exp(result.x)
    raw = engine.gradient(b).branch_gradient
    tree_path = ctx.path("mle.nwk")
    with open(tree_path, "w") as fh:
        fh.write(f"[{ctx.stamp}]{serialize_newick(tree, b)}\n")
    report = {
        "log_likelihood": -result.f,
        "f": result.f,
        "gradient_inf_norm": float(np.abs(result.gradient).max()),
        "raw_gradient_inf_norm": float(np.abs(raw).max()),
        "iterations": result.iterations,
        "converged": result.converged,
        "message": result.message,
        "evaluations": result.evaluations,
        "seconds": seconds,
        "seconds_per_iteration": seconds / max(result.iterations, 1),
        "branch_lengths": b,
        "trace": result.trace,
        "config": ctx.config,
    }
    path = ctx.write_json("mle.json", report)
    print(f"log_likelihood {-result.f:.18g}", file=out)
    print(f"gradient_inf_norm {report['gradient_inf_norm']:.6g} (log branch lengths)", file=out)
    print(f"iterations {result.iterations} converged {result.converged}", file=out)
    print(f"wrote {path} and {tree_path}", file=out)


def _clock_from_config(clock_cfg: dict, branch_count: int) -> ClockParameterization:
    eps = clock_cfg["epsilon"]
    eps = np.full(branch_count, float(eps)) if np.isscalar(eps) else np.asarray(eps, dtype=float)
    if eps.shape != (branch_count,):
        raise ValueError(f"clock.epsilon has {eps.size} values but the tree has {branch_count} branches")
    if clock_cfg["strict"]:
        return ClockParameterization.strict(clock_cfg["mu"], branch_count)
    return ClockParameterization(clock_cfg["mu"], clock_cfg["psi"], eps)


def _format_table(rows: list[dict]) -> str:
    cols = ["kernel", "seconds", "min_ess_per_s", "median_ess_per_s", "min_speedup", "median_speedup"]
    lines = ["  ".join(f"{c:>16}" for c in cols)]
    for r in rows:
        cells = [f"{r['kernel']:>16}"] + [f"{r.get(c, float('nan')):>16.4g}" for c in cols[1:]]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def run_sample(ctx: RunContext, out) -> None:
    """Branch lengths in the input tree are read as time durations."""
    cfg = ctx.config
    tree, alignment, model, categories = load_problem(ctx)
    tree = tree.with_times_from_lengths()
    engine = _engine(ctx, tree, alignment, model, categories)
    c = cfg["clock"]
    priors = ClockPriors(mu_prior=c["mu_prior"], mu_meanlog=c["mu_meanlog"], mu_sdlog=c["mu_sdlog"],
                         psi_mean=c["psi_mean"], likelihood=c["likelihood"])
    posterior = ClockPosterior(engine, tree, priors, strict=c["strict"], coordinates=c["coordinates"])
    clock = _clock_from_config(c, tree.branch_count)
    z0 = posterior.restrict(posterior.initial_state(clock))
    h = cfg["inference"]["hmc"]
    chains = run_kernels(
        posterior, z0, h["kernels"],
        iterations=h["iterations"], n_steps=h["n_steps"], seed=ctx.seed, warmup=h["warmup"],
        match_wall_time=h["match_wall_time"],
        hmc_options={"step_size": h["step_size"], "target_accept": h["target_accept"],
                     "adapt_interval": h["adapt_interval"], "relative_clamp": h["relative_clamp"]},
    )
    names = posterior.coordinate_names()
    for kernel, chain in chains.items():
        with open(ctx.path(f"samples_{kernel}.csv"), "w", newline="") as fh:
            writer = ctx.csv_writer(fh)
            writer.writerow(["iteration"] + names + ["log_posterior", "accepted"])
            for k, (row, lp, acc) in enumerate(zip(chain.samples, chain.log_density, chain.accepted)):
                writer.writerow([k] + [repr(float(v)) for v in row] + [repr(float(lp)), repr(float(acc))])
    table = kernel_ess_table(chains, posterior) if all(len(ch.samples) >= 100 for ch in chains.values()) else []
    with open(ctx.path("ess_table.csv"), "w", newline="") as fh:
        writer = ctx.csv_writer(fh)
        cols = ["kernel", "seconds", "min_ess_per_s", "median_ess_per_s", "min_speedup", "median_speedup"]
        writer.writerow(cols)
        for r in table:
            writer.writerow([r["kernel"]] + [repr(float(r.get(k, float("nan")))) for k in cols[1:]])
    meta = {
        "config": cfg,
        "workers": ctx.workers,
        "kernels": {
            k: {
                "draws": len(ch.samples),
                "seconds": ch.seconds,
                "warmup_seconds": ch.warmup_seconds,
                "acceptance_rate": ch.acceptance_rate,
                "step_size": ch.step_size,
                "divergences": ch.divergences,
                "gradient_evaluations": ch.gradient_evaluations,
                "mass": ch.mass,
            }
            for k, ch in chains.items()
        },
        "ess_table": table,
    }
    path = ctx.write_json("metadata.json", meta)
    if table:
        print(_format_table(table), file=out)
    else:
        print("fewer than 100 retained draws in some chain; ESS table skipped", file=out)
    print(f"wrote samples_*.csv, ess_table.csv and {path}", file=out)


def run_simulate(ctx: RunContext, out) -> None:
    cfg = ctx.config
    s = cfg["simulate"]
    model, categories = build_model(cfg["model"])
    truth: dict
    if cfg["paths"]["tree"] is not None:
        tree = read_newick(cfg["paths"]["tree"])
        raw = simulate_alignment(tree, model, categories, s["sites"], ctx.seed)
        truth = {"branch_lengths": tree.branch_length}
    else:
        ds = simulate_clock_dataset(s["tips"], s["sites"], mu=s["mu"], psi=s["psi"], time_scale=s["time_scale"],
                                    model=model, categories=categories, seed=ctx.seed)
        tree = ds.tree
        raw = simulate_alignment(ds.tree, model, categories, s["sites"], ctx.seed, branch_lengths=ds.branch_lengths)
        truth = {"mu": ds.clock.mu, "psi": ds.clock.psi, "epsilon": ds.clock.epsilon,
                 "branch_lengths": ds.branch_lengths, "node_time": ds.tree.node_time}
        time_tree = tree.with_branch_lengths(tree.durations())
        with open(ctx.path("tree.nwk"), "w") as fh:
            fh.write(f"[{ctx.stamp}]{serialize_newick(time_tree)}\n")
    fasta = ctx.path("alignment.fasta")
    write_fasta(raw, fasta, header=ctx.stamp)
    path = ctx.write_json("truth.json", {"config": cfg, **truth})
    print(f"simulated {raw.site_count} sites for {len(raw.taxa)} taxa", file=out)
    print(f"wrote {fasta} and {path}", file=out)


def run_bench(ctx: RunContext, out) -> None:
    b = ctx.config["bench"]
    records, summary = scaling_benchmark(b["ns"], sites=b["sites"], repetitions=b["repetitions"],
                                         fd_repetitions=b["fd_repetitions"], seed=ctx.seed, methods=b["methods"])
    csv_path, json_path = ctx.path("benchmark.csv"), ctx.path("benchmark.json")
    write_benchmark(records, {"config_hash": ctx.hash, **summary}, csv_path, json_path, header=ctx.stamp)
    for r in records:
        print(f"N={r.N:<6d} {r.method:<18s} {r.wall_time:.6g}s visits={r.node_visits}", file=out)
    for method, e in summary["exponents"].items():
        print(f"exponent {method} {e:.3f}", file=out)
    print(f"wrote {csv_path}", file=out)


RUNNERS = {
    "loglik": run_loglik,
    "gradient": run_gradient,
    "optimize": run_optimize,
    "sample": run_sample,
    "simulate": run_simulate,
    "bench": run_bench,
}


def run(mode: str, config: dict, workers: int = 1, out=None) -> int:
    """Execute one mode on a validated configuration; returns the exit code."""
    out = out or sys.stdout
    ctx = RunContext(config, workers)
    try:
        RUNNERS[mode](ctx, out)
    except (NewickError, TreeError, AlignmentError, ModelError, LikelihoodError, ValueError, OSError) as exc:
        _emit_error(type(exc).__name__, [str(exc)])
        return EXIT_RUNTIME
    return 0


def _emit_error(kind: str, problems: list[str]) -> None:
    print(json.dumps({"error": kind, "problems": problems}), file=sys.stderr)


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError([f"--set expects KEY=VALUE, got {text!r}"])
    return key.strip(), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treegrad", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("config", nargs="?", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--output-dir", help="override paths.output_dir")
    parser.add_argument("--iterations", type=int, help="override inference.hmc.iterations")
    parser.add_argument("--workers", type=int, default=1, help="pattern-block worker threads (default 1)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration value by dotted key, e.g. model.alpha=0.5")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = dict(_parse_override(s) for s in args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.output_dir is not None:
            overrides["paths.output_dir"] = os.path.abspath(args.output_dir)
        if args.iterations is not None:
            overrides["inference.hmc.iterations"] = args.iterations
        if args.workers < 1:
            raise ConfigError(["--workers must be at least 1"])
        config = load_config(args.config, args.mode, overrides)
    except ConfigError as exc:
        _emit_error("ConfigError", exc.problems)
        return EXIT_CONFIG
    return run(args.mode, config, args.workers)


if __name__ == "__main__":
    sys.exit(main())
