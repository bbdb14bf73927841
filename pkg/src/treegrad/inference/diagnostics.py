"""Effective sample size and sampler-comparison tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

MIN_CHAIN_LENGTH = 100


@dataclass
class EssResult:
    ess: float
    degenerate: bool


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess_report(x) -> EssResult:
    """ESS with Geyer's initial positive sequence truncation, clipped to ``[1, n]``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < MIN_CHAIN_LENGTH:
        raise ValueError(f"ESS needs at least {MIN_CHAIN_LENGTH} draws")
    if np.ptp(x) == 0:
        return EssResult(1.0, True)
    rho = autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    nonpos = np.flatnonzero(pairs <= 0)
    k = nonpos[0] if nonpos.size else n_pairs
    tau = -1.0 + 2.0 * pairs[:k].sum()
    ess = n / tau if tau > 0 else float(n)
    return EssResult(float(np.clip(ess, 1.0, n)), False)


def effective_sample_size(x) -> float:
    return ess_report(x).ess


def ess_columns(samples: np.ndarray) -> np.ndarray:
    return np.array([effective_sample_size(col) for col in np.asarray(samples).T])


def ess_table(runs: Mapping[str, tuple[np.ndarray, float]], baseline: str = "univariate") -> list[dict]:
    """Min/median ESS per second per kernel, plus speedups over ``baseline``.

    ``runs`` maps kernel name to ``(samples, seconds)`` with samples shaped
    ``(draws, parameters)``.
    """
    rows = []
    for name, (samples, seconds) in runs.items():
        per_s = ess_columns(samples) / seconds
        rows.append(
            {
                "kernel": name,
                "seconds": seconds,
                "min_ess_per_s": float(per_s.min()),
                "median_ess_per_s": float(np.median(per_s)),
            }
        )
    base = next((r for r in rows if r["kernel"] == baseline), None)
    for r in rows:
        if base is not None:
            r["min_speedup"] = r["min_ess_per_s"] / base["min_ess_per_s"]
            r["median_speedup"] = r["median_ess_per_s"] / base["median_ess_per_s"]
    return rows
