"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

FunGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    c1: float = 1e-4
    c2: float = 0.9
    # "scaled": H_init = (s'y / y'y) I from the latest pair; "identity": H_init = I
    initial_scaling: str = "scaled"
    max_line_search: int = 40
    stall_iterations: int = 5  # consecutive steps improving neither f nor the gradient norm
    # relative slack for the approximate Wolfe test used once f changes are at rounding level
    approximate_wolfe: float = 1e-12

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if self.gradient_tolerance <= 0 or not 0 < self.c1 < self.c2 < 1:
            raise ValueError("invalid tolerance or line-search constants")
        if self.initial_scaling not in ("scaled", "identity"):
            raise ValueError("initial_scaling must be 'scaled' or 'identity'")
        if self.approximate_wolfe < 0:
            raise ValueError("approximate_wolfe must be nonnegative")


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    gradient: np.ndarray
    iterations: int
    converged: bool
    message: str
    evaluations: int
    trace: list = field(default_factory=list)


class LineSearchError(RuntimeError):
    pass


def two_loop_direction(g: np.ndarray, s_hist, y_hist, gamma: float) -> np.ndarray:
    """``-H g`` where ``H`` is the L-BFGS inverse Hessian built from ``gamma * I``."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    r = gamma * q
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ r)
        r += s * (a - b)
    return -r


def bfgs_inverse_update(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``(I - rho s y') H (I - rho y s') + rho s s'`` with ``rho = 1 / y's``."""
    rho = 1.0 / (y @ s)
    V = np.eye(len(s)) - rho * np.outer(y, s)
    return V.T @ H @ V + rho * np.outer(s, s)


def explicit_inverse_hessian(s_hist, y_hist, gamma: float) -> np.ndarray:
    """Dense counterpart of :func:`two_loop_direction` (for cross-checks)."""
    H = gamma * np.eye(len(s_hist[0])) if s_hist else None
    for s, y in zip(s_hist, y_hist):
        H = bfgs_inverse_update(H, s, y)
    return H


def _cubic_min(a, fa, da, b, fb, db):
    d1 = da + db - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def strong_wolfe(phi, f0: float, d0: float, alpha: float, c1: float, c2: float, max_iter: int,
                 slack: float = 0.0):
    """Find a step satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, directional derivative, payload)``; the payload of
    the accepted step is returned with it.  Near a minimum the decrease a step
    achieves can fall below the rounding error of ``f``, so sufficient decrease
    cannot be certified.  A step whose value stays within ``slack * |f0|`` of
    ``f0`` (rounding noise, either sign) and whose slope meets the curvature
    condition is then accepted: the approximate Wolfe test of Hager and Zhang.
    """
    eps_f = slack * abs(f0)

    def approximate(f_a, d_a):
        return abs(f_a - f0) <= eps_f and abs(d_a) <= -c2 * d0

    a_prev, f_prev, d_prev = 0.0, f0, d0
    for i in range(max_iter):
        f_a, d_a, payload = phi(alpha)
        if not np.isfinite(f_a):
            alpha = 0.5 * (a_prev + alpha)
            continue
        if approximate(f_a, d_a):
            return alpha, f_a, payload
        if f_a > f0 + c1 * alpha * d0 or (i > 0 and f_a >= f_prev):
            return _zoom(phi, a_prev, f_prev, d_prev, alpha, f_a, d_a, f0, d0, c1, c2, max_iter, approximate)
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a, payload
        if d_a >= 0:
            return _zoom(phi, alpha, f_a, d_a, a_prev, f_prev, d_prev, f0, d0, c1, c2, max_iter, approximate)
        a_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha *= 2.0
    raise LineSearchError("line search did not bracket a step")


def _zoom(phi, lo, f_lo, d_lo, hi, f_hi, d_hi, f0, d0, c1, c2, max_iter, approximate):
    best = None
    for _ in range(max_iter):
        width = hi - lo
        a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
        lo_b, hi_b = min(lo, hi), max(lo, hi)
        if a is None or not (lo_b + 0.1 * abs(width) <= a <= hi_b - 0.1 * abs(width)):
            a = lo + 0.5 * width
        f_a, d_a, payload = phi(a)
        if np.isfinite(f_a) and approximate(f_a, d_a):
            return a, f_a, payload
        if np.isfinite(f_a) and f_a <= f0 + c1 * a * d0 and (best is None or f_a < best[1]):
            best = (a, f_a, payload)
        if not np.isfinite(f_a) or f_a > f0 + c1 * a * d0 or f_a >= f_lo:
            hi, f_hi, d_hi = a, f_a if np.isfinite(f_a) else np.inf, d_a
        else:
            if abs(d_a) <= -c2 * d0:
                return a, f_a, payload
            if d_a * (hi - lo) >= 0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = a, f_a, d_a
        if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
            break
    if best is not None:
        # sufficient decrease holds; curvature could not be certified at this precision
        return best
    raise LineSearchError("zoom failed to find an acceptable step")


def lbfgs_minimize(fun: FunGrad, x0, config: Optional[LbfgsConfig] = None, callback=None) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``."""
    config = config or LbfgsConfig()
    x = np.asarray(x0, dtype=float).copy()
    evals = 0

    def evaluate(z):
        nonlocal evals
        evals += 1
        f, g = fun(z)
        return float(f), np.asarray(g, dtype=float)

    f, g = evaluate(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    gamma = 1.0
    trace = []
    t_start = time.perf_counter()
    message = "maximum iterations reached"
    converged = False
    stalled = 0
    it = 0
    for it in range(1, config.max_iterations + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < config.gradient_tolerance:
            converged, message, it = True, "gradient tolerance reached", it - 1
            break
        d = two_loop_direction(g, s_hist, y_hist, gamma)
        d0 = float(g @ d)
        if d0 >= 0:  # lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            d0 = float(g @ d)
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / max(gnorm, 1e-12))

        def phi(a):
            z = x + a * d
            fz, gz = evaluate(z)
            return fz, float(gz @ d), (z, gz)

        t_iter = time.perf_counter()
        try:
            alpha, f_new, (x_new, g_new) = strong_wolfe(
                phi, f, d0, alpha0, config.c1, config.c2, config.max_line_search, config.approximate_wolfe
            )
        except LineSearchError as exc:
            message = f"line search failed: {exc}"
            it -= 1
            break
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > config.memory:
                s_hist.pop(0)
                y_hist.pop(0)
            if config.initial_scaling == "scaled":
                gamma = sy / float(y @ y)
        # below the rounding level of f only the gradient norm can show progress
        progress = f_new < f or np.max(np.abs(g_new)) < np.max(np.abs(g))
        stalled = 0 if progress else stalled + 1
        x, f, g = x_new, f_new, g_new
        trace.append(
            {
                "iteration": it,
                "f": f,
                "gradient_norm": float(np.max(np.abs(g))),
                "step": alpha,
                "seconds": time.perf_counter() - t_iter,
            }
        )
        if callback is not None:
            callback(x, f, g)
        if stalled >= config.stall_iterations:
            message = "no decrease at floating-point resolution"
            converged = float(np.max(np.abs(g))) < config.gradient_tolerance
            break
    else:
        if float(np.max(np.abs(g))) < config.gradient_tolerance:
            converged, message = True, "gradient tolerance reached"
    log.debug("L-BFGS: %s after %d iterations (%.3fs)", message, it, time.perf_counter() - t_start)
    return LbfgsResult(x, f, g, it, converged, message, evals, trace)
