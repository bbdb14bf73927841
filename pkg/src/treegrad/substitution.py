"""CTMC substitution models, transition matrices and discrete rate mixtures."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import stats


class ModelError(ValueError):
    pass


def _check_generator(Q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ModelError("generator must be a square matrix")
    if not np.all(np.isfinite(Q)):
        raise ModelError("generator has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        raise ModelError("generator off-diagonal entries must be nonnegative")
    if np.any(np.abs(Q.sum(axis=1)) > tol * max(1.0, np.abs(Q).max())):
        raise ModelError("generator rows must sum to zero")
    return Q


def _check_distribution(pi, m: int, what: str = "root distribution") -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (m,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
        raise ModelError(f"{what} must be a length-{m} probability vector")
    return pi


@dataclass(frozen=True, eq=False)
class SubstitutionModel:
    """Generator ``Q`` (shared, optionally overridden per branch) and root distribution.

    ``equilibrium`` is only needed for the symmetric eigen path of reversible
    models; it is the distribution under which ``Q`` is detailed-balanced.
    """

    generator: np.ndarray
    root_distribution: np.ndarray
    reversible: bool = False
    equilibrium: Optional[np.ndarray] = None
    branch_generators: Mapping[int, np.ndarray] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        Q = _check_generator(self.generator)
        object.__setattr__(self, "generator", Q)
        m = Q.shape[0]
        object.__setattr__(self, "root_distribution", _check_distribution(self.root_distribution, m))
        if self.equilibrium is not None:
            object.__setattr__(
                self, "equilibrium", _check_distribution(self.equilibrium, m, "equilibrium")
            )
        object.__setattr__(
            self,
            "branch_generators",
            {int(k): _check_generator(v) for k, v in dict(self.branch_generators).items()},
        )
        for Qb in self.branch_generators.values():
            if Qb.shape != Q.shape:
                raise ModelError("per-branch generator has the wrong size")

    @property
    def state_count(self) -> int:
        return self.generator.shape[0]

    @property
    def homogeneous(self) -> bool:
        return not self.branch_generators

    def generator_for(self, branch: int) -> np.ndarray:
        return self.branch_generators.get(branch, self.generator)

    def generators(self, branch_count: int) -> np.ndarray:
        """Stacked ``(branch_count, m, m)`` generators."""
        out = np.broadcast_to(self.generator, (branch_count,) + self.generator.shape).copy()
        for k, Qb in self.branch_generators.items():
            if k < branch_count:
                out[k] = Qb
        return out

    def expected_rate(self) -> float:
        return float(-(self.root_distribution * np.diag(self.generator)).sum())

    def with_root_distribution(self, pi) -> "SubstitutionModel":
        return SubstitutionModel(
            self.generator, pi, self.reversible, self.equilibrium, self.branch_generators, self.name
        )

    def with_branch_generators(self, branch_generators) -> "SubstitutionModel":
        # Raw per-branch generators are used as given: no renormalization.
        return SubstitutionModel(
            self.generator, self.root_distribution, False, None, branch_generators, self.name
        )


def _normalize(Q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    rate = -(pi * np.diag(Q)).sum()
    return Q / rate


def _reversible_generator(exchange: np.ndarray, pi: np.ndarray) -> np.ndarray:
    Q = exchange * pi[None, :]
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return _normalize(Q, pi)


def build_named_model(name: str, parameters: Optional[Mapping] = None, frequencies=None) -> SubstitutionModel:
    """JC69, HKY85 (``kappa``) or GTR (``rates``: AC, AG, AT, CG, CT, GT).

    States are ordered A, C, G, T.  Generators are scaled to one expected
    substitution per unit branch length under the stationary frequencies.
    """
    parameters = dict(parameters or {})
    key = name.upper()
    if key == "JC69":
        pi = np.full(4, 0.25)
        exchange = np.ones((4, 4))
    else:
        pi = np.full(4, 0.25) if frequencies is None else np.asarray(frequencies, dtype=float)
        if pi.shape != (4,) or np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-12:
            raise ModelError("base frequencies must be four positive values summing to 1")
        if key == "HKY85":
            kappa = float(parameters.get("kappa", 1.0))
            if not kappa > 0:
                raise ModelError("kappa must be positive")
            exchange = np.ones((4, 4))
            # transitions A<->G and C<->T
            exchange[0, 2] = exchange[2, 0] = kappa
            exchange[1, 3] = exchange[3, 1] = kappa
        elif key == "GTR":
            rates = np.asarray(parameters.get("rates", np.ones(6)), dtype=float)
            if rates.shape != (6,) or np.any(rates <= 0):
                raise ModelError("GTR needs six positive exchange rates")
            exchange = np.zeros((4, 4))
            exchange[np.triu_indices(4, 1)] = rates
            exchange = exchange + exchange.T
        else:
            raise ModelError(f"unknown model {name!r}")
    Q = _reversible_generator(exchange, pi)
    return SubstitutionModel(Q, pi, reversible=True, equilibrium=pi.copy(), name=key)


def matrix_exponential(A) -> np.ndarray:
    """``exp(A)`` by scaling and squaring with a Padé approximant.

    Accepts a single matrix or a stack ``(..., m, m)``.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix exponential of a non-finite matrix")
    if not np.any(A):
        return np.broadcast_to(np.eye(A.shape[-1]), A.shape).copy()
    return scipy.linalg.expm(A)


@dataclass(frozen=True)
class Eigensystem:
    """``Q = U diag(values) U_inv`` from the symmetrized similarity transform."""

    values: np.ndarray
    U: np.ndarray
    U_inv: np.ndarray

    @classmethod
    def from_reversible(cls, Q: np.ndarray, pi: np.ndarray) -> "Eigensystem":
        d = np.sqrt(pi)
        S = d[:, None] * Q / d[None, :]
        S = 0.5 * (S + S.T)
        values, V = np.linalg.eigh(S)
        return cls(values, V / d[:, None], V.T * d[None, :])

    def exp(self, t: np.ndarray) -> np.ndarray:
        """``exp(Q t)`` for an array of scalars ``t``; shape ``t.shape + (m, m)``."""
        t = np.asarray(t, dtype=float)
        e = np.exp(t[..., None] * self.values)
        return np.einsum("ik,...k,kj->...ij", self.U, e, self.U_inv, optimize=True)


def _clean(P: np.ndarray) -> np.ndarray:
    # contiguous layout keeps the per-node matrix products on the fast BLAS path
    P = np.ascontiguousarray(P)
    return np.maximum(P, 0.0, out=P)


def transition_matrices(model: SubstitutionModel, branch_lengths, rates=(1.0,), eigen: Optional[Eigensystem] = None) -> np.ndarray:
    """All ``exp(Q_i b_i c_l)`` as an array of shape ``(branches, categories, m, m)``."""
    b = np.asarray(branch_lengths, dtype=float)
    if np.any(b < 0):
        raise ValueError("branch lengths must be nonnegative")
    t = b[:, None] * np.asarray(rates, dtype=float)[None, :]
    if model.homogeneous and model.reversible and model.equilibrium is not None:
        eigen = eigen or Eigensystem.from_reversible(model.generator, model.equilibrium)
        P = _clean(eigen.exp(t))
    else:
        Qs = model.generators(len(b))
        A = Qs[:, None, :, :] * t[:, :, None, None]
        P = _clean(matrix_exponential(A.reshape(-1, *A.shape[-2:])).reshape(A.shape))
    P[b == 0] = np.eye(P.shape[-1])  # exact identity, no eigenbasis round-off
    return P


def transition_matrix(model: SubstitutionModel, branch: int, b: float, c: float = 1.0) -> np.ndarray:
    if b < 0:
        raise ValueError("branch length must be nonnegative")
    if c <= 0:
        raise ValueError("category rate must be positive")
    Q = model.generator_for(branch)
    if b == 0:
        return np.eye(model.state_count)
    if model.homogeneous and model.reversible and model.equilibrium is not None:
        P = Eigensystem.from_reversible(Q, model.equilibrium).exp(np.array(b * c))
    else:
        P = matrix_exponential(Q * (b * c))
    return _clean(P)


@dataclass(frozen=True, eq=False)
class RateCategories:
    rates: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        probs = np.atleast_1d(np.asarray(self.probabilities, dtype=float))
        if rates.shape != probs.shape or rates.size < 1:
            raise ModelError("rates and probabilities must be equal-length, non-empty")
        if np.any(rates <= 0) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ModelError("invalid rate categories")
        if abs((rates * probs).sum() - 1.0) > 1e-10:
            raise ModelError("category rates must have mean one")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "probabilities", probs)

    @property
    def count(self) -> int:
        return self.rates.size

    @classmethod
    def single(cls) -> "RateCategories":
        return cls(np.ones(1), np.ones(1))


def discrete_gamma_categories(alpha: float, count: int) -> RateCategories:
    """Equiprobable gamma(alpha, alpha) categories using bin medians, rescaled to mean one."""
    if not (alpha > 0 and np.isfinite(alpha)):
        raise ModelError("gamma shape must be positive and finite")
    if int(count) != count or count < 1:
        raise ModelError("category count must be a positive integer")
    count = int(count)
    if count == 1:
        return RateCategories.single()
    q = (2 * np.arange(count) + 1) / (2 * count)
    medians = stats.gamma.ppf(q, a=alpha, scale=1.0 / alpha)
    rates = medians / medians.mean()
    return RateCategories(rates, np.full(count, 1.0 / count))
