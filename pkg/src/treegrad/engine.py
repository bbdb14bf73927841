"""Phylogenetic likelihood and its linear-time branch-length gradient.

The post-order pass computes ``p_k = (P_i p_i) * (P_j p_j)`` up to the root,
where the likelihood is ``pi' p_root``.  The pre-order pass propagates
``q_i = P_i' [q_k * (P_j p_j)]`` back down from ``q_root = pi``; along the way
each branch's derivative ``q_i' Q_i p_i / Pr(Y)`` (and, on request, the
``Q_i^2`` analogue for the Hessian diagonal) is accumulated.  Both passes
together touch every node exactly twice.

Partials are laid out as ``(node, category, state, pattern)`` so each node
update is one ``m x m`` by ``m x patterns`` matrix product per category.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .alignment import SitePatternAlignment
from .substitution import Eigensystem, RateCategories, SubstitutionModel, transition_matrices
from .tree import Tree

SCALING_THRESHOLD = 1e-150
SCALING_MODES = ("auto", "always", "never")


class LikelihoodError(ArithmeticError):
    """Zero or non-finite site likelihood."""

    def __init__(self, message: str, pattern: Optional[int] = None):
        self.pattern = pattern
        super().__init__(message)


class StaleCacheError(RuntimeError):
    pass


@dataclass
class GradientReport:
    log_likelihood: float
    branch_gradient: np.ndarray
    hessian_diagonal: Optional[np.ndarray]
    pattern_count: int
    category_count: int


class PartialCache:
    """Post- and pre-order partial buffers for one evaluation context.

    ``post_log_scale[k]`` and ``pre_log_scale[k]`` hold the accumulated log
    rescaling constants of ``post[k]`` and ``pre[k]`` per pattern; the true
    partials are the stored ones times ``exp`` of these.
    """

    def __init__(self, tree: Tree, alignment: SitePatternAlignment, categories: RateCategories, scaling: str = "auto"):
        if scaling not in SCALING_MODES:
            raise ValueError(f"scaling must be one of {SCALING_MODES}")
        n, L = tree.node_count, categories.count
        S, m = alignment.pattern_count, alignment.state_count
        self.scaling = scaling
        self.tip_partials = alignment.bind(tree.tip_names)  # (N, S, m)
        self.post = np.empty((n, L, m, S))
        self.pre = np.empty((n, L, m, S))
        self.messages = np.empty((n - 1, L, m, S))  # P_i p_i for every branch
        self.post_log_scale = np.zeros((n, S))
        self.pre_log_scale = np.zeros((n, S))
        self.post[: tree.tip_count] = self.tip_partials.transpose(0, 2, 1)[:, None, :, :]
        self.transition = None
        self.branch_lengths: Optional[np.ndarray] = None
        self.site_log_likelihood: Optional[np.ndarray] = None
        self.post_valid = False
        self.pre_valid = False
        self.visits = 0
        self.eigen: Optional[Eigensystem] = None

    def invalidate(self):
        self.post_valid = False
        self.pre_valid = False

    def matches(self, branch_lengths: np.ndarray) -> bool:
        return self.branch_lengths is not None and np.array_equal(self.branch_lengths, branch_lengths)


def _rescale(block: np.ndarray, log_scale: np.ndarray, mode: str) -> None:
    """Max-normalize ``block`` (L, m, S) in place per pattern, updating ``log_scale`` (S,)."""
    if mode == "never":
        return
    mx = block.max(axis=(0, 1))
    if mode == "auto":
        small = (mx < SCALING_THRESHOLD) & (mx > 0)
        if not small.any():
            return
        factor = np.where(small, mx, 1.0)
    else:
        factor = np.where(mx > 0, mx, 1.0)
    block /= factor
    log_scale += np.log(factor)


def _branch_lengths(tree: Tree, branch_lengths) -> np.ndarray:
    b = tree.branch_length if branch_lengths is None else np.asarray(branch_lengths, dtype=float)
    if b.shape != (tree.branch_count,):
        raise ValueError(f"expected {tree.branch_count} branch lengths, got {b.shape}")
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise ValueError("branch lengths must be finite and nonnegative")
    return b


def post_order_pass(
    tree: Tree,
    alignment: SitePatternAlignment,
    model: SubstitutionModel,
    categories: RateCategories,
    cache: PartialCache,
    branch_lengths=None,
) -> PartialCache:
    b = _branch_lengths(tree, branch_lengths)
    if cache.eigen is None and model.homogeneous and model.reversible and model.equilibrium is not None:
        cache.eigen = Eigensystem.from_reversible(model.generator, model.equilibrium)
    P = transition_matrices(model, b, categories.rates, eigen=cache.eigen)
    cache.transition = P
    cache.branch_lengths = b.copy()
    cache.pre_valid = False
    post, msg, scale = cache.post, cache.messages, cache.post_log_scale
    n_tips = tree.tip_count
    mode = cache.scaling
    for node in tree.post_order:
        cache.visits += 1
        if node < n_tips:
            continue
        i, j = tree.children[node]
        np.matmul(P[i], post[i], out=msg[i])
        np.matmul(P[j], post[j], out=msg[j])
        np.multiply(msg[i], msg[j], out=post[node])
        np.add(scale[i], scale[j], out=scale[node])
        _rescale(post[node], scale[node], mode)
    root = tree.root
    per_cat = np.einsum("m,lms->ls", model.root_distribution, post[root])
    site = categories.probabilities @ per_cat
    with np.errstate(divide="ignore", invalid="ignore"):
        site_ll = np.log(site) + scale[root]
    if not np.all(np.isfinite(site_ll)):
        bad = int(np.flatnonzero(~np.isfinite(site_ll))[0])
        what = "zero" if site[bad] == 0 else "non-finite"
        raise LikelihoodError(f"{what} site likelihood for pattern {bad}", pattern=bad)
    cache.site_log_likelihood = site_ll
    cache.post_valid = True
    return cache


def log_likelihood(
    tree: Tree,
    alignment: SitePatternAlignment,
    model: SubstitutionModel,
    categories: RateCategories,
    cache: Optional[PartialCache] = None,
    branch_lengths=None,
) -> float:
    """Pattern-weighted log-likelihood; runs the post-order pass if needed."""
    if cache is None:
        cache = PartialCache(tree, alignment, categories)
    b = _branch_lengths(tree, branch_lengths)
    if not (cache.post_valid and cache.matches(b)):
        post_order_pass(tree, alignment, model, categories, cache, b)
    return float(alignment.weights @ cache.site_log_likelihood)


def pre_order_pass(
    tree: Tree,
    alignment: SitePatternAlignment,
    model: SubstitutionModel,
    categories: RateCategories,
    cache: PartialCache,
    *,
    gradient: bool = True,
    hessian: bool = False,
):
    """Fill the pre-order partials; optionally fuse the derivative accumulation.

    Returns ``(gradient, hessian_diagonal)`` over branches (either may be None).
    """
    if not cache.post_valid:
        raise StaleCacheError("pre-order pass requires a current post-order pass")
    P = cache.transition
    post, pre, msg = cache.post, cache.pre, cache.messages
    post_scale, pre_scale = cache.post_log_scale, cache.pre_log_scale
    mode = cache.scaling
    B = tree.branch_count
    w_cat = categories.probabilities
    c = categories.rates
    Qs = model.generators(B)
    Q2s = Qs @ Qs if hessian else None
    PT = np.ascontiguousarray(P.transpose(0, 1, 3, 2))
    grad = np.zeros(B) if (gradient or hessian) else None
    hess = np.zeros(B) if hessian else None
    weights = alignment.weights
    wc = w_cat * c
    wc2 = w_cat * c * c

    root = tree.root
    pre[root] = model.root_distribution[None, :, None]
    pre_scale[root] = 0.0
    cache.visits += 1
    for node in tree.pre_order:
        if node < tree.tip_count:
            continue
        pair = tree.children[node]
        for slot in (0, 1):
            i, j = pair[slot], pair[1 - slot]
            cache.visits += 1
            np.matmul(PT[i], pre[node] * msg[j], out=pre[i])
            np.add(pre_scale[node], post_scale[j], out=pre_scale[i])
            _rescale(pre[i], pre_scale[i], mode)
            if grad is None:
                continue
            q, p = pre[i], post[i]
            den = w_cat @ np.einsum("lms,lms->ls", q, p)
            qp = np.einsum("lms,lms->ls", q, Qs[i] @ p)
            g_site = (wc @ qp) / den
            grad[i] = weights @ g_site
            if hess is not None:
                q2p = np.einsum("lms,lms->ls", q, Q2s[i] @ p)
                hess[i] = weights @ ((wc2 @ q2p) / den - g_site * g_site)
    cache.pre_valid = True
    return grad, hess


def branch_gradient(
    tree: Tree,
    alignment: SitePatternAlignment,
    model: SubstitutionModel,
    categories: RateCategories,
    cache: Optional[PartialCache] = None,
    branch_lengths=None,
    hessian: bool = False,
) -> GradientReport:
    """Log-likelihood, its gradient over all branch lengths and optionally the Hessian diagonal."""
    if cache is None:
        cache = PartialCache(tree, alignment, categories)
    b = _branch_lengths(tree, branch_lengths)
    post_order_pass(tree, alignment, model, categories, cache, b)
    ll = float(alignment.weights @ cache.site_log_likelihood)
    grad, hess = pre_order_pass(tree, alignment, model, categories, cache, gradient=True, hessian=hessian)
    if not np.all(np.isfinite(grad)) or (hess is not None and not np.all(np.isfinite(hess))):
        raise LikelihoodError("non-finite derivative")
    return GradientReport(ll, grad, hess, alignment.pattern_count, categories.count)


def hessian_diagonal(tree, alignment, model, categories, cache=None, branch_lengths=None) -> np.ndarray:
    return branch_gradient(tree, alignment, model, categories, cache, branch_lengths, hessian=True).hessian_diagonal


def node_log_likelihoods(alignment: SitePatternAlignment, categories: RateCategories, cache: PartialCache) -> np.ndarray:
    """Log-likelihood recomputed as ``p_k' q_k`` at every node (needs both passes)."""
    if not cache.pre_valid:
        raise StaleCacheError("both passes are required")
    inner = np.einsum("nlms,nlms->nls", cache.post, cache.pre)
    site = np.einsum("l,nls->ns", categories.probabilities, inner)
    site_ll = np.log(site) + cache.post_log_scale + cache.pre_log_scale
    return site_ll @ alignment.weights


class LikelihoodEngine:
    """Binds tree, data and model to a reusable cache.

    With ``workers > 1`` the patterns are split into that many contiguous
    blocks, each with a private cache, evaluated on a thread pool (the matrix
    products release the GIL) and reduced in block order, so results do not
    depend on thread scheduling.
    """

    def __init__(
        self,
        tree: Tree,
        alignment: SitePatternAlignment,
        model: SubstitutionModel,
        categories: Optional[RateCategories] = None,
        scaling: str = "auto",
        workers: int = 1,
    ):
        if alignment.state_count != model.state_count:
            raise ValueError("alignment and model disagree on the number of states")
        if workers < 1:
            raise ValueError("workers must be at least 1")
        self.tree = tree
        self.alignment = alignment
        self.model = model
        self.categories = categories or RateCategories.single()
        self.workers = min(workers, alignment.pattern_count)
        self.likelihood_evaluations = 0
        self._blocks = []
        self._pool = None
        if self.workers > 1:
            for idx in np.array_split(np.arange(alignment.pattern_count), self.workers):
                self._blocks.append(LikelihoodEngine(tree, alignment.subset(idx), model, self.categories, scaling))
            self._pool = ThreadPoolExecutor(self.workers)
            self.cache = None
        else:
            self.cache = PartialCache(tree, alignment, self.categories, scaling)

    def _map(self, fn):
        return list(self._pool.map(fn, self._blocks))

    @property
    def visits(self) -> int:
        if self._blocks:
            return self._blocks[0].visits
        return self.cache.visits

    def log_likelihood(self, branch_lengths=None) -> float:
        b = _branch_lengths(self.tree, branch_lengths)
        if self._blocks:
            self.likelihood_evaluations += 1
            return float(sum(self._map(lambda e: e.log_likelihood(b))))
        if not (self.cache.post_valid and self.cache.matches(b)):
            self.likelihood_evaluations += 1
        return log_likelihood(self.tree, self.alignment, self.model, self.categories, self.cache, b)

    def gradient(self, branch_lengths=None, hessian: bool = False) -> GradientReport:
        self.likelihood_evaluations += 1
        if self._blocks:
            b = _branch_lengths(self.tree, branch_lengths)
            parts = self._map(lambda e: e.gradient(b, hessian))
            total = parts[0]
            grad = total.branch_gradient.copy()
            hess = None if total.hessian_diagonal is None else total.hessian_diagonal.copy()
            ll = total.log_likelihood
            for r in parts[1:]:
                ll += r.log_likelihood
                grad += r.branch_gradient
                if hess is not None:
                    hess += r.hessian_diagonal
            return GradientReport(ll, grad, hess, self.alignment.pattern_count, self.categories.count)
        return branch_gradient(
            self.tree, self.alignment, self.model, self.categories, self.cache, branch_lengths, hessian
        )

    def hessian_diagonal(self, branch_lengths=None) -> np.ndarray:
        return self.gradient(branch_lengths, hessian=True).hessian_diagonal

    def node_log_likelihoods(self) -> np.ndarray:
        if self._blocks:
            return np.sum([e.node_log_likelihoods() for e in self._blocks], axis=0)
        return node_log_likelihoods(self.alignment, self.categories, self.cache)
