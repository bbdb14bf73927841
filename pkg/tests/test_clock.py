import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from treegrad.alignment import compress_patterns, simulate_alignment
from treegrad.clock import (
    EPS0,
    MU,
    PSI,
    ClockParameterization,
    ClockPosterior,
    ClockPriors,
    branch_lengths_from_clock,
    gradient_unconstrained,
    lognormal_hyperparams,
    log_posterior,
    node_time_gradient,
    sample_clock,
)
from treegrad.engine import LikelihoodEngine
from treegrad.substitution import build_named_model, discrete_gamma_categories
from treegrad.tree import random_coalescent_tree
from treegrad.validation import finite_difference_gradient, finite_difference_hessian_diagonal

from conftest import NUCLEOTIDE_FREQS, seeds

HKY = build_named_model("HKY85", {"kappa": 2.5}, NUCLEOTIDE_FREQS)


def clock_problem(seed, n_tips=8, sites=60, psi=0.5, mu=0.4):
    rng = np.random.default_rng(seed)
    tree = random_coalescent_tree(n_tips, rng, scale=1.0)
    clock = sample_clock(tree, mu, psi, rng)
    cats = discrete_gamma_categories(0.8, 4)
    sim_tree = tree.with_branch_lengths(branch_lengths_from_clock(tree, clock))
    aln = compress_patterns(simulate_alignment(sim_tree, HKY, cats, sites, rng))
    return tree, aln, cats, clock


def posterior(seed, **kwargs):
    tree, aln, cats, clock = clock_problem(seed)
    return ClockPosterior(LikelihoodEngine(tree, aln, HKY, cats), tree, **kwargs), clock


@pytest.mark.parametrize("psi", [0.05, 0.5, 2.0])
def test_lognormal_effects_have_mean_one_and_variance_psi_squared(psi):
    loc, scale = lognormal_hyperparams(psi)
    dist = stats.lognorm(s=scale, scale=math.exp(loc))
    assert dist.mean() == pytest.approx(1.0, abs=1e-12)
    assert dist.var() == pytest.approx(psi * psi, rel=1e-10)


def test_strict_clock_has_unit_effects():
    clock = ClockParameterization.strict(0.2, 5)
    np.testing.assert_array_equal(clock.rates, 0.2)
    with pytest.raises(ValueError):
        clock.to_unconstrained()
    for bad in [dict(mu=0.0, psi=0.1, epsilon=[1.0]), dict(mu=1.0, psi=-1.0, epsilon=[1.0]),
                dict(mu=1.0, psi=0.1, epsilon=[0.0])]:
        with pytest.raises(ValueError):
            ClockParameterization(**bad)


def test_branch_lengths_are_rate_times_duration():
    tree, _, _, clock = clock_problem(1)
    b = branch_lengths_from_clock(tree, clock)
    np.testing.assert_allclose(b, clock.mu * clock.epsilon * tree.durations(), rtol=1e-15)


def test_prior_matches_scipy_densities():
    post, clock = posterior(2, priors=ClockPriors(likelihood=False))
    x = clock.to_unconstrained()
    loc, scale = lognormal_hyperparams(clock.psi)
    # flat log-mu prior contributes nothing; log-psi and log-eps carry their Jacobians
    expected = (stats.expon(scale=1 / 3).logpdf(clock.psi) + x[PSI]
                + stats.norm(loc, scale).logpdf(x[EPS0:]).sum())
    assert post.log_posterior(x) == pytest.approx(expected, rel=1e-12)
    lognormal_mu = ClockPosterior(None, post.tree, ClockPriors(mu_prior="lognormal", mu_meanlog=-1.0,
                                                                mu_sdlog=0.5, likelihood=False))
    extra = lognormal_mu.log_posterior(x) - expected
    assert extra == pytest.approx(stats.norm(-1.0, 0.5).logpdf(x[MU]), rel=1e-12)


def test_log_posterior_splits_into_likelihood_and_prior():
    tree, aln, cats, clock = clock_problem(3)
    engine = LikelihoodEngine(tree, aln, HKY, cats)
    post = ClockPosterior(engine, tree)
    x = clock.to_unconstrained()
    prior_only = ClockPosterior(None, tree, ClockPriors(likelihood=False)).log_posterior(x)
    ll = engine.log_likelihood(branch_lengths_from_clock(tree, clock))
    assert post.log_posterior(x) == pytest.approx(ll + prior_only, rel=1e-13)
    assert log_posterior(tree, aln, HKY, cats, clock) == pytest.approx(ll + prior_only, rel=1e-13)
    flat = ClockPosterior(engine, tree, ClockPriors.flat_testing())
    assert flat.log_posterior(x) == pytest.approx(ll, rel=1e-13)


@settings(max_examples=20, deadline=None)
@given(seed=seeds, lognormal=st.booleans())
def test_gradient_and_hessian_against_finite_differences(seed, lognormal):
    priors = ClockPriors(mu_prior="lognormal" if lognormal else "flat_log")
    post, clock = posterior(seed, priors=priors)
    x = clock.to_unconstrained()
    lp, g, h = post.value_and_gradient(x, hessian=True)
    assert lp == pytest.approx(post.log_posterior(x), rel=1e-13)
    fd = finite_difference_gradient(post.log_posterior, x, h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
    fdh = finite_difference_hessian_diagonal(post.log_posterior, x, h=1e-4)
    # the mu entry omits likelihood cross terms; every other entry is exact
    np.testing.assert_allclose(h[PSI:], fdh[PSI:], rtol=1e-3, atol=1e-3)


def test_module_level_gradient_matches_posterior():
    tree, aln, cats, clock = clock_problem(4)
    post = ClockPosterior(LikelihoodEngine(tree, aln, HKY, cats), tree)
    np.testing.assert_allclose(gradient_unconstrained(tree, aln, HKY, cats, clock),
                               post.gradient(clock.to_unconstrained()), rtol=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=seeds)
def test_rate_coordinates_are_a_unit_jacobian_reparameterization(seed):
    effects, clock = posterior(seed)
    rates = ClockPosterior(effects.engine, effects.tree, coordinates="rates")
    x = clock.to_unconstrained()
    z = rates.restrict(x)
    np.testing.assert_allclose(z[EPS0:], np.log(clock.rates), rtol=1e-13)
    np.testing.assert_allclose(rates.expand(z), x, atol=1e-13)
    assert rates.log_posterior_free(z) == pytest.approx(effects.log_posterior_free(effects.restrict(x)), rel=1e-13)
    lp, g = rates.value_and_gradient_free(z)
    fd = finite_difference_gradient(rates.log_posterior_free, z, h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(rates.rate_columns(z), clock.rates, rtol=1e-13)


def test_rate_coordinate_mu_curvature_is_exact():
    effects, clock = posterior(5, priors=ClockPriors(mu_prior="lognormal", mu_sdlog=0.7))
    rates = ClockPosterior(effects.engine, effects.tree, effects.priors, coordinates="rates")
    z = rates.restrict(clock.to_unconstrained())
    h = rates.hessian_diagonal_free(z)
    fd = finite_difference_hessian_diagonal(rates.log_posterior_free, z, h=1e-4)
    assert h[MU] == pytest.approx(fd[MU], rel=1e-5)
    assert h[PSI] == pytest.approx(fd[PSI], rel=1e-4)


def test_fixed_and_strict_layouts():
    effects, clock = posterior(6, fixed={"mu": 0.4})
    assert effects.free.tolist() == list(range(1, effects.dim))
    z = effects.restrict(effects.initial_state(clock))
    assert effects.expand(z)[MU] == pytest.approx(math.log(0.4))
    strict, _ = posterior(6, strict=True, coordinates="rates")
    assert not strict.rate_coordinates and strict.free.tolist() == [MU]
    z = np.array([math.log(0.3)])
    lengths = strict.branch_lengths(strict.expand(z))
    np.testing.assert_allclose(lengths, 0.3 * strict.tree.durations(), rtol=1e-14)
    lp, g = strict.value_and_gradient_free(z)
    fd = finite_difference_gradient(strict.log_posterior_free, z, h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-6)
    np.testing.assert_allclose(strict.rates_from_states(strict.expand(z)[None]), 0.3, rtol=1e-14)


def test_extreme_psi_gives_finite_or_minus_infinite_values():
    post, clock = posterior(7)
    x = clock.to_unconstrained()
    for log_psi in (-40.0, 40.0, 800.0):
        x[PSI] = log_psi
        lp, g = post.value_and_gradient(x)
        assert lp == -np.inf or np.all(np.isfinite(g))


def test_node_time_gradient_against_finite_differences():
    tree, aln, cats, clock = clock_problem(8)
    engine = LikelihoodEngine(tree, aln, HKY, cats)
    g = node_time_gradient(engine, tree, clock)
    assert g.shape == (tree.tip_count - 1,)
    t0 = tree.node_time.copy()

    def loglik(internal_times):
        t = t0.copy()
        t[tree.tip_count:] = internal_times
        moved = tree.with_node_times(t)
        return engine.log_likelihood(branch_lengths_from_clock(moved, clock))

    fd = finite_difference_gradient(loglik, t0[tree.tip_count:], h=1e-7)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
