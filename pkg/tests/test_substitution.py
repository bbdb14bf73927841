import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treegrad.substitution import (
    Eigensystem,
    ModelError,
    RateCategories,
    SubstitutionModel,
    build_named_model,
    discrete_gamma_categories,
    matrix_exponential,
    transition_matrices,
    transition_matrix,
)

from conftest import random_model, seeds

JC = build_named_model("JC69")

# Gamma(0.5, 0.5) bin medians for four categories, rescaled to mean one.
# Computed with mpmath (regularized incomplete gamma, 30 digits) root finding.
GAMMA_MEDIANS_HALF_4 = [0.029077754761925789, 0.28071453713997505, 0.92477306511420857, 2.7654346429838906]


def taylor_expm(A, terms=60):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def random_generator(rng, m=4):
    Q = rng.uniform(0.1, 2.0, (m, m))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def test_jc_generator():
    expected = np.full((4, 4), 1 / 3)
    np.fill_diagonal(expected, -1.0)
    np.testing.assert_allclose(JC.generator, expected, atol=1e-15)


def test_degenerate_parameterizations_equal_jc():
    hky = build_named_model("HKY85", {"kappa": 1.0}, [0.25] * 4)
    gtr = build_named_model("GTR", {"rates": [2.0] * 6}, [0.25] * 4)
    np.testing.assert_allclose(hky.generator, JC.generator, atol=1e-14)
    np.testing.assert_allclose(gtr.generator, JC.generator, atol=1e-14)


@pytest.mark.parametrize("name", ["JC69", "HKY85", "GTR"])
def test_named_models_are_normalized(name):
    model = random_model(name, np.random.default_rng(3))
    assert model.reversible
    assert -(model.root_distribution * np.diag(model.generator)).sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(model.generator.sum(axis=1), 0.0, atol=1e-12)


@pytest.mark.parametrize(
    "args",
    [("HKY85", {"kappa": -1.0}, None), ("GTR", {"rates": [1, 1, 1, 1, 1, 0]}, None),
     ("HKY85", {"kappa": 2.0}, [0.5, 0.5, 0.5, -0.5]), ("WAG", {}, None)],
)
def test_named_model_errors(args):
    with pytest.raises(ModelError):
        build_named_model(*args)


def test_generator_validation():
    with pytest.raises(ModelError):
        SubstitutionModel(np.array([[-1.0, 0.5], [1.0, -1.0]]), np.array([0.5, 0.5]))
    with pytest.raises(ModelError):
        SubstitutionModel(np.array([[1.0, -1.0], [1.0, -1.0]]), np.array([0.5, 0.5]))
    with pytest.raises(ModelError):
        SubstitutionModel(JC.generator, np.array([0.5, 0.5, 0.5, 0.5]))


def test_non_stationary_root_is_allowed():
    model = SubstitutionModel(JC.generator, np.array([0.7, 0.1, 0.1, 0.1]))
    assert not np.allclose(model.root_distribution @ model.generator, 0.0)


def test_jc_transition_closed_form():
    P = transition_matrix(JC, 0, 0.3)
    same = 0.25 + 0.75 * math.exp(-0.4)
    assert same == pytest.approx(0.75274003452672948, abs=1e-15)
    np.testing.assert_allclose(np.diag(P), same, atol=1e-14)
    np.testing.assert_allclose(P[0, 1:], (1 - same) / 3, atol=1e-14)


def test_transition_limits():
    np.testing.assert_array_equal(transition_matrix(JC, 0, 0.0), np.eye(4))
    np.testing.assert_allclose(transition_matrix(JC, 0, 100.0), 0.25, atol=1e-10)
    with pytest.raises(ValueError):
        transition_matrix(JC, 0, -0.1)


def test_matrix_exponential_cases():
    np.testing.assert_array_equal(matrix_exponential(np.zeros((4, 4))), np.eye(4))
    a = np.array([-1.0, 0.5, 2.0])
    np.testing.assert_allclose(matrix_exponential(np.diag(a)), np.diag(np.exp(a)), rtol=1e-14)
    with pytest.raises(ValueError):
        matrix_exponential(np.array([[np.nan]]))


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_matrix_exponential_matches_taylor(seed):
    A = 0.3 * random_generator(np.random.default_rng(seed))
    ref = taylor_expm(A)
    np.testing.assert_allclose(matrix_exponential(A), ref, rtol=1e-12, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, name=st.sampled_from(["JC69", "HKY85", "GTR"]), b1=st.floats(0, 2), b2=st.floats(0, 2))
def test_transition_properties(seed, name, b1, b2):
    model = random_model(name, np.random.default_rng(seed))
    P1, P2 = transition_matrix(model, 0, b1), transition_matrix(model, 0, b2)
    np.testing.assert_allclose(P1.sum(axis=1), 1.0, atol=1e-10)
    assert np.all(P1 >= 0)
    np.testing.assert_allclose(P1 @ P2, transition_matrix(model, 0, b1 + b2), atol=1e-10)
    D = model.root_distribution[:, None] * P1
    np.testing.assert_allclose(D, D.T, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, b=st.floats(0.01, 2.0))
def test_derivative_commutes_with_generator(seed, b):
    model = random_model("GTR", np.random.default_rng(seed))
    h = 1e-5
    dP = (transition_matrix(model, 0, b + h) - transition_matrix(model, 0, b - h)) / (2 * h)
    P = transition_matrix(model, 0, b)
    np.testing.assert_allclose(dP, model.generator @ P, atol=1e-6)
    np.testing.assert_allclose(dP, P @ model.generator, atol=1e-6)


def test_eigen_path_matches_general_path():
    model = random_model("GTR", np.random.default_rng(9))
    b = np.array([0.0, 0.05, 0.7, 3.0])
    eig = transition_matrices(model, b, [0.5, 2.0])
    general = np.array([[matrix_exponential(model.generator * bi * c) for c in (0.5, 2.0)] for bi in b])
    np.testing.assert_allclose(eig, general, atol=1e-13)
    E = Eigensystem.from_reversible(model.generator, model.root_distribution)
    np.testing.assert_allclose(E.U @ np.diag(E.values) @ E.U_inv, model.generator, atol=1e-13)


def test_branch_specific_generators_are_not_renormalized():
    rng = np.random.default_rng(4)
    Q2 = 3.0 * random_generator(rng)
    model = JC.with_branch_generators({1: Q2})
    assert not model.homogeneous
    np.testing.assert_array_equal(model.generator_for(1), Q2)
    P = transition_matrices(model, np.array([0.2, 0.2, 0.2]))
    np.testing.assert_allclose(P[1, 0], matrix_exponential(Q2 * 0.2), atol=1e-13)
    np.testing.assert_allclose(P[0, 0], transition_matrix(JC, 0, 0.2), atol=1e-13)


def test_gamma_categories():
    single = discrete_gamma_categories(0.5, 1)
    assert single.count == 1 and single.rates[0] == 1.0
    # gamma(a, a) tends to Normal(1, 1/a); the outer bin medians sit 1.15 sd from 1
    flat = discrete_gamma_categories(1e6, 4)
    z = np.array([-1.1503493803760079, -0.31863936396437514, 0.31863936396437514, 1.1503493803760079])
    np.testing.assert_allclose(flat.rates, 1.0 + z / 1e3, atol=2e-6)
    np.testing.assert_allclose(discrete_gamma_categories(1e8, 4).rates, 1.0, atol=1e-3)
    cats = discrete_gamma_categories(0.5, 4)
    np.testing.assert_allclose(cats.rates, GAMMA_MEDIANS_HALF_4, rtol=1e-12)
    np.testing.assert_allclose(cats.probabilities, 0.25)
    for bad in [(0.0, 4), (-1.0, 4), (0.5, 0), (0.5, 2.5)]:
        with pytest.raises(ModelError):
            discrete_gamma_categories(*bad)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.05, 50.0), count=st.integers(1, 12))
def test_gamma_categories_have_mean_one(alpha, count):
    cats = discrete_gamma_categories(alpha, count)
    assert float(cats.rates @ cats.probabilities) == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(cats.rates) >= 0)


def test_rate_categories_validation():
    with pytest.raises(ModelError):
        RateCategories(np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    with pytest.raises(ModelError):
        RateCategories(np.array([0.5, 1.5]), np.array([0.6, 0.6]))
