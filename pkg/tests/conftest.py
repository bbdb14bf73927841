import numpy as np
import pytest
from hypothesis import strategies as st

from treegrad.alignment import alignment_from_states
from treegrad.substitution import build_named_model, discrete_gamma_categories, RateCategories
from treegrad.tree import random_coalescent_tree

NUCLEOTIDE_FREQS = [0.3, 0.2, 0.2, 0.3]


def random_model(name, rng):
    freqs = rng.dirichlet(np.full(4, 5.0))
    if name == "JC69":
        return build_named_model("JC69")
    if name == "HKY85":
        return build_named_model("HKY85", {"kappa": float(rng.uniform(1.0, 5.0))}, freqs)
    return build_named_model("GTR", {"rates": list(rng.uniform(0.2, 3.0, 6))}, freqs)


def random_instance(rng, n_tips, sites, model_name="HKY85", categories=1, max_length=1.0):
    """Random tree, branch lengths and uniformly drawn tip states (with some missing)."""
    tree = random_coalescent_tree(n_tips, rng)
    b = rng.uniform(0.0, max_length, tree.branch_count)
    tree = tree.with_branch_lengths(b)
    states = rng.integers(-1, 4, size=(n_tips, sites))
    aln = alignment_from_states(tree.tip_names, states, 4)
    model = random_model(model_name, rng)
    cats = RateCategories.single() if categories == 1 else discrete_gamma_categories(
        float(rng.uniform(0.2, 2.0)), categories
    )
    return tree, aln, model, cats


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


seeds = st.integers(min_value=0, max_value=2**31 - 1)


# acceptance results, printed together once the session ends
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
