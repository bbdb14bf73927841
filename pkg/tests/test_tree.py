import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treegrad.tree import (
    NewickError,
    TreeError,
    build_tree,
    caterpillar_tree,
    depth_first_post_order,
    parse_newick,
    random_coalescent_tree,
    serialize_newick,
    traversal_orders,
)

from conftest import seeds


def test_three_taxon_numbering():
    t = parse_newick("((A:0.1,B:0.2):0.05,C:0.3);")
    assert t.tip_names == ("A", "B", "C")
    assert t.tip_count == 3 and t.node_count == 5
    # tips 0..N-1, the (A,B) clade is node 3, the root is 2N-2 = 4
    assert t.parent[0] == t.parent[1] == 3
    assert t.parent[2] == t.parent[3] == 4
    assert t.root == 4 and t.parent[4] == -1
    assert t.branch_length[3] == 0.05
    np.testing.assert_array_equal(t.children[3], [0, 1])


def test_two_taxon_tree():
    t = parse_newick("(A:0.1,B:0.2);")
    assert t.root == 2
    post, pre = traversal_orders(t)
    assert list(post) == [0, 1, 2]
    assert list(pre) in ([2, 0, 1], [2, 1, 0])
    assert serialize_newick(t) == "(A:0.1,B:0.2);"


def test_default_post_order_and_depth_first_order_are_both_admissible():
    t = parse_newick("((A:1,B:1):1,C:2);")
    assert list(t.post_order) == [0, 1, 2, 3, 4]
    assert list(depth_first_post_order(t)) == [0, 1, 3, 2, 4]
    alt = t.with_orders(depth_first_post_order(t))
    assert alt.tree_length() == t.tree_length()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("((A:0.1,B:0.2,C:0.3):0.05,D:0.4);", "polytomy"),
        ("((A:0.1):0.2,B:0.1);", "unifurcation"),
        ("(A:0.1,A:0.2);", "duplicate"),
        ("(A:-0.1,B:0.2);", "negative"),
        ("(A:0.1,B:0.2)", "';'"),
        ("(A:0.1,B:x);", "branch length"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(NewickError, match=fragment):
        parse_newick(text)


def test_parse_error_reports_position():
    with pytest.raises(NewickError) as info:
        parse_newick("(A:0.1,B:oops);")
    assert info.value.position == 9


def test_missing_lengths_default_to_zero_and_comments_are_skipped():
    t = parse_newick("[header]((A,B)x,C:1);")
    assert t.branch_length[0] == 0.0 and t.branch_length[3] == 0.0
    assert t.node_labels[3] == "x"


def test_internal_labels_omitted_when_absent():
    assert serialize_newick(parse_newick("((A:1,B:2):3,C:4);")) == "((A:1.0,B:2.0):3.0,C:4.0);"


def test_quoted_labels_round_trip():
    t = parse_newick("('tip one':1,'it''s':2);")
    assert t.tip_names == ("tip one", "it's")
    assert parse_newick(serialize_newick(t)).tip_names == t.tip_names


def clade_lengths(t):
    """Map each node's tip set to its branch length; equal maps mean isomorphic trees."""
    below = [frozenset([name]) for name in t.tip_names] + [None] * (t.node_count - t.tip_count)
    for node in t.post_order:
        if not t.is_tip(node):
            a, b = t.children[node]
            below[node] = below[a] | below[b]
    return {below[i]: float(t.branch_length[i]) for i in range(t.branch_count)}


def test_deep_caterpillar_does_not_recurse():
    t = caterpillar_tree(3000)
    assert clade_lengths(parse_newick(serialize_newick(t))) == clade_lengths(t)


def test_tree_is_immutable():
    t = parse_newick("(A:0.1,B:0.2);")
    with pytest.raises(ValueError):
        t.branch_length[0] = 3.0


def test_invalid_structures_rejected():
    with pytest.raises(TreeError):
        build_tree(["A", "B"], [2, 2, -1], [-0.1, 0.2])
    with pytest.raises(TreeError):
        build_tree(["A", "B"], [2, 2, -1], [0.1, 0.2], node_time=[1.0, 0.5, 1.0])


def test_durations_follow_node_times():
    t = caterpillar_tree(4, 0.5)
    np.testing.assert_allclose(t.durations(), t.branch_length)


def _check_orders(t):
    pos_post = np.empty(t.node_count, int)
    pos_post[t.post_order] = np.arange(t.node_count)
    pos_pre = np.empty(t.node_count, int)
    pos_pre[t.pre_order] = np.arange(t.node_count)
    for i in range(t.branch_count):
        assert pos_post[i] < pos_post[t.parent[i]]
        assert pos_pre[i] > pos_pre[t.parent[i]]
    assert t.post_order[-1] == t.root and t.pre_order[0] == t.root


@settings(max_examples=60, deadline=None)
@given(seed=seeds, n=st.integers(2, 40))
def test_random_trees_satisfy_invariants_and_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    t = random_coalescent_tree(n, rng)
    _check_orders(t)
    _check_orders(t.with_orders(depth_first_post_order(t)))
    once = parse_newick(serialize_newick(t))
    assert clade_lengths(once) == clade_lengths(t)
    twice = parse_newick(serialize_newick(once))
    assert serialize_newick(twice) == serialize_newick(once)
    assert np.isclose(t.tree_length(), t.branch_length.sum())
    assert np.all(t.durations() > 0)
