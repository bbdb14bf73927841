import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treegrad.alignment import (
    AlignmentError,
    alignment_from_states,
    compress_patterns,
    parse_fasta,
    parse_phylip,
    simulate_alignment,
    write_fasta,
)
from treegrad.engine import LikelihoodEngine
from treegrad.substitution import RateCategories, build_named_model, discrete_gamma_categories, transition_matrix
from treegrad.tree import parse_newick, random_coalescent_tree

from conftest import NUCLEOTIDE_FREQS, seeds

HKY = build_named_model("HKY85", {"kappa": 2.0}, NUCLEOTIDE_FREQS)


def test_fasta_matrix_and_case():
    raw = parse_fasta(">a\nACGT\n>b\nacga\n")
    assert raw.taxa == ("a", "b")
    assert raw.matrix.shape == (2, 4)
    assert "".join(raw.matrix[1]) == "ACGA"


def test_fasta_multiline_and_comments():
    raw = parse_fasta("; provenance line\n>a\nAC\nGT\n>b\nAC\nGA\n")
    assert raw.site_count == 4


@pytest.mark.parametrize(
    "text, fragment",
    [(">a\nACG\n>b\nAC\n", "length"), (">a\nACGJ\n", "character"), (">a\nAC\n>a\nAC\n", "duplicate")],
)
def test_fasta_errors(text, fragment):
    with pytest.raises(AlignmentError, match=fragment):
        parse_fasta(text)


def test_phylip():
    raw = parse_phylip("2 3\nx ACG\ny ACT\n")
    assert raw.taxa == ("x", "y") and raw.site_count == 3


def test_ambiguity_and_gap_partials():
    aln = compress_patterns(parse_fasta(">a\nRA-\n>b\nAAA\n"))
    partials = {aln.patterns[0, k]: aln.tip_partials[0, k] for k in range(aln.pattern_count)}
    np.testing.assert_array_equal(partials["R"], [1, 0, 1, 0])
    np.testing.assert_array_equal(partials["-"], [1, 1, 1, 1])
    np.testing.assert_array_equal(partials["A"], [1, 0, 0, 0])


def test_compression_counts():
    aln = compress_patterns(parse_fasta(">a\nAAC\n>b\nAAG\n"))
    assert aln.pattern_count == 2
    np.testing.assert_array_equal(aln.weights, [2, 1])
    same = compress_patterns(parse_fasta(">a\n" + "A" * 100 + "\n>b\n" + "A" * 100 + "\n"))
    assert same.pattern_count == 1 and same.weights[0] == 100
    distinct = compress_patterns(parse_fasta(">a\nACGT\n>b\nACGT\n"))
    np.testing.assert_array_equal(distinct.weights, [1, 1, 1, 1])


def test_n_and_gap_columns_kept_apart():
    aln = compress_patterns(parse_fasta(">a\nN-\n>b\nAA\n"))
    assert aln.pattern_count == 2


def test_binding_reorders_and_rejects_mismatch():
    aln = compress_patterns(parse_fasta(">b\nC\n>a\nA\n"))
    np.testing.assert_array_equal(aln.bind(["a", "b"])[:, 0], [[1, 0, 0, 0], [0, 1, 0, 0]])
    with pytest.raises(AlignmentError):
        aln.bind(["a", "c"])


def test_all_gap_site_likelihood_is_one():
    tree = random_coalescent_tree(6, np.random.default_rng(1))
    aln = alignment_from_states(tree.tip_names, -np.ones((6, 1), dtype=int), 4)
    ll = LikelihoodEngine(tree, aln, HKY, discrete_gamma_categories(0.5, 4)).log_likelihood()
    assert abs(ll) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=seeds, sites=st.integers(1, 60))
def test_compressed_likelihood_equals_per_site_sum(seed, sites):
    rng = np.random.default_rng(seed)
    tree = random_coalescent_tree(5, rng)
    raw = simulate_alignment(tree, HKY, RateCategories.single(), sites, rng)
    aln = compress_patterns(raw)
    assert aln.site_count == sites
    whole = LikelihoodEngine(tree, aln, HKY).log_likelihood()
    per_site = 0.0
    for k in range(sites):
        text = "".join(f">{n}\n{raw.matrix[i, k]}\n" for i, n in enumerate(raw.taxa))
        per_site += LikelihoodEngine(tree, compress_patterns(parse_fasta(text)), HKY).log_likelihood()
    assert whole == pytest.approx(per_site, abs=1e-9)


def test_simulation_shapes_and_errors():
    tree = parse_newick("(A:0.1,B:0.2);")
    raw = simulate_alignment(tree, HKY, RateCategories.single(), 1, 0)
    assert raw.matrix.shape == (2, 1)
    with pytest.raises(ValueError):
        simulate_alignment(tree, HKY, RateCategories.single(), 0, 0)


def test_simulation_zero_lengths_copy_the_root():
    tree = parse_newick("((A:0,B:0):0,C:0);")
    raw = simulate_alignment(tree, HKY, RateCategories.single(), 200, 3)
    assert np.all(raw.matrix == raw.matrix[0])


def test_simulation_is_deterministic():
    tree = random_coalescent_tree(8, np.random.default_rng(0))
    a = simulate_alignment(tree, HKY, discrete_gamma_categories(0.7, 4), 50, 11)
    b = simulate_alignment(tree, HKY, discrete_gamma_categories(0.7, 4), 50, 11)
    np.testing.assert_array_equal(a.matrix, b.matrix)


def test_tip_frequencies_match_transition_row_mix():
    # one informative branch: A sits at the root's depth, B is a distance b away
    b = 0.4
    tree = parse_newick(f"(A:0,B:{b});")
    n = 200_000
    root = np.array([0.7, 0.1, 0.1, 0.1])  # away from equilibrium so the row mix is not just pi
    model = HKY.with_root_distribution(root)
    raw = simulate_alignment(tree, model, RateCategories.single(), n, 5)
    expected = root @ transition_matrix(model, 1, b)
    counts = np.array([(raw.matrix[1] == c).sum() for c in "ACGT"])
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(counts / n - expected) < 3 * se)


def test_fasta_writer_round_trip(tmp_path):
    raw = parse_fasta(">a\nACGT\n>b\nAC-A\n")
    path = tmp_path / "x.fasta"
    write_fasta(raw, path, header="hash=abc")
    text = path.read_text()
    assert text.startswith(";hash=abc")
    np.testing.assert_array_equal(parse_fasta(text).matrix, raw.matrix)
