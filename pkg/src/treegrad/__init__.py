"""Linear-time phylogenetic likelihood gradients with optimization and HMC on top."""

from .alignment import (
    AlignmentError,
    RawAlignment,
    SitePatternAlignment,
    alignment_from_states,
    compress_patterns,
    parse_fasta,
    parse_phylip,
    read_alignment,
    simulate_alignment,
    write_fasta,
)
from .clock import (
    ClockParameterization,
    ClockPosterior,
    ClockPriors,
    branch_lengths_from_clock,
    gradient_unconstrained,
    log_posterior,
    node_time_gradient,
    sample_clock,
)
from .engine import (
    GradientReport,
    LikelihoodEngine,
    LikelihoodError,
    PartialCache,
    StaleCacheError,
    branch_gradient,
    hessian_diagonal,
    log_likelihood,
    post_order_pass,
    pre_order_pass,
)
from .substitution import (
    ModelError,
    RateCategories,
    SubstitutionModel,
    build_named_model,
    discrete_gamma_categories,
    matrix_exponential,
    transition_matrix,
)
from .tree import NewickError, Tree, TreeError, build_tree, parse_newick, read_newick, serialize_newick
from .validation import brute_force_likelihood, finite_difference_gradient, scaling_benchmark

__version__ = "0.1.0"
