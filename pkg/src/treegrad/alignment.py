"""Sequence alignments, site-pattern compression and tip partials."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NUCLEOTIDES = "ACGT"

# IUPAC codes as sets over A, C, G, T.
IUPAC = {
    "A": "A", "C": "C", "G": "G", "T": "T", "U": "T",
    "R": "AG", "Y": "CT", "S": "CG", "W": "AT", "K": "GT", "M": "AC",
    "B": "CGT", "D": "AGT", "H": "ACT", "V": "ACG",
    "N": "ACGT", "?": "ACGT", "-": "ACGT", ".": "ACGT",
}


def _code_vector(symbol: str) -> np.ndarray:
    return np.array([1.0 if b in IUPAC[symbol] else 0.0 for b in NUCLEOTIDES])


CODE_PARTIALS = {s: _code_vector(s) for s in IUPAC}


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class RawAlignment:
    """Taxa plus an ``(n_taxa, n_sites)`` character matrix."""

    taxa: tuple[str, ...]
    matrix: np.ndarray  # dtype '<U1'

    @property
    def site_count(self) -> int:
        return self.matrix.shape[1]

    def sequences(self) -> dict[str, str]:
        return {name: "".join(row) for name, row in zip(self.taxa, self.matrix)}


@dataclass(frozen=True, eq=False)
class SitePatternAlignment:
    """Unique alignment columns with multiplicities.

    ``patterns`` is ``(n_taxa, n_patterns)`` of symbols (or integer codes for
    programmatic models); ``tip_partials`` is ``(n_taxa, n_patterns, m)``.
    """

    taxa: tuple[str, ...]
    state_count: int
    patterns: np.ndarray
    weights: np.ndarray
    tip_partials: np.ndarray

    def __post_init__(self):
        if self.tip_partials.shape != (len(self.taxa), len(self.weights), self.state_count):
            raise AlignmentError("tip_partials shape does not match taxa/patterns/states")
        if np.any(self.weights <= 0):
            raise AlignmentError("pattern weights must be positive")
        if np.any(self.tip_partials < 0):
            raise AlignmentError("tip partials must be nonnegative")

    @property
    def pattern_count(self) -> int:
        return len(self.weights)

    @property
    def site_count(self) -> int:
        return int(self.weights.sum())

    def bind(self, tip_names: Sequence[str]) -> np.ndarray:
        """Tip partials reordered to match ``tip_names``."""
        lookup = {name: k for k, name in enumerate(self.taxa)}
        missing = [name for name in tip_names if name not in lookup]
        extra = set(self.taxa) - set(tip_names)
        if missing or extra:
            raise AlignmentError(
                f"taxa do not match tree tips (missing: {sorted(missing)}, extra: {sorted(extra)})"
            )
        return self.tip_partials[[lookup[name] for name in tip_names]]

    def subset(self, columns) -> "SitePatternAlignment":
        """Patterns selected by ``columns`` (an index array or slice)."""
        return SitePatternAlignment(
            self.taxa, self.state_count, self.patterns[:, columns],
            self.weights[columns], self.tip_partials[:, columns],
        )

    def to_csv(self, path) -> None:
        """Debug dump: one row per pattern with its weight."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pattern", "weight"])
            for k, w in enumerate(self.weights):
                writer.writerow(["".join(str(c) for c in self.patterns[:, k]), int(w)])


def parse_fasta(text: str) -> RawAlignment:
    names: list[str] = []
    seqs: list[list[str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            name = line[1:].strip()
            if name in names:
                raise AlignmentError(f"duplicate taxon name {name!r}")
            names.append(name)
            seqs.append([])
            continue
        if not names:
            raise AlignmentError(f"sequence data before first header (line {lineno})")
        seqs[-1].append(line.replace(" ", "").upper())
    return _raw(names, ["".join(s) for s in seqs])


def parse_phylip(text: str) -> RawAlignment:
    """Relaxed sequential PHYLIP: header line, then ``name<whitespace>sequence``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        n_taxa, n_sites = (int(v) for v in lines[0].split()[:2])
    except (ValueError, IndexError):
        raise AlignmentError("invalid PHYLIP header") from None
    names, seqs = [], []
    for line in lines[1 : 1 + n_taxa]:
        name, _, seq = line.strip().partition(" ")
        if name in names:
            raise AlignmentError(f"duplicate taxon name {name!r}")
        names.append(name)
        seqs.append(seq.replace(" ", "").upper())
    if len(names) != n_taxa:
        raise AlignmentError("fewer sequences than declared in header")
    raw = _raw(names, seqs)
    if raw.site_count != n_sites:
        raise AlignmentError("sequence length does not match header")
    return raw


def _raw(names: list[str], seqs: list[str]) -> RawAlignment:
    if not names:
        raise AlignmentError("empty alignment")
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise AlignmentError(f"ragged alignment: sequence lengths {sorted(lengths)}")
    for name, seq in zip(names, seqs):
        bad = set(seq) - IUPAC.keys()
        if bad:
            raise AlignmentError(f"unknown character(s) {sorted(bad)} in {name!r}")
    matrix = np.array([list(s) for s in seqs], dtype="<U1").reshape(len(names), -1)
    return RawAlignment(tuple(names), matrix)


def read_alignment(path) -> RawAlignment:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith(">") or text.lstrip().startswith(";"):
        return parse_fasta(text)
    return parse_phylip(text)


def write_fasta(raw: RawAlignment, path=None, header: Optional[str] = None) -> str:
    lines = [f";{header}"] if header else []
    for name, seq in raw.sequences().items():
        lines += [f">{name}", seq]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def compress_patterns(raw: RawAlignment) -> SitePatternAlignment:
    """Collapse identical columns; pattern order follows first occurrence."""
    columns = ["".join(col) for col in raw.matrix.T]
    index: dict[str, int] = {}
    weights: list[int] = []
    for col in columns:
        k = index.setdefault(col, len(index))
        if k == len(weights):
            weights.append(0)
        weights[k] += 1
    uniq = np.array([list(c) for c in index], dtype="<U1").T.reshape(len(raw.taxa), -1)
    partials = np.stack([[CODE_PARTIALS[s] for s in row] for row in uniq])
    return SitePatternAlignment(
        taxa=raw.taxa,
        state_count=4,
        patterns=uniq,
        weights=np.array(weights, dtype=np.int64),
        tip_partials=partials.reshape(len(raw.taxa), len(weights), 4),
    )


def alignment_from_states(
    taxa: Sequence[str], states: np.ndarray, state_count: int, weights=None
) -> SitePatternAlignment:
    """Generic-``m`` construction from integer states; ``-1`` means missing.

    No compression is applied; pass ``weights`` for pre-compressed input.
    """
    states = np.asarray(states, dtype=np.int64)
    n_taxa, n_pat = states.shape
    partials = np.zeros((n_taxa, n_pat, state_count))
    observed = states >= 0
    ti, pi = np.nonzero(observed)
    partials[ti, pi, states[observed]] = 1.0
    partials[~observed] = 1.0
    w = np.ones(n_pat, dtype=np.int64) if weights is None else np.asarray(weights, dtype=np.int64)
    return SitePatternAlignment(tuple(taxa), state_count, states, w, partials)


def simulate_alignment(tree, model, categories, site_count: int, seed, branch_lengths=None) -> RawAlignment:
    """Forward-simulate i.i.d. nucleotide sites down ``tree``.

    Root states come from the model's root distribution, each site draws a rate
    category, and every branch samples from the matching row of
    ``exp(Q * b * c)``.  ``branch_lengths`` overrides the tree's lengths (e.g.
    lengths derived from a clock).
    """
    from .substitution import transition_matrices

    if site_count < 1:
        raise ValueError("site_count must be at least 1")
    if model.state_count != 4:
        raise ValueError("FASTA simulation requires a nucleotide (m=4) model")
    rng = np.random.default_rng(seed)
    b = tree.branch_length if branch_lengths is None else np.asarray(branch_lengths, dtype=float)
    P = transition_matrices(model, b, categories.rates)  # (B, L, m, m)
    cdf = np.cumsum(P, axis=-1)
    cdf[..., -1] = 1.0
    cat = rng.choice(len(categories.rates), size=site_count, p=categories.probabilities)
    states = np.empty((tree.node_count, site_count), dtype=np.int64)
    root_cdf = np.cumsum(model.root_distribution)
    root_cdf[-1] = 1.0
    states[tree.root] = np.searchsorted(root_cdf, rng.random(site_count), side="right")
    for node in tree.pre_order[1:]:
        rows = cdf[node, cat, states[tree.parent[node]]]  # (sites, m)
        u = rng.random(site_count)[:, None]
        states[node] = (u >= rows).sum(axis=1)
    letters = np.array(list(NUCLEOTIDES))
    return RawAlignment(tree.tip_names, letters[states[: tree.tip_count]])
