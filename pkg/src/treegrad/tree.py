"""Rooted binary phylogenies.

Nodes are addressed by zero-based integer index. With ``N`` tips, the tips
occupy indices ``0..N-1`` (input order), internal nodes ``N..2N-2`` in the
order their subtrees close, and the root is always ``2N-2``.  Because the root
is the last index, every non-root node ``i`` also names the branch above it,
so per-branch vectors have length ``2N-2`` and are indexed by child node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class NewickError(ValueError):
    """Raised for malformed or unsupported Newick input."""

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class TreeError(ValueError):
    """Raised when a tree violates a structural invariant."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Tree:
    tip_names: tuple[str, ...]
    parent: np.ndarray
    children: np.ndarray
    branch_length: np.ndarray
    node_time: Optional[np.ndarray] = None
    node_labels: tuple[Optional[str], ...] = ()
    post_order: np.ndarray = field(default=None)  # type: ignore[assignment]
    pre_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n_tips = len(self.tip_names)
        n_nodes = 2 * n_tips - 1
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_("tip_names", tuple(self.tip_names))
        set_("parent", _freeze(np.asarray(self.parent, dtype=np.int64)))
        set_("children", _freeze(np.asarray(self.children, dtype=np.int64).reshape(n_nodes, 2)))
        set_("branch_length", _freeze(np.asarray(self.branch_length, dtype=float)))
        if self.node_time is not None:
            set_("node_time", _freeze(np.asarray(self.node_time, dtype=float)))
        if not self.node_labels:
            set_("node_labels", (None,) * n_nodes)
        if self.post_order is None:
            set_("post_order", np.arange(n_nodes, dtype=np.int64))
        set_("post_order", _freeze(np.asarray(self.post_order, dtype=np.int64)))
        if self.pre_order is None:
            set_("pre_order", self.post_order[::-1].copy())
        set_("pre_order", _freeze(np.asarray(self.pre_order, dtype=np.int64)))
        self._validate()

    # -- bookkeeping --------------------------------------------------------

    @property
    def tip_count(self) -> int:
        return len(self.tip_names)

    @property
    def node_count(self) -> int:
        return 2 * self.tip_count - 1

    @property
    def branch_count(self) -> int:
        return self.node_count - 1

    @property
    def root(self) -> int:
        return self.node_count - 1

    def is_tip(self, node: int) -> bool:
        return node < self.tip_count

    def sibling(self, node: int) -> int:
        a, b = self.children[self.parent[node]]
        return b if a == node else a

    def tree_length(self) -> float:
        return float(self.branch_length.sum())

    def depths(self, branch_lengths: Optional[np.ndarray] = None) -> np.ndarray:
        """Distance from the root to every node."""
        b = self.branch_length if branch_lengths is None else branch_lengths
        out = np.zeros(self.node_count)
        for node in self.pre_order[1:]:
            out[node] = out[self.parent[node]] + b[node]
        return out

    def durations(self) -> np.ndarray:
        """Chronological branch durations ``t_i - t_parent(i)``."""
        if self.node_time is None:
            raise TreeError("tree has no node times")
        return self.node_time[:-1] - self.node_time[self.parent[:-1]]

    def with_branch_lengths(self, branch_lengths) -> "Tree":
        return Tree(
            self.tip_names, self.parent, self.children, branch_lengths,
            node_time=self.node_time, node_labels=self.node_labels,
            post_order=self.post_order, pre_order=self.pre_order,
        )

    def with_node_times(self, node_time) -> "Tree":
        return Tree(
            self.tip_names, self.parent, self.children, self.branch_length,
            node_time=node_time, node_labels=self.node_labels,
            post_order=self.post_order, pre_order=self.pre_order,
        )

    def with_times_from_lengths(self, root_time: float = 0.0) -> "Tree":
        """Attach node times by reading branch lengths as durations."""
        return self.with_node_times(root_time + self.depths())

    def with_orders(self, post_order, pre_order=None) -> "Tree":
        post_order = np.asarray(post_order)
        return Tree(
            self.tip_names, self.parent, self.children, self.branch_length,
            node_time=self.node_time, node_labels=self.node_labels,
            post_order=post_order,
            pre_order=post_order[::-1] if pre_order is None else pre_order,
        )

    # -- validation ---------------------------------------------------------

    def _validate(self):
        n_tips = self.tip_count
        n_nodes = self.node_count
        if n_tips < 2:
            raise TreeError("a rooted binary tree needs at least two tips")
        if len(set(self.tip_names)) != n_tips:
            raise TreeError("duplicate tip label")
        if self.parent.shape != (n_nodes,):
            raise TreeError("parent array has the wrong shape")
        if self.branch_length.shape != (n_nodes - 1,):
            raise TreeError("branch_length must have one entry per non-root node")
        if np.any(self.branch_length < 0) or not np.all(np.isfinite(self.branch_length)):
            raise TreeError("branch lengths must be finite and nonnegative")
        if self.parent[-1] != -1:
            raise TreeError("root must be the last node")
        if np.any(self.children[:n_tips] != -1):
            raise TreeError("tips cannot have children")
        counts = np.zeros(n_nodes, dtype=int)
        for node in range(n_nodes - 1):
            pa = self.parent[node]
            if not (n_tips <= pa < n_nodes):
                raise TreeError(f"node {node} has invalid parent {pa}")
            if node not in self.children[pa]:
                raise TreeError(f"parent/children mismatch at node {node}")
            counts[pa] += 1
        if np.any(counts[n_tips:] != 2):
            raise TreeError("every internal node needs exactly two children")
        for name, order, child_first in (
            ("post_order", self.post_order, True),
            ("pre_order", self.pre_order, False),
        ):
            if sorted(order.tolist()) != list(range(n_nodes)):
                raise TreeError(f"{name} is not a permutation of the nodes")
            pos = np.empty(n_nodes, dtype=int)
            pos[order] = np.arange(n_nodes)
            before = pos[:-1] < pos[self.parent[:-1]]
            if not np.all(before if child_first else ~before):
                raise TreeError(f"{name} violates parent/child ordering")
        if self.node_time is not None:
            if self.node_time.shape != (n_nodes,):
                raise TreeError("node_time must have one entry per node")
            if np.any(self.node_time[:-1] <= self.node_time[self.parent[:-1]]):
                raise TreeError("every node must be strictly later than its parent")


def traversal_orders(tree: Tree) -> tuple[np.ndarray, np.ndarray]:
    """Return the tree's (post_order, pre_order) visitation sequences."""
    return tree.post_order, tree.pre_order


def depth_first_post_order(tree: Tree) -> np.ndarray:
    """Left-first depth-first post-order (e.g. 0, 1, 3, 2, 4 for ``((A,B),C)``)."""
    out = []
    stack = [(tree.root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded or tree.is_tip(node):
            out.append(node)
            continue
        left, right = tree.children[node]
        stack.extend([(node, True), (right, False), (left, False)])
    return np.array(out, dtype=np.int64)


def build_tree(
    tip_names: Sequence[str],
    parent: Sequence[int],
    branch_length: Sequence[float],
    node_time=None,
) -> Tree:
    """Build a tree from a parent array that already follows the numbering convention."""
    parent = np.asarray(parent, dtype=np.int64)
    n_nodes = parent.shape[0]
    children = -np.ones((n_nodes, 2), dtype=np.int64)
    fill = np.zeros(n_nodes, dtype=int)
    for node in range(n_nodes - 1):
        pa = parent[node]
        if fill[pa] >= 2:
            raise TreeError(f"node {pa} has more than two children")
        children[pa, fill[pa]] = node
        fill[pa] += 1
    return Tree(tuple(tip_names), parent, children, branch_length, node_time=node_time)


# -- Newick ------------------------------------------------------------------

_DELIMS = set("(),:;[")


def _read_label(text: str, pos: int) -> tuple[Optional[str], int]:
    if pos < len(text) and text[pos] == "'":
        end = pos + 1
        chars = []
        while True:
            if end >= len(text):
                raise NewickError("unterminated quoted label", pos)
            if text[end] == "'":
                if end + 1 < len(text) and text[end + 1] == "'":
                    chars.append("'")
                    end += 2
                    continue
                return "".join(chars), end + 1
            chars.append(text[end])
            end += 1
    start = pos
    while pos < len(text) and text[pos] not in _DELIMS and not text[pos].isspace():
        pos += 1
    label = text[start:pos].replace("_", " ") if pos > start else None
    return label, pos


def _skip(text: str, pos: int) -> int:
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
        elif text[pos] == "[":
            end = text.find("]", pos)
            if end < 0:
                raise NewickError("unterminated comment", pos)
            pos = end + 1
        else:
            break
    return pos


def parse_newick(text: str) -> Tree:
    """Parse a rooted, strictly binary Newick tree.

    Missing branch lengths default to 0. Tips are numbered in left-to-right
    order; internal nodes in the order their closing parenthesis appears.
    """
    # Each open clade collects (kind, local id) entries; kinds are "tip"/"int".
    tips: list[str] = []
    tip_len: list[float] = []
    internals: list[tuple[list, Optional[str], int]] = []  # (children, label, open pos)
    int_len: list[float] = []
    stack: list[tuple[list, int]] = []
    top: Optional[tuple[str, int]] = None
    pos = _skip(text, 0)
    if pos >= len(text) or text[pos] != "(":
        raise NewickError("tree must start with '('", pos)

    def read_length(pos):
        pos = _skip(text, pos)
        if pos < len(text) and text[pos] == ":":
            pos = _skip(text, pos + 1)
            m_end = pos
            while m_end < len(text) and text[m_end] not in _DELIMS and not text[m_end].isspace():
                m_end += 1
            try:
                value = float(text[pos:m_end])
            except ValueError:
                raise NewickError(f"invalid branch length {text[pos:m_end]!r}", pos) from None
            if value < 0 or not np.isfinite(value):
                raise NewickError("negative or non-finite branch length", pos)
            return value, _skip(text, m_end)
        return 0.0, pos

    expect_item = True
    while True:
        pos = _skip(text, pos)
        if pos >= len(text):
            raise NewickError("unexpected end of input; missing ')' or ';'", pos)
        ch = text[pos]
        if expect_item:
            if ch == "(":
                stack.append(([], pos))
                pos += 1
                continue
            if ch in ",);:":
                raise NewickError("missing tip label", pos)
            label, pos = _read_label(text, pos)
            length, pos = read_length(pos)
            tips.append(label)
            tip_len.append(length)
            stack[-1][0].append(("tip", len(tips) - 1))
            expect_item = False
            continue
        if ch == ",":
            if not stack:
                raise NewickError("unexpected ','", pos)
            expect_item = True
            pos += 1
            continue
        if ch == ")":
            if not stack:
                raise NewickError("unbalanced ')'", pos)
            kids, open_pos = stack.pop()
            if len(kids) != 2:
                kind = "polytomy" if len(kids) > 2 else "unifurcation"
                raise NewickError(f"{kind}: clade has {len(kids)} children", open_pos)
            label, pos = _read_label(text, pos + 1)
            length, pos = read_length(pos)
            internals.append((kids, label, open_pos))
            int_len.append(length)
            entry = ("int", len(internals) - 1)
            if stack:
                stack[-1][0].append(entry)
            else:
                top = entry
                pos = _skip(text, pos)
                if pos >= len(text) or text[pos] != ";":
                    raise NewickError("expected ';' after root clade", pos)
                if _skip(text, pos + 1) != len(text):
                    raise NewickError("trailing text after ';'", pos + 1)
                break
            continue
        raise NewickError(f"unexpected character {ch!r}", pos)

    n_tips = len(tips)
    if len(set(tips)) != n_tips:
        seen = set()
        for name in tips:
            if name in seen:
                raise NewickError(f"duplicate tip label {name!r}")
            seen.add(name)
    if any(name is None for name in tips):
        raise NewickError("missing tip label")
    n_nodes = 2 * n_tips - 1
    index = lambda e: e[1] if e[0] == "tip" else n_tips + e[1]
    parent = -np.ones(n_nodes, dtype=np.int64)
    children = -np.ones((n_nodes, 2), dtype=np.int64)
    lengths = np.zeros(n_nodes, dtype=float)
    lengths[:n_tips] = tip_len
    lengths[n_tips:] = int_len
    labels: list[Optional[str]] = list(tips) + [None] * (n_tips - 1)
    for k, (kids, label, _) in enumerate(internals):
        node = n_tips + k
        labels[node] = label
        for slot, entry in enumerate(kids):
            child = index(entry)
            children[node, slot] = child
            parent[child] = node
    assert top is not None and index(top) == n_nodes - 1
    return Tree(tuple(tips), parent, children, lengths[:-1], node_labels=tuple(labels))


def _format_label(label: str) -> str:
    if any(c in label for c in "(),:;[]'_") or label != label.strip():
        return "'" + label.replace("'", "''") + "'"
    return label.replace(" ", "_")


def serialize_newick(tree: Tree, branch_lengths: Optional[np.ndarray] = None) -> str:
    """Write ``tree`` as Newick with round-trip precise branch lengths."""
    b = tree.branch_length if branch_lengths is None else np.asarray(branch_lengths)
    parts: list[str] = []
    stack: list[tuple[int, int]] = [(tree.root, 0)]
    while stack:
        node, state = stack.pop()
        if tree.is_tip(node):
            parts.append(f"{_format_label(tree.tip_names[node])}:{float(b[node])!r}")
            continue
        left, right = tree.children[node]
        if state == 0:
            parts.append("(")
            stack.extend([(node, 1), (left, 0)])
        elif state == 1:
            parts.append(",")
            stack.extend([(node, 2), (right, 0)])
        else:
            parts.append(")")
            label = tree.node_labels[node]
            if label:
                parts.append(_format_label(label))
            if node != tree.root:
                parts.append(f":{float(b[node])!r}")
    parts.append(";")
    return "".join(parts)


def read_newick(path) -> Tree:
    with open(path, encoding="utf-8") as fh:
        return parse_newick(fh.read().strip())


# -- synthetic trees -----------------------------------------------------------


def random_coalescent_tree(
    n_tips: int, rng: np.random.Generator, *, scale: float = 1.0, prefix: str = "t"
) -> Tree:
    """Kingman-coalescent shaped ultrametric tree with node times (root at 0)."""
    if n_tips < 2:
        raise TreeError("need at least two tips")
    n_nodes = 2 * n_tips - 1
    parent = -np.ones(n_nodes, dtype=np.int64)
    height = np.zeros(n_nodes)
    active = list(range(n_tips))
    t = 0.0
    for node in range(n_tips, n_nodes):
        k = len(active)
        t += rng.exponential(scale * 2.0 / (k * (k - 1)))
        i, j = rng.choice(k, size=2, replace=False)
        a, b = active[i], active[j]
        parent[a] = parent[b] = node
        height[node] = t
        active = [x for x in active if x not in (a, b)] + [node]
    node_time = height[-1] - height
    lengths = node_time[:-1] - node_time[parent[:-1]]
    return build_tree([f"{prefix}{i + 1}" for i in range(n_tips)], parent, lengths, node_time)


def caterpillar_tree(n_tips: int, branch_length: float = 0.1, prefix: str = "t") -> Tree:
    """Maximally unbalanced (ladder) tree; node times from unit-rate lengths."""
    n_nodes = 2 * n_tips - 1
    parent = -np.ones(n_nodes, dtype=np.int64)
    parent[0] = parent[1] = n_tips
    for k in range(2, n_tips):
        parent[n_tips + k - 2] = n_tips + k - 1
        parent[k] = n_tips + k - 1
    lengths = np.full(n_nodes - 1, branch_length)
    tree = build_tree([f"{prefix}{i + 1}" for i in range(n_tips)], parent, lengths)
    return tree.with_times_from_lengths()
