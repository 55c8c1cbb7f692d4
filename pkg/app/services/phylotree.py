"""Unrooted trees, alignments, pruning likelihood and alignment simulation.

A ``Topology`` stores its branches as undirected edges so that the branch
indexing (and therefore ``BranchLengths``) does not depend on where the
traversal root is placed.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from app.core.errors import (
    AlignmentError,
    InvalidInputError,
    NewickParseError,
    TopologyError,
    UnsupportedError,
)
from app.services.substmodel import (
    RateMatrix,
    SubstitutionModel,
    build_q,
    category_rates,
    transition_matrices,
)

logger = logging.getLogger(__name__)

# Partial likelihood vectors whose largest entry drops below this are rescaled.
SCALE_THRESHOLD = 1e-256
# Positive branch lengths make every site likelihood positive; underflow to 0 is floored here.
MIN_SITE_LIKELIHOOD = np.finfo(float).tiny

_STATE_CODES = {"A": 0, "C": 1, "G": 2, "T": 3, "U": 3}
MISSING = 4


# ── Topology ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Topology:
    """Unrooted binary tree; nodes 0..n-1 are the leaves, in ``leaf_names`` order."""

    leaf_names: tuple[str, ...]
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    root: int
    parent: tuple[int, ...] = field(init=False, repr=False, compare=False)
    parent_edge: tuple[int, ...] = field(init=False, repr=False, compare=False)
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    postorder: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.leaf_names)
        if len(set(self.leaf_names)) != n:
            raise TopologyError("leaf labels must be unique")
        if n < 2:
            raise TopologyError("a tree needs at least two leaves")
        expected_edges = 1 if n == 2 else 2 * n - 3
        if len(self.edges) != expected_edges or self.n_nodes != len(self.edges) + 1:
            raise TopologyError(
                f"an unrooted binary tree on {n} leaves has {expected_edges} branches, "
                f"got {len(self.edges)}"
            )
        adjacency: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for index, (u, v) in enumerate(self.edges):
            adjacency[u].append((v, index))
            adjacency[v].append((u, index))
        for node, neighbours in enumerate(adjacency):
            degree = len(neighbours)
            if node < n and degree != 1:
                raise TopologyError(f"leaf {self.leaf_names[node]!r} has degree {degree}")
            if node >= n and degree != 3:
                raise TopologyError(f"internal node {node} has degree {degree}; tree must be binary")
        if not 0 <= self.root < self.n_nodes:
            raise TopologyError("root index out of range")

        parent = [-1] * self.n_nodes
        parent_edge = [-1] * self.n_nodes
        children: list[list[int]] = [[] for _ in range(self.n_nodes)]
        order = []
        seen = [False] * self.n_nodes
        stack = [self.root]
        seen[self.root] = True
        while stack:
            node = stack.pop()
            order.append(node)
            for other, index in adjacency[node]:
                if not seen[other]:
                    seen[other] = True
                    parent[other] = node
                    parent_edge[other] = index
                    children[node].append(other)
                    stack.append(other)
        if not all(seen):
            raise TopologyError("tree is not connected")
        object.__setattr__(self, "parent", tuple(parent))
        object.__setattr__(self, "parent_edge", tuple(parent_edge))
        object.__setattr__(self, "children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "postorder", tuple(reversed(order)))

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_names)

    @property
    def n_branches(self) -> int:
        return len(self.edges)

    def reroot(self, node: int) -> "Topology":
        return Topology(self.leaf_names, self.n_nodes, self.edges, node)

    def leaves_below(self, node: int) -> frozenset[str]:
        if node < self.n_leaves:
            return frozenset([self.leaf_names[node]])
        return frozenset().union(*(self.leaves_below(c) for c in self.children[node]))

    def splits(self) -> frozenset[frozenset[str]]:
        """Nontrivial bipartitions, each given by the side without the smallest label."""
        anchor = min(self.leaf_names)
        everything = frozenset(self.leaf_names)
        result = set()
        for node in range(self.n_nodes):
            if node == self.root:
                continue
            side = self.leaves_below(node)
            if anchor in side:
                side = everything - side
            if 2 <= len(side) <= len(everything) - 2:
                result.add(side)
        return frozenset(result)

    def same_shape(self, other: "Topology") -> bool:
        return set(self.leaf_names) == set(other.leaf_names) and self.splits() == other.splits()


def check_branch_lengths(topology: Topology, lengths) -> np.ndarray:
    arr = np.asarray(lengths, dtype=float).reshape(-1)
    if arr.shape[0] != topology.n_branches:
        raise InvalidInputError(f"expected {topology.n_branches} branch lengths, got {arr.shape[0]}")
    if np.any(~(arr > 0)) or not np.all(np.isfinite(arr)):
        raise InvalidInputError("branch lengths must be positive and finite")
    return arr


# ── Newick ────────────────────────────────────────────────────────────────────

@dataclass
class _ParsedNode:
    offset: int
    name: str | None = None
    length: float | None = None
    children: list["_ParsedNode"] = field(default_factory=list)


class _NewickParser:
    _DELIMITERS = set("(),:;[]")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str, pos: int | None = None) -> NewickParseError:
        at = self.pos if pos is None else pos
        return NewickParseError(message, len(self.text[:at].encode("utf-8")))

    def skip(self) -> None:
        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch.isspace():
                self.pos += 1
            elif ch == "[":
                end = self.text.find("]", self.pos)
                if end < 0:
                    raise self.error("unterminated comment")
                self.pos = end + 1
            else:
                break

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def label(self) -> str | None:
        self.skip()
        if self.peek() == "'":
            start = self.pos
            self.pos += 1
            chars = []
            while True:
                if self.pos >= len(self.text):
                    raise self.error("unterminated quoted label", start)
                ch = self.text[self.pos]
                if ch == "'":
                    if self.text[self.pos + 1:self.pos + 2] == "'":
                        chars.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(chars)
                chars.append(ch)
                self.pos += 1
        start = self.pos
        while (
            self.pos < len(self.text)
            and self.text[self.pos] not in self._DELIMITERS
            and not self.text[self.pos].isspace()
        ):
            self.pos += 1
        token = self.text[start:self.pos]
        return token or None

    def length(self) -> float | None:
        if self.peek() != ":":
            return None
        self.pos += 1
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in self._DELIMITERS and not self.text[self.pos].isspace():
            self.pos += 1
        token = self.text[start:self.pos]
        try:
            value = float(token)
        except ValueError:
            raise self.error(f"invalid branch length {token!r}", start) from None
        if not math.isfinite(value):
            raise self.error(f"invalid branch length {token!r}", start)
        return value

    def subtree(self) -> _ParsedNode:
        node = _ParsedNode(offset=self.pos)
        if self.peek() == "(":
            self.pos += 1
            while True:
                node.children.append(self.subtree())
                ch = self.peek()
                if ch == ",":
                    self.pos += 1
                    continue
                if ch == ")":
                    self.pos += 1
                    break
                raise self.error("expected ',' or ')'")
            node.name = self.label()
        else:
            node.name = self.label()
            if node.name is None:
                raise self.error("expected a leaf label or '('")
        node.offset = self.pos
        node.length = self.length()
        return node

    def statement(self) -> _ParsedNode:
        root = self.subtree()
        if self.peek() != ";":
            raise self.error("expected ';' at end of tree")
        self.pos += 1
        return root

    def parse(self) -> _ParsedNode:
        root = self.statement()
        if self.peek():
            raise self.error("trailing characters after ';'")
        return root


def parse_newick(text: str) -> tuple[Topology, np.ndarray]:
    """Parse a Newick tree with branch lengths into an unrooted topology.

    A bifurcating root is suppressed by joining its two branches.
    """
    parser = _NewickParser(text)
    return _build_topology(parser.parse(), text, 0)


def parse_newick_many(text: str) -> list[tuple[Topology, np.ndarray]]:
    """Every ';'-terminated tree in ``text``; quoted labels may contain ';'."""
    parser = _NewickParser(text)
    trees = []
    while parser.peek():
        start = parser.pos
        trees.append(_build_topology(parser.statement(), text, start))
    return trees


def _build_topology(root: _ParsedNode, text: str, start: int) -> tuple[Topology, np.ndarray]:
    if not root.children:
        raise NewickParseError("tree has a single leaf", len(text[:start].encode("utf-8")))

    leaves: list[_ParsedNode] = []
    internals: list[_ParsedNode] = []
    raw_edges: list[tuple[_ParsedNode, _ParsedNode, float]] = []

    def _walk(node: _ParsedNode) -> None:
        (internals if node.children else leaves).append(node)
        for child in node.children:
            if child.length is None:
                raise NewickParseError(
                    f"missing branch length for {'leaf ' + repr(child.name) if not child.children else 'internal node'}",
                    len(text[:child.offset].encode("utf-8")),
                )
            raw_edges.append((node, child, child.length))
            _walk(child)

    _walk(root)

    if len(root.children) == 2:
        (_, a, la), (_, b, lb) = [e for e in raw_edges if e[0] is root]
        first = next(i for i, e in enumerate(raw_edges) if e[0] is root)
        raw_edges = [e for e in raw_edges if e[0] is not root]
        raw_edges.insert(first, (a, b, la + lb))
        internals.remove(root)

    index = {id(node): i for i, node in enumerate(leaves + internals)}
    names = tuple(node.name for node in leaves)
    if any(name is None for name in names):
        raise NewickParseError("leaf without a label", 0)
    edges = tuple((index[id(u)], index[id(v)]) for u, v, _ in raw_edges)
    lengths = np.array([length for _, _, length in raw_edges], dtype=float)
    if np.any(lengths <= 0):
        bad = next(v for (_, v, length) in raw_edges if length <= 0)
        raise NewickParseError("branch lengths must be positive", len(text[:bad.offset].encode("utf-8")))

    n_nodes = len(leaves) + len(internals)
    root_index = len(leaves) if internals else 0
    return Topology(names, n_nodes, edges, root_index), lengths


def _quote(name: str) -> str:
    if any(ch in name for ch in "(),:;[]' \t"):
        return "'" + name.replace("'", "''") + "'"
    return name


def emit_newick(topology: Topology, lengths) -> str:
    lengths = check_branch_lengths(topology, lengths)
    if topology.n_leaves == 2:
        half = repr(float(lengths[0] / 2))
        a, b = (_quote(name) for name in topology.leaf_names)
        return f"({a}:{half},{b}:{half});"

    def _render(node: int) -> str:
        if node < topology.n_leaves:
            return _quote(topology.leaf_names[node])
        parts = [
            f"{_render(child)}:{float(lengths[topology.parent_edge[child]])!r}"
            for child in topology.children[node]
        ]
        return "(" + ",".join(parts) + ")"

    root = topology.root
    if root < topology.n_leaves:
        root = topology.n_leaves
        topology = topology.reroot(root)
    return _render(root) + ";"


def enumerate_topologies(leaf_names: Sequence[str]) -> list[Topology]:
    """The three unrooted topologies on four labelled leaves."""
    names = list(leaf_names)
    if len(names) != 4:
        raise UnsupportedError("topology enumeration is only supported for four taxa")
    if len(set(names)) != 4:
        raise TopologyError("leaf labels must be unique")
    a, b, c, d = (_quote(name) for name in names)
    pairings = [((a, b), (c, d)), ((a, c), (b, d)), ((a, d), (b, c))]
    return [
        parse_newick(f"(({x}:1,{y}:1):1,{z}:1,{w}:1);")[0]
        for (x, y), (z, w) in pairings
    ]


# ── Alignments ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Alignment:
    """Rows of nucleotide characters; anything but A, C, G, T/U is missing data."""

    names: tuple[str, ...]
    sequences: tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        sequences = tuple(seq.upper() for seq in self.sequences)
        if len(names) != len(sequences):
            raise AlignmentError("one sequence per taxon name is required")
        if len(set(names)) != len(names):
            raise AlignmentError("taxon names must be unique")
        if len({len(seq) for seq in sequences}) > 1:
            raise AlignmentError("all sequences must have the same length")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "sequences", sequences)

    @classmethod
    def empty(cls, names: Sequence[str]) -> "Alignment":
        """No sites: the likelihood is identically 1 (prior-only runs)."""
        return cls(tuple(names), tuple("" for _ in names))

    @property
    def n_taxa(self) -> int:
        return len(self.names)

    @property
    def n_sites(self) -> int:
        return len(self.sequences[0]) if self.sequences else 0

    def codes(self) -> np.ndarray:
        """(n_taxa, n_sites) integer matrix; 0..3 for A, C, G, T and 4 for missing."""
        table = np.full(256, MISSING, dtype=np.int8)
        for ch, code in _STATE_CODES.items():
            table[ord(ch)] = code
        if self.n_sites == 0:
            return np.zeros((self.n_taxa, 0), dtype=np.int8)
        raw = np.array([np.frombuffer(seq.encode("latin-1", "replace"), dtype=np.uint8) for seq in self.sequences])
        return table[raw]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, seq in sorted(zip(self.names, self.sequences)):
            digest.update(name.encode("utf-8") + b"\0" + seq.encode("utf-8") + b"\n")
        return digest.hexdigest()


def site_patterns(codes: np.ndarray, compress: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Distinct columns and their multiplicities."""
    if codes.shape[1] == 0:
        return codes, np.zeros(0)
    if not compress:
        return codes, np.ones(codes.shape[1])
    patterns, counts = np.unique(codes, axis=1, return_counts=True)
    return patterns, counts.astype(float)


def _tip_partials(patterns: np.ndarray) -> np.ndarray:
    lookup = np.vstack([np.eye(4), np.ones((1, 4))])
    return lookup[patterns]


# ── Likelihood ────────────────────────────────────────────────────────────────

class PruningLikelihood:
    """Pruning-algorithm likelihood of one alignment on one topology.

    Site patterns and tip vectors are prepared once; each call only builds the
    transition matrices and runs the post-order pass.
    """

    def __init__(self, alignment: Alignment, topology: Topology, compress: bool = True):
        if set(alignment.names) != set(topology.leaf_names):
            missing = sorted(set(topology.leaf_names) - set(alignment.names))
            extra = sorted(set(alignment.names) - set(topology.leaf_names))
            raise AlignmentError(
                f"alignment and tree disagree on taxa (missing: {missing}, extra: {extra})"
            )
        row_of = {name: i for i, name in enumerate(alignment.names)}
        codes = alignment.codes()[[row_of[name] for name in topology.leaf_names]]
        patterns, self.weights = site_patterns(codes, compress)
        self.tips = _tip_partials(patterns)
        self.topology = topology
        self.n_patterns = patterns.shape[1]

    def log_likelihood(
        self,
        branch_lengths,
        model: SubstitutionModel,
        rate: RateMatrix | None = None,
    ) -> float:
        topology = self.topology
        lengths = check_branch_lengths(topology, branch_lengths)
        if self.n_patterns == 0:
            return 0.0
        rate = rate if rate is not None else build_q(model)
        rates = category_rates(model)
        pmats = transition_matrices(rate, rates[:, None] * lengths[None, :])
        n_cat = rates.shape[0]

        partial: list[np.ndarray | None] = [None] * topology.n_nodes
        log_scale = np.zeros(self.n_patterns)
        for node in topology.postorder:
            if node < topology.n_leaves:
                vec = np.broadcast_to(self.tips[node], (n_cat, self.n_patterns, 4)).copy()
            else:
                vec = np.ones((n_cat, self.n_patterns, 4))
            for child in topology.children[node]:
                edge = topology.parent_edge[child]
                vec *= np.einsum("cij,cpj->cpi", pmats[:, edge], partial[child])
                partial[child] = None
            if topology.children[node]:
                peak = vec.max(axis=(0, 2))
                small = (peak < SCALE_THRESHOLD) & (peak > 0)
                if small.any():
                    vec[:, small, :] /= peak[small][None, :, None]
                    log_scale[small] += np.log(peak[small])
            partial[node] = vec

        site = (partial[topology.root] @ rate.pi).mean(axis=0)
        logs = np.log(np.maximum(site, MIN_SITE_LIKELIHOOD)) + log_scale
        return float(np.dot(self.weights, logs))


def log_likelihood(
    alignment: Alignment,
    topology: Topology,
    branch_lengths,
    model: SubstitutionModel,
    compress: bool = True,
) -> float:
    return PruningLikelihood(alignment, topology, compress).log_likelihood(branch_lengths, model)


# ── Simulation ────────────────────────────────────────────────────────────────

def simulate_alignment(
    topology: Topology,
    branch_lengths,
    model: SubstitutionModel,
    n_sites: int,
    rng_seed: int | np.random.SeedSequence | None,
) -> Alignment:
    """Evolve root states drawn from pi down the tree, one gamma category per site."""
    if n_sites < 1:
        raise InvalidInputError("n_sites must be at least 1")
    lengths = check_branch_lengths(topology, branch_lengths)
    rng = np.random.default_rng(rng_seed)
    rate = build_q(model)
    rates = category_rates(model)
    pmats = transition_matrices(rate, rates[:, None] * lengths[None, :])

    categories = rng.integers(0, rates.shape[0], size=n_sites)
    states = [None] * topology.n_nodes
    states[topology.root] = rng.choice(4, size=n_sites, p=rate.pi)
    sites = np.arange(n_sites)
    for node in reversed(topology.postorder):
        for child in topology.children[node]:
            probs = pmats[categories, topology.parent_edge[child]][sites, states[node]]
            cumulative = np.cumsum(probs, axis=1)
            draws = rng.random(n_sites)
            states[child] = np.minimum((draws[:, None] > cumulative).sum(axis=1), 3)

    letters = np.frombuffer(b"ACGT", dtype=np.uint8)
    sequences = tuple(letters[states[leaf]].tobytes().decode("ascii") for leaf in range(topology.n_leaves))
    return Alignment(topology.leaf_names, sequences)
