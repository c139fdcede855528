"""Rooted broadcast trees stored as flat, level-ordered index arrays.

Nodes are numbered breadth first, so level ``k`` is the contiguous range
``level_offsets[k]:level_offsets[k + 1]`` and the children of every node form a
contiguous range as well. A ``LabeledTree`` may hold several independent roots
(a forest); Monte Carlo harnesses use this to process many trees with a
handful of vectorised sweeps.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from sbmrecon._rng import SeedLike, as_generator
from sbmrecon.model import ModelParams, NoiseMatrix

DEFAULT_NODE_BUDGET = 10**8

REGULAR = "regular"
GALTON_WATSON = "galton-watson"


class NodeBudgetError(MemoryError):
    """Requested tree would exceed the configured node budget."""


@dataclass(frozen=True)
class LabeledTree:
    kind: str
    degree: float
    max_depth: int
    parent: np.ndarray
    level_offsets: np.ndarray
    child_start: np.ndarray
    child_count: np.ndarray
    root_of: np.ndarray
    sigma: np.ndarray | None = None
    q: int | None = None

    @property
    def n_nodes(self) -> int:
        return int(self.parent.shape[0])

    @property
    def n_roots(self) -> int:
        return int(self.level_offsets[1] - self.level_offsets[0])

    @property
    def depth(self) -> np.ndarray:
        sizes = np.diff(self.level_offsets)
        return np.repeat(np.arange(len(sizes)), sizes)

    def level(self, k: int) -> slice:
        if not 0 <= k <= self.max_depth:
            raise IndexError(f"level {k} outside 0..{self.max_depth}")
        return slice(int(self.level_offsets[k]), int(self.level_offsets[k + 1]))

    def level_size(self, k: int) -> int:
        s = self.level(k)
        return s.stop - s.start

    def children(self, node: int) -> np.ndarray:
        start = self.child_start[node]
        return np.arange(start, start + self.child_count[node])

    def root_ids(self, k: int) -> np.ndarray:
        """Index (0..n_roots-1) of the tree each node on level ``k`` belongs to."""
        return self.root_of[self.level(k)]

    def truncate(self, depth: int) -> "LabeledTree":
        """The same tree cut at ``depth``; labels are kept."""
        if depth > self.max_depth:
            raise IndexError(f"cannot truncate depth-{self.max_depth} tree at {depth}")
        end = int(self.level_offsets[depth + 1])
        count = self.child_count[:end].copy()
        count[self.level(depth)] = 0
        start = self.child_start[:end].copy()
        start[self.level(depth)] = end
        return dataclasses.replace(
            self,
            max_depth=depth,
            parent=self.parent[:end],
            level_offsets=self.level_offsets[: depth + 2],
            child_start=start,
            child_count=count,
            root_of=self.root_of[:end],
            sigma=None if self.sigma is None else self.sigma[:end],
        )


@dataclass(frozen=True)
class NoisyLabels:
    """Observed labels ``tau`` on a single level of a tree."""

    level: int
    tau: np.ndarray


def _assemble(kind, degree, counts_per_level, roots) -> LabeledTree:
    sizes = [roots] + [int(c.sum()) for c in counts_per_level]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    n = int(offsets[-1])
    child_count = np.zeros(n, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    root_of = np.empty(n, dtype=np.int64)
    root_of[:roots] = np.arange(roots)
    for k, counts in enumerate(counts_per_level):
        lo, hi = offsets[k], offsets[k + 1]
        child_count[lo:hi] = counts
        par = np.repeat(np.arange(lo, hi), counts)
        parent[offsets[k + 1] : offsets[k + 2]] = par
        root_of[offsets[k + 1] : offsets[k + 2]] = root_of[par]
    child_start = np.empty(n, dtype=np.int64)
    child_start[0] = roots
    if n > 1:
        child_start[1:] = roots + np.cumsum(child_count)[:-1]
    return LabeledTree(
        kind=kind,
        degree=degree,
        max_depth=len(counts_per_level),
        parent=parent,
        level_offsets=offsets,
        child_start=child_start,
        child_count=child_count,
        root_of=root_of,
    )


def sample_regular_tree(
    d: int,
    max_depth: int,
    seed: SeedLike = None,
    *,
    roots: int = 1,
    budget: int = DEFAULT_NODE_BUDGET,
) -> LabeledTree:
    """The complete d-ary tree of depth ``max_depth`` (deterministic; ``seed`` is ignored)."""
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    d = int(d)
    total = roots * sum(d**k for k in range(max_depth + 1))
    if total > budget:
        raise NodeBudgetError(
            f"regular tree with d={d}, depth={max_depth} has {total} nodes > budget {budget}"
        )
    counts = [np.full(roots * d**k, d, dtype=np.int64) for k in range(max_depth)]
    return _assemble(REGULAR, d, counts, roots)


def sample_gw_tree(
    d: float,
    max_depth: int,
    seed: SeedLike = None,
    *,
    roots: int = 1,
    budget: int = DEFAULT_NODE_BUDGET,
) -> LabeledTree:
    """Galton-Watson tree with Poisson(d) offspring, truncated at ``max_depth``."""
    if d <= 0:
        raise ValueError(f"d must be positive, got {d}")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    rng = as_generator(seed)
    counts = []
    width, total = roots, roots
    for _ in range(max_depth):
        c = rng.poisson(d, size=width).astype(np.int64)
        counts.append(c)
        width = int(c.sum())
        total += width
        if total > budget:
            raise NodeBudgetError(f"Galton-Watson tree exceeded node budget {budget}")
    return _assemble(GALTON_WATSON, float(d), counts, roots)


def _flip(parent_labels: np.ndarray, q: int, p: float, rng: np.random.Generator) -> np.ndarray:
    n = parent_labels.shape[0]
    flip = rng.random(n) < p
    shift = rng.integers(1, q, size=n)
    return np.where(flip, (parent_labels + shift) % q, parent_labels).astype(parent_labels.dtype)


def broadcast_labels(
    tree: LabeledTree,
    params: ModelParams,
    root_label: int | np.ndarray = 0,
    seed: SeedLike = None,
) -> LabeledTree:
    """Propagate labels from the root(s) down every level through the q-ary symmetric channel."""
    q = params.q
    root_label = np.broadcast_to(np.asarray(root_label, dtype=np.int64), (tree.n_roots,))
    if np.any((root_label < 0) | (root_label >= q)):
        raise ValueError(f"root labels must lie in 0..{q - 1}")
    rng = as_generator(seed)
    sigma = np.empty(tree.n_nodes, dtype=np.int16)
    sigma[tree.level(0)] = root_label
    for k in range(1, tree.max_depth + 1):
        sl = tree.level(k)
        sigma[sl] = _flip(sigma[tree.parent[sl]], q, params.p, rng)
    return dataclasses.replace(tree, sigma=sigma, q=q)


def sample_channel(labels: np.ndarray, channel: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one output per input label from the rows of a row-stochastic matrix."""
    cum = np.cumsum(channel, axis=1)
    u = rng.random(labels.shape[0])
    out = (u[:, None] >= cum[labels]).sum(axis=1)
    return np.minimum(out, channel.shape[1] - 1).astype(np.int16)


def apply_noise(tree: LabeledTree, level: int, delta: NoiseMatrix, seed: SeedLike = None) -> NoisyLabels:
    """Observe level ``level`` through the noise channel ``delta``."""
    if tree.sigma is None:
        raise ValueError("tree has no labels; call broadcast_labels first")
    if delta.q != tree.q:
        raise ValueError(f"noise matrix is {delta.q}x{delta.q} but tree has q={tree.q}")
    sl = tree.level(level)
    rng = as_generator(seed)
    return NoisyLabels(level, sample_channel(tree.sigma[sl].astype(np.int64), delta.entries, rng))


def dump_tree(tree: LabeledTree, noisy: NoisyLabels | None = None) -> str:
    """Plain-text dump, one ``id parent depth sigma [tau]`` line per node."""
    depth = tree.depth
    lines = []
    tau_start = tree.level_offsets[noisy.level] if noisy is not None else None
    for i in range(tree.n_nodes):
        sig = "-" if tree.sigma is None else str(int(tree.sigma[i]))
        row = f"{i} {int(tree.parent[i])} {int(depth[i])} {sig}"
        if noisy is not None and depth[i] == noisy.level:
            row += f" {int(noisy.tau[i - tau_start])}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def load_tree(text: str, q: int | None = None) -> tuple[LabeledTree, NoisyLabels | None]:
    """Inverse of :func:`dump_tree` for level-ordered dumps."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    n = len(rows)
    parent = np.array([int(r[1]) for r in rows], dtype=np.int64)
    depth = np.array([int(r[2]) for r in rows], dtype=np.int64)
    if np.any(np.diff(depth) < 0):
        raise ValueError("dump is not level ordered")
    has_sigma = rows[0][3] != "-"
    max_depth = int(depth.max()) if n else 0
    roots = int((parent == -1).sum())
    counts = []
    for k in range(max_depth):
        lvl = np.flatnonzero(depth == k)
        kids = parent[depth == k + 1]
        counts.append(np.bincount(kids - lvl[0], minlength=len(lvl)).astype(np.int64))
    tree = _assemble("loaded", float("nan"), counts, roots)
    if not np.array_equal(tree.parent, parent):
        raise ValueError("dump children are not contiguous in breadth-first order")
    if has_sigma:
        sigma = np.array([int(r[3]) for r in rows], dtype=np.int16)
        tree = dataclasses.replace(tree, sigma=sigma, q=q if q is not None else int(sigma.max()) + 1)
    noisy = None
    tau_rows = [(int(r[2]), int(r[4])) for r in rows if len(r) > 4]
    if tau_rows:
        noisy = NoisyLabels(tau_rows[0][0], np.array([t for _, t in tau_rows], dtype=np.int16))
    return tree, noisy
