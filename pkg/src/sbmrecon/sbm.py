"""Sparse block-model graphs with BFS balls and a tree-coupling diagnostic.

Graphs are stored in CSR form (``indptr``/``indices``) with sorted neighbour
lists. Edges are sampled per community pair: a Binomial count of edges, then
that many distinct slots out of all vertex pairs of the block pair.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats

from sbmrecon._rng import SeedLike, as_generator
from sbmrecon.model import ModelParams
from sbmrecon.tree import LabeledTree, _assemble

RADIUS_TOL = 1e-9


@dataclass(frozen=True)
class SbmGraph:
    n: int
    q: int
    sigma: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    params: ModelParams | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_edges(self) -> int:
        return int(self.indices.shape[0] // 2)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Each undirected edge once, as ``(u, v)`` with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = src < self.indices
        return src[keep], self.indices[keep]

    def adjacency(self) -> sparse.csr_matrix:
        data = np.ones(self.indices.shape[0], dtype=np.float64)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def community_sizes(self) -> np.ndarray:
        return np.bincount(self.sigma, minlength=self.q)

    def validate(self) -> None:
        """Check symmetry, sortedness, no self-loops and no multi-edges."""
        if self.indptr.shape[0] != self.n + 1:
            raise ValueError("indptr has the wrong length")
        src = np.repeat(np.arange(self.n), self.degrees)
        if np.any(src == self.indices):
            raise ValueError("self-loop present")
        inner = np.ones(max(self.indices.shape[0] - 1, 0), dtype=bool)
        inner[self.indptr[1:-1][(self.indptr[1:-1] > 0) & (self.indptr[1:-1] < self.indices.shape[0])] - 1] = False
        if np.any(np.diff(self.indices)[inner] <= 0):
            raise ValueError("neighbour lists are unsorted or repeated")
        fwd = src.astype(np.int64) * self.n + self.indices
        bwd = self.indices.astype(np.int64) * self.n + src
        if not np.array_equal(np.sort(fwd), np.sort(bwd)):
            raise ValueError("adjacency is not symmetric")

    def remove_vertices(self, drop) -> "SbmGraph":
        """Same vertex set with every edge touching ``drop`` deleted."""
        mask = np.zeros(self.n, dtype=bool)
        mask[np.asarray(drop, dtype=np.int64)] = True
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = ~(mask[src] | mask[self.indices])
        return _from_directed(self.n, self.q, self.sigma, src[keep], self.indices[keep], self.params, self.meta)


def _from_directed(n, q, sigma, src, dst, params=None, meta=None) -> SbmGraph:
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return SbmGraph(n, q, np.asarray(sigma), indptr, dst.astype(np.int64), params, dict(meta or {}))


def from_edges(n: int, q: int, sigma, u, v, params: ModelParams | None = None) -> SbmGraph:
    """Build a graph from undirected edges; duplicates and loops are rejected."""
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    if np.any(u == v):
        raise ValueError("self-loops are not allowed")
    if u.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
        raise ValueError("edge endpoint out of range")
    lo, hi = np.minimum(u, v), np.maximum(u, v)
    if np.unique(lo * n + hi).size != lo.size:
        raise ValueError("multi-edges are not allowed")
    return _from_directed(n, q, sigma, np.concatenate([lo, hi]), np.concatenate([hi, lo]), params)


def _distinct_slots(total: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct integers drawn uniformly from ``range(total)``."""
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if count > total // 4:
        return rng.permutation(total)[:count].astype(np.int64)
    got = np.unique(rng.integers(0, total, size=count + count // 8 + 16))
    while got.size < count:
        got = np.union1d(got, rng.integers(0, total, size=count - got.size + 16))
    # drop a uniformly random surplus so the kept set is a uniform subset
    return np.sort(rng.choice(got, size=count, replace=False))


def _triangle_pairs(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decode ``k -> (r, c)`` with ``c < r`` in the order (1,0), (2,0), (2,1), ..."""
    r = np.floor((1 + np.sqrt(8 * k.astype(float) + 1)) / 2).astype(np.int64)
    r -= (r * (r - 1) // 2 > k).astype(np.int64)
    r += ((r + 1) * r // 2 <= k).astype(np.int64)
    return r, k - r * (r - 1) // 2


def assign_communities(n: int, q: int, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if balanced:
        return rng.permutation(np.arange(n) % q).astype(np.int64)
    return rng.integers(0, q, size=n).astype(np.int64)


def sample_sbm(n: int, params: ModelParams, balanced: bool = False, seed: SeedLike = None) -> SbmGraph:
    """Sample the symmetric block model with edge rates a/n inside and b/n across communities."""
    q = params.q
    if n < q:
        raise ValueError(f"need n >= q, got n={n}, q={q}")
    p_in, p_out = params.a / n, params.b / n
    if p_in > 1 or p_out > 1:
        raise ValueError(f"edge probabilities a/n={p_in:.4g}, b/n={p_out:.4g} must not exceed 1")
    rng = as_generator(seed)
    sigma = assign_communities(n, q, balanced, rng)
    members = [np.flatnonzero(sigma == i) for i in range(q)]
    us, vs = [], []
    for i in range(q):
        for j in range(i, q):
            si, sj = members[i].size, members[j].size
            if i == j:
                total, rate = si * (si - 1) // 2, p_in
            else:
                total, rate = si * sj, p_out
            if total == 0 or rate == 0:
                continue
            k = _distinct_slots(total, int(rng.binomial(total, rate)), rng)
            if i == j:
                r, c = _triangle_pairs(k)
                us.append(members[i][r])
                vs.append(members[i][c])
            else:
                us.append(members[i][k // sj])
                vs.append(members[j][k % sj])
    u = np.concatenate(us) if us else np.empty(0, dtype=np.int64)
    v = np.concatenate(vs) if vs else np.empty(0, dtype=np.int64)
    g = _from_directed(n, q, sigma, np.concatenate([u, v]), np.concatenate([v, u]), params)
    g.meta.update(balanced=balanced)
    return g


def coupling_radius(n: int, a: float, b: float) -> int:
    """floor(log n / (10 log(2(a + b)))) with a small tolerance against rounding at exact integers."""
    base = 2 * (a + b)
    if base <= 1:
        raise ValueError("need 2(a + b) > 1")
    return int(math.floor(math.log(n) / (10 * math.log(base)) + RADIUS_TOL))


@dataclass(frozen=True)
class BallView:
    """BFS ball around ``center``.

    ``levels[k]`` lists the vertices at distance ``k`` in the order used by
    the spanning tree: grouped by BFS parent, parents in the order of the
    previous level. ``bfs_parent`` is aligned with ``nodes``.
    """

    center: int
    radius: int
    levels: list
    bfs_parent: np.ndarray
    n_edges: int

    @property
    def nodes(self) -> np.ndarray:
        return np.concatenate(self.levels)

    @property
    def boundary(self) -> np.ndarray:
        return self.levels[self.radius] if len(self.levels) > self.radius else np.empty(0, dtype=np.int64)

    @property
    def is_tree(self) -> bool:
        return self.n_edges == self.nodes.shape[0] - 1

    @property
    def depth(self) -> int:
        """Deepest non-empty level (smaller than ``radius`` if the component is exhausted)."""
        return len(self.levels) - 1

    def child_counts(self) -> list[np.ndarray]:
        """Spanning-tree child counts of every node on levels ``0..depth-1``."""
        out = []
        for k in range(self.depth):
            par = self.bfs_parent_level(k + 1)
            out.append(np.bincount(par, minlength=self.levels[k].shape[0]))
        return out

    def bfs_parent_level(self, k: int) -> np.ndarray:
        """Position (within level k-1) of the BFS parent of each vertex on level k."""
        start = sum(lv.shape[0] for lv in self.levels[:k])
        prev_start = start - self.levels[k - 1].shape[0]
        return self.bfs_parent[start : start + self.levels[k].shape[0]] - prev_start

    def spanning_tree(self, sigma: np.ndarray | None = None, q: int | None = None) -> LabeledTree:
        """The BFS spanning tree as a LabeledTree; node ``i`` is ``nodes[i]``."""
        counts = [c.astype(np.int64) for c in self.child_counts()]
        tree = _assemble("ball", float("nan"), counts, 1)
        labels = None if sigma is None else np.asarray(sigma)[self.nodes].astype(np.int16)
        tree = dataclasses.replace(tree, sigma=labels, q=q)
        return tree


def _expand(graph: SbmGraph, frontier: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All (source position, neighbour) pairs for the frontier, in frontier order."""
    deg = graph.degrees[frontier]
    pos = np.repeat(np.arange(frontier.shape[0]), deg)
    starts = np.repeat(graph.indptr[frontier], deg)
    offs = np.arange(pos.shape[0]) - np.repeat(np.cumsum(deg) - deg, deg)
    return pos, graph.indices[starts + offs]


def ball(graph: SbmGraph, v: int, R: int, *, visited: np.ndarray | None = None) -> BallView:
    """BFS ball of radius ``R`` around ``v``.

    ``visited`` is an optional scratch boolean array of length n (all False);
    it is restored before returning.
    """
    if not 0 <= v < graph.n:
        raise IndexError(f"vertex {v} out of range")
    if R < 0:
        raise ValueError("R must be >= 0")
    own = visited is None
    seen = np.zeros(graph.n, dtype=bool) if own else visited
    levels = [np.array([v], dtype=np.int64)]
    parents = [np.array([-1], dtype=np.int64)]
    seen[v] = True
    offset = 0
    for _ in range(R):
        frontier = levels[-1]
        pos, nb = _expand(graph, frontier)
        fresh = ~seen[nb]
        pos, nb = pos[fresh], nb[fresh]
        nb, first = np.unique(nb, return_index=True)
        pos = pos[first]
        if nb.size == 0:
            break
        order = np.lexsort((nb, pos))
        nb, pos = nb[order], pos[order]
        seen[nb] = True
        parents.append(pos + offset)
        offset += frontier.shape[0]
        levels.append(nb)
    nodes = np.concatenate(levels)
    _, nb = _expand(graph, nodes)
    n_edges = int(seen[nb].sum() // 2)
    seen[nodes] = False
    return BallView(int(v), int(R), levels, np.concatenate(parents), n_edges)


def poisson_tv(samples: np.ndarray, mean: float) -> float:
    """Total-variation distance between an empirical count distribution and Poisson(mean)."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.size == 0:
        return float("nan")
    top = int(max(samples.max(), stats.poisson.ppf(1 - 1e-12, mean))) + 1
    emp = np.bincount(samples, minlength=top + 1)[: top + 1] / samples.size
    pmf = stats.poisson.pmf(np.arange(top + 1), mean)
    tail = max(0.0, 1.0 - pmf.sum())
    return float(0.5 * (np.abs(emp - pmf).sum() + tail))


@dataclass
class CouplingReport:
    R: int
    n_centers: int
    tree_fraction: float
    tv_children: float
    tv_forward_degree: float
    tv_same_label: float
    tv_other_label: float
    flip_rate: float
    flip_edges: int
    max_imbalance: float
    imbalance_limit: float
    balanced_ok: bool
    mean_children: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def coupling_diagnostic(graph: SbmGraph, centers, R: int) -> CouplingReport:
    """Compare BFS balls of the graph with the Poisson broadcast tree.

    Child counts are the spanning-tree offspring of every node above the
    boundary, pooled over all centers; vertices already reached are not
    counted again, as in the exploration argument. ``tv_forward_degree``
    instead counts every neighbour except the BFS parent. Same-label counts
    are compared with Poisson(a/q) and counts of each other label with
    Poisson(b/q).
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    params = graph.params
    if params is None:
        raise ValueError("graph carries no parameters")
    q = graph.q
    sigma = graph.sigma
    scratch = np.zeros(graph.n, dtype=bool)
    n_tree = 0
    kids, fwd, same, other = [], [], [], []
    deg = graph.degrees
    flips = edges = 0
    for v in centers:
        b = ball(graph, int(v), R, visited=scratch)
        n_tree += b.is_tree
        for k in range(b.depth):
            par = b.bfs_parent_level(k + 1)
            width = b.levels[k].shape[0]
            kids.append(np.bincount(par, minlength=width))
            fwd.append(deg[b.levels[k]] - (k > 0))
            parent_lab = sigma[b.levels[k]]
            child_lab = sigma[b.levels[k + 1]]
            counts = np.zeros((width, q), dtype=np.int64)
            np.add.at(counts, (par, child_lab), 1)
            same.append(counts[np.arange(width), parent_lab])
            mask = np.ones((width, q), dtype=bool)
            mask[np.arange(width), parent_lab] = False
            other.append(counts[mask])
            flips += int((parent_lab[par] != child_lab).sum())
            edges += par.shape[0]
    kids = np.concatenate(kids) if kids else np.empty(0, dtype=np.int64)
    sizes = graph.community_sizes()
    imbalance = float(np.abs(sizes - graph.n / q).max())
    limit = graph.n**0.75
    return CouplingReport(
        R=R,
        n_centers=len(centers),
        tree_fraction=n_tree / max(len(centers), 1),
        tv_children=poisson_tv(kids, params.d),
        tv_forward_degree=poisson_tv(np.concatenate(fwd), params.d) if fwd else float("nan"),
        tv_same_label=poisson_tv(np.concatenate(same), params.a / q) if same else float("nan"),
        tv_other_label=poisson_tv(np.concatenate(other), params.b / q) if other else float("nan"),
        flip_rate=flips / edges if edges else float("nan"),
        flip_edges=edges,
        max_imbalance=imbalance,
        imbalance_limit=limit,
        balanced_ok=imbalance <= limit,
        mean_children=float(kids.mean()) if kids.size else float("nan"),
    )


# --- persistence ---------------------------------------------------------


def dump_edge_list(graph: SbmGraph, seed=None) -> str:
    """``n q a b seed`` header line, then one ``u v`` line per edge (u < v)."""
    p = graph.params
    a = "nan" if p is None else repr(p.a)
    b = "nan" if p is None else repr(p.b)
    lines = [f"{graph.n} {graph.q} {a} {b} {seed if seed is not None else '-'}"]
    u, v = graph.edges()
    lines.extend(f"{x} {y}" for x, y in zip(u.tolist(), v.tolist()))
    return "\n".join(lines) + "\n"


def dump_labels(labels) -> str:
    return "".join(f"{v} {int(s)}\n" for v, s in enumerate(np.asarray(labels).tolist()))


def parse_labels(text: str, n: int | None = None) -> np.ndarray:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    lab = np.array([int(r[1]) for r in rows], dtype=np.int64)
    size = n if n is not None else len(rows)
    if idx.size != size or not np.array_equal(np.sort(idx), np.arange(size)):
        raise ValueError("labels must cover vertices 0..n-1 exactly once")
    out = np.empty(size, dtype=np.int64)
    out[idx] = lab
    return out


def load_edge_list(text: str, labels_text: str) -> SbmGraph:
    """Parse :func:`dump_edge_list` output plus a labels sidecar and validate the graph."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    n, q = int(head[0]), int(head[1])
    a, b = float(head[2]), float(head[3])
    params = ModelParams(q, a, b) if math.isfinite(a) and math.isfinite(b) else None
    uv = np.array([[int(t) for t in ln.split()[:2]] for ln in lines[1:]], dtype=np.int64).reshape(-1, 2)
    sigma = parse_labels(labels_text, n)
    if np.any((sigma < 0) | (sigma >= q)):
        raise ValueError("labels outside 0..q-1")
    g = from_edges(n, q, sigma, uv[:, 0], uv[:, 1], params)
    g.validate()
    return g
