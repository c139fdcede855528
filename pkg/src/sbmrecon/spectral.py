"""Spectral black-box partition, balancing, alignment and noise-matrix estimation.

The partition step trims vertices of degree above ``20 (a + b)``, embeds the
rest with the top-q eigenvectors of the trimmed adjacency matrix, normalises
the rows and clusters them with k-means. Trimmed vertices join the block most
common among their neighbours.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from sklearn.cluster import KMeans

from sbmrecon._rng import SeedLike, as_generator
from sbmrecon.model import ModelParams, transition_matrix
from sbmrecon.sbm import SbmGraph

TRIM_FACTOR = 20
KMEANS_RESTARTS = 20
BRUTE_FORCE_MAX_Q = 8
LOW_ANCHOR_DEGREE = 10


class SpectralError(RuntimeError):
    """The eigen-solver failed to converge or the graph is unusable."""


class AnchorError(ValueError):
    """No usable high-degree vertices were found."""


@dataclass(frozen=True)
class Partition:
    assign: np.ndarray
    q: int

    def __post_init__(self):
        a = np.asarray(self.assign, dtype=np.int64)
        if a.ndim != 1:
            raise ValueError("assign must be one-dimensional")
        if a.size and (a.min() < 0 or a.max() >= self.q):
            raise ValueError(f"block indices must lie in 0..{self.q - 1}")
        object.__setattr__(self, "assign", a)

    @property
    def n(self) -> int:
        return int(self.assign.shape[0])

    @property
    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.q)

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assign == i) for i in range(self.q)]

    def relabel(self, perm) -> "Partition":
        """Partition whose block ``perm[i]`` is this partition's block ``i``."""
        return Partition(np.asarray(perm, dtype=np.int64)[self.assign], self.q)

    def to_text(self) -> str:
        return "".join(f"{v} {b}\n" for v, b in enumerate(self.assign.tolist()))

    @classmethod
    def from_text(cls, text: str, q: int) -> "Partition":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        assign = np.empty(len(rows), dtype=np.int64)
        for r in rows:
            assign[int(r[0])] = int(r[1])
        return cls(assign, q)


@dataclass(frozen=True)
class ConfusionMatrix:
    """``entries[i, j]`` relates true community i to partition block j.

    ``mode`` is ``"exact"`` (computed from the truth) or ``"estimated"``.
    """

    entries: np.ndarray
    mode: str
    notes: tuple = field(default=(), compare=False)

    @property
    def q(self) -> int:
        return self.entries.shape[0]

    def bound_violations(self, tol: float = 1e-9) -> list[str]:
        """Channel assumptions that fail, as NoiseMatrix error codes."""
        e = self.entries
        q = self.q
        bad = []
        if np.any(e < -tol):
            bad.append("negative")
        if np.any(np.abs(e.sum(axis=1) - 1) > tol):
            bad.append("row_sum")
        if np.any(np.abs(e.sum(axis=0) - 1) > tol):
            bad.append("column_sum")
        if np.any(np.diag(e) < 1 - 1 / q - tol):
            bad.append("diagonal")
        return bad

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "entries": self.entries.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ConfusionMatrix":
        raw = json.loads(text)
        return cls(np.array(raw["entries"], dtype=float), raw["mode"])


def _trim_threshold(graph: SbmGraph, a: float | None, b: float | None) -> float:
    if a is None or b is None:
        if graph.params is None:
            raise ValueError("need a and b, either explicitly or from graph.params")
        a, b = graph.params.a, graph.params.b
    return TRIM_FACTOR * (a + b)


def _neighbour_majority(graph: SbmGraph, vertices, assign: np.ndarray, known: np.ndarray, q, rng) -> None:
    for v in vertices:
        nb = graph.neighbors(v)
        nb = nb[known[nb]]
        if nb.size == 0:
            assign[v] = rng.integers(0, q)
        else:
            assign[v] = int(np.argmax(np.bincount(assign[nb], minlength=q)))


def spectral_partition(
    graph: SbmGraph,
    q: int,
    seed: SeedLike = None,
    *,
    a: float | None = None,
    b: float | None = None,
    restarts: int = KMEANS_RESTARTS,
    exclude=None,
) -> Partition:
    """q-block partition of ``graph`` from its leading eigenvectors.

    ``exclude`` lists vertices whose edges are ignored (they still receive a
    block, by neighbour majority on the full graph).
    """
    if graph.n == 0:
        raise SpectralError("empty graph")
    rng = as_generator(seed)
    work = graph if exclude is None or len(exclude) == 0 else graph.remove_vertices(exclude)
    trimmed = work.degrees > _trim_threshold(graph, a, b)
    if exclude is not None:
        trimmed[np.asarray(exclude, dtype=np.int64)] = True
    keep = np.flatnonzero(~trimmed)
    if keep.size < q:
        raise SpectralError("fewer than q vertices survive trimming")
    adj = work.adjacency()[keep][:, keep]
    v0 = rng.standard_normal(keep.size)
    try:
        _, vecs = eigsh(adj, k=q, which="LA", v0=v0, tol=1e-8, maxiter=5000)
    except (ArpackNoConvergence, ArpackError) as exc:
        raise SpectralError(f"eigen-solver failed: {exc}") from exc
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    emb = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    km = KMeans(n_clusters=q, n_init=restarts, random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(emb)
    assign = np.full(graph.n, -1, dtype=np.int64)
    assign[keep] = labels
    known = assign >= 0
    _neighbour_majority(graph, np.flatnonzero(~known), assign, known, q, rng)
    return Partition(assign, q)


def uniformize(partition: Partition, seed: SeedLike = None) -> Partition:
    """Move as few vertices as possible so that block sizes differ by at most one.

    Targets are ``n // q`` plus one for the ``n % q`` currently largest blocks
    (ties to the lower index). Surplus vertices are chosen at random.
    """
    q, n = partition.q, partition.n
    sizes = partition.block_sizes
    base, extra = divmod(n, q)
    order = sorted(range(q), key=lambda i: (-sizes[i], i))
    target = np.full(q, base)
    target[order[:extra]] += 1
    if np.array_equal(sizes, target):
        return partition
    rng = as_generator(seed)
    assign = partition.assign.copy()
    pool = []
    for i in range(q):
        surplus = sizes[i] - target[i]
        if surplus > 0:
            members = np.flatnonzero(assign == i)
            pool.append(np.sort(rng.choice(members, size=surplus, replace=False)))
    moving = np.concatenate(pool)
    start = 0
    for i in range(q):
        deficit = target[i] - sizes[i]
        if deficit > 0:
            assign[moving[start : start + deficit]] = i
            start += deficit
    return Partition(assign, q)


def overlap_matrix(partition: Partition, reference: Partition) -> np.ndarray:
    """``O[i, j] = |reference block i  ∩  partition block j|``."""
    if partition.n != reference.n:
        raise ValueError("partitions cover different vertex sets")
    q = max(partition.q, reference.q)
    return np.bincount(reference.assign * q + partition.assign, minlength=q * q).reshape(q, q)


def align(partition: Partition, reference: Partition) -> tuple[np.ndarray, bool]:
    """Permutation ``perm`` maximising the overlap of ``partition`` block ``perm[i]`` with reference block ``i``.

    Returns ``(perm, tied)``; ``tied`` flags that another permutation reaches
    the same overlap, in which case the lexicographically smallest wins.
    ``partition.relabel(inverse(perm))`` expresses the partition in the
    reference's labels; see :func:`aligned`.
    """
    o = overlap_matrix(partition, reference)
    q = o.shape[0]
    if q <= BRUTE_FORCE_MAX_Q:
        best, best_val, tied = None, -1, False
        idx = np.arange(q)
        for perm in itertools.permutations(range(q)):
            val = int(o[idx, perm].sum())
            if val > best_val:
                best, best_val, tied = perm, val, False
            elif val == best_val:
                tied = True
        return np.array(best, dtype=np.int64), tied
    rows, cols = linear_sum_assignment(o, maximize=True)
    return cols[np.argsort(rows)].astype(np.int64), False


def aligned(partition: Partition, reference: Partition) -> Partition:
    """``partition`` relabelled to match ``reference``."""
    perm, _ = align(partition, reference)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return partition.relabel(inv)


def gamma_observed(partition: Partition, truth) -> float:
    """Smallest gamma with ``|V_i ∩ V'_i| >= (1 - gamma) n / q`` for all i, after the best permutation."""
    ref = Partition(np.asarray(truth), partition.q)
    perm, _ = align(partition, ref)
    o = overlap_matrix(partition, ref)
    hits = o[np.arange(partition.q), perm]
    return float(max(0.0, 1 - hits.min() / (partition.n / partition.q)))


def confusion_exact(partition: Partition, truth) -> ConfusionMatrix:
    """``(q/n) (|V^i ∩ W^j| - (|W^j| - n/q) / q)``; columns sum to one exactly."""
    q, n = partition.q, partition.n
    o = overlap_matrix(partition, Partition(np.asarray(truth), q)).astype(float)
    sizes = partition.block_sizes.astype(float)
    e = (q / n) * (o - (sizes[None, :] - n / q) / q)
    return ConfusionMatrix(e, "exact")


def anchor_threshold(n: int) -> int:
    """``max(1, round(log n / (4 log log n)))``."""
    return max(1, int(round(0.25 * math.log(n) / math.log(math.log(n)))))


def select_high_degree(
    graph: SbmGraph, subset_size: int | None = None, seed: SeedLike = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Sample U (default size floor(sqrt n)) and return ``(U, anchors, k)`` with anchors = U ∩ {deg >= k}."""
    n = graph.n
    if n < 100:
        raise ValueError("need n >= 100")
    rng = as_generator(seed)
    size = math.isqrt(n) if subset_size is None else subset_size
    u = np.sort(rng.choice(n, size=size, replace=False))
    k = anchor_threshold(n)
    anchors = u[graph.degrees[u] >= k]
    if anchors.size == 0:
        raise AnchorError(
            f"no vertex of degree >= {k} in the sampled subset; n={n} is too small for this step"
        )
    return u, anchors, k


def estimate_noise_matrix(
    graph: SbmGraph,
    partition: Partition,
    anchors,
    params: ModelParams,
    *,
    anchor_labels=None,
    pooled: bool = True,
) -> ConfusionMatrix:
    """Estimate the channel from true community to partition block.

    Anchor ``u`` with label i contributes the partition blocks of its
    neighbours; their empirical distribution ``g[i]`` satisfies
    ``g = M Delta`` with M the transition matrix, which is solved for Delta.
    Rows are then clipped to [0, 1] and renormalised. With ``pooled`` the
    counts of every anchor with the same label are summed; otherwise only the
    highest-degree anchor of each label is used. Labels default to the
    anchors' own blocks.
    """
    q = params.q
    if params.lam == 0:
        raise np.linalg.LinAlgError("transition matrix is singular (lambda = 0)")
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        raise AnchorError("no anchors given")
    labels = partition.assign[anchors] if anchor_labels is None else np.asarray(anchor_labels, dtype=np.int64)
    deg = graph.degrees[anchors]
    notes = []
    counts = np.zeros((q, q))
    for i in range(q):
        mine = np.flatnonzero(labels == i)
        if mine.size == 0:
            raise AnchorError(f"no anchor carries label {i}")
        if not pooled:
            mine = mine[[int(np.argmax(deg[mine]))]]
        for u in anchors[mine]:
            counts[i] += np.bincount(partition.assign[graph.neighbors(u)], minlength=q)
        if counts[i].sum() < LOW_ANCHOR_DEGREE:
            notes.append(f"label {i}: only {int(counts[i].sum())} neighbour observations")
    if np.any(counts.sum(axis=1) == 0):
        raise AnchorError("an anchor label has no neighbours to read")
    g = counts / counts.sum(axis=1, keepdims=True)
    est = linalg.solve(np.asarray(transition_matrix(params)), g)
    est = np.clip(est, 0.0, 1.0)
    sums = est.sum(axis=1, keepdims=True)
    est = np.where(sums > 0, est / np.where(sums > 0, sums, 1), 1.0 / q)
    return ConfusionMatrix(est, "estimated", tuple(notes))
