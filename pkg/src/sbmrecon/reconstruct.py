"""Per-vertex BP amplification of a black-box partition.

For each scored vertex v: partition the graph with the ball B(v, R-1) cut
out, align that partition to a reference partition of the whole graph, read
the block labels on the boundary of B(v, R), push them through the estimated
channel as leaf beliefs, and run BP down the ball's BFS spanning tree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from sbmrecon import bp
from sbmrecon._rng import SeedLike, as_generator, spawn
from sbmrecon.model import ModelParams
from sbmrecon.sbm import SbmGraph, ball, coupling_radius
from sbmrecon.spectral import (
    Partition,
    SpectralError,
    aligned,
    estimate_noise_matrix,
    gamma_observed,
    select_high_degree,
    spectral_partition,
    uniformize,
)


@dataclass
class ReconstructionResult:
    """``assign`` covers every vertex; ``scored`` lists the vertices that went through BP."""

    assign: np.ndarray
    scored: np.ndarray
    posteriors: np.ndarray
    meta: dict = field(default_factory=dict)


def accuracy(assign, truth, q: int) -> float:
    """Fraction of agreement after the best relabelling of ``assign``."""
    assign = np.asarray(assign, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if assign.shape != truth.shape:
        raise ValueError("assign and truth differ in length")
    if assign.size == 0:
        return float("nan")
    conf = np.bincount(assign * q + truth, minlength=q * q).reshape(q, q)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    return float(conf[rows, cols].sum() / assign.size)


def ball_posterior(graph: SbmGraph, v: int, R: int, observed, channel: np.ndarray, lam: float) -> np.ndarray:
    """BP posterior of v on the BFS spanning tree of B(v, R) given labels ``observed`` on its boundary.

    ``observed`` is indexed by vertex. An empty boundary carries no
    information and yields the uniform vector.
    """
    q = channel.shape[0]
    b = ball(graph, v, R)
    if R == 0 or b.depth < R:
        return np.full(q, 1.0 / q)
    tree = b.spanning_tree(q=q)
    leaf = bp.leaf_posteriors(np.asarray(observed)[b.boundary], q, channel)
    return bp.level_posteriors(tree, R, 0, leaf_post=leaf, lam=lam)[0]


def reconstruct(
    graph: SbmGraph,
    params: ModelParams,
    *,
    R: int | None = None,
    subsample: int | None = None,
    amortize: bool = False,
    debug_exact: bool = False,
    u_from_align: bool = False,
    pooled_anchors: bool = True,
    seed: SeedLike = 0,
) -> ReconstructionResult:
    """Run the amplification algorithm on ``graph``.

    ``R`` defaults to the coupling radius. ``subsample`` scores a random set
    of that many vertices outside U (all of them when None); unscored
    vertices keep their reference block. ``amortize`` reuses the reference
    partition for every vertex instead of re-partitioning without the ball.
    ``debug_exact`` replaces the channel by the identity and the boundary
    labels by the true labels. Vertices of U get uniformly random labels
    unless ``u_from_align``.
    """
    q, n = params.q, graph.n
    s_u, s_align, s_pick, s_vert, s_rand = spawn(seed, 5)
    radius = coupling_radius(n, params.a, params.b) if R is None else int(R)
    if radius < 0:
        raise ValueError("R must be >= 0")
    notes = []
    if radius == 0:
        warnings.warn("R = 0: every posterior is uniform", RuntimeWarning, stacklevel=2)
        notes.append("R = 0; posteriors are uniform")

    u, anchors, k = select_high_degree(graph, seed=s_u)
    reference = uniformize(spectral_partition(graph, q, s_align), s_align)
    if debug_exact:
        channel = np.eye(q)
    else:
        est = estimate_noise_matrix(graph, reference, anchors, params, pooled=pooled_anchors)
        channel = est.entries
        notes.extend(est.notes)

    in_u = np.zeros(n, dtype=bool)
    in_u[u] = True
    candidates = np.flatnonzero(~in_u)
    if subsample is not None and subsample < candidates.size:
        candidates = np.sort(as_generator(s_pick).choice(candidates, size=subsample, replace=False))

    assign = reference.assign.copy()
    posts = np.empty((candidates.size, q))
    fallbacks = 0
    empty_boundary = 0
    for idx, (v, ss) in enumerate(zip(candidates.tolist(), spawn(s_vert, candidates.size))):
        if debug_exact:
            observed = graph.sigma
        elif amortize or radius == 0:
            observed = reference.assign
        else:
            inner = np.concatenate(ball(graph, v, radius - 1).levels)
            try:
                part = uniformize(spectral_partition(graph, q, ss, exclude=inner), ss)
            except SpectralError:
                fallbacks += 1
                posts[idx] = np.nan
                continue
            observed = aligned(part, reference).assign
        post = ball_posterior(graph, v, radius, observed, channel, params.lam)
        if radius > 0 and np.allclose(post, 1.0 / q):
            empty_boundary += 1
        posts[idx] = post
        assign[v] = bp.ml_estimate(post)

    if u_from_align:
        assign[u] = reference.assign[u]
    else:
        assign[u] = as_generator(s_rand).integers(0, q, size=u.size)

    meta = {
        "R": radius,
        "R_formula": coupling_radius(n, params.a, params.b),
        "delta_hat": np.asarray(channel).tolist(),
        "anchor_threshold": k,
        "n_anchors": int(anchors.size),
        "U_size": int(u.size),
        "fallback_count": fallbacks,
        "uninformative_count": empty_boundary,
        "mode": {
            "amortize": amortize,
            "debug_exact": debug_exact,
            "subsample": subsample,
            "u_from_align": u_from_align,
            "pooled_anchors": pooled_anchors,
        },
        "notes": notes,
        "reference_assign": reference.assign,
    }
    if graph.sigma is not None:
        truth = np.asarray(graph.sigma)
        meta["gamma_observed"] = gamma_observed(reference, truth)
        meta["accuracy"] = accuracy(assign[candidates], truth[candidates], q)
        meta["blackbox_accuracy"] = accuracy(reference.assign[candidates], truth[candidates], q)
        meta["accuracy_all"] = accuracy(assign, truth, q)
    return ReconstructionResult(assign, candidates, posts, meta)


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else float("nan")
