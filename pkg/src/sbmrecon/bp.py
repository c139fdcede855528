"""Exact belief propagation for the root label of a broadcast tree.

The root posterior obeys the recursion

    f_j(x_1..x_D) = prod_i (1 + lam q (x_i(j) - 1/q)) / sum_k prod_i (1 + lam q (x_i(k) - 1/q))

over the children's posteriors ``x_i``. Products are accumulated as sums of
logs with a max shift before exponentiating; with ``lam == 1`` a zero factor
becomes an exact ``-inf`` log weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from sbmrecon._rng import SeedLike, as_generator, spawn
from sbmrecon.model import ModelParams, NoiseMatrix, transition_matrix
from sbmrecon.tree import (
    DEFAULT_NODE_BUDGET,
    GALTON_WATSON,
    REGULAR,
    LabeledTree,
    NoisyLabels,
    broadcast_labels,
    sample_channel,
    sample_gw_tree,
    sample_regular_tree,
)

SIMPLEX_TOL = 1e-9


class ImpossibleObservation(ValueError):
    """Observed labels have zero likelihood under the model (only possible with lam == 1)."""


def _log_factors(x: np.ndarray, lam: float, q: int) -> np.ndarray:
    """Per-child log factors, up to a label-independent constant.

    For lam < 1 this is log1p(c x) with c = lam q / (1 - lam), which differs
    from log(1 + lam q (x - 1/q)) by log(1 - lam) in every coordinate. The
    shift cancels after normalisation and keeps tiny coordinates exact.
    """
    x = np.asarray(x, dtype=float)
    if lam < 1:
        return np.log1p(lam * q / (1 - lam) * x)
    with np.errstate(divide="ignore"):
        return np.log1p(lam * q * (x - 1.0 / q))


def _softmax_rows(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw, axis=-1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ImpossibleObservation("every label has zero likelihood")
    with np.errstate(under="ignore"):
        w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def _sum_by_parent(values: np.ndarray, parents: np.ndarray, width: int) -> np.ndarray:
    out = np.empty((width, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(parents, weights=values[:, j], minlength=width)
    return out


def bp_step(children, params: ModelParams) -> np.ndarray:
    """One application of the recursion to a list of child posteriors.

    No children gives the uniform vector.
    """
    q = params.q
    x = np.asarray(children, dtype=float).reshape(-1, q)
    logw = _log_factors(x, params.lam, q).sum(axis=0)
    return _softmax_rows(logw[None, :])[0]


def bp_step_literal(children, params: ModelParams) -> np.ndarray:
    """The recursion evaluated as written, in linear space (for small inputs only)."""
    q, lam = params.q, params.lam
    x = np.asarray(children, dtype=float).reshape(-1, q)
    num = np.prod(1 + lam * q * (x - 1 / q), axis=0)
    return num / num.sum()


def ml_estimate(post) -> int:
    """Maximum-likelihood label; ties go to the lowest index."""
    return int(np.argmax(np.asarray(post)))


def leaf_posteriors(observed: np.ndarray, q: int, delta: NoiseMatrix | np.ndarray | None = None) -> np.ndarray:
    """Posterior of a leaf's true label given its own observation, uniform prior.

    Without a channel this is the indicator of the observed label. With a
    channel it is column ``tau`` of ``delta`` normalised, which equals
    ``delta[:, tau]`` whenever the columns already sum to one.
    """
    observed = np.asarray(observed, dtype=np.int64)
    if delta is None:
        out = np.zeros((observed.shape[0], q))
        out[np.arange(observed.shape[0]), observed] = 1.0
        return out
    e = delta.entries if isinstance(delta, NoiseMatrix) else np.asarray(delta, dtype=float)
    cols = e / e.sum(axis=0, keepdims=True)
    return cols[:, observed].T.copy()


def level_posteriors(
    tree: LabeledTree,
    m: int,
    level: int = 0,
    *,
    leaf_labels: np.ndarray | None = None,
    delta: NoiseMatrix | np.ndarray | None = None,
    leaf_post: np.ndarray | None = None,
    lam: float | None = None,
) -> np.ndarray:
    """Posteriors of every node on ``level`` given observations on level ``m``.

    Observations default to the true labels of level ``m``. ``leaf_labels``
    replaces them (for example with noisy labels, together with ``delta``);
    ``leaf_post`` supplies leaf posteriors directly. Returns an array of shape
    ``(level_size(level), q)``.
    """
    if lam is None:
        raise ValueError("lam is required")
    if m > tree.max_depth:
        raise ValueError(f"m={m} exceeds tree depth {tree.max_depth}")
    if not 0 <= level <= m:
        raise ValueError("level must lie in 0..m")
    q = tree.q
    if leaf_post is None:
        if leaf_labels is None:
            if tree.sigma is None:
                raise ValueError("tree has no labels")
            leaf_labels = tree.sigma[tree.level(m)]
        leaf_post = leaf_posteriors(leaf_labels, q, delta)
    post = np.asarray(leaf_post, dtype=float)
    for t in range(m, level, -1):
        parents = tree.parent[tree.level(t)] - tree.level_offsets[t - 1]
        post = _softmax_rows(_sum_by_parent(_log_factors(post, lam, q), parents, tree.level_size(t - 1)))
    return post


def exact_posterior(tree: LabeledTree, m: int, params: ModelParams, *, root: int = 0) -> np.ndarray:
    """P(sigma_root = . | true labels on level m)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return level_posteriors(tree, m, 0, lam=params.lam)[root]


def noisy_posterior(
    tree: LabeledTree,
    noisy: NoisyLabels,
    m: int,
    delta: NoiseMatrix,
    params: ModelParams,
    *,
    root: int = 0,
) -> np.ndarray:
    """P(sigma_root = . | noisy labels on level m)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if noisy.level != m:
        raise ValueError(f"noisy labels live on level {noisy.level}, not {m}")
    return level_posteriors(tree, m, 0, leaf_labels=noisy.tau, delta=delta, lam=params.lam)[root]


def bp_jacobian(children, params: ModelParams) -> np.ndarray:
    """All partials ``J[j, t, l] = d f_j / d x_t(l)`` of the recursion.

    Inputs are treated as free coordinates (no simplex constraint).
    """
    q, lam = params.q, params.lam
    if lam >= 1:
        raise ValueError("partial derivatives are degenerate at lambda = 1")
    x = np.asarray(children, dtype=float).reshape(-1, q)
    logf = np.log1p(lam * q * (x - 1.0 / q))  # (D, q)
    log_n = logf.sum(axis=0)  # log N_k
    shift = log_n.max()
    n = np.exp(log_n - shift)
    s = n.sum()
    n_minus = np.exp(log_n[None, :] - logf - shift)  # N_{l,-t} scaled, (D, q)
    coef = lam * q * n_minus / s**2  # (D, q) over (t, l)
    jac = -n[:, None, None] * coef[None, :, :]
    for j in range(q):
        jac[j, :, j] = (s - n[j]) * coef[:, j]
    return jac


def bp_partial_derivative(children, params: ModelParams, j: int, t: int, l: int) -> float:
    """Closed-form d f_j / d x_t(l)."""
    return float(bp_jacobian(children, params)[j, t, l])


def gradient_bound(params: ModelParams) -> float:
    """Universal bound q / (1 - lam) on every partial of the recursion."""
    return params.q / (1 - params.lam)


# --- contraction experiment -----------------------------------------------


def _log_abs_expm1(b: np.ndarray) -> np.ndarray:
    """log |exp(b) - 1| without cancellation."""
    with np.errstate(divide="ignore"):
        return np.maximum(b, 0.0) + np.log(-np.expm1(-np.abs(b)))


def pair_step(
    x: np.ndarray, diff: np.ndarray, parents: np.ndarray, width: int, lam: float, q: int
) -> tuple[np.ndarray, np.ndarray]:
    """One recursion step applied jointly to X and to the gap D = W - X.

    W is never formed: the parent's log-weight gap is accumulated from the
    children's gaps directly, so D keeps full relative precision even when
    it is many orders of magnitude below X. Needs lam < 1.
    """
    c = lam * q / (1 - lam)
    logw = _sum_by_parent(np.log1p(c * x), parents, width)
    logx = logw - logsumexp(logw, axis=1, keepdims=True)
    gap = _sum_by_parent(np.log1p(c * diff / (1 + c * x)), parents, width)
    px = np.exp(logx)
    with np.errstate(over="ignore", invalid="ignore"):
        s = (px * np.expm1(gap)).sum(axis=1, keepdims=True)
    # log1p keeps tiny shifts exact; far-apart pairs go through logsumexp instead
    near = np.isfinite(s) & (s > -0.5)
    shift = np.where(near, np.log1p(np.where(near, s, 0.0)), logsumexp(logx + gap, axis=1, keepdims=True))
    b = gap - shift
    pd = np.sign(b) * np.exp(logx + _log_abs_expm1(b))
    # the top coordinate is recovered from the others, which sum exactly against it
    r = np.argmax(px, axis=1)
    rows = np.arange(px.shape[0])
    pd[rows, r] = 0.0
    pd[rows, r] = -pd.sum(axis=1)
    return px, pd


def pair_posteriors(
    tree: LabeledTree,
    m: int,
    tau: np.ndarray,
    delta: NoiseMatrix | np.ndarray,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Root posteriors X (true leaves on level m) and gaps W - X (noisy leaves)."""
    q = tree.q
    x = leaf_posteriors(tree.sigma[tree.level(m)], q)
    diff = leaf_posteriors(tau, q, delta) - x
    if lam >= 1:
        w = level_posteriors(tree, m, 0, leaf_labels=tau, delta=delta, lam=lam)
        x = level_posteriors(tree, m, 0, lam=lam)
        return x, w - x
    for t in range(m, 0, -1):
        parents = tree.parent[tree.level(t)] - tree.level_offsets[t - 1]
        x, diff = pair_step(x, diff, parents, tree.level_size(t - 1), lam, q)
    return x, diff


@dataclass
class ContractionTrace:
    """Per-depth Monte Carlo estimates comparing exact and noisy root posteriors.

    ``e_m`` and ``etilde_m`` are sample means of max X and max W;
    ``acc_x``/``acc_w`` are the empirical frequencies of recovering the root
    label; ``eps`` is the sample mean of X(root) - W(root).
    """

    m: np.ndarray
    mean_l1: np.ndarray
    se_l1: np.ndarray
    e_m: np.ndarray
    se_e: np.ndarray
    etilde_m: np.ndarray
    se_etilde: np.ndarray
    acc_x: np.ndarray
    acc_w: np.ndarray
    eps: np.ndarray
    se_eps: np.ndarray
    trials: int
    method: str
    meta: dict = field(default_factory=dict)

    CSV_HEADER = ("m", "mean_l1", "se_l1", "E_m", "se_E", "Etilde_m", "se_Etilde", "trials")

    def csv_rows(self) -> list[list]:
        g = "{:.10g}".format
        return [
            [int(self.m[i]), g(self.mean_l1[i]), g(self.se_l1[i]), g(self.e_m[i]), g(self.se_e[i]),
             g(self.etilde_m[i]), g(self.se_etilde[i]), self.trials]
            for i in range(len(self.m))
        ]

    def to_dict(self) -> dict:
        return {
            "m": self.m.tolist(),
            "mean_l1": self.mean_l1.tolist(),
            "se_l1": self.se_l1.tolist(),
            "E_m": self.e_m.tolist(),
            "se_E": self.se_e.tolist(),
            "Etilde_m": self.etilde_m.tolist(),
            "se_Etilde": self.se_etilde.tolist(),
            "acc_x": self.acc_x.tolist(),
            "acc_w": self.acc_w.tolist(),
            "eps": self.eps.tolist(),
            "se_eps": self.se_eps.tolist(),
            "trials": self.trials,
            "method": self.method,
            "meta": self.meta,
        }


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    n = v.shape[0]
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return float(v.mean()), se


def _summarize(per_m, trials: int, method: str, meta: dict) -> ContractionTrace:
    cols = {k: [] for k in ("l1", "sl1", "e", "se", "et", "set", "ax", "aw", "eps", "seps")}
    for x, diff in per_m:
        w = x + diff
        for key, vals in (
            (("l1", "sl1"), np.abs(diff).sum(axis=1)),
            (("e", "se"), x.max(axis=1)),
            (("et", "set"), w.max(axis=1)),
            (("eps", "seps"), -diff[:, 0]),
        ):
            mu, se = _mean_se(vals)
            cols[key[0]].append(mu)
            cols[key[1]].append(se)
        cols["ax"].append(float((np.argmax(x, axis=1) == 0).mean()))
        cols["aw"].append(float((np.argmax(w, axis=1) == 0).mean()))
    a = {k: np.array(v) for k, v in cols.items()}
    return ContractionTrace(
        m=np.arange(1, len(per_m) + 1),
        mean_l1=a["l1"],
        se_l1=a["sl1"],
        e_m=a["e"],
        se_e=a["se"],
        etilde_m=a["et"],
        se_etilde=a["set"],
        acc_x=a["ax"],
        acc_w=a["aw"],
        eps=a["eps"],
        se_eps=a["seps"],
        trials=trials,
        method=method,
        meta=meta,
    )


def expected_tree_nodes(params: ModelParams, m_max: int) -> float:
    return sum(params.d**k for k in range(m_max + 1))


def _channel(delta) -> np.ndarray:
    return delta.entries if isinstance(delta, NoiseMatrix) else np.asarray(delta, dtype=float)


def _exact_limits(params, delta, m_max, trials, regime, seed, chunk, budget):
    e = _channel(delta)
    xs = [[] for _ in range(m_max)]
    ds = [[] for _ in range(m_max)]
    n_chunks = -(-trials // chunk)
    for c, ss in enumerate(spawn(seed, n_chunks)):
        rng = as_generator(ss)
        roots = min(chunk, trials - c * chunk)
        if regime == REGULAR:
            skel = sample_regular_tree(int(round(params.d)), m_max, roots=roots, budget=budget)
        else:
            skel = sample_gw_tree(params.d, m_max, rng, roots=roots, budget=budget)
        tree = broadcast_labels(skel, params, 0, rng)
        for m in range(1, m_max + 1):
            tau = sample_channel(tree.sigma[tree.level(m)].astype(np.int64), e, rng)
            x, diff = pair_posteriors(tree, m, tau, e, params.lam)
            xs[m - 1].append(x)
            ds[m - 1].append(diff)
    return [(np.concatenate(x), np.concatenate(d)) for x, d in zip(xs, ds)]


def _population_level(pool_x, pool_d, params, regime, n, rng, m_mat):
    """Draw ``n`` (X, W - X) samples per parent label from the previous level's pools."""
    q, lam = params.q, params.lam
    out_x = np.empty((q, n, q))
    out_d = np.empty((q, n, q))
    npool = pool_x.shape[1]
    for c in range(q):
        if regime == REGULAR:
            deg = np.full(n, int(round(params.d)), dtype=np.int64)
        else:
            deg = rng.poisson(params.d, size=n)
        parents = np.repeat(np.arange(n), deg)
        labels = sample_channel(np.full(parents.shape[0], c, dtype=np.int64), m_mat, rng).astype(np.int64)
        pick = rng.integers(0, npool, size=parents.shape[0])
        out_x[c], out_d[c] = pair_step(pool_x[labels, pick], pool_d[labels, pick], parents, n, lam, q)
    return out_x, out_d


def _population_limits(params, delta, m_max, trials, regime, seed, pool_size):
    if params.lam >= 1:
        raise ValueError("population method needs lambda < 1")
    q = params.q
    e = _channel(delta)
    m_mat = np.asarray(transition_matrix(params))
    rng = as_generator(seed)
    n = max(pool_size, trials)
    pool_x = np.zeros((q, n, q))
    pool_d = np.empty((q, n, q))
    for c in range(q):
        pool_x[c, :, c] = 1.0
        tau = sample_channel(np.full(n, c, dtype=np.int64), e, rng)
        pool_d[c] = leaf_posteriors(tau, q, e) - pool_x[c]
    per_m = []
    for _ in range(m_max):
        pool_x, pool_d = _population_level(pool_x, pool_d, params, regime, n, rng, m_mat)
        per_m.append((pool_x[0, :trials].copy(), pool_d[0, :trials].copy()))
    return per_m


def estimate_limits(
    params: ModelParams,
    delta: NoiseMatrix | np.ndarray,
    m_max: int,
    trials: int,
    regime: str = GALTON_WATSON,
    seed: SeedLike = 0,
    *,
    method: str = "auto",
    chunk: int = 256,
    pool_size: int = 20000,
    exact_node_limit: float = 2e7,
    budget: int = DEFAULT_NODE_BUDGET,
) -> ContractionTrace:
    """Monte Carlo estimates of E||X - W||_1 alongside E_m and Etilde_m, for m = 1..m_max.

    The root label is fixed to 0. ``method="exact"`` samples one tree of depth
    ``m_max`` per trial (in forests of ``chunk`` trials), draws noisy labels on
    every level and computes X and W on the same tree truncated at each depth.
    ``method="population"`` samples (X, W) pairs level by level: a node of
    label c gets its children's pairs by resampling from per-label pools built
    at the previous level, which reproduces the joint law of (X, W) on the
    tree without materialising it. ``auto`` uses the exact method when the
    expected node count ``trials * sum_k d^k`` stays below ``exact_node_limit``.
    """
    if trials < 1 or m_max < 1:
        raise ValueError("need trials >= 1 and m_max >= 1")
    if regime not in (REGULAR, GALTON_WATSON):
        raise ValueError(f"unknown regime {regime!r}")
    if regime == REGULAR and int(round(params.d)) != params.d:
        raise ValueError("regular trees need an integer degree")
    if method == "auto":
        method = "exact" if trials * expected_tree_nodes(params, m_max) <= exact_node_limit else "population"
    meta = {"regime": regime, "m_max": m_max, "delta": _channel(delta).tolist()}
    if method == "exact":
        meta["chunk"] = chunk
        per_m = _exact_limits(params, delta, m_max, trials, regime, seed, chunk, budget)
    elif method == "population":
        meta["pool_size"] = max(pool_size, trials)
        per_m = _population_limits(params, delta, m_max, trials, regime, seed, pool_size)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _summarize(per_m, trials, method, meta)
