"""Majority estimators over level label counts, with closed-form moments.

Every count is taken with the root fixed to label ``0``: ``z`` counts label 0
on level ``k`` and ``y[i - 1]`` counts label ``i`` for ``i = 1..q-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbmrecon._rng import SeedLike, as_generator, spawn
from sbmrecon.model import ModelParams, NoiseMatrix, transition_matrix
from sbmrecon.tree import (
    GALTON_WATSON,
    REGULAR,
    LabeledTree,
    NoisyLabels,
    apply_noise,
    broadcast_labels,
    sample_gw_tree,
    sample_regular_tree,
)

REGIMES = (REGULAR, GALTON_WATSON)


@dataclass(frozen=True)
class LevelCounts:
    z: int
    y: tuple[int, ...]
    total: int
    noisy: bool = False

    @property
    def vector(self) -> np.ndarray:
        return np.array((self.z, *self.y), dtype=np.int64)

    @property
    def s(self) -> int:
        """Signed count: label-0 nodes minus everything else."""
        return self.z - sum(self.y)


@dataclass(frozen=True)
class MomentReport:
    mean_z: float
    mean_y: float
    var_bound: float
    regime: str
    r_constant: float


def _check_regime(regime: str) -> None:
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")


def forest_level_counts(tree: LabeledTree, k: int, labels: np.ndarray | None = None) -> np.ndarray:
    """Per-root label counts on level ``k`` as an ``(n_roots, q)`` array.

    ``labels`` defaults to the true labels of the level; pass observed labels
    (for example ``NoisyLabels.tau``) to count those instead.
    """
    if tree.q is None:
        raise ValueError("tree is unlabeled")
    if labels is None:
        if tree.sigma is None:
            raise ValueError("tree has no labels")
        labels = tree.sigma[tree.level(k)]
    roots = tree.root_ids(k)
    if labels.shape[0] != roots.shape[0]:
        raise ValueError("labels do not cover level k")
    q = tree.q
    flat = np.bincount(roots * q + labels.astype(np.int64), minlength=tree.n_roots * q)
    return flat.reshape(tree.n_roots, q)


def level_counts(
    tree: LabeledTree,
    k: int,
    use_noisy: bool = False,
    noisy: NoisyLabels | None = None,
    root: int = 0,
) -> LevelCounts:
    """Exact label counts on level ``k`` below ``root``."""
    if k > tree.max_depth or k < 0:
        raise ValueError(f"level {k} absent from tree of depth {tree.max_depth}")
    labels = None
    if use_noisy:
        if noisy is None or noisy.level != k:
            raise ValueError(f"noisy labels for level {k} required")
        labels = noisy.tau
    c = forest_level_counts(tree, k, labels)[root]
    return LevelCounts(int(c[0]), tuple(int(v) for v in c[1:]), int(c.sum()), use_noisy)


def majority_estimate(counts: LevelCounts | np.ndarray) -> int:
    """Most frequent label; ties go to the lowest label index."""
    vec = counts.vector if isinstance(counts, LevelCounts) else np.asarray(counts)
    return int(np.argmax(vec))


def expected_S(params: ModelParams, k: int) -> float:
    """E[2 * 1(sigma_v = 0) - 1] for a node ``v`` on level ``k``, root label 0."""
    q, lam = params.q, params.lam
    return (2 - 2 / q) * lam**k + 2 / q - 1


def expected_counts(params: ModelParams, k: int) -> tuple[float, float]:
    """Mean count of the root label and of each other label on level ``k``."""
    q, lam, d = params.q, params.lam, params.d
    dk, ldk = d**k, (lam * d) ** k
    return (1 - 1 / q) * ldk + dk / q, -ldk / q + dk / q


def r_constant(params: ModelParams, regime: str = REGULAR) -> float:
    """Per-level variance constant R of the moment recursion.

    Regular trees use p(2 - p - p/(q-1)); Galton-Watson trees add the
    lambda^2 (q-1)/q term coming from the Poisson offspring count.
    """
    _check_regime(regime)
    q, p, lam = params.q, params.p, params.lam
    r = p * (2 - p - p / (q - 1))
    if regime == GALTON_WATSON:
        r += lam**2 * (q - 1) / q
    return r


def _geometric(snr: float, k: int) -> float:
    if snr == 1.0:
        return float(k)
    return (snr**k - 1) / (snr - 1)


def variance_bound(params: ModelParams, k: int, regime: str = REGULAR, *, allow_critical: bool = False) -> MomentReport:
    """Upper bound R d^k ((lam^2 d)^k - 1)/(lam^2 d - 1) on Var(Z) and Var(Y).

    At lam^2 d == 1 the geometric sum has no closed form denominator; pass
    ``allow_critical=True`` to get the limiting R d^k k instead of an error.
    """
    _check_regime(regime)
    if k < 1:
        raise ValueError("variance bound needs k >= 1")
    if abs(params.snr - 1.0) < 1e-12 and not allow_critical:
        raise ValueError("lambda^2 d == 1: use allow_critical=True for the k * d^k limit form")
    r = r_constant(params, regime)
    snr = 1.0 if abs(params.snr - 1.0) < 1e-12 else params.snr
    bound = r * params.d**k * _geometric(snr, k)
    mz, my = expected_counts(params, k)
    return MomentReport(mz, my, bound, regime, r)


def noisy_expected_counts(params: ModelParams, delta: NoiseMatrix, k: int) -> tuple[float, np.ndarray]:
    """Mean counts of observed labels on level ``k``.

    Returns the mean for label 0 and an array with the means of labels
    1..q-1, each of the form (Delta[0, i] - 1/q)(lam d)^k + d^k/q.
    """
    q, lam, d = params.q, params.lam, params.d
    e = delta.entries
    dk, ldk = d**k, (lam * d) ** k
    row = (e[0] - 1 / q) * ldk + dk / q
    return float(row[0]), row[1:].copy()


def noisy_variance_bound(params: ModelParams, delta: NoiseMatrix, k: int, regime: str = REGULAR) -> np.ndarray:
    """Per-label variance bound for observed counts, shape ``(q,)``.

    The channel term is the exact expected conditional variance
    sum_s E[N_s] Delta[s, j](1 - Delta[s, j]); the propagated term is
    (sum_s Delta[s, j]^2) times the noiseless bound.
    """
    e = delta.entries
    mz, my = expected_counts(params, k)
    means = np.array([mz] + [my] * (params.q - 1))
    channel = means @ (e * (1 - e))
    propagated = (e**2).sum(axis=0) * variance_bound(params, k, regime).var_bound
    return channel + propagated


def count_moments(
    params: ModelParams,
    k: int,
    regime: str = REGULAR,
    delta: NoiseMatrix | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean vector and covariance of the level-``k`` label counts.

    Solves the second-moment recursion of the multi-type branching process
    directly (offspring Multinomial(d, M_c) for regular trees, independent
    Poisson(d M_cj) for Galton-Watson trees). With ``delta`` the moments are
    those of the observed labels.
    """
    _check_regime(regime)
    q, d = params.q, params.d
    m = np.asarray(transition_matrix(params))
    a = d * m
    if regime == REGULAR:
        offspring_cov = [d * (np.diag(m[c]) - np.outer(m[c], m[c])) for c in range(q)]
    else:
        offspring_cov = [d * np.diag(m[c]) for c in range(q)]
    mean = np.zeros(q)
    mean[0] = 1.0
    cov = np.zeros((q, q))
    for _ in range(k):
        cov = a.T @ cov @ a + sum(mean[c] * offspring_cov[c] for c in range(q))
        mean = mean @ a
    if delta is not None:
        e = delta.entries
        channel = sum(mean[s] * (np.diag(e[s]) - np.outer(e[s], e[s])) for s in range(q))
        cov = e.T @ cov @ e + channel
        mean = mean @ e
    return mean, cov


def majority_success_bound(params: ModelParams, regime: str = REGULAR, k: int | None = None) -> float:
    """Chebyshev lower bound on P(level-k majority recovers the root).

    With ``k=None`` returns the k -> infinity form 1 - 4Rq/(lam^2 d - 1).
    """
    if params.snr <= 1:
        raise ValueError("bound requires lambda^2 d > 1")
    q = params.q
    if k is None:
        return 1 - 4 * r_constant(params, regime) * q / (params.snr - 1)
    var = variance_bound(params, k, regime).var_bound
    return 1 - 4 * q * var / (params.lam * params.d) ** (2 * k)


def iterated_majority_fixed_point(params: ModelParams) -> float:
    """Stationary point of the iterated-majority recursion, 1 - (1-lam)(q-1)/(q(0.16 d - lam))."""
    q, lam, d = params.q, params.lam, params.d
    if 0.16 * d <= lam:
        raise ValueError("0.16 d <= lambda: the iterated-majority bound is vacuous")
    return 1 - (1 - lam) * (q - 1) / (q * (0.16 * d - lam))


def _vote_up(tree: LabeledTree, level: int, estimates: np.ndarray, q: int) -> np.ndarray:
    """Majority of child estimates for every node on ``level - 1``; -1 where nobody votes."""
    parents = tree.parent[tree.level(level)] - tree.level_offsets[level - 1]
    width = tree.level_size(level - 1)
    voting = estimates >= 0
    counts = np.bincount(
        parents[voting] * q + estimates[voting], minlength=width * q
    ).reshape(width, q)
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = -1
    return out


def forest_iterated_majority(
    tree: LabeledTree,
    k: int,
    leaf_labels: np.ndarray | None = None,
    *,
    leaf_counts: np.ndarray | None = None,
) -> np.ndarray:
    """Iterated majority estimate of every root, recursing from level ``k``.

    Either give labels on level ``k`` or, to avoid materialising the last
    level, per-node child label counts ``leaf_counts`` of shape
    ``(level_size(k - 1), q)``. Roots whose subtree has no level-``k``
    descendants get ``-1``.
    """
    q = tree.q
    if leaf_counts is not None:
        est = np.argmax(leaf_counts, axis=1)
        est[leaf_counts.sum(axis=1) == 0] = -1
        top = k - 1
    else:
        if leaf_labels is None:
            leaf_labels = tree.sigma[tree.level(k)]
        est = leaf_labels.astype(np.int64)
        top = k
    for level in range(top, 0, -1):
        est = _vote_up(tree, level, est, q)
    return est


def iterated_majority_estimate(
    tree: LabeledTree,
    k: int,
    use_noisy: bool = False,
    noisy: NoisyLabels | None = None,
    *,
    root: int = 0,
    scheme: str = "full",
    delta: NoiseMatrix | None = None,
    lam: float | None = None,
) -> int:
    """Root estimate from repeated majorities.

    ``scheme="full"`` takes the majority of child estimates at every level
    from ``k`` up. ``scheme="two-level"`` guesses each child of the root by
    maximum likelihood from level ``k`` and then takes their majority.
    Ties go to the lowest label; a root with no level-``k`` descendants
    returns 0. The two-level scheme needs ``lam`` (and ``delta`` for noisy
    leaves).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    leaf = None
    if use_noisy:
        if noisy is None or noisy.level != k:
            raise ValueError(f"noisy labels for level {k} required")
        leaf = noisy.tau
    if scheme == "full":
        est = forest_iterated_majority(tree, k, leaf)[root]
        return int(max(est, 0))
    if scheme != "two-level":
        raise ValueError(f"unknown scheme {scheme!r}")
    from sbmrecon import bp

    if lam is None:
        raise ValueError("two-level scheme needs lam")
    post = bp.level_posteriors(tree, k, 1, leaf_labels=leaf, delta=delta if use_noisy else None, lam=lam)
    child_est = np.argmax(post, axis=1)
    est = _vote_up(tree, 1, child_est, tree.q)[root]
    return int(max(est, 0))


# --- Monte Carlo ---------------------------------------------------------


def sample_leaf_counts(
    tree: LabeledTree,
    params: ModelParams,
    rng: np.random.Generator,
    delta: NoiseMatrix | None = None,
) -> np.ndarray:
    """Label counts of the (unmaterialised) level below the deepest level of ``tree``.

    Each deepest node with label ``c`` gets children with labels drawn from
    row ``c`` of the transition matrix (then through ``delta`` when given):
    exactly d of them for regular trees, Poisson(d) for Galton-Watson trees.
    """
    m = np.asarray(transition_matrix(params))
    probs = m if delta is None else m @ delta.entries
    sig = tree.sigma[tree.level(tree.max_depth)].astype(np.int64)
    rows = probs[sig]
    if tree.kind == REGULAR:
        return rng.multinomial(int(tree.degree), rows)
    return rng.poisson(tree.degree * rows)


def count_chain(
    params: ModelParams,
    k: int,
    trials: int,
    regime: str,
    rng: np.random.Generator,
    delta: NoiseMatrix | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Level-``k`` label counts of ``trials`` independent trees without building them.

    The label-count vector of a broadcast tree is a Markov chain across
    levels: given the counts on level k-1, the next level is a sum of
    multinomials (regular) or of independent Poissons (Galton-Watson).
    Returns ``(sigma_counts, tau_counts)``, each ``(trials, q)``.
    """
    _check_regime(regime)
    q, d = params.q, params.d
    m = np.asarray(transition_matrix(params))
    counts = np.zeros((trials, q), dtype=np.int64)
    counts[:, 0] = 1
    for _ in range(k):
        nxt = np.zeros_like(counts)
        for c in range(q):
            if regime == REGULAR:
                nxt += rng.multinomial(counts[:, c] * int(d), m[c])
            else:
                nxt += rng.poisson(d * counts[:, c, None] * m[c][None, :])
        counts = nxt
    tau = None
    if delta is not None:
        tau = np.zeros_like(counts)
        for c in range(q):
            tau += rng.multinomial(counts[:, c], delta.entries[c])
    return counts, tau


@dataclass
class MajorityRun:
    """Per-trial outcomes of a majority experiment (root label is always 0)."""

    regime: str
    ks: tuple[int, ...]
    z: np.ndarray  # (trials, len(ks), q) true-label counts
    z_noisy: np.ndarray | None  # (trials, len(ks), q) observed-label counts
    majority_correct: np.ndarray  # (trials, len(ks)) bool
    iterated_correct: np.ndarray | None  # (trials, len(ks)) bool

    @property
    def trials(self) -> int:
        return self.z.shape[0]

    def csv_rows(self) -> list[list]:
        rows = []
        for t in range(self.trials):
            for j, k in enumerate(self.ks):
                c = self.z[t, j]
                it = "" if self.iterated_correct is None else int(self.iterated_correct[t, j])
                rows.append([t, k, self.regime, *map(int, c), int(self.majority_correct[t, j]), it])
        return rows


def _resolve_ties_randomly(est: np.ndarray, q: int, rng: np.random.Generator) -> np.ndarray:
    out = est.copy()
    undefined = out < 0
    out[undefined] = rng.integers(0, q, size=int(undefined.sum()))
    return out


def _majority_from_counts(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    est = np.argmax(counts, axis=-1)
    est = np.where(counts.sum(axis=-1) == 0, -1, est)
    return _resolve_ties_randomly(est.ravel(), counts.shape[-1], rng).reshape(est.shape)


def run_majority_experiment(
    params: ModelParams,
    ks,
    trials: int,
    regime: str = REGULAR,
    delta: NoiseMatrix | None = None,
    seed: SeedLike = 0,
    *,
    iterated: bool = True,
    collapse_last_level: bool = False,
    budget: int = 5 * 10**7,
) -> MajorityRun:
    """Simulate ``trials`` trees with root label 0 and record counts and estimator outcomes.

    Trial ``t`` draws everything from ``SeedSequence(seed).spawn(trials)[t]``.
    One tree of depth ``max(ks)`` is used per trial; observed labels are drawn
    independently on every requested level. With ``collapse_last_level`` the
    deepest level is never built: its label counts per parent are drawn
    directly, which is exact in distribution and d times cheaper. An empty
    level (extinct Galton-Watson tree) yields a uniformly random guess.
    """
    _check_regime(regime)
    ks = tuple(sorted(int(k) for k in ks))
    kmax = ks[-1]
    q = params.q
    z = np.zeros((trials, len(ks), q), dtype=np.int64)
    zn = np.zeros_like(z) if delta is not None else None
    maj = np.zeros((trials, len(ks)), dtype=bool)
    it = np.zeros((trials, len(ks)), dtype=bool) if iterated else None
    depth = kmax - 1 if collapse_last_level else kmax
    if collapse_last_level and len(ks) > 1:
        raise ValueError("collapse_last_level supports a single k")
    for t, ss in enumerate(spawn(seed, trials)):
        rng = as_generator(ss)
        if regime == REGULAR:
            skel = sample_regular_tree(int(round(params.d)), depth, budget=budget)
        else:
            skel = sample_gw_tree(params.d, depth, rng, budget=budget)
        tree = broadcast_labels(skel, params, 0, rng)
        for j, k in enumerate(ks):
            if collapse_last_level:
                leaf = sample_leaf_counts(tree, params, rng)
                c = leaf.sum(axis=0)
                obs_leaf = None
                if delta is not None:
                    obs_leaf = np.zeros_like(leaf)
                    for s in range(q):
                        obs_leaf += rng.multinomial(leaf[:, s], delta.entries[s])
                    zn[t, j] = obs_leaf.sum(axis=0)
                z[t, j] = c
                used = zn[t, j] if delta is not None else c
                maj[t, j] = _majority_from_counts(used, rng) == 0
                if iterated:
                    est = forest_iterated_majority(
                        tree, k, leaf_counts=obs_leaf if delta is not None else leaf
                    )
                    it[t, j] = _resolve_ties_randomly(est, q, rng)[0] == 0
                continue
            z[t, j] = forest_level_counts(tree, k)[0]
            leaf = None
            if delta is not None:
                obs = apply_noise(tree, k, delta, rng)
                leaf = obs.tau
                zn[t, j] = forest_level_counts(tree, k, obs.tau)[0]
            used = zn[t, j] if delta is not None else z[t, j]
            maj[t, j] = _majority_from_counts(used, rng) == 0
            if iterated:
                est = forest_iterated_majority(tree, k, leaf)
                it[t, j] = _resolve_ties_randomly(est, q, rng)[0] == 0
    return MajorityRun(regime, ks, z, zn, maj, it)


def summarize_counts(run: MajorityRun, params: ModelParams, delta: NoiseMatrix | None = None) -> list[dict]:
    """Sample moments beside their analytic oracles, one record per level."""
    out = []
    n = run.trials
    for j, k in enumerate(run.ks):
        mz, my = expected_counts(params, k)
        exp_mean = np.array([mz] + [my] * (params.q - 1))
        sample = run.z[:, j, :].astype(float)
        mean = sample.mean(axis=0)
        var = sample.var(axis=0, ddof=1)
        se = np.sqrt(var / n)
        rec = {
            "k": k,
            "regime": run.regime,
            "mean": mean.tolist(),
            "expected_mean": exp_mean.tolist(),
            "z_score": ((mean - exp_mean) / np.where(se > 0, se, np.inf)).tolist(),
            "variance": var.tolist(),
            "variance_bound": variance_bound(params, k, run.regime).var_bound,
            "exact_variance": np.diag(count_moments(params, k, run.regime)[1]).tolist(),
            "majority_success": float(run.majority_correct[:, j].mean()),
        }
        if run.iterated_correct is not None:
            rec["iterated_success"] = float(run.iterated_correct[:, j].mean())
        if delta is not None and run.z_noisy is not None:
            nz, ny = noisy_expected_counts(params, delta, k)
            nexp = np.concatenate([[nz], ny])
            ns = run.z_noisy[:, j, :].astype(float)
            nmean = ns.mean(axis=0)
            nvar = ns.var(axis=0, ddof=1)
            nse = np.sqrt(nvar / n)
            rec.update(
                noisy_mean=nmean.tolist(),
                noisy_expected_mean=nexp.tolist(),
                noisy_z_score=((nmean - nexp) / np.where(nse > 0, nse, np.inf)).tolist(),
                noisy_variance=nvar.tolist(),
                noisy_variance_bound=noisy_variance_bound(params, delta, k, run.regime).tolist(),
            )
        out.append(rec)
    return out

