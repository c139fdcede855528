import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbmrecon.model import derive_params
from sbmrecon.sbm import from_edges, sample_sbm
from sbmrecon.spectral import (
    AnchorError,
    ConfusionMatrix,
    Partition,
    align,
    aligned,
    anchor_threshold,
    confusion_exact,
    estimate_noise_matrix,
    gamma_observed,
    select_high_degree,
    spectral_partition,
    uniformize,
)

P = derive_params(3, 50, 2)


@pytest.fixture(scope="module")
def g3000():
    return sample_sbm(3000, P, seed=11)


def test_b_zero_components_recovered():
    # balanced sizes, since gamma is measured against n/q
    g = sample_sbm(900, derive_params(3, 30, 0), balanced=True, seed=3)
    part = spectral_partition(g, 3, seed=1)
    assert gamma_observed(part, g.sigma) == 0.0


def test_strong_signal_gamma(g3000):
    part = uniformize(spectral_partition(g3000, 3, seed=2), seed=2)
    assert gamma_observed(part, g3000.sigma) <= 0.25


def test_two_runs_align(g3000):
    a = spectral_partition(g3000, 3, seed=5)
    b = spectral_partition(g3000, 3, seed=6)
    overlap = (aligned(a, b).assign == b.assign).mean()
    assert overlap >= 0.75


def test_spectral_deterministic(g3000):
    a = spectral_partition(g3000, 3, seed=9)
    b = spectral_partition(g3000, 3, seed=9)
    np.testing.assert_array_equal(a.assign, b.assign)


def test_near_er_control_runs():
    g = sample_sbm(1500, derive_params(3, 10.01, 10), seed=1)
    part = uniformize(spectral_partition(g, 3, seed=1), seed=1)
    assert part.block_sizes.max() - part.block_sizes.min() <= 1


def test_exclude_keeps_everyone_assigned(g3000):
    part = spectral_partition(g3000, 3, seed=1, exclude=np.arange(50))
    assert part.n == 3000 and np.all(part.assign >= 0)


def test_uniformize_examples():
    bal = Partition(np.arange(9) % 3, 3)
    assert uniformize(bal, 0) is bal
    skew = Partition(np.repeat([0, 1, 2], [10, 5, 3]), 3)
    out = uniformize(skew, 0)
    np.testing.assert_array_equal(out.block_sizes, [6, 6, 6])
    assert (out.assign != skew.assign).sum() == 4
    ten = uniformize(Partition(np.zeros(10, dtype=int), 3), 0)
    assert sorted(ten.block_sizes) == [3, 3, 4]


@given(st.integers(3, 6), st.lists(st.integers(0, 5), min_size=1, max_size=80), st.integers(0, 1000))
def test_uniformize_properties(q, raw, seed):
    part = Partition(np.array(raw) % q, q)
    out = uniformize(part, seed)
    sizes = out.block_sizes
    assert sizes.max() - sizes.min() <= 1
    assert uniformize(out, seed + 1) is out
    moved = out.assign != part.assign
    # only over-full blocks give, only under-full blocks receive
    before = part.block_sizes
    assert np.all(before[part.assign[moved]] > sizes[part.assign[moved]])
    assert np.all(before[out.assign[moved]] < sizes[out.assign[moved]])
    target = np.full(q, part.n // q)
    target[sorted(range(q), key=lambda i: (-before[i], i))[: part.n % q]] += 1
    assert moved.sum() == np.maximum(before - target, 0).sum()


def test_uniformize_many_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = int(rng.integers(3, 7))
        n = int(rng.integers(q, 200))
        part = Partition(rng.integers(0, q, n), q)
        out = uniformize(part, rng)
        assert np.ptp(out.block_sizes) <= 1
        assert uniformize(out) is out


@given(st.integers(0, 10**6), st.integers(3, 5))
def test_align_identity_and_permutations(seed, q):
    rng = np.random.default_rng(seed)
    part = Partition(rng.integers(0, q, 60), q)
    perm, _ = align(part, part)
    if len(set(part.assign.tolist())) == q:
        np.testing.assert_array_equal(perm, np.arange(q))
    pi = rng.permutation(q)
    moved = part.relabel(pi)
    if len(set(part.assign.tolist())) == q:
        got, _ = align(moved, part)
        np.testing.assert_array_equal(got, pi)
        np.testing.assert_array_equal(aligned(moved, part).assign, part.assign)


def test_align_cyclic_and_ties():
    ref = Partition(np.repeat([0, 1, 2], 5), 3)
    cyc = ref.relabel([1, 2, 0])
    perm, tied = align(cyc, ref)
    np.testing.assert_array_equal(perm, [1, 2, 0])
    assert not tied
    flat = Partition(np.zeros(6, dtype=int), 3)
    perm, tied = align(flat, Partition(np.arange(6) % 3, 3))
    assert tied
    np.testing.assert_array_equal(perm, [0, 1, 2])


def test_align_large_q_uses_assignment():
    q = 10
    rng = np.random.default_rng(1)
    ref = Partition(rng.integers(0, q, 500), q)
    pi = rng.permutation(q)
    got, _ = align(ref.relabel(pi), ref)
    np.testing.assert_array_equal(got, pi)


def test_confusion_examples():
    truth = np.arange(30) % 3
    np.testing.assert_allclose(confusion_exact(Partition(truth, 3), truth).entries, np.eye(3))
    swapped = Partition(np.array([1, 0, 2])[truth], 3)
    np.testing.assert_allclose(confusion_exact(swapped, truth).entries, np.eye(3)[[1, 0, 2]])


def test_confusion_random_partition_near_uniform():
    rng = np.random.default_rng(4)
    n = 30_000
    truth = rng.integers(0, 3, n)
    part = uniformize(Partition(rng.integers(0, 3, n), 3), rng)
    e = confusion_exact(part, truth).entries
    # each entry is (3/n) times a count with variance about n/9
    assert np.all(np.abs(e - 1 / 3) < 5 * (3 / n) * math.sqrt(n / 9 * (2 / 3)))


def test_confusion_columns_exact_rational():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = int(rng.integers(3, 6))
        n = int(rng.integers(q, 40))
        truth = rng.integers(0, q, n)
        part = uniformize(Partition(rng.integers(0, q, n), q), rng)
        sizes = part.block_sizes
        for j in range(q):
            col = sum(
                Fraction(q, n) * (int(((truth == i) & (part.assign == j)).sum()) - Fraction(int(sizes[j]) * q - n, q * q))
                for i in range(q)
            )
            assert col == 1
        np.testing.assert_allclose(confusion_exact(part, truth).entries.sum(axis=0), 1, atol=1e-12)


def test_confusion_json_roundtrip():
    cm = ConfusionMatrix(np.eye(3), "exact")
    back = ConfusionMatrix.from_json(cm.to_json())
    np.testing.assert_array_equal(back.entries, cm.entries)
    assert back.mode == "exact" and back.bound_violations() == []
    assert "diagonal" in ConfusionMatrix(np.full((3, 3), 1 / 3), "estimated").bound_violations()


def test_partition_text_roundtrip():
    part = Partition(np.array([2, 0, 1, 1]), 3)
    back = Partition.from_text(part.to_text(), 3)
    np.testing.assert_array_equal(back.assign, part.assign)
    with pytest.raises(ValueError):
        Partition(np.array([0, 3]), 3)


def test_anchor_threshold():
    assert anchor_threshold(10**6) == 1
    assert anchor_threshold(3000) == 1
    assert anchor_threshold(10**40) == round(0.25 * math.log(1e40) / math.log(math.log(1e40)))


def test_select_high_degree(g3000):
    u, anchors, k = select_high_degree(g3000, seed=1)
    assert u.size == math.isqrt(3000)
    assert np.all(g3000.degrees[anchors] >= k)
    assert set(anchors.tolist()) <= set(u.tolist())


def test_select_high_degree_error_path():
    # 0-regular graph: every degree is below the threshold k >= 1
    n = 400
    empty = from_edges(n, 3, np.arange(n) % 3, np.empty(0, dtype=int), np.empty(0, dtype=int))
    with pytest.raises(AnchorError):
        select_high_degree(empty, seed=0)
    with pytest.raises(ValueError):
        select_high_degree(from_edges(50, 3, np.zeros(50, dtype=int), [0], [1]))


def test_noise_matrix_truth_partition():
    g = sample_sbm(5000, P, balanced=True, seed=3)
    truth = Partition(g.sigma, 3)
    _, anchors, _ = select_high_degree(g, seed=3)
    est = estimate_noise_matrix(g, truth, anchors, P)
    assert np.abs(est.entries - np.eye(3)).max() < 0.05
    single = estimate_noise_matrix(g, truth, anchors, P, pooled=False)
    np.testing.assert_allclose(single.entries.sum(axis=1), 1)


def test_noise_matrix_identity_transition_is_raw_fractions():
    p = derive_params(3, 30, 0)
    g = sample_sbm(600, p, seed=2)
    rng = np.random.default_rng(0)
    noisy = np.where(rng.random(600) < 0.2, rng.integers(0, 3, 600), g.sigma)
    part = Partition(noisy, 3)
    anchors = np.array([int(np.flatnonzero(g.sigma == i)[0]) for i in range(3)])
    est = estimate_noise_matrix(g, part, anchors, p, anchor_labels=np.arange(3))
    raw = np.array([np.bincount(noisy[g.neighbors(a)], minlength=3) for a in anchors], dtype=float)
    np.testing.assert_allclose(est.entries, raw / raw.sum(axis=1, keepdims=True), atol=1e-12)


def test_noise_matrix_label_mismatch_detected():
    g = sample_sbm(5000, P, balanced=True, seed=4)
    truth = Partition(g.sigma, 3)
    _, anchors, _ = select_high_degree(g, seed=4)
    # every anchor is declared one community off
    wrong = (g.sigma[anchors] + 1) % 3
    est = estimate_noise_matrix(g, truth, anchors, P, anchor_labels=wrong)
    np.testing.assert_allclose(est.entries, np.eye(3)[[2, 0, 1]], atol=0.05)
    assert "diagonal" in est.bound_violations(tol=1e-6)


def test_noise_matrix_errors():
    g = sample_sbm(500, P, seed=1)
    part = Partition(g.sigma, 3)
    with pytest.raises(AnchorError):
        estimate_noise_matrix(g, part, [], P)
    with pytest.raises(AnchorError):
        estimate_noise_matrix(g, part, [0], P, anchor_labels=[0])
    # lambda = 0 cannot come out of ModelParams, so use a bare stand-in
    flat = SimpleNamespace(q=3, p=2 / 3, lam=0.0)
    with pytest.raises(np.linalg.LinAlgError):
        estimate_noise_matrix(g, part, np.arange(3), flat, anchor_labels=np.arange(3))


def test_low_degree_note():
    g = sample_sbm(300, derive_params(3, 6, 1), seed=1)
    part = Partition(g.sigma, 3)
    anchors = np.array([int(np.flatnonzero(g.sigma == i)[0]) for i in range(3)])
    est = estimate_noise_matrix(g, part, anchors, derive_params(3, 6, 1), anchor_labels=np.arange(3))
    assert est.notes


@pytest.mark.slow
def test_estimation_error_shrinks_with_n():
    wins = 0
    for s in range(10):
        errs = []
        for n in (2000, 20000):
            g = sample_sbm(n, P, balanced=True, seed=100 + s)
            _, anchors, _ = select_high_degree(g, seed=s)
            est = estimate_noise_matrix(g, Partition(g.sigma, 3), anchors, P)
            errs.append(np.abs(est.entries - np.eye(3)).max())
        wins += errs[1] < errs[0]
    assert wins >= 8
