"""Exit criteria, one test per criterion.

Each ``run_cN`` is a deterministic function of fixed seeds returning
``(csv_body, metrics)``. The verdict for criterion N is printed as a single
PASS/FAIL line and repeated in the pytest terminal summary. Criterion 11
reruns every other criterion and compares CSV bodies byte for byte.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.
"""

import csv
import io
import itertools
import sys
import time
from functools import cache

import numpy as np
import pytest

from acceptance_log import record
from oracles import binomial_sigma, enumeration_posterior, random_small_instance
from sbmrecon import bp
from sbmrecon.majority import (
    count_chain,
    iterated_majority_fixed_point,
    majority_success_bound,
    run_majority_experiment,
    summarize_counts,
)
from sbmrecon.model import ModelParams, NoiseMatrix, derive_params, noise_family
from sbmrecon.reconstruct import reconstruct
from sbmrecon.sbm import coupling_diagnostic, sample_sbm
from sbmrecon.spectral import (
    Partition,
    confusion_exact,
    estimate_noise_matrix,
    gamma_observed,
    select_high_degree,
    spectral_partition,
    uniformize,
)
from sbmrecon.tree import GALTON_WATSON, REGULAR, NoisyLabels

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

STRONG = derive_params(3, 50, 2)
MODERATE = derive_params(3, 15, 3)
DELTA = noise_family("uniform-diag:0.8", 3)

# seconds
LIMITS = {1: 60, 2: 120, 3: 60, 4: 600, 5: 120, 6: 300, 7: 120, 8: 300, 9: 180, 10: 1200}


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


# --- run functions ------------------------------------------------------------


def run_c1():
    rng = np.random.default_rng(20_001)
    rows, worst = [], 0.0
    for i in range(200):
        tree, m, params, delta, tau = random_small_instance(rng, max_internal=12)
        exact = bp.exact_posterior(tree, m, params)
        oracle = enumeration_posterior(tree, m, params, tree.sigma[tree.level(m)])
        noisy = bp.noisy_posterior(tree, NoisyLabels(m, tau), m, NoiseMatrix(delta), params)
        noisy_oracle = enumeration_posterior(tree, m, params, tau, delta)
        err_x = float(np.abs(exact - oracle).max())
        err_w = float(np.abs(noisy - noisy_oracle).max())
        worst = max(worst, err_x, err_w)
        rows.append([i, params.q, params.lam, m, int(tree.level_offsets[m]), err_x, err_w])
    body = _csv(["instance", "q", "lam", "m", "internal", "err_exact", "err_noisy"], rows)
    return body, {"worst": worst}


def run_c2():
    ks = [1, 2, 3, 4]
    rows, ok_mean, ok_var = [], {}, {}
    for regime in (REGULAR, GALTON_WATSON):
        run = run_majority_experiment(MODERATE, ks, 10_000, regime, DELTA, seed=2, iterated=False)
        mean_fine = var_fine = True
        for rec in summarize_counts(run, MODERATE, DELTA):
            for label in range(3):
                z = rec["z_score"][label]
                zn = rec["noisy_z_score"][label]
                ratio = rec["variance"][label] / rec["variance_bound"]
                nratio = rec["noisy_variance"][label] / rec["noisy_variance_bound"][label]
                mean_fine &= abs(z) <= 5 and abs(zn) <= 5
                var_fine &= ratio <= 1.25 and nratio <= 1.25
                rows.append([regime, rec["k"], label, rec["mean"][label], rec["expected_mean"][label], z,
                             rec["variance"][label], rec["variance_bound"], ratio,
                             rec["noisy_mean"][label], rec["noisy_expected_mean"][label], zn,
                             rec["noisy_variance"][label], rec["noisy_variance_bound"][label], nratio])
        ok_mean[regime], ok_var[regime] = mean_fine, var_fine
    cols = ["regime", "k", "label", "mean", "expected", "z", "var", "var_bound", "var_ratio",
            "noisy_mean", "noisy_expected", "noisy_z", "noisy_var", "noisy_var_bound", "noisy_var_ratio"]
    return _csv(cols, rows), {"means": ok_mean, "variances": ok_var, "rows": rows}


def _central_difference(children, params, h=1e-6):
    x = np.array(children, dtype=float)
    q = params.q
    jac = np.empty((q, x.shape[0], q))
    for t, l in itertools.product(range(x.shape[0]), range(q)):
        up, dn = x.copy(), x.copy()
        up[t, l] += h
        dn[t, l] -= h
        jac[:, t, l] = (bp.bp_step_literal(up, params) - bp.bp_step_literal(dn, params)) / (2 * h)
    return jac


def run_c3():
    rng = np.random.default_rng(30_003)
    rows, worst, violations = [], 0.0, 0
    for i in range(1000):
        q = int(rng.integers(3, 5))
        params = ModelParams.from_lambda_degree(q, float(rng.uniform(0.01, 0.9)), float(rng.uniform(1, 10)))
        n_children = int(rng.integers(1, 11))
        x = rng.dirichlet(np.full(q, rng.uniform(0.2, 3)), size=n_children)
        jac = bp.bp_jacobian(x, params)
        fd = _central_difference(x, params)
        rel = float((np.abs(jac - fd) / np.abs(jac)).max())
        peak = float(np.abs(jac).max())
        worst = max(worst, rel)
        violations += peak > bp.gradient_bound(params)
        rows.append([i, q, params.lam, n_children, rel, peak, bp.gradient_bound(params)])
    body = _csv(["config", "q", "lam", "children", "max_rel_err", "max_abs_partial", "bound"], rows)
    return body, {"worst": worst, "violations": violations}


def run_c4():
    trace = bp.estimate_limits(STRONG, DELTA, 6, 2000, GALTON_WATSON, seed=4)
    return _csv(bp.ContractionTrace.CSV_HEADER, trace.csv_rows()), {"trace": trace}


def run_c5():
    trials = 10_000
    rows, out = [], {}
    for j, regime in enumerate((REGULAR, GALTON_WATSON)):
        rng = np.random.Generator(np.random.PCG64([5, j]))
        counts, _ = count_chain(STRONG, 5, trials, regime, rng)
        # integer counts plus jitter in [0, 0.5) breaks ties uniformly
        est = np.argmax(counts + 0.5 * rng.random(counts.shape), axis=1)
        success = float((est == 0).mean())
        sigma = binomial_sigma(success, trials)
        bound = majority_success_bound(STRONG, regime)
        out[regime] = (success, sigma, bound)
        rows.append([regime, 5, trials, success, sigma, bound])
    return _csv(["regime", "k", "trials", "success", "sigma", "bound"], rows), out


def run_c6():
    params = ModelParams.from_lambda_degree(3, 0.96, 50)
    run = run_majority_experiment(
        params, [4], 2000, REGULAR, None, seed=6, iterated=True, collapse_last_level=True
    )
    success = float(run.iterated_correct[:, 0].mean())
    target = iterated_majority_fixed_point(params)
    rows = [[4, 2000, success, float(run.majority_correct[:, 0].mean()), target]]
    return _csv(["k", "trials", "iterated_success", "majority_success", "fixed_point"], rows), {
        "success": success,
        "target": target,
    }


def run_c7():
    g = sample_sbm(3000, STRONG, seed=7)
    centers = np.random.Generator(np.random.PCG64([7, 1])).choice(3000, size=200, replace=False)
    rep = coupling_diagnostic(g, centers, 2)
    d = rep.to_dict()
    return _csv(list(d), [list(d.values())]), {"report": rep}


def run_c8():
    rows, good, sizes_ok = [], 0, True
    for s in range(50):
        g = sample_sbm(3000, STRONG, seed=8000 + s)
        part = uniformize(spectral_partition(g, 3, seed=s), seed=s)
        gamma = gamma_observed(part, g.sigma)
        spread = int(np.ptp(part.block_sizes))
        good += gamma <= 0.25
        sizes_ok &= spread <= 1
        rows.append([s, gamma, spread])
    return _csv(["seed", "gamma", "size_spread"], rows), {"good": good, "sizes_ok": sizes_ok}


def run_c9():
    rows, good = [], 0
    for s in range(20):
        g = sample_sbm(5000, STRONG, balanced=True, seed=9000 + s)
        truth = Partition(g.sigma, 3)
        _, anchors, _ = select_high_degree(g, seed=s)
        est = estimate_noise_matrix(g, truth, anchors, STRONG).entries
        exact = confusion_exact(truth, g.sigma).entries
        err = float(np.abs(est - exact).max())
        good += err <= 0.05
        rows.append([s, int(anchors.size), err])
    return _csv(["seed", "anchors", "max_abs_err"], rows), {"good": good}


def run_c10():
    rows = []
    correct = correct_bb = scored = 0
    e_r, et_r = [], []
    for s in range(20):
        g = sample_sbm(3000, STRONG, seed=10_000 + s)
        res = reconstruct(g, STRONG, R=2, subsample=200, seed=s)
        m = res.meta
        n_scored = int(res.scored.size)
        correct += round(m["accuracy"] * n_scored)
        correct_bb += round(m["blackbox_accuracy"] * n_scored)
        scored += n_scored
        tr = bp.estimate_limits(STRONG, np.asarray(m["delta_hat"]), 2, 2000, GALTON_WATSON, seed=s)
        e_r.append(float(tr.e_m[1]))
        et_r.append(float(tr.etilde_m[1]))
        rows.append([s, n_scored, m["accuracy"], m["blackbox_accuracy"], m["gamma_observed"],
                     m["fallback_count"], tr.e_m[1], tr.etilde_m[1]])
    acc, acc_bb = correct / scored, correct_bb / scored
    cols = ["seed", "scored", "accuracy", "blackbox_accuracy", "gamma", "fallbacks", "E_R", "Etilde_R"]
    return _csv(cols, rows), {
        "accuracy": acc,
        "blackbox": acc_bb,
        "sigma": binomial_sigma(acc_bb, scored),
        "E_R": float(np.mean(e_r)),
        "Etilde_R": float(np.mean(et_r)),
        "scored": scored,
    }


RUNS = {1: run_c1, 2: run_c2, 3: run_c3, 4: run_c4, 5: run_c5, 6: run_c6, 7: run_c7, 8: run_c8, 9: run_c9, 10: run_c10}


@cache
def outcome(n: int):
    t0 = time.perf_counter()
    body, metrics = RUNS[n]()
    return body, metrics, time.perf_counter() - t0


def _verdict(n: int, ok: bool, detail: str, elapsed: float) -> None:
    within = elapsed < LIMITS[n]
    record(n, ok and within, f"{detail}; {elapsed:.1f}s (limit {LIMITS[n]}s)")
    assert ok, detail
    assert within, f"runtime {elapsed:.1f}s over {LIMITS[n]}s"


# --- criteria -------------------------------------------------------------------


def test_criterion_01_enumeration_oracle():
    _, m, el = outcome(1)
    _verdict(1, m["worst"] < 1e-9, f"max |BP - enumeration| = {m['worst']:.2e} over 200 trees", el)


def test_criterion_02_moment_oracles():
    _, m, el = outcome(2)
    ok = all(m["means"].values()) and all(m["variances"].values())
    worst = {}
    for row in m["rows"]:
        worst[row[0]] = max(worst.get(row[0], 0.0), row[8], row[14])
    detail = (
        "means within 5 sigma: "
        + ", ".join(f"{r}={m['means'][r]}" for r in m["means"])
        + "; max var/bound: "
        + ", ".join(f"{r}={worst[r]:.2f}" for r in worst)
        + " (limit 1.25)"
    )
    _verdict(2, ok, detail, el)


def test_criterion_03_gradient_check():
    _, m, el = outcome(3)
    ok = m["worst"] < 1e-5 and m["violations"] == 0
    _verdict(3, ok, f"max relative error {m['worst']:.2e}, bound violations {m['violations']}", el)


def test_criterion_04_contraction():
    _, m, el = outcome(4)
    tr = m["trace"]
    l1 = tr.mean_l1
    decreasing = bool(np.all(np.diff(l1[1:]) < 0))
    gap = abs(tr.e_m[5] - tr.etilde_m[5])
    detail = (
        "mean L1 " + " ".join(f"{v:.2e}" for v in l1)
        + f"; |E6 - E~6| = {gap:.2e} (se {tr.se_e[5]:.1e}, {tr.se_etilde[5]:.1e})"
    )
    _verdict(4, decreasing and gap < 0.02, detail, el)


def test_criterion_05_majority_bound():
    _, m, el = outcome(5)
    ok = all(s >= b - 3 * sig for s, sig, b in m.values())
    detail = "; ".join(f"{r}: success {s:.4f} vs bound {b:.4f} - 3*{sig:.1e}" for r, (s, sig, b) in m.items())
    _verdict(5, ok, detail, el)


def test_criterion_06_iterated_majority():
    _, m, el = outcome(6)
    ok = m["success"] >= m["target"] - 0.02
    _verdict(6, ok, f"iterated success {m['success']:.4f} vs fixed point {m['target']:.4f} - 0.02", el)


def test_criterion_07_coupling():
    _, m, el = outcome(7)
    rep = m["report"]
    ok = rep.tree_fraction >= 0.8 and rep.tv_children < 0.05
    detail = f"tree fraction {rep.tree_fraction:.3f} (need 0.8), TV {rep.tv_children:.3f} (need < 0.05)"
    _verdict(7, ok, detail, el)


def test_criterion_08_black_box():
    _, m, el = outcome(8)
    ok = m["good"] >= 45 and m["sizes_ok"]
    _verdict(8, ok, f"gamma <= 0.25 in {m['good']}/50 seeds, sizes within 1: {m['sizes_ok']}", el)


def test_criterion_09_noise_matrix():
    _, m, el = outcome(9)
    _verdict(9, m["good"] >= 18, f"within 0.05 in {m['good']}/20 seeds", el)


def test_criterion_10_sandwich():
    _, m, el = outcome(10)
    lo, hi = m["Etilde_R"] - 0.05, m["E_R"] + 0.05
    beats = m["accuracy"] >= m["blackbox"] - 3 * m["sigma"]
    inside = lo <= m["accuracy"] <= hi
    detail = (
        f"accuracy {m['accuracy']:.4f} vs spectral {m['blackbox']:.4f} (3 sigma {3 * m['sigma']:.4f}); "
        f"window [{lo:.4f}, {hi:.4f}] over {m['scored']} vertices"
    )
    _verdict(10, beats and inside, detail, el)


def test_criterion_11_determinism():
    t0 = time.perf_counter()
    differing = [n for n in RUNS if RUNS[n]()[0] != outcome(n)[0]]
    ok = not differing
    detail = "byte-identical CSV bodies for criteria 1-10" if ok else f"differences in {differing}"
    record(11, ok, f"{detail}; {time.perf_counter() - t0:.1f}s")
    assert ok, detail


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
