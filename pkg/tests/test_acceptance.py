"""Acceptance gates: Monte-Carlo reproduction bands plus property suites.

Two profiles, selected by SPARSEMN_ACCEPT_PROFILE:

  smoke (default)  p=50, 50 replications, reduced bootstrap (16 reps x 30
                   resamples) -- the fast end-to-end gate (~10 min on an
                   8-core box, longer on fewer cores).
  full             p=200, 200 replications, 200 bootstrap resamples -- the
                   reference scale at which the published values were
                   reported. Expect ~2 h on 8 cores for the debiased
                   criteria; the full bootstrap criterion is far heavier
                   (it re-runs CV inside every resample).

Band semantics: the reproduction bands are stated at the reference scale.
Bands that are intrinsically tied to p=200 (absolute bootstrap CI length on
the noise set, and the n=100 CI-length cell) are replaced in the smoke
profile by their documented scale-free surrogates; everything else is
asserted identically in both profiles. Every criterion prints one
PASS/FAIL line.

SPARSEMN_THREADS controls the process pool for the Monte-Carlo fixtures.
"""

import os

import numpy as np
import pytest

from sparsemn.model import (CoefficientSet, Dataset, SigmaHat,
                            avg_neg_log_likelihood, empirical_sigma, score)
from sparsemn.simulate import model_config, run_experiment
from sparsemn.solver import fit_single
from sparsemn.debias import (confidence_interval, debiased_estimator,
                             nodewise_row, p_value)

from conftest import make_dataset
from oracles import (binary_lasso_cd, fd_gradient, fd_hessian, newton_mle,
                     prox_gradient_lasso)

PROFILE = os.environ.get("SPARSEMN_ACCEPT_PROFILE", "smoke").strip().lower()
THREADS = int(os.environ.get("SPARSEMN_THREADS", "2") or 2)

if PROFILE == "full":
    CFG = dict(p=200, reps=200, boot_reps=200, n_boot=200, m3_reps=50)
elif PROFILE == "smoke":
    CFG = dict(p=50, reps=50, boot_reps=16, n_boot=30, m3_reps=50)
else:
    raise RuntimeError(f"unknown SPARSEMN_ACCEPT_PROFILE={PROFILE!r}")

FULL = PROFILE == "full"
BASE_SEED = 20_240_801

# Reference-scale targets (Model 1): mean SSE and mean CI length on the
# signal set at n = 100 / 200 / 400.
SSE_TARGET = {100: 3.597, 200: 2.551, 400: 1.59}
LEN_S_TARGET = {100: 1.976, 200: 1.676, 400: 1.407}


def _line(num, name, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num:>2} {name:<28} {status}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="session")
def m1_runs():
    runs = {}
    for n in (100, 200, 400):
        cfg = model_config(1, n, CFG["p"])
        runs[n] = run_experiment(cfg, "debiased", CFG["reps"], alpha=0.05,
                                 base_seed=BASE_SEED + n, threads=THREADS)
    return runs


@pytest.fixture(scope="session")
def boot_run():
    cfg = model_config(1, 400, CFG["p"])
    return run_experiment(cfg, "bootstrap", CFG["boot_reps"], alpha=0.05,
                          base_seed=BASE_SEED + 400, threads=THREADS,
                          n_boot=CFG["n_boot"])


@pytest.fixture(scope="session")
def m3_run():
    cfg = model_config(3, 400, CFG["p"])
    return run_experiment(cfg, "debiased", CFG["m3_reps"], alpha=0.05,
                          base_seed=BASE_SEED + 3, threads=THREADS)


# ------------------------------------------------- Monte-Carlo criteria 1-6

def test_criterion_1_estimation_error(m1_runs):
    means = {n: m1_runs[n].metrics["sse"][0] for n in (100, 200, 400)}
    in_band = all(abs(means[n] - SSE_TARGET[n]) <= 0.40 * SSE_TARGET[n]
                  for n in means)
    decreasing = means[100] > means[200] > means[400]
    detail = ("SSE " + " / ".join(f"n={n}: {means[n]:.3f} "
                                  f"(target {SSE_TARGET[n]})"
                                  for n in (100, 200, 400)))
    _line(1, "estimation SSE", in_band and decreasing, detail)


def test_criterion_2_coverage_and_length(m1_runs):
    ok = True
    parts = []
    for n in (100, 200, 400):
        mets = m1_runs[n].metrics
        cov_s = mets["coverage_S"][0]
        cov_sc = mets["coverage_Sc"][0]
        len_s = mets["len_S"][0]
        ok &= 0.85 <= cov_s <= 0.97
        ok &= 0.94 <= cov_sc <= 0.995
        # the n=100 length cell is the one band that is materially
        # p-dependent; the smoke surrogate widens it to +/-40%
        tol = 0.25 if (FULL or n != 100) else 0.40
        ok &= abs(len_s - LEN_S_TARGET[n]) <= tol * LEN_S_TARGET[n]
        parts.append(f"n={n}: covS={cov_s:.3f} covSc={cov_sc:.3f} "
                     f"lenS={len_s:.3f}")
    _line(2, "coverage and CI length", ok, " | ".join(parts))


def test_criterion_3_individual_testing(m1_runs):
    t1 = {n: m1_runs[n].metrics["type1"][0] for n in (100, 200, 400)}
    power400 = m1_runs[400].metrics["power_individual"][0]
    ok = all(v <= 0.05 for v in t1.values()) and power400 >= 0.65
    detail = (f"type-I {t1[100]:.3f}/{t1[200]:.3f}/{t1[400]:.3f}; "
              f"power(n=400)={power400:.3f}")
    _line(3, "individual testing", ok, detail)


def test_criterion_4_fwer(m1_runs):
    fwer = {n: m1_runs[n].metrics["fwer_hit"][0] for n in (100, 200, 400)}
    ok = all(v <= 0.05 for v in fwer.values())
    detail = f"FWER {fwer[100]:.3f}/{fwer[200]:.3f}/{fwer[400]:.3f}"
    _line(4, "multiple testing FWER", ok, detail)


def test_criterion_5_bootstrap_superefficiency(boot_run, m1_runs):
    cov_sc = boot_run.metrics["coverage_Sc"][0]
    len_sc = boot_run.metrics["len_Sc"][0]
    t1 = boot_run.metrics["type1"][0]
    n_reps = boot_run.n_reps
    ok = cov_sc >= 1.0 - 1.0 / n_reps - 1e-12
    ok &= t1 <= 0.005
    if FULL:
        ok &= len_sc <= 0.5
        detail_len = f"lenSc={len_sc:.3f} (<=0.5)"
    else:
        # scale-free surrogate: bootstrap noise CIs must be much shorter
        # than the debiased ones at the same n (reference ratio ~0.25)
        ratio = len_sc / m1_runs[400].metrics["len_Sc"][0]
        ok &= ratio <= 0.6
        detail_len = f"lenSc={len_sc:.3f} ratio-vs-debiased={ratio:.2f} (<=0.6)"
    _line(5, "bootstrap super-efficiency", ok,
          f"covSc={cov_sc:.4f} type-I={t1:.4f} {detail_len}")


def test_criterion_6_lda_design(m3_run):
    power = m3_run.metrics["power_individual"][0]
    t1 = m3_run.metrics["type1"][0]
    ok = power >= 0.9 and t1 <= 0.05
    _line(6, "LDA design power/level", ok,
          f"power={power:.3f} type-I={t1:.3f}")


# ------------------------------------------------- property criteria 7-10

def test_criterion_7_solver_oracles():
    rng = np.random.default_rng(7)
    ok = True
    details = []
    for i in range(30):
        n = int(rng.integers(20, 61))
        p = int(rng.integers(2, 9))
        K = int(rng.integers(2, 5))
        lam = float(rng.uniform(0.01, 0.5))
        data, _ = make_dataset(rng, n, p, K)
        fit = fit_single(data, lam)
        _, _, obj_or = prox_gradient_lasso(data.features, data.labels, K, lam)
        gap = fit.objective - obj_or
        if gap > 1e-6 or fit.kkt_residual > 1e-5:
            ok = False
            details.append(f"inst{i}: gap={gap:.2e} kkt={fit.kkt_residual:.2e}")
    for i in range(10):
        data, _ = make_dataset(rng, int(rng.integers(25, 60)),
                               int(rng.integers(2, 6)), 2)
        lam = float(rng.uniform(0.02, 0.3))
        fit = fit_single(data, lam)
        oracle = binary_lasso_cd(data.features, data.labels, lam)
        err = np.max(np.abs(fit.beta.contrasts[0] - oracle))
        if err > 1e-4:
            ok = False
            details.append(f"binary{i}: linf={err:.2e}")
    _line(7, "solver oracle suite", ok,
          "30 multinomial + 10 binary instances"
          + ("" if ok else "; " + "; ".join(details[:3])))


def test_criterion_8_calculus_suite():
    rng = np.random.default_rng(8)
    ok = True
    worst_g, worst_h = 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(5, 31))
        p = int(rng.integers(1, 7))
        K = int(rng.integers(2, 5))
        data, _ = make_dataset(rng, n, p, K)
        vec = rng.standard_normal((K - 1) * p) * 0.6
        beta = CoefficientSet.from_stacked(vec, K)

        def f(v, d=data, kk=K):
            return avg_neg_log_likelihood(d, CoefficientSet.from_stacked(v, kk))

        g = score(data, beta)
        g_fd = fd_gradient(f, vec)
        err = np.max(np.abs(g - g_fd) - (1e-6 * np.abs(g_fd) + 1e-9))
        worst_g = max(worst_g, err)
        ok &= np.allclose(g, g_fd, rtol=1e-6, atol=1e-9)
    for _ in range(5):
        data, _ = make_dataset(rng, 10, 3, 3)
        vec = rng.standard_normal(6) * 0.5
        beta = CoefficientSet.from_stacked(vec, 3)

        def fn(v, d=data):
            return d.n * avg_neg_log_likelihood(
                d, CoefficientSet.from_stacked(v, 3))

        H_fd = fd_hessian(fn, vec)
        sig = empirical_sigma(data, beta)
        err = np.max(np.abs(sig.matrix * data.n - H_fd)) / data.n
        worst_h = max(worst_h, err)
        ok &= err <= 1e-5
        ok &= np.max(np.abs(sig.matrix - sig.matrix.T)) <= 1e-10
        ok &= np.linalg.eigvalsh(sig.matrix)[0] >= -1e-8
    _line(8, "calculus suite", ok,
          f"max grad rel err {worst_g:.2e}, max hessian err {worst_h:.2e}")


def test_criterion_9_inference_algebra():
    rng = np.random.default_rng(9)
    ok = True
    notes = []
    # debias-at-MLE identity
    data, _ = make_dataset(rng, 300, 3, 3)
    B_or, _ = newton_mle(data.features, data.labels, 3)
    beta = CoefficientSet(B_or, 3)
    sigma = empirical_sigma(data, beta)
    rows = [nodewise_row(sigma, j, 0.01) for j in range(6)]
    b_hat, _ = debiased_estimator(data, beta, rows)
    mle_gap = np.max(np.abs(b_hat - beta.stacked()))
    # correction is Theta @ score: bounded by the row l1 norms times the
    # residual score of the numerical MLE, i.e. zero up to oracle precision
    row_norm = max(np.abs(r.theta_row).sum() for r in rows)
    scale = np.max(np.abs(score(data, beta)))
    ok &= mle_gap <= row_norm * scale + 1e-12
    notes.append(f"debias-at-MLE gap {mle_gap:.1e}")
    # CI / p duality on 100 random triples
    dual_ok = True
    for _ in range(100):
        nn = int(rng.integers(20, 300))
        se = float(rng.uniform(0.05, 2.0))
        b = float(rng.standard_normal() * 2)
        alpha = float(rng.uniform(0.01, 0.5))
        tau_sq = 1.0 / (se * np.sqrt(nn))
        theta = np.zeros(3)
        theta[1] = 1.0 / tau_sq
        from sparsemn.debias import ThetaRow
        row = ThetaRow(j=1, gamma=np.zeros(2), tau_sq=tau_sq,
                       theta_row=theta, lambda_j=0.1)
        sig = SigmaHat(np.eye(3), n=nn)
        lo, hi = confidence_interval(b, row, sig, nn, alpha)
        pv = p_value(b, row, sig, nn)
        if abs(pv - alpha) > 1e-12:
            dual_ok &= (pv < alpha) == (lo > 0 or hi < 0)
    ok &= dual_ok
    notes.append(f"duality {'ok' if dual_ok else 'BROKEN'}")
    # Theta Sigma ~ I at tiny penalty, plus nodewise KKT certificates
    Q, _ = np.linalg.qr(rng.standard_normal((15, 15)))
    S = Q @ np.diag(np.geomspace(1, 0.2, 15)) @ Q.T
    sig = SigmaHat(0.5 * (S + S.T), n=50)
    rows = [nodewise_row(sig, j, 1e-8, tol=1e-13, max_iter=100000)
            for j in range(15)]
    T = np.vstack([r.theta_row for r in rows])
    inv_err = np.max(np.abs(T @ sig.matrix - np.eye(15)))
    ok &= inv_err <= 1e-3
    notes.append(f"|ThetaSigma-I|max {inv_err:.1e}")
    lam = 0.04
    kkt_ok = True
    for j in (0, 7, 14):
        row = nodewise_row(sig, j, lam, tol=1e-12, max_iter=100000)
        keep = np.arange(15) != j
        grad = sig.matrix[np.ix_(keep, keep)] @ row.gamma - sig.matrix[keep, j]
        for r in range(14):
            if row.gamma[r] == 0:
                kkt_ok &= abs(grad[r]) <= lam + 1e-6
            else:
                kkt_ok &= abs(grad[r] + lam * np.sign(row.gamma[r])) <= 1e-6
    ok &= kkt_ok
    notes.append(f"nodewise KKT {'ok' if kkt_ok else 'BROKEN'}")
    _line(9, "inference algebra", ok, "; ".join(notes))


def test_criterion_10_normality_surrogate(m1_runs):
    stats = m1_runs[400].stat_null_samples()
    sd = float(np.std(stats, ddof=1))
    mean = float(np.mean(stats))
    ok = 0.8 <= sd <= 1.25 and abs(mean) <= 0.2
    _line(10, "studentized normality", ok,
          f"null stat over {stats.size} reps: mean={mean:+.3f} sd={sd:.3f}")
