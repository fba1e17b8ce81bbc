import numpy as np
import pytest

from sparsemn.debias import (InferenceError, NodewiseSigmaFolds, ThetaRow,
                             bonferroni, confidence_interval,
                             debiased_estimator, estimate_theta, infer,
                             nodewise_lambda_grid, nodewise_row, p_value,
                             select_lambda_j)
from sparsemn.model import (CoefficientSet, Dataset, SigmaHat,
                            empirical_sigma, score)
from sparsemn.solver import LambdaPath, fit_single

from conftest import make_dataset
from oracles import ista_qp, newton_mle, qp_objective


def random_psd(rng, m, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    eigs = np.geomspace(1.0, 1.0 / cond, m)
    S = Q @ np.diag(eigs) @ Q.T
    return SigmaHat(0.5 * (S + S.T), n=100)


def theta_matrix(rows):
    return np.vstack([r.theta_row for r in rows])


# ----------------------------------------------------------------- nodewise

def test_nodewise_identity_gives_unit_row():
    sigma = SigmaHat(np.eye(5), n=50)
    row = nodewise_row(sigma, 2, 0.5)
    np.testing.assert_array_equal(row.gamma, np.zeros(4))
    assert row.tau_sq == 1.0
    expected = np.zeros(5)
    expected[2] = 1.0
    np.testing.assert_array_equal(row.theta_row, expected)


def test_nodewise_matches_dense_inverse():
    S = np.array([[2.0, 0.5, 0.2], [0.5, 1.5, 0.3], [0.2, 0.3, 1.0]])
    sigma = SigmaHat(S, n=100)
    inv = np.linalg.inv(S)
    for j in range(3):
        row = nodewise_row(sigma, j, 1e-8, tol=1e-13, max_iter=20000)
        np.testing.assert_allclose(row.theta_row, inv[j], atol=1e-4)


def test_nodewise_matches_qp_oracle(rng):
    sigma = random_psd(rng, 10)
    S = sigma.matrix
    lam = 0.05
    for j in (0, 4, 9):
        row = nodewise_row(sigma, j, lam, tol=1e-13, max_iter=50000)
        keep = np.arange(10) != j
        A = S[np.ix_(keep, keep)]
        b = S[keep, j]
        g_or = ista_qp(A, b, lam)
        obj_cd = qp_objective(A, b, row.gamma, lam)
        obj_or = qp_objective(A, b, g_or, lam)
        assert obj_cd <= obj_or + 1e-6


def test_nodewise_kkt_certificate(rng):
    sigma = random_psd(rng, 12, cond=30)
    S = sigma.matrix
    lam = 0.03
    for j in (0, 5, 11):
        row = nodewise_row(sigma, j, lam, tol=1e-12, max_iter=50000)
        keep = np.arange(12) != j
        grad = S[np.ix_(keep, keep)] @ row.gamma - S[keep, j]
        for r in range(11):
            if row.gamma[r] == 0:
                assert abs(grad[r]) <= lam + 1e-6
            else:
                assert abs(grad[r] + lam * np.sign(row.gamma[r])) <= 1e-6


def test_theta_approximates_inverse_at_tiny_penalty(rng):
    sigma = random_psd(rng, 15, cond=5)
    rows = [nodewise_row(sigma, j, 1e-8, tol=1e-13, max_iter=100000)
            for j in range(15)]
    T = theta_matrix(rows)
    err = np.max(np.abs(T @ sigma.matrix - np.eye(15)))
    assert err <= 1e-3


def test_nodewise_tau_floor_raises():
    # perfectly collinear coordinates make tau_sq collapse to zero
    S = np.array([[1.0, 1.0], [1.0, 1.0]]) + 1e-14 * np.eye(2)
    sigma = SigmaHat(S, n=10)
    with pytest.raises(InferenceError):
        nodewise_row(sigma, 0, 1e-13, tol=1e-15, max_iter=100000)


def test_nodewise_literal_divisor_agrees_on_equal_diagonals(rng):
    # with a constant diagonal the published update equals the QP-consistent one
    m = 8
    A = rng.standard_normal((m, m)) * 0.2
    S = A @ A.T
    d = np.sqrt(np.diag(S))
    S = S / np.outer(d, d)  # unit diagonal
    sigma = SigmaHat(0.5 * (S + S.T) + 1e-8 * np.eye(m), n=100)
    for j in (0, 3):
        a = nodewise_row(sigma, j, 0.05, tol=1e-12, max_iter=50000)
        b = nodewise_row(sigma, j, 0.05, tol=1e-12, max_iter=50000,
                         literal_divisor=True)
        np.testing.assert_allclose(a.theta_row, b.theta_row, atol=1e-8)


def test_theta_row_invariants():
    with pytest.raises(InferenceError):
        ThetaRow(j=0, gamma=np.zeros(1), tau_sq=0.0,
                 theta_row=np.array([np.inf, 0.0]), lambda_j=0.1)
    row = nodewise_row(SigmaHat(np.eye(3), n=5), 1, 0.2)
    assert row.theta_row[1] == 1.0 / row.tau_sq


# ------------------------------------------------------------- lambda_j CV

def test_select_lambda_identity_ties_to_largest():
    eye = SigmaHat(np.eye(6), n=40)
    folds = NodewiseSigmaFolds(full=eye, train=(eye, eye), val=(eye, eye))
    grid = LambdaPath(np.geomspace(0.9, 0.009, 10))
    lam = select_lambda_j(folds, 3, grid)
    assert lam == grid.values[0]


def test_select_lambda_deterministic(rng):
    data, _ = make_dataset(rng, 60, 4, 3)
    beta = fit_single(data, 0.1).beta
    f1 = NodewiseSigmaFolds.build(data, beta, 3, seed=9)
    f2 = NodewiseSigmaFolds.build(data, beta, 3, seed=9)
    for j in (0, 5):
        assert select_lambda_j(f1, j) == select_lambda_j(f2, j)


def test_select_lambda_matches_exhaustive_oracle(rng):
    s_tr1 = random_psd(rng, 6)
    s_tr2 = random_psd(rng, 6)
    s_va1 = random_psd(rng, 6)
    s_va2 = random_psd(rng, 6)
    folds = NodewiseSigmaFolds(full=s_tr1, train=(s_tr1, s_tr2),
                               val=(s_va1, s_va2))
    grid = LambdaPath(np.geomspace(0.5, 0.01, 8))
    j = 2
    losses = np.zeros(8)
    keep = np.arange(6) != j
    for S_tr, S_va in ((s_tr1.matrix, s_va1.matrix),
                       (s_tr2.matrix, s_va2.matrix)):
        A_tr = S_tr[np.ix_(keep, keep)]
        b_tr = S_tr[keep, j]
        A_va = S_va[np.ix_(keep, keep)]
        b_va = S_va[keep, j]
        for ell, lam in enumerate(grid.values):
            g = ista_qp(A_tr, b_tr, lam)
            losses[ell] += -b_va @ g + 0.5 * g @ A_va @ g
    expected = grid.values[int(np.argmin(losses / 2))]
    got = select_lambda_j(folds, j, grid, tol=1e-12, max_iter=50000)
    assert got == expected


# ------------------------------------------------------------- debiasing

def test_debias_at_mle_identity(rng):
    data, _ = make_dataset(rng, 300, 3, 3)
    B_or, _ = newton_mle(data.features, data.labels, 3)
    beta = CoefficientSet(B_or, 3)
    assert np.max(np.abs(score(data, beta))) < 1e-6
    sigma = empirical_sigma(data, beta)
    rows = [nodewise_row(sigma, j, 0.01) for j in range(6)]
    b_hat, avail = debiased_estimator(data, beta, rows)
    assert avail.all()
    np.testing.assert_allclose(b_hat, beta.stacked(), atol=1e-5)


def test_debiased_estimator_matches_dense_algebra(rng):
    data, _ = make_dataset(rng, 50, 3, 3)
    beta = fit_single(data, 0.08).beta
    sigma = empirical_sigma(data, beta)
    rows = [nodewise_row(sigma, j, 0.02, tol=1e-12, max_iter=20000)
            for j in range(6)]
    b_hat, _ = debiased_estimator(data, beta, rows)
    T = theta_matrix(rows)
    expected = beta.stacked() - T @ score(data, beta)
    np.testing.assert_allclose(b_hat, expected, atol=1e-10)


def test_debiased_estimator_flags_missing_rows(rng):
    data, _ = make_dataset(rng, 40, 2, 2)
    beta = fit_single(data, 0.1).beta
    sigma = empirical_sigma(data, beta)
    rows = [nodewise_row(sigma, 0, 0.05), None]
    b_hat, avail = debiased_estimator(data, beta, rows)
    assert avail[0] and not avail[1]
    assert np.isnan(b_hat[1])


# ---------------------------------------------------------- CI / p-values

def _toy_row(se_target, n, j=0, m=2):
    # theta row / sigma pair engineered to give the requested standard error
    sigma = SigmaHat(np.eye(m), n=n)
    quad = se_target ** 2 * n
    tau_sq = 1.0 / np.sqrt(quad)
    theta = np.zeros(m)
    theta[j] = 1.0 / tau_sq
    return ThetaRow(j=j, gamma=np.zeros(m - 1), tau_sq=tau_sq,
                    theta_row=theta, lambda_j=0.1), sigma


def test_confidence_interval_quantile_value():
    row, sigma = _toy_row(0.2, n=100)
    lo, hi = confidence_interval(1.0, row, sigma, 100, 0.05)
    assert abs(lo - (1 - 1.959964 * 0.2)) < 1e-5
    assert abs(hi - (1 + 1.959964 * 0.2)) < 1e-5


def test_confidence_interval_degenerate_alpha_limit():
    row, sigma = _toy_row(0.2, n=100)
    lo, hi = confidence_interval(0.7, row, sigma, 100, 1 - 1e-12)
    assert abs(lo - 0.7) < 1e-9 and abs(hi - 0.7) < 1e-9


def test_confidence_interval_translation_equivariance(rng):
    row, sigma = _toy_row(0.37, n=50)
    lo0, hi0 = confidence_interval(0.0, row, sigma, 50, 0.1)
    for c in rng.standard_normal(5):
        lo, hi = confidence_interval(c, row, sigma, 50, 0.1)
        assert abs((lo - lo0) - c) < 1e-12
        assert abs((hi - hi0) - c) < 1e-12


def test_p_value_cases():
    row, sigma = _toy_row(0.2, n=100)
    assert p_value(0.0, row, sigma, 100) == 1.0
    # sqrt(n)|b|/sqrt(quad) = 1.959964 -> p = 0.05
    b = 1.959964 * 0.2
    assert abs(p_value(b, row, sigma, 100) - 0.05) < 1e-6


def test_p_value_monotone_in_estimate():
    row, sigma = _toy_row(0.3, n=64)
    ps = [p_value(b, row, sigma, 64) for b in (0.0, 0.1, 0.5, 1.0, 3.0)]
    assert all(a > b for a, b in zip(ps, ps[1:]))


def test_p_value_degenerate_variance_warns():
    sigma = SigmaHat(np.zeros((2, 2)), n=10)
    row = ThetaRow(j=0, gamma=np.zeros(1), tau_sq=1.0,
                   theta_row=np.array([1.0, 0.0]), lambda_j=0.1)
    with pytest.warns(RuntimeWarning):
        assert p_value(0.5, row, sigma, 10) == 0.0


def test_ci_pvalue_duality(rng):
    for _ in range(100):
        n = int(rng.integers(20, 200))
        se = float(rng.uniform(0.05, 2.0))
        b = float(rng.standard_normal() * 2)
        alpha = float(rng.uniform(0.01, 0.5))
        row, sigma = _toy_row(se, n=n)
        lo, hi = confidence_interval(b, row, sigma, n, alpha)
        p = p_value(b, row, sigma, n)
        excluded = (lo > 0) or (hi < 0)
        if abs(p - alpha) > 1e-12:
            assert (p < alpha) == excluded
        assert abs((lo + hi) / 2 - b) < 1e-12


def test_bonferroni_values():
    np.testing.assert_allclose(bonferroni(np.array([0.01]), 10), [0.1])
    np.testing.assert_allclose(bonferroni(np.array([0.5]), 10), [1.0])
    np.testing.assert_allclose(bonferroni(np.array([0.3, 0.02]), 2),
                               [0.6, 0.04])
    with pytest.raises(ValueError):
        bonferroni(np.array([1.2]), 5)
    with pytest.raises(ValueError):
        bonferroni(np.array([0.1, 0.2]), 1)


# ----------------------------------------------------------------- pipeline

def test_infer_deterministic(rng):
    data, _ = make_dataset(rng, 80, 4, 3)
    r1 = infer(data, cv_seed=5, n_folds=4, n_lambda=25)
    r2 = infer(data, cv_seed=5, n_folds=4, n_lambda=25)
    np.testing.assert_array_equal(r1.b_hat, r2.b_hat)
    np.testing.assert_array_equal(r1.p_values, r2.p_values)
    np.testing.assert_array_equal(r1.ci_lower, r2.ci_lower)


def test_infer_threads_match_serial(rng):
    data, _ = make_dataset(rng, 60, 4, 3)
    r1 = infer(data, cv_seed=2, n_folds=4, n_lambda=20, threads=1)
    r2 = infer(data, cv_seed=2, n_folds=4, n_lambda=20, threads=2)
    np.testing.assert_array_equal(r1.b_hat, r2.b_hat)
    np.testing.assert_array_equal(r1.p_values, r2.p_values)


def test_infer_report_invariants(rng):
    data, _ = make_dataset(rng, 70, 4, 3)
    rep = infer(data, cv_seed=1, n_folds=5, n_lambda=25, alpha=0.05)
    ok = rep.available
    m = rep.n_coords
    assert m == 8
    # symmetric interval around b_hat
    mid = (rep.ci_lower[ok] + rep.ci_upper[ok]) / 2
    np.testing.assert_allclose(mid, rep.b_hat[ok], atol=1e-12)
    # Bonferroni with m = (K-1)p
    np.testing.assert_allclose(rep.p_adjusted[ok],
                               np.minimum(1.0, m * rep.p_values[ok]))
    # duality between tests and intervals
    for j in np.nonzero(ok)[0]:
        excluded = rep.ci_lower[j] > 0 or rep.ci_upper[j] < 0
        if abs(rep.p_values[j] - rep.alpha) > 1e-12:
            assert (rep.p_values[j] < rep.alpha) == excluded


def test_infer_centers_near_wald_oracle(rng):
    # n >> p binary case: debiased estimates should sit within a couple of
    # standard errors of the unpenalized MLE
    data, _ = make_dataset(rng, 500, 3, 2)
    rep = infer(data, cv_seed=3, n_folds=5, n_lambda=30)
    B_or, _ = newton_mle(data.features, data.labels, 2)
    for j in range(3):
        assert abs(rep.b_hat[j] - B_or[0, j]) <= 2 * rep.se[j]


def test_nodewise_lambda_grid_shape(rng):
    sigma = random_psd(rng, 8)
    grid = nodewise_lambda_grid(sigma, 3, 20)
    assert len(grid) == 20
    row = np.abs(sigma.matrix[3]).copy()
    row[3] = 0
    assert abs(grid.values[0] - row.max()) < 1e-15
    assert abs(grid.values[-1] - row.max() / 100) < 1e-15
