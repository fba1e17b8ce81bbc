"""Penalized estimation: cyclic coordinate descent, penalty paths, CV, prediction.

The solver minimizes the averaged negative log-likelihood plus an l1 penalty
on the contrast coefficients,

    (1/n) L_n(beta) + lambda * sum_k ||b_k||_1,

by cyclic coordinate descent: within each class sweep the weights are the
class posteriors w_i = p_k(x_i), the curvatures v_j = (1/n) sum_i w_i x_ij^2,
and each coordinate moves to soft(v_j b_j - g_j, lambda) / v_j where g_j is
the current score coordinate. If a full sweep ever increases the penalized
objective it is redone with the curvature weights p_k (1 - p_k) + 1e-5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from ._kernels import STATUS_DEGENERATE, STATUS_FALLBACK, STATUS_STUCK
from .model import CoefficientSet, DataError, Dataset, posterior_matrix

__all__ = [
    "LambdaPath",
    "FitResult",
    "CvResult",
    "soft_threshold",
    "lambda_max",
    "default_lambda_path",
    "fit_single",
    "fit_path",
    "cross_validate",
    "fit_cv",
    "predict",
    "predict_batch",
    "misclassification_rate",
]

logger = logging.getLogger("sparsemn")

DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 100
DEFAULT_KKT_TOL = 1e-5
PROB_CLIP = 1e-10
# Coefficient-change tolerance for Monte-Carlo / resampling internals: the
# KKT residual stays below DEFAULT_KKT_TOL at this setting while fits run an
# order of magnitude faster; simulation metrics are insensitive at this scale.
FAST_TOL = 2e-5


@dataclass(frozen=True)
class LambdaPath:
    """Strictly decreasing positive penalty values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size < 1:
            raise ValueError("lambda path must be non-empty")
        if np.any(v <= 0):
            raise ValueError("lambda path values must be positive")
        if v.size > 1 and np.any(np.diff(v) >= 0):
            raise ValueError("lambda path must be strictly decreasing")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class FitResult:
    """Solution of the penalized problem at one penalty value."""

    beta: CoefficientSet
    lam: float
    objective: float
    n_sweeps: int
    converged: bool
    kkt_residual: float
    fallback_used: bool = False
    degenerate: bool = False


@dataclass(frozen=True)
class CvResult:
    """Cross-validated deviance curve over a penalty grid."""

    lambda_grid: LambdaPath
    mean_cv_deviance: np.ndarray
    se_cv_deviance: np.ndarray
    lambda_min: float
    fold_assignment: np.ndarray

    def __post_init__(self):
        grid = self.lambda_grid.values
        means = np.asarray(self.mean_cv_deviance, dtype=np.float64)
        if means.shape != grid.shape:
            raise ValueError("deviance curve and grid have different lengths")
        i = int(np.argmin(means))
        if self.lambda_min != grid[i]:
            raise ValueError("lambda_min does not attain the minimum mean deviance")


def soft_threshold(a: float, b: float) -> float:
    """sign(a) * max(|a| - b, 0); b must be nonnegative."""
    if b < 0:
        raise ValueError(f"threshold must be nonnegative, got {b}")
    if a > b:
        return a - b
    if a < -b:
        return a + b
    return 0.0


def _intercept_only(data: Dataset) -> np.ndarray:
    """Closed-form intercepts of the intercept-only model: log(n_k / n_K)."""
    counts = data.class_counts().astype(np.float64)
    return np.log(counts[:-1] / counts[-1])


def lambda_max(data: Dataset, fit_intercepts: bool = False) -> float:
    """Smallest penalty at which every contrast coefficient is exactly zero.

    Equals the max over (class, feature) of the zero-coefficient score
    magnitude |(1/n) sum_i (1(y_i = k) - p_k) x_im|, with p_k = 1/K, or the
    intercept-only posteriors when intercepts are enabled. Computed through
    the same gradient kernel the solver uses, so a fit at exactly this value
    thresholds every coordinate to zero.
    """
    K = data.num_classes
    ws = _Workspace(data, fit_intercepts)
    if fit_intercepts:
        data.check_all_classes_present()
        a = _intercept_only(data)
        init = CoefficientSet.zeros(K, data.p, with_intercepts=True)
        init = CoefficientSet(init.contrasts, K, a)
    else:
        init = None
    _, _, etaT = ws.initial_state(init)
    G = np.empty((K - 1, data.p))
    pk = np.empty(data.n)
    _kernels._gradient_full(ws.XF, ws.YT, etaT, pk, G)
    return float(np.max(np.abs(G)))


def default_lambda_path(data: Dataset, n_values: int = 100,
                        fit_intercepts: bool = False) -> LambdaPath:
    """Log-spaced grid from lambda_max down to a fraction of it.

    The floor is 0.01 * lambda_max, widened to 0.05 * lambda_max when p > n.
    """
    top = lambda_max(data, fit_intercepts=fit_intercepts)
    if top <= 0:
        raise DataError("lambda_max is zero (all-zero features); no usable path")
    ratio = 0.05 if data.p > data.n else 0.01
    return LambdaPath(np.geomspace(top, ratio * top, n_values))


class _Workspace:
    """Precomputed arrays shared by path fits on one dataset."""

    def __init__(self, data: Dataset, fit_intercepts: bool):
        self.data = data
        self.XF = np.asfortranarray(data.features)
        self.X2F = np.asfortranarray(self.XF * self.XF)
        self.YT = np.ascontiguousarray(data.indicator_matrix().T)
        self.y_idx = (data.labels - 1).astype(np.int64)
        self.fit_intercepts = fit_intercepts
        self.K = data.num_classes

    def initial_state(self, init: Optional[CoefficientSet]):
        K, p = self.K, self.data.p
        if init is None:
            B = np.zeros((K - 1, p))
            a = np.zeros(K - 1)
        else:
            if init.num_classes != K or init.p != p:
                raise ValueError("init coefficients have mismatched dimensions")
            B = init.contrasts.copy()
            a = (init.intercepts.copy() if init.intercepts is not None
                 else np.zeros(K - 1))
        eta = self.XF @ B.T
        if self.fit_intercepts:
            eta += a
        return B, a, np.ascontiguousarray(eta.T)

    def run(self, lam: float, B, a, etaT, tol, max_sweeps, kkt_tol, lam_prev):
        return _kernels.cd_fit(self.XF, self.X2F, self.YT, self.y_idx,
                               float(lam), B, a, etaT, self.fit_intercepts,
                               tol, max_sweeps, max_sweeps, kkt_tol,
                               float(lam_prev))

    def result(self, lam, B, a, diag) -> FitResult:
        sweeps, converged, kkt, obj, status = diag
        if status & STATUS_FALLBACK:
            logger.info("objective-increasing sweep at lambda=%.4g; redone with "
                        "fallback weights", lam)
        if status & STATUS_STUCK:
            logger.warning("coordinate descent stalled at lambda=%.4g", lam)
        if status & STATUS_DEGENERATE:
            logger.warning("degenerate feature (zero curvature) skipped at "
                           "lambda=%.4g", lam)
        beta = CoefficientSet(B.copy(), self.K,
                              a.copy() if self.fit_intercepts else None)
        return FitResult(beta=beta, lam=float(lam), objective=float(obj),
                         n_sweeps=int(sweeps), converged=bool(converged),
                         kkt_residual=float(kkt),
                         fallback_used=bool(status & STATUS_FALLBACK),
                         degenerate=bool(status & STATUS_DEGENERATE))


class _Standardizer:
    """Per-feature scaling (and centering when intercepts absorb it)."""

    def __init__(self, data: Dataset, center: bool):
        X = data.features
        self.mu = X.mean(axis=0) if center else np.zeros(data.p)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        self.sd = sd
        self.center = center

    def transform(self, data: Dataset) -> Dataset:
        X = (data.features - self.mu) / self.sd
        return Dataset(X, data.labels, data.num_classes)

    def transform_init(self, init: Optional[CoefficientSet], K: int,
                       with_intercepts: bool) -> Optional[CoefficientSet]:
        if init is None:
            return None
        B = init.contrasts * self.sd
        a = init.intercepts
        if with_intercepts:
            a = (a if a is not None else np.zeros(K - 1)) + init.contrasts @ self.mu
        return CoefficientSet(B, K, a)

    def back_transform(self, beta: CoefficientSet) -> CoefficientSet:
        B = beta.contrasts / self.sd
        a = beta.intercepts
        if a is not None:
            a = a - B @ self.mu
        return CoefficientSet(B, beta.num_classes, a)


def fit_single(data: Dataset, lam: float, init: Optional[CoefficientSet] = None,
               tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
               *, fit_intercepts: bool = False, standardize: bool = False,
               kkt_tol: float = DEFAULT_KKT_TOL) -> FitResult:
    """Fit the penalized model at a single penalty value.

    Requires every class to be present. When converged, the returned
    coefficients satisfy the KKT conditions of the averaged objective within
    kkt_tol, and the objective never exceeds the initial objective. With
    ``standardize`` the optimization runs on scaled features and the
    coefficients are returned in original units (objective and KKT residual
    refer to the standardized problem).
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    data.check_all_classes_present()
    if standardize:
        std = _Standardizer(data, center=fit_intercepts)
        ws = _Workspace(std.transform(data), fit_intercepts)
        init = std.transform_init(init, data.num_classes, fit_intercepts)
    else:
        std = None
        ws = _Workspace(data, fit_intercepts)
    B, a, eta = ws.initial_state(init)
    diag = ws.run(lam, B, a, eta, tol, max_sweeps, kkt_tol, 0.0)
    res = ws.result(lam, B, a, diag)
    if std is not None:
        res = FitResult(beta=std.back_transform(res.beta), lam=res.lam,
                        objective=res.objective, n_sweeps=res.n_sweeps,
                        converged=res.converged, kkt_residual=res.kkt_residual,
                        fallback_used=res.fallback_used, degenerate=res.degenerate)
    return res


def fit_path(data: Dataset, path: LambdaPath, tol: float = DEFAULT_TOL,
             max_sweeps: int = DEFAULT_MAX_SWEEPS, *,
             fit_intercepts: bool = False, standardize: bool = False,
             kkt_tol: float = DEFAULT_KKT_TOL,
             init: Optional[CoefficientSet] = None) -> list:
    """Warm-started fits along a decreasing penalty path.

    Each fit is initialized from the previous solution; the first entry
    starts from ``init`` (or zero). Every element satisfies the fit_single
    contract at its penalty value.
    """
    data.check_all_classes_present()
    if standardize:
        std = _Standardizer(data, center=fit_intercepts)
        ws = _Workspace(std.transform(data), fit_intercepts)
        init = std.transform_init(init, data.num_classes, fit_intercepts)
    else:
        std = None
        ws = _Workspace(data, fit_intercepts)
    B, a, eta = ws.initial_state(init)
    results = []
    lam_prev = 0.0
    for lam in path.values:
        diag = ws.run(lam, B, a, eta, tol, max_sweeps, kkt_tol, lam_prev)
        res = ws.result(lam, B, a, diag)
        if std is not None:
            res = FitResult(beta=std.back_transform(res.beta), lam=res.lam,
                            objective=res.objective, n_sweeps=res.n_sweeps,
                            converged=res.converged,
                            kkt_residual=res.kkt_residual,
                            fallback_used=res.fallback_used,
                            degenerate=res.degenerate)
        results.append(res)
        lam_prev = lam
    return results


def _stratified_folds(labels: np.ndarray, n_folds: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Class-stratified fold labels in 0..n_folds-1 for each sample."""
    n = labels.shape[0]
    assignment = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        perm = rng.permutation(idx)
        folds = (np.arange(perm.size) + offset) % n_folds
        assignment[perm] = folds
        offset += perm.size
    return assignment


def held_out_deviance(beta: CoefficientSet, data: Dataset,
                      clip: float = PROB_CLIP) -> float:
    """2x averaged negative log-likelihood with clipped probabilities."""
    probs = posterior_matrix(data.features, beta)
    p_obs = probs[np.arange(data.n), data.labels - 1]
    p_obs = np.clip(p_obs, clip, 1.0 - clip)
    return float(-2.0 * np.mean(np.log(p_obs)))


def cross_validate(data: Dataset, n_folds: int = 10,
                   path: Optional[LambdaPath] = None, seed: int = 0, *,
                   fit_intercepts: bool = False, standardize: bool = False,
                   tol: float = DEFAULT_TOL,
                   max_sweeps: int = DEFAULT_MAX_SWEEPS,
                   n_lambda: int = 100) -> CvResult:
    """Stratified K-fold deviance curve over the penalty grid.

    The deviance of a held-out fold is twice the averaged negative
    log-likelihood with probabilities clipped to [1e-10, 1 - 1e-10]. Ties in
    the minimizing penalty break toward the larger value. Deterministic for a
    fixed seed.
    """
    if n_folds < 2:
        raise ValueError(f"need at least 2 folds, got {n_folds}")
    if n_folds > data.n:
        raise ValueError(f"n_folds={n_folds} exceeds n={data.n}")
    data.check_all_classes_present()
    if path is None:
        path = default_lambda_path(data, n_lambda, fit_intercepts=fit_intercepts)

    rng = np.random.default_rng(seed)
    assignment = None
    for _ in range(20):
        cand = _stratified_folds(data.labels, n_folds, rng)
        ok = True
        for f in range(n_folds):
            train_labels = data.labels[cand != f]
            if np.unique(train_labels).size < data.num_classes:
                ok = False
                break
        if ok:
            assignment = cand
            break
    if assignment is None:
        raise DataError("could not build folds whose training parts contain "
                        "every class (20 attempts)")

    L = len(path)
    fold_dev = np.empty((n_folds, L))
    for f in range(n_folds):
        train = data.subset(np.nonzero(assignment != f)[0])
        val = data.subset(np.nonzero(assignment == f)[0])
        fits = fit_path(train, path, tol, max_sweeps,
                        fit_intercepts=fit_intercepts, standardize=standardize)
        for ell, res in enumerate(fits):
            fold_dev[f, ell] = held_out_deviance(res.beta, val)
    mean_dev = fold_dev.mean(axis=0)
    se_dev = fold_dev.std(axis=0, ddof=1) / np.sqrt(n_folds)
    lam_min = float(path.values[int(np.argmin(mean_dev))])
    return CvResult(lambda_grid=path, mean_cv_deviance=mean_dev,
                    se_cv_deviance=se_dev, lambda_min=lam_min,
                    fold_assignment=assignment)


def fit_cv(data: Dataset, n_folds: int = 10, seed: int = 0, *,
           path: Optional[LambdaPath] = None, fit_intercepts: bool = False,
           standardize: bool = False, tol: float = DEFAULT_TOL,
           max_sweeps: int = DEFAULT_MAX_SWEEPS, n_lambda: int = 100):
    """Cross-validate, then fit at lambda_min on the full data.

    The final fit is produced by a warm-started path down to lambda_min,
    which reaches the same KKT point as a cold fit_single at lambda_min.
    Returns (CvResult, FitResult).
    """
    cv = cross_validate(data, n_folds, path, seed, fit_intercepts=fit_intercepts,
                        standardize=standardize, tol=tol, max_sweeps=max_sweeps,
                        n_lambda=n_lambda)
    grid = cv.lambda_grid.values
    stop = int(np.argmin(cv.mean_cv_deviance))
    fits = fit_path(data, LambdaPath(grid[: stop + 1]), tol, max_sweeps,
                    fit_intercepts=fit_intercepts, standardize=standardize)
    return cv, fits[-1]


def predict(beta: CoefficientSet, x: np.ndarray) -> int:
    """Most probable class label; posterior ties break to the smallest index."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    probs = posterior_matrix(x[None, :], beta)[0]
    return int(np.argmax(probs)) + 1


def predict_batch(beta: CoefficientSet, X: np.ndarray) -> np.ndarray:
    """Vectorized predict over the rows of X."""
    probs = posterior_matrix(X, beta)
    return np.argmax(probs, axis=1).astype(np.int64) + 1


def misclassification_rate(beta: CoefficientSet, data: Dataset) -> float:
    """Fraction of samples whose predicted label differs from the truth."""
    pred = predict_batch(beta, data.features)
    return float(np.mean(pred != data.labels))
