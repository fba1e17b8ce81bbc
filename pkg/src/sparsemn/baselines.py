"""Competing inference procedures: vector bootstrap and multiple splitting.

Both are benchmarks against the debiased estimator: the bootstrap builds
percentile CIs from refits on resampled rows, and multiple splitting selects
on one half of the data, tests on the other with an unpenalized restricted
MLE, and aggregates the per-split p-values by the quantile rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .model import (CoefficientSet, DataError, Dataset, avg_neg_log_likelihood,
                    posterior_matrix)
from .solver import FAST_TOL, fit_cv

__all__ = [
    "SeparationError",
    "BootstrapResult",
    "SplitResult",
    "RestrictedFit",
    "vector_bootstrap",
    "multiple_splitting",
    "fit_unpenalized_restricted",
    "aggregate_split_pvalues",
]

logger = logging.getLogger("sparsemn")

GAMMA_MIN = 0.05
SEPARATION_NORM = 1e3
NEWTON_GRAD_TOL = 1e-8
NEWTON_MAX_ITER = 100


class SeparationError(RuntimeError):
    """The restricted MLE diverged (separable data)."""


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile bootstrap CIs over the stacked coordinates."""

    ci_lower: np.ndarray
    ci_upper: np.ndarray
    reject: np.ndarray
    n_boot: int
    seed: int
    n_failed: int
    beta_samples: np.ndarray

    def __post_init__(self):
        if np.any(self.ci_lower > self.ci_upper):
            raise ValueError("ci_lower must not exceed ci_upper")


@dataclass(frozen=True)
class SplitResult:
    """Aggregated multiple-splitting p-values over the stacked coordinates."""

    p_values: np.ndarray
    n_splits: int
    seed: int
    n_failed: int

    def __post_init__(self):
        p = self.p_values
        if np.any((p < 0) | (p > 1)):
            raise ValueError("aggregated p-values must lie in [0, 1]")


@dataclass(frozen=True)
class RestrictedFit:
    """Unpenalized MLE on a restricted support, with Wald covariance.

    ``param_labels`` maps covariance rows to parameters: ("icpt", k) for the
    class-k intercept and (k, m) for feature m of class k (0-based).
    """

    beta: CoefficientSet
    cov: np.ndarray
    param_labels: list
    grad_norm: float
    converged: bool


def _resample_indices(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, n, size=n)


def vector_bootstrap(data: Dataset, n_boot: int = 200, alpha: float = 0.05,
                     seed: int = 0, *, n_folds: int = 10, n_lambda: int = 100,
                     fit_intercepts: bool = False, standardize: bool = False,
                     tol: float = FAST_TOL) -> BootstrapResult:
    """Percentile CIs from penalized refits on row-resampled data.

    Each replicate resamples n rows with replacement (replicate b uses the
    RNG stream seed XOR b), reruns CV and the penalized fit, and records the
    stacked coefficients; the CI takes the empirical alpha/2 and 1 - alpha/2
    quantiles with type-7 interpolation. A replicate whose resample misses a
    class is redrawn up to 20 times and then counted as failed; more than 10%
    failures aborts.
    """
    if n_boot < 2:
        raise ValueError(f"need n_boot >= 2, got {n_boot}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    data.check_all_classes_present()
    m = (data.num_classes - 1) * data.p
    samples = np.full((n_boot, m), np.nan)
    n_failed = 0
    for b in range(n_boot):
        rng = np.random.default_rng(seed ^ b)
        resampled = None
        for _ in range(20):
            idx = _resample_indices(rng, data.n)
            cand = data.subset(idx)
            if np.all(cand.class_counts() > 0):
                resampled = cand
                break
        if resampled is None:
            n_failed += 1
            logger.warning("bootstrap replicate %d failed: class missing "
                           "after 20 redraws", b)
            continue
        # CV fold randomness is shared across replicates so that identical
        # resamples yield identical fits; replicate variation enters only
        # through the resampled rows.
        _, fit = fit_cv(resampled, n_folds=n_folds, seed=seed,
                        fit_intercepts=fit_intercepts, standardize=standardize,
                        n_lambda=n_lambda, tol=tol)
        samples[b] = fit.beta.stacked()
    if n_failed > 0.1 * n_boot:
        raise DataError(f"{n_failed}/{n_boot} bootstrap replicates failed")
    good = samples[~np.isnan(samples[:, 0])]
    lo = np.quantile(good, alpha / 2.0, axis=0)
    hi = np.quantile(good, 1.0 - alpha / 2.0, axis=0)
    reject = (lo > 0) | (hi < 0)
    return BootstrapResult(ci_lower=lo, ci_upper=hi, reject=reject,
                           n_boot=n_boot, seed=seed, n_failed=n_failed,
                           beta_samples=good)


def _class_designs(data: Dataset, support: Sequence[np.ndarray]) -> list:
    """Per-class restricted design [1 | X_Sk]; intercept always included."""
    designs = []
    for k in range(data.num_classes - 1):
        idx = np.asarray(support[k], dtype=np.int64)
        D = np.concatenate([np.ones((data.n, 1)), data.features[:, idx]],
                           axis=1)
        designs.append(D)
    return designs


def fit_unpenalized_restricted(data: Dataset,
                               support: Sequence[np.ndarray]) -> RestrictedFit:
    """Newton MLE of the multinomial model restricted to the given supports.

    ``support`` holds one array of 0-based feature indices per non-reference
    class; an unpenalized intercept is always included, so the empty support
    gives the intercept-only model whose estimates are the log class-frequency
    ratios. Raises SeparationError when the coefficient norm exceeds 1e3
    during iteration.
    """
    data.check_all_classes_present()
    K = data.num_classes
    n = data.n
    designs = _class_designs(data, support)
    sizes = [D.shape[1] for D in designs]
    q = sum(sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    Y = data.indicator_matrix()

    counts = data.class_counts().astype(np.float64)
    theta = np.zeros(q)
    for k in range(K - 1):
        theta[offsets[k]] = np.log(counts[k] / counts[-1])

    def unpack(th: np.ndarray) -> CoefficientSet:
        B = np.zeros((K - 1, data.p))
        a = np.zeros(K - 1)
        for k in range(K - 1):
            blk = th[offsets[k]:offsets[k + 1]]
            a[k] = blk[0]
            B[k, np.asarray(support[k], dtype=np.int64)] = blk[1:]
        return CoefficientSet(B, K, a)

    def eta_of(th: np.ndarray) -> np.ndarray:
        eta = np.empty((n, K - 1))
        for k in range(K - 1):
            eta[:, k] = designs[k] @ th[offsets[k]:offsets[k + 1]]
        return eta

    def nll_of(th: np.ndarray) -> float:
        return avg_neg_log_likelihood(data, unpack(th))

    def grad_hess(th: np.ndarray):
        probs = posterior_matrix(data.features, unpack(th))[:, : K - 1]
        g = np.empty(q)
        H = np.empty((q, q))
        for k in range(K - 1):
            g[offsets[k]:offsets[k + 1]] = \
                designs[k].T @ (probs[:, k] - Y[:, k]) / n
            for l in range(k, K - 1):
                w = probs[:, k] * ((1.0 if k == l else 0.0) - probs[:, l])
                blk = designs[k].T @ (designs[l] * w[:, None]) / n
                H[offsets[k]:offsets[k + 1], offsets[l]:offsets[l + 1]] = blk
                if l != k:
                    H[offsets[l]:offsets[l + 1], offsets[k]:offsets[k + 1]] = blk.T
        return g, H

    fval = nll_of(theta)
    grad_norm = np.inf
    converged = False
    for _ in range(NEWTON_MAX_ITER):
        g, H = grad_hess(theta)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= NEWTON_GRAD_TOL:
            converged = True
            break
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(f"singular Hessian in restricted MLE: {exc}")
        t = 1.0
        decrement = float(g @ step)
        while t > 1e-10:
            cand = theta - t * step
            fc = nll_of(cand)
            if fc <= fval - 1e-4 * t * decrement:
                break
            t /= 2.0
        theta = theta - t * step
        fval = nll_of(theta)
        if np.linalg.norm(theta) > SEPARATION_NORM:
            raise SeparationError("coefficient norm exceeded 1e3; data are "
                                  "separable on the restricted support")
    _, H = grad_hess(theta)
    try:
        cov = np.linalg.inv(n * H)
    except np.linalg.LinAlgError as exc:
        raise SeparationError(f"singular information matrix: {exc}")
    labels = []
    for k in range(K - 1):
        labels.append(("icpt", k))
        labels.extend((k, int(mm)) for mm in np.asarray(support[k]))
    return RestrictedFit(beta=unpack(theta), cov=cov, param_labels=labels,
                         grad_norm=grad_norm, converged=converged)


def _stratified_halves(labels: np.ndarray,
                       rng: np.random.Generator) -> tuple:
    """Class-stratified split into exact halves floor(n/2) / ceil(n/2).

    Each class contributes floor(n_c / 2) to the first half; the leftover
    slots needed to reach floor(n/2) go one each to randomly chosen
    odd-count classes, so per-class imbalance never exceeds one sample.
    """
    n = labels.shape[0]
    target_a = n // 2
    classes = np.unique(labels)
    perms = {c: rng.permutation(np.nonzero(labels == c)[0]) for c in classes}
    take = {c: perms[c].size // 2 for c in classes}
    extras = target_a - sum(take.values())
    odd = [c for c in classes[rng.permutation(len(classes))]
           if perms[c].size % 2 == 1]
    for c in odd[:extras]:
        take[c] += 1
    a_parts = [perms[c][: take[c]] for c in classes]
    b_parts = [perms[c][take[c]:] for c in classes]
    return np.concatenate(a_parts), np.concatenate(b_parts)


def _wald_pvalues(fit: RestrictedFit) -> dict:
    """Two-sided Wald p-value per (class, feature) parameter."""
    se = np.sqrt(np.maximum(np.diag(fit.cov), 0.0))
    out = {}
    for i, lab in enumerate(fit.param_labels):
        if lab[0] == "icpt":
            continue
        k, mfeat = lab
        est = fit.beta.contrasts[k, mfeat]
        if se[i] == 0.0:
            out[(k, mfeat)] = 0.0 if est != 0 else 1.0
        else:
            out[(k, mfeat)] = float(2.0 * norm.cdf(-abs(est) / se[i]))
    return out


def aggregate_split_pvalues(p_matrix: np.ndarray,
                            gamma_min: float = GAMMA_MIN) -> np.ndarray:
    """Quantile aggregation of per-split p-values (rows = splits).

    P_j = min{1, (1 - log gamma_min) * inf_gamma Q_j(gamma)} with
    Q_j(gamma) = min{1, quantile_gamma(p_j / gamma)}; the infimum over
    gamma in [gamma_min, 1] is attained on the grid k/B of order-statistic
    positions, where the empirical gamma-quantile is the ceil(gamma*B)-th
    order statistic.
    """
    if not 0 < gamma_min < 1:
        raise ValueError(f"gamma_min must be in (0, 1), got {gamma_min}")
    B, m = p_matrix.shape
    sorted_p = np.sort(p_matrix, axis=0)
    k_lo = int(np.ceil(gamma_min * B))
    ks = np.arange(k_lo, B + 1)
    gammas = ks / B
    # Q over the grid: sorted_p[k-1] / (k/B), then the running infimum.
    q = sorted_p[ks - 1, :] / gammas[:, None]
    q = np.minimum(q.min(axis=0), 1.0)
    return np.minimum(1.0, (1.0 - np.log(gamma_min)) * q)


def multiple_splitting(data: Dataset, n_splits: int = 200, seed: int = 0, *,
                       n_folds: int = 10, n_lambda: int = 100,
                       gamma_min: float = GAMMA_MIN, fit_intercepts: bool = False,
                       tol: float = FAST_TOL) -> SplitResult:
    """FWER-controlling p-values by repeated sample splitting.

    Each split selects a support by CV-penalized fitting on one half and
    computes Bonferroni-scaled Wald p-values from the unpenalized restricted
    MLE on the other half (p = 1 for unselected coordinates); splits where
    the MLE separates or a class is missing contribute p = 1 everywhere.
    The per-coordinate p-values are combined by the quantile rule.
    """
    if n_splits < 2:
        raise ValueError(f"need n_splits >= 2, got {n_splits}")
    data.check_all_classes_present()
    K = data.num_classes
    m = (K - 1) * data.p
    p_matrix = np.ones((n_splits, m))
    n_failed = 0
    for b in range(n_splits):
        rng = np.random.default_rng(seed ^ b)
        idx_a, idx_b = _stratified_halves(data.labels, rng)
        try:
            half_a = data.subset(idx_a)
            half_b = data.subset(idx_b)
            half_a.check_all_classes_present()
            half_b.check_all_classes_present()
            _, fit = fit_cv(half_a, n_folds=n_folds, seed=seed ^ b,
                            fit_intercepts=fit_intercepts, n_lambda=n_lambda,
                            tol=tol)
            support = [np.nonzero(fit.beta.contrasts[k])[0]
                       for k in range(K - 1)]
            n_sel = int(sum(s.size for s in support))
            if n_sel == 0:
                continue
            if n_sel + (K - 1) >= half_b.n:
                raise SeparationError("restricted dimension too large for "
                                      "the second half")
            refit = fit_unpenalized_restricted(half_b, support)
            if not refit.converged:
                raise SeparationError("restricted MLE did not converge")
            wald = _wald_pvalues(refit)
            for (k, mfeat), pv in wald.items():
                p_matrix[b, k * data.p + mfeat] = min(1.0, n_sel * pv)
        except (SeparationError, DataError, np.linalg.LinAlgError) as exc:
            n_failed += 1
            logger.warning("split %d contributes p=1: %s", b, exc)
            p_matrix[b, :] = 1.0
    agg = aggregate_split_pvalues(p_matrix, gamma_min)
    return SplitResult(p_values=agg, n_splits=n_splits, seed=seed,
                       n_failed=n_failed)
