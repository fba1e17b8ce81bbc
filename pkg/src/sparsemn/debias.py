"""Debiased-Lasso inference for the stacked contrast coefficients.

The penalized estimate is biased by the l1 shrinkage, so confidence
intervals are built from the corrected estimator

    b_hat = beta_hat - Theta_hat @ score(beta_hat),

where Theta_hat approximates the inverse of the empirical Hessian Sigma_hat.
Each row of Theta_hat comes from an l1-penalized quadratic program solved by
coordinate descent (nodewise estimation): row j is parameterized by gamma_j
and tau_j^2 = Sigma_jj - Sigma_{j,-j} gamma_j, with

    Theta_j = (1 / tau_j^2) * (unit at j, -gamma_j elsewhere).

Coordinate b_hat_j is asymptotically normal with standard error
sqrt(Theta_j' Sigma_hat Theta_j / n), which yields CIs and p-values.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import _kernels
from .model import (CoefficientSet, Dataset, SigmaHat, empirical_sigma,
                    empirical_sigma_subset, score)
from .solver import CvResult, FitResult, LambdaPath, fit_cv

__all__ = [
    "InferenceError",
    "ThetaRow",
    "InferenceReport",
    "NodewiseSigmaFolds",
    "nodewise_row",
    "nodewise_lambda_grid",
    "select_lambda_j",
    "estimate_theta",
    "debiased_estimator",
    "confidence_interval",
    "p_value",
    "bonferroni",
    "infer",
]

logger = logging.getLogger("sparsemn")

TAU_SQ_FLOOR = 1e-12
NODEWISE_TOL = 1e-10
NODEWISE_MAX_ITER = 1000
# Penalty selection only compares out-of-fold losses, which are flat at this
# scale, so the CV path solves run at a looser tolerance than the final rows.
NODEWISE_CV_TOL = 1e-6
NODEWISE_CV_MAX_ITER = 250


class InferenceError(RuntimeError):
    """Inference failed for a coordinate (ill-conditioned Sigma_hat, etc.)."""


@dataclass(frozen=True)
class ThetaRow:
    """One estimated row of the inverse empirical Hessian."""

    j: int
    gamma: np.ndarray
    tau_sq: float
    theta_row: np.ndarray
    lambda_j: float
    converged: bool = True

    def __post_init__(self):
        if self.tau_sq <= 0:
            raise InferenceError(f"tau_sq must be positive, got {self.tau_sq}")
        if self.theta_row[self.j] != 1.0 / self.tau_sq:
            raise ValueError("theta_row[j] must equal 1/tau_sq exactly")


def _assemble_row(j: int, gamma_full: np.ndarray, tau_sq: float,
                  lambda_j: float, converged: bool) -> ThetaRow:
    """Build a ThetaRow from the full-length gamma (slot j pinned to zero)."""
    m = gamma_full.shape[0]
    theta = np.empty(m)
    theta[:] = -gamma_full
    theta[j] = 1.0
    theta /= tau_sq
    theta[j] = 1.0 / tau_sq
    gamma = np.delete(gamma_full, j)
    return ThetaRow(j=j, gamma=gamma, tau_sq=float(tau_sq), theta_row=theta,
                    lambda_j=float(lambda_j), converged=bool(converged))


def nodewise_row(sigma: SigmaHat, j: int, lambda_j: float,
                 tol: float = NODEWISE_TOL, max_iter: int = NODEWISE_MAX_ITER,
                 *, literal_divisor: bool = False,
                 init: Optional[np.ndarray] = None) -> ThetaRow:
    """Solve the nodewise QP for row j at penalty lambda_j.

    Raises InferenceError when the residual variance tau_sq is not positive
    (ill-conditioned Sigma_hat); a non-converged solve is returned flagged,
    not raised.
    """
    if lambda_j <= 0:
        raise ValueError(f"lambda_j must be positive, got {lambda_j}")
    S = sigma.matrix
    m = S.shape[0]
    if not 0 <= j < m:
        raise ValueError(f"row index {j} out of range for dim {m}")
    gamma = np.zeros(m) if init is None else init.copy()
    gamma[j] = 0.0
    u = S @ gamma
    sweeps, converged = _kernels.nodewise_cd(S, j, float(lambda_j), gamma, u,
                                             tol, max_iter,
                                             bool(literal_divisor))
    if not converged:
        logger.warning("nodewise row %d did not converge in %d sweeps", j,
                       max_iter)
    tau_sq = float(S[j, j] - u[j])
    if tau_sq <= TAU_SQ_FLOOR:
        raise InferenceError(f"tau_sq <= {TAU_SQ_FLOOR:g} at row {j} "
                             "(ill-conditioned Sigma_hat)")
    return _assemble_row(j, gamma, tau_sq, lambda_j, converged)


def nodewise_lambda_grid(sigma: SigmaHat, j: int,
                         n_values: int = 20) -> LambdaPath:
    """Per-row penalty grid: max off-diagonal |Sigma_{j,.}| down to 1/100."""
    row = np.abs(sigma.matrix[j].copy())
    row[j] = 0.0
    top = float(row.max())
    if top <= 0:
        # Row already diagonal; any penalty gives gamma = 0.
        return LambdaPath(np.array([max(sigma.matrix[j, j], 1.0) * 1e-4]))
    return LambdaPath(np.geomspace(top, top / 100.0, n_values))


@dataclass(frozen=True)
class NodewiseSigmaFolds:
    """Per-fold Sigma_hat source for cross-validating the nodewise penalty.

    Holds the full-sample Sigma_hat plus (train, validation) pairs built from
    a class-agnostic sample split; the train part of fold f is recovered
    exactly from the averaging identity n*S_full = n_f*S_val + (n-n_f)*S_train.
    """

    full: SigmaHat
    train: tuple
    val: tuple

    @property
    def n_folds(self) -> int:
        return len(self.val)

    @classmethod
    def build(cls, data: Dataset, beta: CoefficientSet, n_folds: int = 5,
              seed: int = 0, full: Optional[SigmaHat] = None
              ) -> "NodewiseSigmaFolds":
        if n_folds < 2:
            raise ValueError(f"need at least 2 folds, got {n_folds}")
        if full is None:
            full = empirical_sigma(data, beta)
        rng = np.random.default_rng(seed)
        assignment = rng.permutation(data.n) % n_folds
        trains, vals = [], []
        for f in range(n_folds):
            idx = np.nonzero(assignment == f)[0]
            sv = empirical_sigma_subset(data, beta, idx)
            n_f = idx.size
            mat = (data.n * full.matrix - n_f * sv.matrix) / (data.n - n_f)
            trains.append(SigmaHat(0.5 * (mat + mat.T), data.n - n_f))
            vals.append(sv)
        return cls(full=full, train=tuple(trains), val=tuple(vals))


def _nodewise_path_losses(S_train: np.ndarray, S_val: np.ndarray, j: int,
                          grid: np.ndarray, tol: float,
                          max_iter: int, literal_divisor: bool) -> np.ndarray:
    """Out-of-fold QP losses along a warm-started decreasing penalty path."""
    m = S_train.shape[0]
    gamma = np.zeros(m)
    losses = np.empty(grid.size)
    for ell, lam in enumerate(grid):
        active = np.nonzero(gamma)[0]
        u = S_train[:, active] @ gamma[active] if active.size else np.zeros(m)
        _kernels.nodewise_cd(S_train, j, float(lam), gamma, u, tol, max_iter,
                             literal_divisor)
        active = np.nonzero(gamma)[0]
        u_val = S_val[:, active] @ gamma[active] if active.size else np.zeros(m)
        losses[ell] = -u_val[j] + 0.5 * float(gamma @ u_val)
    return losses


def select_lambda_j(folds: NodewiseSigmaFolds, j: int,
                    grid: Optional[LambdaPath] = None,
                    tol: float = NODEWISE_CV_TOL,
                    max_iter: int = NODEWISE_CV_MAX_ITER, *,
                    literal_divisor: bool = False) -> float:
    """Penalty for row j minimizing the cross-validated nodewise loss.

    The loss of a candidate gamma on a validation fold is
    -Sigma_val[j,-j] gamma + 0.5 gamma' Sigma_val[-j,-j] gamma; ties break
    toward the largest penalty.
    """
    if grid is None:
        grid = nodewise_lambda_grid(folds.full, j)
    losses = np.zeros(len(grid))
    for f in range(folds.n_folds):
        losses += _nodewise_path_losses(folds.train[f].matrix,
                                        folds.val[f].matrix, j, grid.values,
                                        tol, max_iter, literal_divisor)
    losses /= folds.n_folds
    return float(grid.values[int(np.argmin(losses))])


def estimate_theta(folds: NodewiseSigmaFolds, *, grid_size: int = 20,
                   tol: float = NODEWISE_TOL,
                   max_iter: int = NODEWISE_MAX_ITER,
                   literal_divisor: bool = False,
                   threads: int = 1) -> list:
    """All rows of Theta_hat with per-row CV penalties; failures are None.

    Rows are independent; with threads > 1 they run on a thread pool (the
    descent kernel releases the GIL) and are always collected in row order.
    """
    m = folds.full.dim

    def one_row(j: int):
        try:
            grid = nodewise_lambda_grid(folds.full, j, grid_size)
            lam_j = select_lambda_j(folds, j, grid,
                                    literal_divisor=literal_divisor)
            return nodewise_row(folds.full, j, lam_j, tol, max_iter,
                                literal_divisor=literal_divisor)
        except InferenceError as exc:
            logger.warning("nodewise row %d unavailable: %s", j, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one_row, range(m)))
    return [one_row(j) for j in range(m)]


def debiased_estimator(data: Dataset, beta_hat: CoefficientSet,
                       theta_rows: list) -> tuple:
    """Debiased coordinates b_hat and their availability mask.

    b_hat_j = beta_hat_j - Theta_j' score(beta_hat); rows whose nodewise
    estimate failed produce NaN with available=False.
    """
    g = score(data, beta_hat)
    stacked = beta_hat.stacked()
    m = stacked.size
    if len(theta_rows) != m:
        raise ValueError(f"expected {m} theta rows, got {len(theta_rows)}")
    b_hat = np.full(m, np.nan)
    available = np.zeros(m, dtype=bool)
    for j, row in enumerate(theta_rows):
        if row is None:
            continue
        b_hat[j] = stacked[j] - float(row.theta_row @ g)
        available[j] = True
    return b_hat, available


def _standard_error(theta_j: ThetaRow, sigma: SigmaHat, n: int) -> float:
    quad = float(theta_j.theta_row @ sigma.matrix @ theta_j.theta_row)
    if quad < -1e-10:
        raise InferenceError(f"negative variance quadratic form: {quad:.3e}")
    return float(np.sqrt(max(quad, 0.0) / n))


def confidence_interval(b_hat_j: float, theta_j: ThetaRow, sigma: SigmaHat,
                        n: int, alpha: float) -> tuple:
    """Symmetric (1-alpha) interval b_hat_j +/- q_{alpha/2} * se."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    se = _standard_error(theta_j, sigma, n)
    q = norm.isf(alpha / 2.0)
    return (float(b_hat_j - q * se), float(b_hat_j + q * se))


def p_value(b_hat_j: float, theta_j: ThetaRow, sigma: SigmaHat,
            n: int) -> float:
    """Two-sided p-value of H0: beta_j = 0 from the normal approximation."""
    quad = float(theta_j.theta_row @ sigma.matrix @ theta_j.theta_row)
    if quad < -1e-10:
        raise InferenceError(f"negative variance quadratic form: {quad:.3e}")
    denom = np.sqrt(max(quad, 0.0))
    if denom == 0.0:
        if b_hat_j == 0.0:
            return 1.0
        warnings.warn("degenerate variance: zero se with nonzero estimate",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    z = np.sqrt(n) * abs(b_hat_j) / denom
    return float(2.0 * norm.cdf(-z))


def bonferroni(p_values: np.ndarray, m: int) -> np.ndarray:
    """Family-wise adjustment: min(1, m * p) per coordinate."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if m < p.size:
        raise ValueError(f"m={m} smaller than the number of tests {p.size}")
    return np.minimum(1.0, m * p)


@dataclass(frozen=True)
class InferenceReport:
    """Per-coordinate debiased estimates, intervals and (adjusted) p-values.

    Coordinates follow the stacked class-major order; ``available`` marks the
    coordinates whose nodewise step succeeded (others carry NaN).
    """

    beta_hat: np.ndarray
    b_hat: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    p_adjusted: np.ndarray
    available: np.ndarray
    alpha: float
    num_classes: int
    n: int
    lambda_min: float
    nodewise_lambdas: np.ndarray
    fit: FitResult = field(repr=False, compare=False, default=None)
    cv: CvResult = field(repr=False, compare=False, default=None)
    sigma: SigmaHat = field(repr=False, compare=False, default=None)
    theta_rows: list = field(repr=False, compare=False, default=None)

    @property
    def n_coords(self) -> int:
        return self.b_hat.size

    @property
    def p(self) -> int:
        return self.b_hat.size // (self.num_classes - 1)

    def coordinate_labels(self) -> list:
        """(class k, feature m) pair for each stacked coordinate, 1-based."""
        p = self.p
        return [(j // p + 1, j % p + 1) for j in range(self.n_coords)]


def infer(data: Dataset, cv_seed: int = 0, alpha: float = 0.05, *,
          n_folds: int = 10, nodewise_folds: int = 5, threads: int = 1,
          fit_intercepts: bool = False, standardize: bool = False,
          literal_divisor: bool = False, grid_size: int = 20,
          n_lambda: int = 100) -> InferenceReport:
    """Full debiased-inference pipeline on a dataset.

    Runs CV + penalized fit, builds the empirical Hessian, estimates every
    row of its inverse by cross-validated nodewise descent, debiases, and
    reports CIs, p-values and Bonferroni adjustments. Deterministic for a
    fixed cv_seed; per-coordinate failures degrade to NaN entries instead of
    aborting.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    cv, fit = fit_cv(data, n_folds=n_folds, seed=cv_seed,
                     fit_intercepts=fit_intercepts, standardize=standardize,
                     n_lambda=n_lambda)
    return infer_from_fit(data, cv, fit, alpha, nodewise_folds=nodewise_folds,
                          nodewise_seed=_derived_seed(cv_seed),
                          threads=threads, literal_divisor=literal_divisor,
                          grid_size=grid_size)


def _derived_seed(cv_seed: int) -> int:
    # Distinct stream for the nodewise sample split, still a pure function
    # of the user seed.
    return (int(cv_seed) * 0x9E3779B1 + 0x85EBCA77) % (2 ** 63)


def infer_from_fit(data: Dataset, cv: CvResult, fit: FitResult, alpha: float,
                   *, nodewise_folds: int = 5, nodewise_seed: int = 0,
                   threads: int = 1, literal_divisor: bool = False,
                   grid_size: int = 20) -> InferenceReport:
    """Debiased inference continuing from an existing CV + fit stage."""
    beta_hat = fit.beta
    sigma = empirical_sigma(data, beta_hat)
    folds = NodewiseSigmaFolds.build(data, beta_hat, n_folds=nodewise_folds,
                                     seed=nodewise_seed, full=sigma)
    rows = estimate_theta(folds, grid_size=grid_size,
                          literal_divisor=literal_divisor, threads=threads)
    b_hat, available = debiased_estimator(data, beta_hat, rows)

    m = b_hat.size
    se = np.full(m, np.nan)
    ci_lo = np.full(m, np.nan)
    ci_hi = np.full(m, np.nan)
    pvals = np.full(m, np.nan)
    lam_js = np.full(m, np.nan)
    for j, row in enumerate(rows):
        if row is None or not available[j]:
            available[j] = False
            continue
        try:
            se[j] = _standard_error(row, sigma, data.n)
            ci_lo[j], ci_hi[j] = confidence_interval(b_hat[j], row, sigma,
                                                     data.n, alpha)
            pvals[j] = p_value(b_hat[j], row, sigma, data.n)
            lam_js[j] = row.lambda_j
        except InferenceError as exc:
            logger.warning("coordinate %d unavailable: %s", j, exc)
            available[j] = False
            se[j] = ci_lo[j] = ci_hi[j] = pvals[j] = np.nan
    padj = np.full(m, np.nan)
    ok = available & np.isfinite(pvals)
    if np.any(ok):
        padj[ok] = bonferroni(pvals[ok], m)
    return InferenceReport(beta_hat=beta_hat.stacked(), b_hat=b_hat, se=se,
                           ci_lower=ci_lo, ci_upper=ci_hi, p_values=pvals,
                           p_adjusted=padj, available=available,
                           alpha=float(alpha),
                           num_classes=data.num_classes, n=data.n,
                           lambda_min=cv.lambda_min, nodewise_lambdas=lam_js,
                           fit=fit, cv=cv, sigma=sigma, theta_rows=rows)
