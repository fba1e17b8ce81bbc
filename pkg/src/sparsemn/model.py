"""Data model and multinomial likelihood machinery.

The multinomial model with reference class K has posterior probabilities

    P(y = k | x) = exp(eta_k) / sum_l exp(eta_l),   eta_k = b_k' x (+ a_k),

where the contrast coefficients b_k (k = 1..K-1) are free and b_K = 0.
All estimation and inference code works on the stacked coefficient vector of
length (K-1)*p in class-major order: stacked index j = (k-1)*p + m maps to
class contrast k, feature m (both 1-based in the math, 0-based in code).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "Dataset",
    "CoefficientSet",
    "SigmaHat",
    "PosteriorVector",
    "DataError",
    "posterior_probs",
    "posterior_matrix",
    "avg_neg_log_likelihood",
    "score",
    "hessian_block",
    "empirical_sigma",
    "empirical_sigma_subset",
]

# Floor for log arguments; keeps log() finite for underflowed probabilities.
LOG_FLOOR = 1e-300


class DataError(ValueError):
    """Invalid data for the requested operation (e.g. a class is missing)."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with integer class labels in 1..K."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"features must be a 2-d matrix, got ndim={X.ndim}")
        if y.ndim != 1:
            raise ValueError("labels must be a 1-d vector")
        n, p = X.shape
        if n < 1 or p < 1:
            raise ValueError(f"need n >= 1 and p >= 1, got shape {X.shape}")
        if y.shape[0] != n:
            raise ValueError(f"labels length {y.shape[0]} != n = {n}")
        K = int(self.num_classes)
        if K < 2:
            raise ValueError(f"num_classes must be >= 2, got {K}")
        if y.min() < 1 or y.max() > K:
            raise ValueError("labels must lie in 1..K")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", K)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        """Counts of labels 1..K (length K)."""
        return np.bincount(self.labels, minlength=self.num_classes + 1)[1:]

    def check_all_classes_present(self) -> None:
        """Raise DataError unless every class 1..K appears at least once."""
        counts = self.class_counts()
        missing = np.nonzero(counts == 0)[0] + 1
        if missing.size:
            raise DataError(f"classes {missing.tolist()} absent from data; "
                            "cannot fit a K={} model".format(self.num_classes))

    def indicator_matrix(self) -> np.ndarray:
        """One-hot indicators for the non-reference classes, shape (n, K-1)."""
        K = self.num_classes
        Y = np.zeros((self.n, K - 1), dtype=np.float64)
        for k in range(K - 1):
            Y[:, k] = self.labels == (k + 1)
        return Y

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class CoefficientSet:
    """Contrast coefficients of the (K-1) non-reference classes.

    ``contrasts`` has shape (K-1, p); row k holds the contrast of class k+1
    against the reference class K (whose row is implicitly zero).
    ``intercepts`` (optional, length K-1) are unpenalized offsets that are
    excluded from the stacked inference vector.
    """

    contrasts: np.ndarray
    num_classes: int
    intercepts: Optional[np.ndarray] = None

    def __post_init__(self):
        B = np.asarray(self.contrasts, dtype=np.float64)
        K = int(self.num_classes)
        if B.ndim != 2 or B.shape[0] != K - 1:
            raise ValueError(f"contrasts must have shape (K-1, p), got {B.shape} for K={K}")
        if not np.all(np.isfinite(B)):
            raise ValueError("contrasts must be finite")
        a = self.intercepts
        if a is not None:
            a = np.asarray(a, dtype=np.float64)
            if a.shape != (K - 1,):
                raise ValueError(f"intercepts must have shape (K-1,), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError("intercepts must be finite")
        object.__setattr__(self, "contrasts", B)
        object.__setattr__(self, "num_classes", K)
        object.__setattr__(self, "intercepts", a)

    @property
    def p(self) -> int:
        return self.contrasts.shape[1]

    def stacked(self) -> np.ndarray:
        """Class-major stacked vector of length (K-1)*p; intercepts excluded."""
        return self.contrasts.reshape(-1).copy()

    @classmethod
    def from_stacked(cls, vec: np.ndarray, num_classes: int,
                     intercepts: Optional[np.ndarray] = None) -> "CoefficientSet":
        vec = np.asarray(vec, dtype=np.float64)
        K = int(num_classes)
        if vec.size % (K - 1) != 0:
            raise ValueError(f"stacked length {vec.size} not divisible by K-1={K-1}")
        p = vec.size // (K - 1)
        return cls(vec.reshape(K - 1, p), K, intercepts)

    @classmethod
    def zeros(cls, num_classes: int, p: int, with_intercepts: bool = False) -> "CoefficientSet":
        a = np.zeros(num_classes - 1) if with_intercepts else None
        return cls(np.zeros((num_classes - 1, p)), num_classes, a)

    def support_size(self) -> int:
        return int(np.count_nonzero(self.contrasts))


@dataclass(frozen=True)
class SigmaHat:
    """Empirical Hessian of the averaged negative log-likelihood.

    Symmetric PSD matrix of size (K-1)p x (K-1)p in the stacked coordinate
    order, together with the sample count it was averaged over.
    """

    matrix: np.ndarray
    n: int

    SYM_TOL = 1e-10
    EIG_TOL = -1e-8

    def __post_init__(self):
        S = np.asarray(self.matrix, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"matrix must be square, got {S.shape}")
        asym = np.max(np.abs(S - S.T)) if S.size else 0.0
        if asym > self.SYM_TOL:
            raise ValueError(f"matrix not symmetric: max asymmetry {asym:.3e}")
        w_min = float(np.linalg.eigvalsh(S)[0])
        if w_min < self.EIG_TOL:
            raise ValueError(f"matrix not PSD: min eigenvalue {w_min:.3e}")
        object.__setattr__(self, "matrix", S)
        object.__setattr__(self, "n", int(self.n))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PosteriorVector:
    """Class posterior probabilities; entries in [0,1] summing to 1."""

    probs: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.probs, dtype=np.float64)
        if q.ndim != 1:
            raise ValueError("probs must be a 1-d vector")
        if np.any(q < 0) or np.any(q > 1):
            raise ValueError("probs must lie in [0, 1]")
        if abs(q.sum() - 1.0) > 1e-12:
            raise ValueError(f"probs must sum to 1, got {q.sum()!r}")
        object.__setattr__(self, "probs", q)


def _linear_predictor(X: np.ndarray, beta: CoefficientSet) -> np.ndarray:
    """Eta matrix of shape (n, K-1); the reference class column (zero) is implicit."""
    eta = X @ beta.contrasts.T
    if beta.intercepts is not None:
        eta = eta + beta.intercepts
    return eta


def posterior_matrix(X: np.ndarray, beta: CoefficientSet) -> np.ndarray:
    """Posterior probabilities for each row of X, shape (n, K).

    Computed with max-subtraction so large linear predictors cannot overflow.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != beta.p:
        raise ValueError(f"x has {X.shape[1]} features, coefficients expect {beta.p}")
    eta = _linear_predictor(X, beta)
    full = np.concatenate([eta, np.zeros((eta.shape[0], 1))], axis=1)
    full -= full.max(axis=1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=1, keepdims=True)
    return full


def posterior_probs(x: np.ndarray, beta: CoefficientSet) -> PosteriorVector:
    """Posterior probability vector for a single observation."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return PosteriorVector(posterior_matrix(x[None, :], beta)[0])


def avg_neg_log_likelihood(data: Dataset, beta: CoefficientSet) -> float:
    """Averaged negative log-likelihood (1/n) * L_n(beta).

    Equals -(1/n) sum_i log P(y_i | x_i); the penalized objective adds
    lambda * ||contrasts||_1 on top of this.
    """
    if data.p != beta.p or data.num_classes != beta.num_classes:
        raise ValueError("dataset and coefficients have mismatched dimensions")
    probs = posterior_matrix(data.features, beta)
    p_obs = probs[np.arange(data.n), data.labels - 1]
    return float(-np.mean(np.log(np.maximum(p_obs, LOG_FLOOR))))


def score(data: Dataset, beta: CoefficientSet) -> np.ndarray:
    """Gradient of the averaged negative log-likelihood, stacked class-major.

    Block k is (1/n) sum_i [p_k(x_i) - 1(y_i = k)] x_i. Intercepts, when
    present, affect the probabilities but are not part of the stacked vector.
    """
    if data.p != beta.p or data.num_classes != beta.num_classes:
        raise ValueError("dataset and coefficients have mismatched dimensions")
    probs = posterior_matrix(data.features, beta)[:, : data.num_classes - 1]
    resid = probs - data.indicator_matrix()
    grad = resid.T @ data.features / data.n
    return grad.reshape(-1)


def hessian_block(x: np.ndarray, beta: CoefficientSet) -> np.ndarray:
    """Per-sample Hessian of the negative log-likelihood at (x, beta).

    Block (k, l) equals p_k (delta_kl - p_l) * x x'; the full matrix is
    symmetric PSD of size (K-1)p x (K-1)p.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != beta.p:
        raise ValueError(f"x has {x.size} features, coefficients expect {beta.p}")
    q = posterior_matrix(x[None, :], beta)[0, : beta.num_classes - 1]
    W = np.diag(q) - np.outer(q, q)
    return np.kron(W, np.outer(x, x))


def _sigma_matrix(X: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """(1/n) sum_i B(x_i) given posteriors for the non-reference classes."""
    n, p = X.shape
    Km1 = probs.shape[1]
    S = np.empty((Km1 * p, Km1 * p))
    for k in range(Km1):
        for l in range(k, Km1):
            w = probs[:, k] * ((1.0 if k == l else 0.0) - probs[:, l])
            block = X.T @ (X * w[:, None]) / n
            S[k * p:(k + 1) * p, l * p:(l + 1) * p] = block
            if l != k:
                S[l * p:(l + 1) * p, k * p:(k + 1) * p] = block.T
    return 0.5 * (S + S.T)


def empirical_sigma(data: Dataset, beta: CoefficientSet) -> SigmaHat:
    """Average of hessian_block over all samples."""
    if data.p != beta.p or data.num_classes != beta.num_classes:
        raise ValueError("dataset and coefficients have mismatched dimensions")
    probs = posterior_matrix(data.features, beta)[:, : data.num_classes - 1]
    return SigmaHat(_sigma_matrix(data.features, probs), data.n)


def empirical_sigma_subset(data: Dataset, beta: CoefficientSet,
                           idx: np.ndarray) -> SigmaHat:
    """empirical_sigma restricted to the samples in idx (used by fold-split CV)."""
    idx = np.asarray(idx)
    X = data.features[idx]
    probs = posterior_matrix(X, beta)[:, : data.num_classes - 1]
    return SigmaHat(_sigma_matrix(X, probs), len(idx))
