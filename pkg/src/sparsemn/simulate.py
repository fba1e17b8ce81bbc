"""Synthetic-data generators and the Monte-Carlo experiment driver.

Four generating designs are built in:

  1: K=3, AR(0.9) Gaussian features, contrasts (1,1,1,0,...) / (0,0,0,1,1,1,...)
  2: K=4, AR(0.9), three disjoint 3-blocks of ones
  3: K=3, Gaussian-mixture (LDA) design with AR(0.5) covariance and sparse
     discriminant contrasts on supports {197,92,152} / {173,170,191}
  4: K=4, like 3 with a third support {23,73,148} and priors (.3,.2,.3,.2)

Designs 3-4 induce per-class intercepts, so those fits enable them. The
driver runs n_reps independent replications (replication r uses data seed
base_seed + r), applies one inference method, scores it against the truth,
and reports each metric as the across-replication "mean (sd)" pair.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .baselines import multiple_splitting, vector_bootstrap
from .debias import infer_from_fit
from .model import CoefficientSet, Dataset
from .solver import FAST_TOL, fit_cv

__all__ = [
    "ExperimentError",
    "ModelConfig",
    "MetricSet",
    "SimulationReport",
    "model_config",
    "gen_ar_gaussian",
    "gen_labels_from_model",
    "gen_lda",
    "gen_dataset",
    "run_experiment",
    "format_cell",
]

logger = logging.getLogger("sparsemn")

METHODS = ("debiased", "bootstrap", "multisplit")
PARAM_SEED_DEFAULT = 914
LABEL_SEED_OFFSET = 1_000_003

# Published supports (1-based) for the LDA designs at p = 200.
_LDA_SUPPORTS_P200 = ((197, 92, 152), (173, 170, 191), (23, 73, 148))
_LDA_VALUES = ((1.0, -1.0, 1.0), (1.0, 1.0, -1.0), (-1.0, 1.0, 1.0))


class ExperimentError(RuntimeError):
    """Too many replications failed for the report to be trustworthy."""


@dataclass(frozen=True)
class ModelConfig:
    """One simulation design: truth, feature law, and fitting switches."""

    model_id: int
    n: int
    p: int
    K: int
    rho: float
    beta_star: np.ndarray
    priors: Optional[np.ndarray]
    mu_ref: Optional[np.ndarray]
    param_seed: int
    fit_intercepts: bool

    @property
    def is_lda(self) -> bool:
        return self.model_id in (3, 4)

    def signal_sets(self) -> list:
        """0-based signal feature indices per non-reference class."""
        return [np.nonzero(self.beta_star[k])[0] for k in range(self.K - 1)]

    def signal_mask(self) -> np.ndarray:
        """Boolean mask over the stacked coordinates marking true signals."""
        return self.beta_star.reshape(-1) != 0

    def null_coordinate(self) -> int:
        """A fixed noise coordinate used for normality diagnostics."""
        mask = self.signal_mask()
        preferred = 19 if self.p >= 20 else self.p - 1
        if not mask[preferred]:
            return preferred
        for j in range(mask.size):
            if not mask[j]:
                return j
        raise ValueError("design has no null coordinate")


def model_config(model_id: int, n: int, p: int = 200,
                 param_seed: int = PARAM_SEED_DEFAULT) -> ModelConfig:
    """Build the configuration of one of the four designs.

    For designs 3-4 at p = 200 the signal supports are the published index
    sets; at other p they are drawn (jointly, without replacement) from the
    parameter-seed RNG, which also draws the +/-1 reference mean either way.
    """
    if model_id not in (1, 2, 3, 4):
        raise ValueError(f"model_id must be 1..4, got {model_id}")
    if model_id == 1:
        K, rho = 3, 0.9
        if p < 6:
            raise ValueError("design 1 needs p >= 6")
        beta = np.zeros((K - 1, p))
        beta[0, 0:3] = 1.0
        beta[1, 3:6] = 1.0
        return ModelConfig(1, n, p, K, rho, beta, None, None, param_seed, False)
    if model_id == 2:
        K, rho = 4, 0.9
        if p < 9:
            raise ValueError("design 2 needs p >= 9")
        beta = np.zeros((K - 1, p))
        for k in range(3):
            beta[k, 3 * k:3 * k + 3] = 1.0
        return ModelConfig(2, n, p, K, rho, beta, None, None, param_seed, False)

    K = 3 if model_id == 3 else 4
    rho = 0.5
    priors = (np.array([0.3, 0.3, 0.4]) if model_id == 3
              else np.array([0.3, 0.2, 0.3, 0.2]))
    if p < 3 * (K - 1):
        raise ValueError(f"design {model_id} needs p >= {3 * (K - 1)}")
    rng = np.random.default_rng(param_seed)
    mu_ref = rng.choice(np.array([-1.0, 1.0]), size=p)
    if p == 200:
        supports = [np.array(s, dtype=np.int64) - 1
                    for s in _LDA_SUPPORTS_P200[: K - 1]]
    else:
        flat = rng.choice(p, size=3 * (K - 1), replace=False)
        supports = [flat[3 * k:3 * k + 3] for k in range(K - 1)]
    beta = np.zeros((K - 1, p))
    for k in range(K - 1):
        beta[k, supports[k]] = _LDA_VALUES[k]
    return ModelConfig(model_id, n, p, K, rho, beta, priors, mu_ref,
                       param_seed, True)


def ar_covariance(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gen_ar_gaussian(n: int, p: int, rho: float, seed: int) -> np.ndarray:
    """Rows i.i.d. N(0, Sigma) with Sigma_ij = rho^|i-j|, via AR(1) recursion."""
    if not abs(rho) < 1:
        raise ValueError(f"need |rho| < 1, got {rho}")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = Z[:, 0]
    scale = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + scale * Z[:, j]
    return X


def _categorical_draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Labels 1..K from per-row probabilities via inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return 1 + (cdf < u[:, None]).sum(axis=1).astype(np.int64)


def gen_labels_from_model(X: np.ndarray, beta_star: np.ndarray,
                          seed: int) -> np.ndarray:
    """Sample labels from the softmax posterior at the true contrasts."""
    from .model import posterior_matrix
    K = beta_star.shape[0] + 1
    probs = posterior_matrix(X, CoefficientSet(beta_star, K))
    return _categorical_draw(probs, np.random.default_rng(seed))


def gen_lda(config: ModelConfig, seed: int) -> Dataset:
    """Labels from the prior, features from class-conditional Gaussians.

    Class k has mean mu_ref + Sigma beta_k (mu_ref for the reference class),
    shared covariance AR(rho). Model parameters are fixed by the config's
    parameter seed; only the data randomness depends on ``seed``.
    """
    if not config.is_lda:
        raise ValueError(f"design {config.model_id} is not an LDA design")
    rng = np.random.default_rng(seed)
    n, p, K = config.n, config.p, config.K
    Sigma = ar_covariance(p, config.rho)
    means = np.empty((K, p))
    means[K - 1] = config.mu_ref
    for k in range(K - 1):
        means[k] = config.mu_ref + Sigma @ config.beta_star[k]
    labels = _categorical_draw(np.tile(config.priors, (n, 1)), rng)
    Z = rng.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = Z[:, 0]
    scale = math.sqrt(1.0 - config.rho ** 2)
    for j in range(1, p):
        X[:, j] = config.rho * X[:, j - 1] + scale * Z[:, j]
    X += means[labels - 1]
    return Dataset(X, labels, K)


def true_intercepts(config: ModelConfig) -> np.ndarray:
    """Softmax intercepts induced by the LDA design (reference class at 0)."""
    Sigma = ar_covariance(config.p, config.rho)
    K = config.K
    means = np.empty((K, config.p))
    means[K - 1] = config.mu_ref
    for k in range(K - 1):
        means[k] = config.mu_ref + Sigma @ config.beta_star[k]
    quad = np.array([m @ np.linalg.solve(Sigma, m) for m in means])
    c = np.log(config.priors) - 0.5 * quad
    return c[: K - 1] - c[K - 1]


def gen_dataset(config: ModelConfig, seed: int) -> Dataset:
    """One replication's dataset; deterministic in (config, seed)."""
    if config.is_lda:
        return gen_lda(config, seed)
    X = gen_ar_gaussian(config.n, config.p, config.rho, seed)
    labels = gen_labels_from_model(X, config.beta_star,
                                   seed + LABEL_SEED_OFFSET)
    return Dataset(X, labels, config.K)


@dataclass(frozen=True)
class MetricSet:
    """Per-replication scores; NaN marks metrics a method does not produce."""

    sse: float
    coverage_S: float = math.nan
    coverage_Sc: float = math.nan
    len_S: float = math.nan
    len_Sc: float = math.nan
    type1: float = math.nan
    power_individual: float = math.nan
    fwer_hit: float = math.nan
    power_multiple: float = math.nan
    stat_null: float = math.nan

    FIELDS = ("sse", "coverage_S", "coverage_Sc", "len_S", "len_Sc", "type1",
              "power_individual", "fwer_hit", "power_multiple", "stat_null")


def _interval_metrics(ci_lo, ci_hi, reject_ind, reject_adj, beta_star,
                      signal, available, stat_null=math.nan, sse=math.nan):
    """Assemble a MetricSet from per-coordinate decisions."""
    sig = signal & available
    noise = (~signal) & available

    def _mean(x, mask):
        return float(np.mean(x[mask])) if np.any(mask) else math.nan

    cover = (ci_lo <= beta_star) & (beta_star <= ci_hi) if ci_lo is not None \
        else None
    width = ci_hi - ci_lo if ci_lo is not None else None
    return MetricSet(
        sse=sse,
        coverage_S=_mean(cover, sig) if cover is not None else math.nan,
        coverage_Sc=_mean(cover, noise) if cover is not None else math.nan,
        len_S=_mean(width, sig) if width is not None else math.nan,
        len_Sc=_mean(width, noise) if width is not None else math.nan,
        type1=_mean(reject_ind, noise) if reject_ind is not None else math.nan,
        power_individual=_mean(reject_ind, sig) if reject_ind is not None
        else math.nan,
        fwer_hit=(float(np.any(reject_adj[noise])) if reject_adj is not None
                  and np.any(noise) else math.nan),
        power_multiple=_mean(reject_adj, sig) if reject_adj is not None
        else math.nan,
        stat_null=stat_null,
    )


def _run_one_rep(config: ModelConfig, method: str, alpha: float, rep_seed: int,
                 n_boot: int, n_splits: int, cv_folds: int,
                 n_lambda: int) -> MetricSet:
    data = gen_dataset(config, rep_seed)
    beta_star = config.beta_star.reshape(-1)
    signal = config.signal_mask()
    cv, fit = fit_cv(data, n_folds=cv_folds, seed=rep_seed,
                     fit_intercepts=config.fit_intercepts, n_lambda=n_lambda,
                     tol=FAST_TOL)
    sse = float(np.sum((fit.beta.contrasts - config.beta_star) ** 2))

    if method == "debiased":
        report = infer_from_fit(data, cv, fit, alpha,
                                nodewise_seed=rep_seed ^ 0x5D17)
        avail = report.available
        reject_ind = report.p_values < alpha
        reject_adj = report.p_adjusted < alpha
        j0 = config.null_coordinate()
        stat = math.nan
        if avail[j0] and report.se[j0] > 0:
            stat = float((report.b_hat[j0] - beta_star[j0]) / report.se[j0])
        return _interval_metrics(report.ci_lower, report.ci_upper, reject_ind,
                                 reject_adj, beta_star, signal, avail,
                                 stat_null=stat, sse=sse)
    if method == "bootstrap":
        boot = vector_bootstrap(data, n_boot=n_boot, alpha=alpha,
                                seed=rep_seed,
                                fit_intercepts=config.fit_intercepts,
                                n_lambda=n_lambda, n_folds=cv_folds)
        avail = np.ones(beta_star.size, dtype=bool)
        return _interval_metrics(boot.ci_lower, boot.ci_upper, boot.reject,
                                 None, beta_star, signal, avail, sse=sse)
    if method == "multisplit":
        ms = multiple_splitting(data, n_splits=n_splits, seed=rep_seed,
                                n_folds=cv_folds, n_lambda=n_lambda,
                                fit_intercepts=config.fit_intercepts)
        avail = np.ones(beta_star.size, dtype=bool)
        reject_adj = ms.p_values < alpha
        return _interval_metrics(None, None, None, reject_adj, beta_star,
                                 signal, avail, sse=sse)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _rep_task(args):
    config, method, alpha, rep, base_seed, n_boot, n_splits, cv_folds, \
        n_lambda = args
    try:
        return rep, _run_one_rep(config, method, alpha, base_seed + rep,
                                 n_boot, n_splits, cv_folds, n_lambda), None
    except Exception as exc:  # recorded, not fatal (unless >5% fail)
        return rep, None, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True)
class SimulationReport:
    """Across-replication summary of one (design, method, n) experiment."""

    model_id: int
    method: str
    n: int
    p: int
    K: int
    alpha: float
    n_reps: int
    base_seed: int
    metrics: dict
    per_rep: list = field(repr=False)
    failures: list = field(repr=False)

    def cell(self, name: str) -> str:
        mean, sd = self.metrics[name]
        return format_cell(mean, sd)

    def stat_null_samples(self) -> np.ndarray:
        vals = np.array([m.stat_null for m in self.per_rep if m is not None])
        return vals[np.isfinite(vals)]


def format_cell(mean: float, sd: float) -> str:
    """Render one "mean (sd)" table cell, NA when undefined."""
    if math.isnan(mean):
        return "NA"
    return f"{mean:.3f} ({sd:.3f})"


def run_experiment(config: ModelConfig, method: str, n_reps: int,
                   alpha: float = 0.05, base_seed: int = 0, *,
                   threads: int = 1, n_boot: int = 200, n_splits: int = 200,
                   cv_folds: int = 10, n_lambda: int = 100,
                   max_failure_rate: float = 0.05) -> SimulationReport:
    """Monte-Carlo evaluation of one inference method on one design.

    Replication r generates its dataset with seed base_seed + r, fits,
    applies the method, and scores against the true contrasts. Failed
    replications are excluded and counted; more than 5% failures raises
    ExperimentError. Replications are independent and run on a process pool
    when threads > 1; metric aggregation is in replication order.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if n_reps < 1:
        raise ValueError(f"need n_reps >= 1, got {n_reps}")
    tasks = [(config, method, alpha, r, base_seed, n_boot, n_splits, cv_folds,
              n_lambda) for r in range(n_reps)]
    results = [None] * n_reps
    failures = []
    if threads > 1:
        _kernels.warmup()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, metrics, err in pool.map(_rep_task, tasks):
                results[rep] = metrics
                if err is not None:
                    failures.append((rep, err))
                    logger.warning("replication %d failed: %s", rep, err)
    else:
        for task in tasks:
            rep, metrics, err = _rep_task(task)
            results[rep] = metrics
            if err is not None:
                failures.append((rep, err))
                logger.warning("replication %d failed: %s", rep, err)
    if len(failures) > max_failure_rate * n_reps:
        raise ExperimentError(f"{len(failures)}/{n_reps} replications failed: "
                              f"{failures[:3]}")

    metrics = {}
    for name in MetricSet.FIELDS:
        vals = np.array([getattr(m, name) for m in results if m is not None])
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            metrics[name] = (math.nan, math.nan)
        elif vals.size == 1:
            metrics[name] = (float(vals[0]), 0.0)
        else:
            metrics[name] = (float(vals.mean()), float(vals.std(ddof=1)))
    return SimulationReport(model_id=config.model_id, method=method,
                            n=config.n, p=config.p, K=config.K, alpha=alpha,
                            n_reps=n_reps, base_seed=base_seed,
                            metrics=metrics, per_rep=results,
                            failures=failures)
