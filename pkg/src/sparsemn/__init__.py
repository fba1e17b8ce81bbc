"""Contrast-based l1-penalized multinomial regression.

Estimation by cyclic coordinate descent with warm-started penalty paths and
cross-validation, debiased-Lasso confidence intervals and p-values via
nodewise inverse-Hessian estimation, bootstrap and multiple-splitting
baselines, and a Monte-Carlo experiment driver.
"""

from .model import (CoefficientSet, DataError, Dataset, PosteriorVector,
                    SigmaHat, avg_neg_log_likelihood, empirical_sigma,
                    hessian_block, posterior_probs, score)
from .solver import (CvResult, FitResult, LambdaPath, cross_validate,
                     default_lambda_path, fit_cv, fit_path, fit_single,
                     lambda_max, misclassification_rate, predict,
                     predict_batch, soft_threshold)
from .debias import (InferenceError, InferenceReport, ThetaRow, bonferroni,
                     confidence_interval, debiased_estimator, infer,
                     nodewise_row, p_value, select_lambda_j)
from .baselines import (BootstrapResult, RestrictedFit, SeparationError,
                        SplitResult, fit_unpenalized_restricted,
                        multiple_splitting, vector_bootstrap)
from .simulate import (ExperimentError, MetricSet, ModelConfig,
                       SimulationReport, gen_ar_gaussian, gen_dataset,
                       gen_labels_from_model, gen_lda, model_config,
                       run_experiment)

__version__ = "0.1.0"
