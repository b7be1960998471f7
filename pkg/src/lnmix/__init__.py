"""Lognormal hierarchical mixture models for differential expression.

Two-level (LNN) and three-level (LN3) models, their gene-specific variance
variants, EM fitting, posterior pattern probabilities, covariance
diagnostics and simulation/scoring tools.
"""

from .density import CovarianceSpec, GeneStats, log_density, log_density_gv, pattern_loglik, pattern_loglik_gv
from .diagnostics import evidence_table, estimate_pi_ee, pair_covariance, pairwise_pvalues
from .em import EMConfig, FitResult, Hyperparams, METHODS, e_step, fit, get_method, m_step
from .io import ExpressionMatrix, ingest, write_matrix
from .patterns import (
    ConditionDesign,
    Pattern,
    PatternSet,
    all_partitions,
    each_vs_control,
    enumerate_patterns,
    membership_matrix,
)
from .posterior import PosteriorTable, eppee_cdf, gene_list, posteriors, topk_overlap
from .simulate import SimSpec, TruthTable, calibration_score, generate, roc_auc, roc_points
from .variance_prior import SampleVariances, VariancePrior, estimate_prior, quantile_grid, shrink

__all__ = [
    "all_partitions",
    "calibration_score",
    "ConditionDesign",
    "CovarianceSpec",
    "e_step",
    "each_vs_control",
    "EMConfig",
    "enumerate_patterns",
    "eppee_cdf",
    "estimate_pi_ee",
    "estimate_prior",
    "evidence_table",
    "ExpressionMatrix",
    "fit",
    "FitResult",
    "gene_list",
    "generate",
    "GeneStats",
    "get_method",
    "Hyperparams",
    "ingest",
    "log_density",
    "log_density_gv",
    "m_step",
    "membership_matrix",
    "METHODS",
    "pair_covariance",
    "pairwise_pvalues",
    "Pattern",
    "pattern_loglik",
    "pattern_loglik_gv",
    "PatternSet",
    "posteriors",
    "PosteriorTable",
    "quantile_grid",
    "roc_auc",
    "roc_points",
    "SampleVariances",
    "shrink",
    "SimSpec",
    "topk_overlap",
    "TruthTable",
    "VariancePrior",
    "write_matrix",
]

__version__ = "0.1.0"
