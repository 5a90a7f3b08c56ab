"""Fusing continuous-valued labels from unreliable annotators.

A library and CLI that infers per-record ground truth from multiple noisy
annotators by jointly estimating each annotator's bias and precision with a
MAP-EM procedure, plus reference aggregators, a seeded simulator, and a
statistical evaluation harness.
"""

__version__ = "0.1.0"

from .baselines import (
    BaselineEstimate,
    aggregate_em_r,
    aggregate_mean,
    aggregate_median,
    best_annotator,
)
from .data import (
    AnnotationTable,
    FeatureTable,
    SimulationParams,
    SimulationTruth,
    load_annotations,
    load_features,
    load_reference,
    observed_counts,
    restrict_annotators,
    save_annotations,
    simulate,
    write_truth,
)
from .errors import InputError, NumericalError
from .evaluation import (
    BootstrapReport,
    MetricSample,
    RankSumResult,
    RecoveryReport,
    SweepCurve,
    annotator_sweep,
    bootstrap_metrics,
    bootstrap_metrics_refit,
    fit_method,
    mae,
    rank_sum_test,
    recovery_report,
    rmse,
    wilcoxon_rank_sum,
)
from .gevd import (
    GevdParams,
    PrecisionCap,
    fit_gevd,
    gevd_cdf,
    gevd_logpdf,
    gevd_quantile,
    precision_upper_bound,
    sample_block_maxima,
    sample_gevd,
)
from .model import (
    EmTrace,
    Hyperparameters,
    ModelState,
    initialize,
    log_posterior,
    run_em,
    update_alpha_phi,
    update_b,
    update_lambda,
    update_phi,
    update_w,
    update_z,
)

__all__ = [
    "__version__",
    "AnnotationTable",
    "BaselineEstimate",
    "BootstrapReport",
    "EmTrace",
    "FeatureTable",
    "GevdParams",
    "Hyperparameters",
    "InputError",
    "MetricSample",
    "ModelState",
    "NumericalError",
    "PrecisionCap",
    "RankSumResult",
    "RecoveryReport",
    "SimulationParams",
    "SimulationTruth",
    "SweepCurve",
    "aggregate_em_r",
    "aggregate_mean",
    "aggregate_median",
    "annotator_sweep",
    "best_annotator",
    "bootstrap_metrics",
    "bootstrap_metrics_refit",
    "fit_gevd",
    "fit_method",
    "gevd_cdf",
    "gevd_logpdf",
    "gevd_quantile",
    "initialize",
    "load_annotations",
    "load_features",
    "load_reference",
    "log_posterior",
    "mae",
    "observed_counts",
    "precision_upper_bound",
    "rank_sum_test",
    "recovery_report",
    "restrict_annotators",
    "rmse",
    "run_em",
    "sample_block_maxima",
    "sample_gevd",
    "save_annotations",
    "simulate",
    "update_alpha_phi",
    "update_b",
    "update_lambda",
    "update_phi",
    "update_w",
    "update_z",
    "wilcoxon_rank_sum",
    "write_truth",
]
