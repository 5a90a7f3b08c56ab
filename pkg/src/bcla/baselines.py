"""Reference aggregators: mean/median voting, bias-free ML EM, best annotator.

The best-annotator method is a supervised diagnostic: it consumes the
reference, unlike every other method, and is labelled as such in outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import AnnotationTable, FeatureTable
from .errors import InputError
from .gevd import PrecisionCap
from .model import EmTrace, Hyperparameters, ModelState, run_em

METHODS = ("mean", "median", "em_r", "best_annotator")


@dataclass(frozen=True)
class BaselineEstimate:
    """Per-record estimates of one aggregation method.

    ``z_hat`` is NaN for records the method produced no estimate for (only
    the best-annotator diagnostic leaves gaps). ``extras`` carries
    method-specific outputs: per-annotator sigma for em_r, the chosen
    annotator and its bias offset for best_annotator.
    """

    method: str
    z_hat: np.ndarray
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        z = np.array(self.z_hat, dtype=float, copy=True)
        if np.any(np.isinf(z)):
            raise InputError("estimates must be finite or NaN")
        z.flags.writeable = False
        object.__setattr__(self, "z_hat", z)


def aggregate_mean(data: AnnotationTable) -> BaselineEstimate:
    """Per-record arithmetic mean over observed annotations."""
    return BaselineEstimate(method="mean", z_hat=np.nanmean(data.values, axis=1))


def aggregate_median(data: AnnotationTable) -> BaselineEstimate:
    """Per-record median; even counts average the two central values."""
    return BaselineEstimate(method="median", z_hat=np.nanmedian(data.values, axis=1))


def aggregate_em_r(
    data: AnnotationTable,
    feats: FeatureTable,
    *,
    cap: PrecisionCap,
    max_iterations: int = 5000,
    convergence_tol: float = 1e-6,
) -> BaselineEstimate:
    """Bias-free maximum-likelihood EM aggregation.

    Same update structure as the full model but with every annotator bias
    fixed at zero, no bias-precision parameter, and improper flat priors on
    the remaining precisions (pure ML). Precisions are clamped by the same
    cap mechanism for numerical safety.
    """
    hp = Hyperparameters.flat(
        cap=cap, max_iterations=max_iterations, convergence_tol=convergence_tol
    )
    state, trace = run_em(data, feats, hp, bias_free=True)
    return BaselineEstimate(
        method="em_r",
        z_hat=state.z,
        extras={"sigma_ms": state.sigma(), "state": state, "trace": trace},
    )


def best_annotator(
    data: AnnotationTable,
    reference: np.ndarray,
    *,
    corrected: bool = False,
) -> BaselineEstimate:
    """Supervised diagnostic: the single annotator with the best precision.

    Per annotator the bias offset is its mean deviation from the reference
    over the records it labelled; the winner minimizes the residual variance
    after that offset is removed. Reported estimates are the winner's raw
    labels (``corrected=True`` subtracts the offset instead); records it did
    not annotate stay NaN and are excluded from its metrics.
    """
    if reference is None:
        raise InputError("best_annotator is a supervised diagnostic and needs a reference")
    reference = np.asarray(reference, dtype=float)
    if reference.shape != (data.n_records,):
        raise InputError("reference must supply one value per record")
    if not np.all(np.isfinite(reference)):
        raise InputError("reference values must be finite")

    deviations = data.values - reference[:, None]  # NaN where unobserved
    bias = np.nanmean(deviations, axis=0)
    residual_var = np.nanmean((deviations - bias[None, :]) ** 2, axis=0)
    j = int(np.argmin(residual_var))
    z_hat = data.values[:, j] - (bias[j] if corrected else 0.0)
    return BaselineEstimate(
        method="best_annotator",
        z_hat=z_hat,
        extras={
            "annotator_id": data.annotator_ids[j],
            "annotator_index": j,
            "bias_offset_ms": float(bias[j]),
            "residual_sd_ms": float(math.sqrt(residual_var[j])),
            "corrected": corrected,
            "supervised": True,
        },
    )
