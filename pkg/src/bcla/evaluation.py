"""Metrics, bootstrap distributions, rank-sum tests, sweeps, recovery reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from math import comb, sqrt

import numpy as np
from scipy.stats import norm, rankdata

from .baselines import (
    aggregate_em_r,
    aggregate_mean,
    aggregate_median,
    best_annotator,
)
from .data import AnnotationTable, FeatureTable, restrict_annotators
from .errors import InputError, NumericalError
from .gevd import precision_upper_bound
from .model import Hyperparameters, ModelState, run_em

logger = logging.getLogger(__name__)

# below this joint size the rank-sum test enumerates the exact null distribution
EXACT_RANKSUM_MAX_N = 8


@dataclass(frozen=True)
class MetricSample:
    """One RMSE/MAE evaluation (ms)."""

    rmse: float
    mae: float
    n_records_used: int

    def __post_init__(self) -> None:
        if self.rmse < self.mae - 1e-12 or self.mae < 0:
            raise InputError("rmse >= mae >= 0 must hold on shared residuals")


@dataclass(frozen=True)
class BootstrapReport:
    """Bootstrap distribution of RMSE/MAE for one method."""

    method: str
    samples: tuple[MetricSample, ...]
    mean_rmse: float
    sd_rmse: float
    mean_mae: float
    sd_mae: float

    @classmethod
    def from_samples(cls, method: str, samples: list[MetricSample]) -> "BootstrapReport":
        rmses = np.array([s.rmse for s in samples])
        maes = np.array([s.mae for s in samples])
        return cls(
            method=method,
            samples=tuple(samples),
            mean_rmse=float(rmses.mean()),
            sd_rmse=float(rmses.std(ddof=1)),
            mean_mae=float(maes.mean()),
            sd_mae=float(maes.std(ddof=1)),
        )

    @property
    def rmse_samples(self) -> np.ndarray:
        return np.array([s.rmse for s in self.samples])

    @property
    def mae_samples(self) -> np.ndarray:
        return np.array([s.mae for s in self.samples])


@dataclass(frozen=True)
class SweepCurve:
    """Mean/sd of RMSE as a function of the number of annotators used."""

    method: str
    annotator_counts: tuple[int, ...]
    mean_rmse: np.ndarray
    sd_rmse: np.ndarray
    n_repetitions: int
    rmse: np.ndarray = field(repr=False)  # (n_counts, n_repetitions) raw values

    def __post_init__(self) -> None:
        counts = self.annotator_counts
        if not counts or counts[0] != 3:
            raise InputError("annotator counts must start at 3")
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise InputError("annotator counts must be strictly increasing")


@dataclass(frozen=True)
class RecoveryReport:
    """Estimated vs true annotator bias/sd with Pearson correlations."""

    phi_true: np.ndarray
    phi_hat: np.ndarray
    sigma_true: np.ndarray
    sigma_hat: np.ndarray
    correlation_phi: float
    correlation_sigma: float


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # rank sum of the first sample (mid-ranks)
    p_value: float
    exact: bool
    degenerate: bool


def _paired_residuals(estimates: np.ndarray, reference: np.ndarray) -> np.ndarray:
    estimates = np.asarray(estimates, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if estimates.shape != reference.shape or estimates.ndim != 1 or estimates.size == 0:
        raise InputError("estimates and reference must be equal-length 1-d arrays")
    if not np.all(np.isfinite(reference)):
        raise InputError("reference values must be finite")
    keep = np.isfinite(estimates)
    if not keep.any():
        raise InputError("no records with both an estimate and a reference")
    return estimates[keep] - reference[keep]


def rmse(estimates: np.ndarray, reference: np.ndarray) -> float:
    """Root mean square error over records with an estimate (ms)."""
    resid = _paired_residuals(estimates, reference)
    return float(np.sqrt(np.mean(resid**2)))


def mae(estimates: np.ndarray, reference: np.ndarray) -> float:
    """Mean absolute error over records with an estimate (ms)."""
    resid = _paired_residuals(estimates, reference)
    return float(np.mean(np.abs(resid)))


def bootstrap_metrics(
    estimates: np.ndarray,
    reference: np.ndarray,
    n_boot: int,
    seed: int,
    method: str = "",
) -> BootstrapReport:
    """Bootstrap RMSE/MAE by resampling per-record residuals with replacement."""
    if n_boot < 2:
        raise InputError("n_boot must be >= 2")
    resid = _paired_residuals(estimates, reference)
    rng = np.random.default_rng(seed)
    n = resid.size
    idx = rng.integers(0, n, size=(n_boot, n))
    picks = resid[idx]
    rmses = np.sqrt(np.mean(picks**2, axis=1))
    maes = np.mean(np.abs(picks), axis=1)
    samples = [
        MetricSample(rmse=float(r), mae=float(m), n_records_used=n)
        for r, m in zip(rmses, maes)
    ]
    return BootstrapReport.from_samples(method, samples)


def _exact_ranksum_p(ranks: np.ndarray, n_a: int, w_obs: float) -> float:
    """Exact two-sided p by counting k-subsets of the mid-rank multiset.

    Doubled mid-ranks are integers, so subset sums are counted exactly with
    an integer knapsack; p = min(1, 2 * min(P[W <= w], P[W >= w])).
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    n = len(doubled)
    counts = np.zeros((n_a + 1, total + 1), dtype=np.int64)
    counts[0, 0] = 1
    width = counts.shape[1]
    for r in doubled:
        # descending k keeps row k-1 untouched while row k absorbs this item
        for k in range(n_a, 0, -1):
            counts[k, r:] += counts[k - 1, : width - r]
    dist = counts[n_a]
    w2 = int(round(2 * w_obs))
    c_low = int(dist[: w2 + 1].sum())
    c_high = int(dist[w2:].sum())
    c_total = comb(n, n_a)
    return min(1.0, 2.0 * min(c_low, c_high) / c_total)


def rank_sum_test(a: np.ndarray | list[float], b: np.ndarray | list[float]) -> RankSumResult:
    """Two-sided rank-sum test with mid-ranks for ties.

    Small samples (min size <= 8) use exact enumeration of the rank-sum null;
    larger samples use the normal approximation with tie-corrected variance
    and a continuity correction. Two identical constant samples are flagged
    degenerate and return p = 1.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise InputError("both samples must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("samples must be finite")
    combined = np.concatenate([a, b])
    ranks = rankdata(combined, method="average")
    w = float(ranks[: a.size].sum())
    if np.ptp(combined) == 0:
        logger.warning("rank-sum test degenerate: all values identical")
        return RankSumResult(statistic=w, p_value=1.0, exact=False, degenerate=True)

    n_a, n_b = a.size, b.size
    n = n_a + n_b
    if min(n_a, n_b) <= EXACT_RANKSUM_MAX_N:
        p = _exact_ranksum_p(ranks, n_a, w)
        return RankSumResult(statistic=w, p_value=p, exact=True, degenerate=False)

    expected = n_a * (n + 1) / 2.0
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    variance = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        logger.warning("rank-sum test degenerate: zero variance under ties")
        return RankSumResult(statistic=w, p_value=1.0, exact=False, degenerate=True)
    d = w - expected
    correction = 0.5 if d > 0 else (-0.5 if d < 0 else 0.0)
    z = (d - correction) / sqrt(variance)
    p = min(1.0, 2.0 * float(norm.sf(abs(z))))
    return RankSumResult(statistic=w, p_value=p, exact=False, degenerate=False)


def wilcoxon_rank_sum(a: np.ndarray | list[float], b: np.ndarray | list[float]) -> float:
    """Two-sided rank-sum p-value (see rank_sum_test for branch details)."""
    return rank_sum_test(a, b).p_value


def fit_method(
    method: str,
    data: AnnotationTable,
    feats: FeatureTable,
    hp: Hyperparameters,
    reference: np.ndarray | None = None,
) -> np.ndarray:
    """Run one aggregation method and return its per-record estimates."""
    if method == "mean":
        return aggregate_mean(data).z_hat
    if method == "median":
        return aggregate_median(data).z_hat
    if method == "em_r":
        return aggregate_em_r(
            data,
            feats,
            cap=hp.cap,
            max_iterations=hp.max_iterations,
            convergence_tol=hp.convergence_tol,
        ).z_hat
    if method == "bcla":
        state, _ = run_em(data, feats, hp)
        return state.z
    if method == "best_annotator":
        return best_annotator(data, reference).z_hat
    raise InputError(f"unknown method {method!r}")


def _child_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(parts)).generate_state(1)[0])


def annotator_sweep(
    data: AnnotationTable,
    feats: FeatureTable,
    hp: Hyperparameters,
    methods: list[str] | tuple[str, ...],
    sizes: list[int] | tuple[int, ...],
    n_reps: int,
    seed: int,
    reference: np.ndarray,
) -> dict[str, SweepCurve]:
    """RMSE of each method on random annotator subsets of increasing size.

    Subsets are drawn without replacement, independently per (size, rep) from
    a stream derived from (seed, size, rep); records losing every annotation
    are dropped for that draw. The precision cap is refitted once per subset
    size, since its block size tracks the annotator count of the data being
    fitted.
    """
    sizes = tuple(int(s) for s in sizes)
    if data.n_annotators < 3:
        raise InputError("sweep needs at least 3 annotators")
    if any(s < 1 or s > data.n_annotators for s in sizes):
        raise InputError("sweep sizes must lie in 1..R")
    if n_reps < 1:
        raise InputError("n_reps must be >= 1")
    reference = np.asarray(reference, dtype=float)
    if reference.shape != (data.n_records,):
        raise InputError("reference must supply one value per record")

    needs_cap = any(m in ("em_r", "bcla") for m in methods)
    results = {m: np.zeros((len(sizes), n_reps)) for m in methods}
    for si, size in enumerate(sizes):
        hp_size = hp
        if needs_cap:
            cap = precision_upper_bound(
                hp.k_lambda, hp.vartheta_lambda, block_size=size, seed=_child_seed(seed, size)
            )
            hp_size = replace(hp, cap=cap)
        for rep in range(n_reps):
            rng = np.random.default_rng(np.random.SeedSequence((seed, size, rep)))
            for attempt in range(100):
                cols = rng.choice(data.n_annotators, size=size, replace=False)
                try:
                    sub, kept = restrict_annotators(data, cols)
                except InputError:
                    continue
                break
            else:
                raise NumericalError(f"no usable subset of size {size} after 100 redraws")
            sub_feats = (
                FeatureTable(rows=feats.rows[kept], has_intercept=feats.has_intercept, names=feats.names)
                if feats.d
                else FeatureTable.intercept_only(kept.size)
            )
            for m in methods:
                z_hat = fit_method(m, sub, sub_feats, hp_size, reference=reference[kept])
                results[m][si, rep] = rmse(z_hat, reference[kept])

    curves = {}
    for m in methods:
        r = results[m]
        curves[m] = SweepCurve(
            method=m,
            annotator_counts=sizes,
            mean_rmse=r.mean(axis=1),
            sd_rmse=r.std(axis=1, ddof=1) if n_reps > 1 else np.zeros(len(sizes)),
            n_repetitions=n_reps,
            rmse=r,
        )
    return curves


def recovery_report(state: ModelState, truth) -> RecoveryReport:
    """Pair estimated bias/sd with simulation truth and report correlations."""
    phi_hat = np.asarray(state.phi, dtype=float)
    sigma_hat = state.sigma()
    phi_true = np.asarray(truth.phi_true, dtype=float)
    sigma_true = np.asarray(truth.sigma_true, dtype=float)
    if phi_hat.shape != phi_true.shape:
        raise InputError("state and truth must describe the same annotators")
    return RecoveryReport(
        phi_true=phi_true,
        phi_hat=phi_hat,
        sigma_true=sigma_true,
        sigma_hat=sigma_hat,
        correlation_phi=_pearson(phi_true, phi_hat),
        correlation_sigma=_pearson(sigma_true, sigma_hat),
    )


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def bootstrap_metrics_refit(
    data: AnnotationTable,
    feats: FeatureTable,
    reference: np.ndarray,
    method: str,
    hp: Hyperparameters,
    n_boot: int,
    seed: int,
) -> BootstrapReport:
    """Expensive bootstrap: re-run the method on each resampled record set."""
    if n_boot < 2:
        raise InputError("n_boot must be >= 2")
    reference = np.asarray(reference, dtype=float)
    rng = np.random.default_rng(seed)
    n = data.n_records
    samples = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        mask = data.mask[idx]
        keep_cols = np.flatnonzero(mask.any(axis=0))
        sub = AnnotationTable(
            values=data.values[np.ix_(idx, keep_cols)],
            mask=mask[:, keep_cols],
            record_ids=tuple(f"{data.record_ids[i]}__b{k}" for k, i in enumerate(idx)),
            annotator_ids=tuple(data.annotator_ids[j] for j in keep_cols),
        )
        sub_feats = (
            FeatureTable(rows=feats.rows[idx], has_intercept=feats.has_intercept, names=feats.names)
            if feats.d
            else FeatureTable.intercept_only(n)
        )
        z_hat = fit_method(method, sub, sub_feats, hp, reference=reference[idx])
        samples.append(
            MetricSample(
                rmse=rmse(z_hat, reference[idx]),
                mae=mae(z_hat, reference[idx]),
                n_records_used=n,
            )
        )
    return BootstrapReport.from_samples(method, samples)
