"""MAP-EM engine jointly inferring record truths and annotator bias/precision.

The generative model: annotator j labels record i as y_ij ~ N(z_i + phi_j,
1/lambda_j); biases phi_j ~ N(mu_phi, 1/alpha_phi); truths z_i ~ N(x_i'w, 1/b);
Gamma priors on the precisions lambda_j, alpha_phi and b. Inference maximizes
the log posterior by coordinate ascent: the E-step re-estimates the truths as
precision-weighted averages, the M-step updates w, phi, alpha_phi, b and
lambda in that order, each in closed form.

Missing annotations are handled by restricting every per-annotator sum to the
records that annotator labelled (count N_j) and every per-record sum to the
annotators present on that record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from .data import AnnotationTable, FeatureTable, observed_counts
from .errors import InputError, NumericalError
from .gevd import PrecisionCap

# guards against degenerate perfect fits when a precision carries a flat prior
# (its closed-form update would be infinite); lambda has the cap instead
_PRECISION_GUARD = 1e15


@dataclass(frozen=True)
class Hyperparameters:
    """Prior constants and EM controls.

    Gamma priors use the shape/scale convention. A scale of ``inf`` together
    with a shape of 1 denotes an improper flat prior on that precision (used
    by the maximum-likelihood reduction); the corresponding prior terms drop
    out of the log posterior and of the closed-form updates.
    """

    k_b: float
    vartheta_b: float
    mu_phi: float
    k_alpha: float
    vartheta_alpha: float
    k_lambda: float
    vartheta_lambda: float
    cap: PrecisionCap
    max_iterations: int = 5000
    convergence_tol: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("k_b", "k_alpha", "k_lambda", "vartheta_b", "vartheta_alpha", "vartheta_lambda"):
            value = getattr(self, name)
            if not value > 0:
                raise InputError(f"{name} must be positive")
        if not np.isfinite(self.mu_phi):
            raise InputError("mu_phi must be finite")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise InputError("convergence_tol must be positive")

    @classmethod
    def real_profile(cls, cap: PrecisionCap, **overrides) -> "Hyperparameters":
        """Defaults for sparse real annotator pools (best annotator ~5 ms)."""
        values = dict(
            k_b=3.0, vartheta_b=2e-4, mu_phi=10.0,
            k_alpha=3.0, vartheta_alpha=5e-4,
            k_lambda=4.0, vartheta_lambda=3e-3,
        )
        values.update(overrides)
        return cls(cap=cap, **values)

    @classmethod
    def sim_profile(cls, cap: PrecisionCap, **overrides) -> "Hyperparameters":
        """Defaults for the synthetic benchmark (best annotator ~15 ms)."""
        return cls.real_profile(cap, vartheta_lambda=3e-4, **overrides)

    @classmethod
    def flat(cls, cap: PrecisionCap, **overrides) -> "Hyperparameters":
        """Improper flat priors on every precision: pure maximum likelihood."""
        values = dict(
            k_b=1.0, vartheta_b=math.inf, mu_phi=0.0,
            k_alpha=1.0, vartheta_alpha=math.inf,
            k_lambda=1.0, vartheta_lambda=math.inf,
        )
        values.update(overrides)
        return cls(cap=cap, **values)


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ModelState:
    """Full parameter set: truths, regression weights, biases, precisions."""

    z: np.ndarray          # per-record inferred truth (ms)
    w: np.ndarray          # regression weights, length d (+1 with intercept)
    phi: np.ndarray        # per-annotator bias (ms)
    lam: np.ndarray        # per-annotator precision (ms^-2)
    alpha_phi: float       # precision of the bias distribution (ms^-2)
    b: float               # precision of the truth distribution (ms^-2)

    def __post_init__(self) -> None:
        z, w, phi, lam = (np.asarray(v, dtype=float) for v in (self.z, self.w, self.phi, self.lam))
        if phi.shape != lam.shape:
            raise InputError("phi and lam must have equal length")
        if not np.all(np.isfinite(z)):
            raise InputError("z must be finite")
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise InputError("lam must be positive and finite")
        if not self.alpha_phi > 0 or not self.b > 0:
            raise InputError("alpha_phi and b must be positive")
        for name, arr in (("z", z), ("w", w), ("phi", phi), ("lam", lam)):
            object.__setattr__(self, name, _readonly(arr))

    def sigma(self) -> np.ndarray:
        """Per-annotator standard deviation 1/sqrt(lambda), in ms."""
        return 1.0 / np.sqrt(self.lam)


@dataclass(frozen=True)
class EmTrace:
    """Per-iteration diagnostics of an EM run."""

    log_posterior: np.ndarray
    max_rel_change: np.ndarray
    clamp_events_per_iteration: np.ndarray
    iterations_run: int
    converged: bool

    def __post_init__(self) -> None:
        for arr in (self.log_posterior, self.max_rel_change, self.clamp_events_per_iteration):
            if len(arr) != self.iterations_run:
                raise InputError("trace arrays must have length iterations_run")

    @property
    def clamp_events(self) -> int:
        return int(np.sum(self.clamp_events_per_iteration))


def _check_shapes(data: AnnotationTable, feats: FeatureTable) -> None:
    if feats.n_records != data.n_records:
        raise InputError(
            f"feature rows ({feats.n_records}) must match annotation records ({data.n_records})"
        )


def _solve_least_squares(design: np.ndarray, target: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
    w, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        # name the dependent columns via a pivoted QR on the error path only
        from scipy.linalg import qr

        _, r, piv = qr(design, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = diag.max() * max(design.shape) * np.finfo(float).eps if diag.size else 0.0
        bad = sorted(piv[int(rank):].tolist()) if diag.size else list(range(design.shape[1]))
        bad_names = [names[j] if j < len(names) else f"column {j}" for j in bad]
        raise InputError(f"design matrix is rank-deficient; dependent columns: {bad_names}")
    return w


def update_z(state: ModelState, data: AnnotationTable, feats: FeatureTable) -> np.ndarray:
    """E-step: precision-weighted average of debiased labels and the regression mean.

    z_i = [sum_j (y_ij - phi_j) lambda_j + (x_i'w) b] / [sum_j lambda_j + b],
    with sums over the annotators observed on record i.
    """
    y = data.filled()
    m = data.mask.astype(float)
    a = feats.design_matrix() @ state.w
    numer = ((y - m * state.phi[None, :]) * state.lam[None, :]).sum(axis=1) + a * state.b
    denom = m @ state.lam + state.b
    return numer / denom


def update_w(state: ModelState, data: AnnotationTable, feats: FeatureTable) -> np.ndarray:
    """M-step for the regression weights: least squares of z on the design matrix."""
    design = feats.design_matrix()
    return _solve_least_squares(design, np.asarray(state.z), feats.column_names)


def update_phi(state: ModelState, data: AnnotationTable, hp: Hyperparameters) -> np.ndarray:
    """M-step for annotator biases.

    phi_j = [sum_i (y_ij - z_i) + mu_phi * (alpha_phi/lambda_j)]
            / (N_j + alpha_phi/lambda_j),
    with the sum and N_j over the records annotator j labelled.
    """
    y = data.filled()
    m = data.mask.astype(float)
    n_j = data.mask.sum(axis=0)
    resid_sum = (y - m * state.z[:, None]).sum(axis=0)
    ratio = state.alpha_phi / state.lam
    return (resid_sum + hp.mu_phi * ratio) / (n_j + ratio)


def update_alpha_phi(state: ModelState, hp: Hyperparameters) -> float:
    """M-step for the bias-distribution precision.

    1/alpha_phi = [sum_j (phi_j - mu_phi)^2 + 2/vartheta_alpha]
                  / (R + 2(k_alpha - 1)).
    """
    r = state.phi.size
    denom = r + 2.0 * (hp.k_alpha - 1.0)
    if denom <= 0:
        raise InputError("R + 2(k_alpha - 1) must be positive")
    inv = (np.sum((state.phi - hp.mu_phi) ** 2) + 2.0 / hp.vartheta_alpha) / denom
    return float(1.0 / inv) if inv > 0 else _PRECISION_GUARD


def update_b(state: ModelState, feats: FeatureTable, hp: Hyperparameters) -> float:
    """M-step for the truth-distribution precision.

    1/b = [sum_i (z_i - x_i'w)^2 + 2/vartheta_b] / (N + 2(k_b - 1)).
    """
    n = state.z.size
    denom = n + 2.0 * (hp.k_b - 1.0)
    if denom <= 0:
        raise InputError("N + 2(k_b - 1) must be positive")
    resid = state.z - feats.design_matrix() @ state.w
    inv = (np.sum(resid**2) + 2.0 / hp.vartheta_b) / denom
    return float(1.0 / inv) if inv > 0 else _PRECISION_GUARD


def update_lambda(
    state: ModelState, data: AnnotationTable, hp: Hyperparameters
) -> tuple[np.ndarray, int]:
    """M-step for annotator precisions, clamped at the cap.

    1/lambda_j = [sum_i (y_ij - phi_j - z_i)^2 + 2/vartheta_lambda]
                 / (N_j + 2(k_lambda - 1)),
    sums over annotator j's records; then lambda_j <- min(lambda_j,
    cap.lambda_max). Returns the new precisions and the clamp-event count.
    """
    n_j = data.mask.sum(axis=0)
    denom = n_j + 2.0 * (hp.k_lambda - 1.0)
    if np.any(denom <= 0):
        raise InputError("N_j + 2(k_lambda - 1) must be positive for every annotator")
    y = data.filled()
    m = data.mask.astype(float)
    resid = y - m * (state.z[:, None] + state.phi[None, :])
    inv = ((resid**2).sum(axis=0) + 2.0 / hp.vartheta_lambda) / denom
    with np.errstate(divide="ignore"):
        raw = 1.0 / inv
    clamped = np.minimum(raw, hp.cap.lambda_max)
    return clamped, int(np.count_nonzero(raw > hp.cap.lambda_max))


def log_posterior(
    state: ModelState,
    data: AnnotationTable,
    feats: FeatureTable,
    hp: Hyperparameters,
    *,
    bias_free: bool = False,
) -> float:
    """Log posterior of the full parameter set (up to the data normalizer).

    Six groups: the label likelihood over observed cells, the Gaussian bias
    and truth terms, and the Gamma priors on each lambda_j, on alpha_phi and
    on b. A Gamma prior with infinite scale is improper-flat and contributes
    nothing. With ``bias_free`` the bias and bias-precision groups are absent
    (the maximum-likelihood reduction has no bias model).
    """
    _check_shapes(data, feats)
    y = data.filled()
    m = data.mask.astype(float)
    n, r = data.n_records, data.n_annotators
    n_j = data.mask.sum(axis=0)

    resid = y - m * (state.z[:, None] + state.phi[None, :])
    sq_j = (resid**2).sum(axis=0)
    lik = -0.5 * float(
        np.sum(n_j * (math.log(2 * math.pi) - np.log(state.lam)) + sq_j * state.lam)
    )

    a = feats.design_matrix() @ state.w
    truth = -0.5 * float(
        n * (math.log(2 * math.pi) - math.log(state.b)) + np.sum((state.z - a) ** 2) * state.b
    )

    total = lik + truth + _gamma_logpdf_sum(np.array([state.b]), hp.k_b, hp.vartheta_b)
    total += _gamma_logpdf_sum(state.lam, hp.k_lambda, hp.vartheta_lambda)

    if not bias_free:
        bias = -0.5 * float(
            r * (math.log(2 * math.pi) - math.log(state.alpha_phi))
            + np.sum((state.phi - hp.mu_phi) ** 2) * state.alpha_phi
        )
        total += bias + _gamma_logpdf_sum(np.array([state.alpha_phi]), hp.k_alpha, hp.vartheta_alpha)

    if not np.isfinite(total):
        raise NumericalError("non-finite log posterior: state violates an invariant")
    return float(total)


def _gamma_logpdf_sum(x: np.ndarray, shape: float, scale: float) -> float:
    if math.isinf(scale):
        return 0.0  # improper flat prior: constant dropped
    return float(
        np.sum((shape - 1.0) * np.log(x) - (gammaln(shape) + shape * math.log(scale)) - x / scale)
    )


def initialize(
    data: AnnotationTable,
    feats: FeatureTable,
    hp: Hyperparameters,
    *,
    bias_free: bool = False,
) -> ModelState:
    """Starting point: per-record medians, mean residual biases, prior-mean precisions.

    z_i is the median of record i's observed labels; phi_j the mean residual
    of annotator j against those medians (zero in bias-free mode); lambda_j,
    alpha_phi and b start at their Gamma prior means (clamped to the cap for
    lambda). When a prior is flat its mean is undefined, so those precisions
    fall back to the closed-form update evaluated at the initial state.
    """
    _check_shapes(data, feats)
    z0 = np.nanmedian(data.values, axis=1)
    w0 = _solve_least_squares(feats.design_matrix(), z0, feats.column_names)
    n_j = data.mask.sum(axis=0)
    if bias_free:
        phi0 = np.zeros(data.n_annotators)
    else:
        phi0 = (data.filled() - data.mask * z0[:, None]).sum(axis=0) / n_j
    lam0 = np.full(data.n_annotators, min(hp.k_lambda * hp.vartheta_lambda, hp.cap.lambda_max))
    alpha0 = hp.k_alpha * hp.vartheta_alpha
    b0 = hp.k_b * hp.vartheta_b

    provisional = ModelState(
        z=z0,
        w=w0,
        phi=phi0,
        lam=np.full(data.n_annotators, hp.cap.lambda_max) if not np.isfinite(lam0[0]) else lam0,
        alpha_phi=alpha0 if np.isfinite(alpha0) else 1.0,
        b=b0 if np.isfinite(b0) else 1.0,
    )
    if not np.isfinite(lam0[0]):
        lam_data, _ = update_lambda(provisional, data, hp)
        provisional = replace(provisional, lam=lam_data)
    if not np.isfinite(alpha0):
        provisional = replace(provisional, alpha_phi=update_alpha_phi(provisional, hp))
    if not np.isfinite(b0):
        provisional = replace(provisional, b=update_b(provisional, feats, hp))
    return provisional


def _max_rel_change(old: ModelState, new: ModelState) -> float:
    parts = []
    for o, v in (
        (old.z, new.z),
        (old.w, new.w),
        (old.phi, new.phi),
        (old.lam, new.lam),
        (np.array([old.alpha_phi]), np.array([new.alpha_phi])),
        (np.array([old.b]), np.array([new.b])),
    ):
        parts.append(float(np.max(np.abs(v - o) / (1.0 + np.abs(o)))) if o.size else 0.0)
    return max(parts)


def run_em(
    data: AnnotationTable,
    feats: FeatureTable,
    hp: Hyperparameters,
    *,
    bias_free: bool = False,
) -> tuple[ModelState, EmTrace]:
    """Run the EM loop to convergence or the iteration cap.

    Each iteration is one E-step (truths) followed by the M-step updates in
    the order w, phi, alpha_phi, b, lambda. The loop stops when the largest
    relative parameter change |new - old| / (1 + |old|) drops below the
    tolerance. Non-convergence is reported on the trace, not raised.
    Deterministic: identical inputs give bit-identical results.
    """
    _check_shapes(data, feats)
    state = initialize(data, feats, hp, bias_free=bias_free)
    lp_trace: list[float] = []
    change_trace: list[float] = []
    clamp_trace: list[int] = []
    converged = False

    for _ in range(hp.max_iterations):
        z = update_z(state, data, feats)
        working = replace(state, z=z)
        working = replace(working, w=update_w(working, data, feats))
        if not bias_free:
            working = replace(working, phi=update_phi(working, data, hp))
            working = replace(working, alpha_phi=update_alpha_phi(working, hp))
        working = replace(working, b=update_b(working, feats, hp))
        lam, n_clamped = update_lambda(working, data, hp)
        working = replace(working, lam=lam)

        change = _max_rel_change(state, working)
        state = working
        lp_trace.append(log_posterior(state, data, feats, hp, bias_free=bias_free))
        change_trace.append(change)
        clamp_trace.append(n_clamped)
        if change < hp.convergence_tol:
            converged = True
            break

    trace = EmTrace(
        log_posterior=np.array(lp_trace),
        max_rel_change=np.array(change_trace),
        clamp_events_per_iteration=np.array(clamp_trace, dtype=int),
        iterations_run=len(lp_trace),
        converged=converged,
    )
    return state, trace
