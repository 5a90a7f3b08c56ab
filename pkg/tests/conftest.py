"""Shared helpers: random toy instances and finite-difference machinery."""

import numpy as np
import pytest

from bcla import (
    AnnotationTable,
    FeatureTable,
    Hyperparameters,
    ModelState,
    PrecisionCap,
    log_posterior,
)


def random_instance(rng, n_max=10, r_max=4, cap_value=1e9, observed_density=0.8):
    """Well-conditioned random toy problem (O(1) scales) for property tests."""
    n = int(rng.integers(2, n_max + 1))
    r = int(rng.integers(1, r_max + 1))
    mask = rng.random((n, r)) < observed_density
    for i in np.flatnonzero(~mask.any(axis=1)):
        mask[i, rng.integers(r)] = True
    for j in np.flatnonzero(~mask.any(axis=0)):
        mask[rng.integers(n), j] = True
    values = rng.normal(0.0, 3.0, (n, r))
    table = AnnotationTable(
        values=values,
        mask=mask,
        record_ids=tuple(f"r{i}" for i in range(n)),
        annotator_ids=tuple(f"a{j}" for j in range(r)),
    )
    d = int(rng.integers(0, min(2, n - 1) + 1))  # keep the design full rank
    feats = FeatureTable(rows=rng.normal(0.0, 1.0, (n, d)), has_intercept=True)
    hp = Hyperparameters(
        k_b=float(rng.uniform(1.5, 4.0)),
        vartheta_b=float(rng.uniform(0.5, 2.0)),
        mu_phi=float(rng.uniform(-1.0, 1.0)),
        k_alpha=float(rng.uniform(1.5, 4.0)),
        vartheta_alpha=float(rng.uniform(0.5, 2.0)),
        k_lambda=float(rng.uniform(1.5, 4.0)),
        vartheta_lambda=float(rng.uniform(0.5, 2.0)),
        cap=PrecisionCap.fixed(cap_value),
        max_iterations=500,
        convergence_tol=1e-10,
    )
    state = ModelState(
        z=rng.normal(0.0, 2.0, n),
        w=rng.normal(0.0, 1.0, d + 1),
        phi=rng.normal(0.0, 1.0, r),
        lam=rng.uniform(0.2, 3.0, r),
        alpha_phi=float(rng.uniform(0.3, 2.0)),
        b=float(rng.uniform(0.3, 2.0)),
    )
    return table, feats, hp, state


def fd_partial(fn, x0, h):
    """Central finite difference of a scalar function at x0."""
    return (fn(x0 + h) - fn(x0 - h)) / (2.0 * h)


def scalar_slices(state, data):
    """(name, getter, setter) triples exposing every model parameter as scalars.

    Getters/setters build modified ModelStates so the log posterior can be
    probed one coordinate at a time.
    """
    from dataclasses import replace

    slices = []
    for i in range(state.z.size):
        slices.append(
            (f"z[{i}]", lambda s, i=i: s.z[i],
             lambda s, v, i=i: replace(s, z=_with(s.z, i, v)))
        )
    for k in range(state.w.size):
        slices.append(
            (f"w[{k}]", lambda s, k=k: s.w[k],
             lambda s, v, k=k: replace(s, w=_with(s.w, k, v)))
        )
    for j in range(state.phi.size):
        slices.append(
            (f"phi[{j}]", lambda s, j=j: s.phi[j],
             lambda s, v, j=j: replace(s, phi=_with(s.phi, j, v)))
        )
    for j in range(state.lam.size):
        slices.append(
            (f"lam[{j}]", lambda s, j=j: s.lam[j],
             lambda s, v, j=j: replace(s, lam=_with(s.lam, j, v)))
        )
    slices.append(("alpha_phi", lambda s: s.alpha_phi, lambda s, v: replace(s, alpha_phi=v)))
    slices.append(("b", lambda s: s.b, lambda s, v: replace(s, b=v)))
    return slices


def _with(arr, idx, value):
    out = np.array(arr, copy=True)
    out[idx] = value
    return out


def reference_log_posterior(state, data, feats, hp, bias_free=False):
    """Straight-line reimplementation of the objective (test oracle).

    Pure python loops over observed cells, independent of the vectorized
    production path.
    """
    import math

    n, r = data.n_records, data.n_annotators
    design = feats.design_matrix()
    total = 0.0
    for i in range(n):
        for j in range(r):
            if data.mask[i, j]:
                resid = data.values[i, j] - state.phi[j] - state.z[i]
                total += -0.5 * (math.log(2 * math.pi / state.lam[j]) + resid**2 * state.lam[j])
    for i in range(n):
        a_i = float(design[i] @ state.w)
        total += -0.5 * (math.log(2 * math.pi / state.b) + (state.z[i] - a_i) ** 2 * state.b)
    if not bias_free:
        for j in range(r):
            total += -0.5 * (
                math.log(2 * math.pi / state.alpha_phi)
                + (state.phi[j] - hp.mu_phi) ** 2 * state.alpha_phi
            )
        total += _gamma_term(state.alpha_phi, hp.k_alpha, hp.vartheta_alpha)
    for j in range(r):
        total += _gamma_term(state.lam[j], hp.k_lambda, hp.vartheta_lambda)
    total += _gamma_term(state.b, hp.k_b, hp.vartheta_b)
    return total


def _gamma_term(x, shape, scale):
    import math

    if math.isinf(scale):
        return 0.0
    return (shape - 1.0) * math.log(x) - (math.lgamma(shape) + shape * math.log(scale)) - x / scale
