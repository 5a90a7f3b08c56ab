"""Tests for the reference aggregators."""

import numpy as np
import pytest

from bcla import (
    AnnotationTable,
    FeatureTable,
    Hyperparameters,
    InputError,
    PrecisionCap,
    SimulationParams,
    aggregate_em_r,
    aggregate_mean,
    aggregate_median,
    best_annotator,
    rmse,
    run_em,
    simulate,
)


def table_of(values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones_like(values, dtype=bool)
    return AnnotationTable(
        values=values,
        mask=mask,
        record_ids=tuple(f"r{i}" for i in range(values.shape[0])),
        annotator_ids=tuple(f"a{j}" for j in range(values.shape[1])),
    )


class TestMeanMedian:
    def test_mean_examples(self):
        t = table_of([[10.0, 20.0]])
        assert aggregate_mean(t).z_hat[0] == 15.0
        t1 = table_of([[400.0]])
        assert aggregate_mean(t1).z_hat[0] == 400.0

    def test_median_examples(self):
        t = table_of([[10.0, 20.0, 90.0]])
        assert aggregate_median(t).z_hat[0] == 20.0
        t2 = table_of([[10.0, 20.0]])
        assert aggregate_median(t2).z_hat[0] == 15.0

    def test_missing_cells_ignored(self):
        t = table_of([[10.0, 50.0], [3.0, 5.0]], mask=[[True, False], [True, True]])
        assert aggregate_mean(t).z_hat[0] == 10.0
        assert aggregate_median(t).z_hat[0] == 10.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(400, 30, (15, 6))
        t1 = table_of(vals)
        perm = rng.permutation(6)
        t2 = table_of(vals[:, perm])
        assert np.allclose(aggregate_mean(t1).z_hat, aggregate_mean(t2).z_hat)
        assert np.allclose(aggregate_median(t1).z_hat, aggregate_median(t2).z_hat)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(400, 30, (12, 5))
        t1, t2 = table_of(vals), table_of(vals + 7.5)
        assert np.allclose(aggregate_mean(t2).z_hat, aggregate_mean(t1).z_hat + 7.5)
        assert np.allclose(aggregate_median(t2).z_hat, aggregate_median(t1).z_hat + 7.5)


class TestEmR:
    def test_single_annotator_reproduces_labels(self):
        t = table_of([[390.0], [410.0], [404.0], [398.0]])
        est = aggregate_em_r(
            t, FeatureTable.intercept_only(4), cap=PrecisionCap.fixed(1e3)
        )
        assert np.allclose(est.z_hat, t.values[:, 0], atol=0.05)

    def test_extras_carry_sigma(self):
        table, feats, _ = simulate(SimulationParams(n_records=50, n_annotators=5), seed=3)
        est = aggregate_em_r(table, feats, cap=PrecisionCap.fixed(0.01))
        assert est.extras["sigma_ms"].shape == (5,)
        assert np.all(est.extras["sigma_ms"] > 0)

    def test_sigma_overestimated_under_bias(self):
        # biased annotators inflate the bias-free model's noise estimates
        table, feats, truth = simulate(SimulationParams(), seed=1)
        est = aggregate_em_r(table, feats, cap=PrecisionCap.fixed(0.00416))
        assert np.mean(est.extras["sigma_ms"] - truth.sigma_true) > 0

    def test_matches_bcla_on_zero_bias_data_with_flat_priors(self):
        table, feats, _ = simulate(
            SimulationParams(n_records=60, n_annotators=4, bias_mean=0.0, bias_sd=0.0),
            seed=9,
        )
        cap = PrecisionCap.fixed(0.01)
        emr = aggregate_em_r(table, feats, cap=cap, convergence_tol=1e-13)
        # flatten the bias machinery: prior mean 0, enormous bias precision
        hp = Hyperparameters(
            k_b=1.0, vartheta_b=np.inf, mu_phi=0.0,
            k_alpha=1e14, vartheta_alpha=1.0,
            k_lambda=1.0, vartheta_lambda=np.inf,
            cap=cap, max_iterations=5000, convergence_tol=1e-13,
        )
        state, _ = run_em(table, feats, hp)
        assert np.max(np.abs(state.z - emr.z_hat)) < 1e-8


class TestBestAnnotator:
    def test_perfect_after_offset(self):
        truth = np.array([400.0, 410.0, 390.0])
        vals = np.stack([truth + 5.0, truth + np.array([0.0, 30.0, -30.0])], axis=1)
        t = table_of(vals)
        est = best_annotator(t, truth)
        assert est.extras["annotator_id"] == "a1"
        assert est.extras["bias_offset_ms"] == pytest.approx(5.0)
        assert est.extras["residual_sd_ms"] == pytest.approx(0.0, abs=1e-9)
        # reported labels are the raw ones; removing the offset recovers truth
        assert rmse(est.z_hat, truth) == pytest.approx(5.0)
        corrected = est.z_hat - est.extras["bias_offset_ms"]
        assert rmse(corrected, truth) == pytest.approx(0.0, abs=1e-9)

    def test_corrected_flag(self):
        truth = np.array([400.0, 410.0, 390.0])
        vals = np.stack([truth + 5.0, truth - 40.0], axis=1)
        t = table_of(vals)
        est = best_annotator(t, truth, corrected=True)
        assert rmse(est.z_hat, truth) == pytest.approx(0.0, abs=1e-9)

    def test_argmin_residual_sd(self):
        rng = np.random.default_rng(4)
        truth = rng.normal(400, 40, 300)
        a = truth + rng.normal(0, 1.0, 300)
        b = truth + rng.normal(0, 2.0, 300)
        t = table_of(np.stack([b, a], axis=1))
        est = best_annotator(t, truth)
        assert est.extras["annotator_id"] == "a2"

    def test_unannotated_records_stay_missing(self):
        truth = np.array([1.0, 2.0, 3.0])
        t = table_of(
            [[1.0, 1.1], [np.nan, 2.2], [3.0, 3.1]],
            mask=[[True, True], [False, True], [True, True]],
        )
        est = best_annotator(t, truth)
        if est.extras["annotator_id"] == "a1":
            assert np.isnan(est.z_hat[1])

    def test_requires_reference(self):
        t = table_of([[1.0]])
        with pytest.raises(InputError, match="reference"):
            best_annotator(t, None)
        with pytest.raises(InputError, match="one value per record"):
            best_annotator(t, np.array([1.0, 2.0]))

    def test_flagged_supervised(self):
        t = table_of([[1.0], [2.0]])
        est = best_annotator(t, np.array([1.0, 2.0]))
        assert est.extras["supervised"] is True
