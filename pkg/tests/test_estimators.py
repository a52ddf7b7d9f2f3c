import math
import warnings

import numpy as np
import pytest

from dynpot.estimators import (AdaptiveWeights, FitResult, NearSingularWarning, SolveCache, TuningGrid,
                               adaptive_weights, almle_grids, det_condition_diagnostic, fit_almle, fit_mle,
                               fit_partial_k_mle, fit_two_step_almle, ic_value, make_grid,
                               standardize_panel)
from dynpot.exceptions import DegenerateInputError, DomainError
from dynpot.gpd import I0, I1, CoefVector, PredictorPanel, param_path
from dynpot.likelihood import ExceedanceSeries

TRUE = CoefVector([-1.0, 0.8, 0.0, 0.0, 0.0], [-0.3, 0.0, 0.5, 0.0, 0.0, 0.0])


def draw(beta, T, seed, rate=0.3):
    rng = np.random.default_rng(seed)
    panel = PredictorPanel(rng.standard_normal((T, beta.p)))
    path = param_path(beta, panel)
    k, s = path.k, path.sigma
    y = s / k * ((1 - rng.random(T)) ** -k - 1)
    y[rng.random(T) > rate] = 0.0
    return ExceedanceSeries(y, 0.0), panel


@pytest.fixture(scope="module")
def small():
    return draw(TRUE, 8000, seed=4)


@pytest.fixture(scope="module")
def tal_pair(small):
    series, panel = small
    cache = SolveCache()
    bic = fit_two_step_almle(series, panel, "BIC", n_k=12, n_sigma=10, cache=cache)
    n_after_bic = len(cache)
    hq = fit_two_step_almle(series, panel, "HQ", n_k=12, n_sigma=10, cache=cache)
    return bic, hq, cache, n_after_bic


class TestWeightsAndGrids:
    def test_unit_weights(self):
        b = CoefVector([0.0, 1.0], [0.0, 1.0, 1.0 - 1e-9])
        w = adaptive_weights(b, b)
        np.testing.assert_allclose(w.w_k, 1.0)
        np.testing.assert_allclose(w.w_sigma[0], 1.0)

    def test_product_weight(self):
        full = CoefVector([0.0, 0.4], [0.0, 0.2, 0.5])
        partial = CoefVector([0.0, 0.5], [0.0, 0.0, 0.0])
        w = adaptive_weights(full, partial)
        assert w.w_k[0] == pytest.approx(5.0, rel=1e-15)
        np.testing.assert_allclose(w.w_sigma, [5.0, 2.0])

    def test_zero_estimate_guard(self):
        full = CoefVector([0.0, 0.0], [0.0, 0.0, 0.0])
        w = adaptive_weights(full, full)
        assert w.w_k[0] == pytest.approx(1e8)
        assert np.all(w.w_sigma == pytest.approx(1e8))

    def test_grid_example(self):
        g = make_grid(1.0, 3)
        np.testing.assert_allclose(g.values, [1.0, 1e-3, 1e-6], rtol=1e-12)
        assert g.values[0] == 1.0 and g.values[-1] == 1e-6

    def test_grid_size_and_spacing(self):
        g = make_grid(37.5, 50)
        assert len(g) == 50
        assert g.values[0] == 37.5 and g.values[-1] == 1e-6
        np.testing.assert_allclose(np.diff(np.log(g.values)), np.diff(np.log(g.values))[0], rtol=1e-10)

    def test_grid_rejects(self):
        with pytest.raises(DomainError):
            make_grid(1e-7, 5)
        with pytest.raises(DomainError):
            TuningGrid([1.0, 2.0])


class TestInformationCriteria:
    def test_zero(self):
        for c in ("AIC", "HQ", "BIC"):
            assert ic_value(0.0, 0, 100, c) == 0.0

    def test_hq_example(self):
        T = math.exp(2.0)
        assert ic_value(-100.0, 3, T, "HQ") == pytest.approx(200 + 3 * 2 * math.log(2), rel=1e-15)
        assert ic_value(-100.0, 3, T, "hq") == pytest.approx(204.1588830833596)

    @pytest.mark.parametrize("T", [8, 100, 25_000])
    def test_bic_above_aic(self, T):
        assert ic_value(-50.0, 4, T, "BIC") >= ic_value(-50.0, 4, T, "AIC")

    def test_unknown(self):
        with pytest.raises(ValueError):
            ic_value(0.0, 1, 10, "CAIC")


class TestMle:
    def test_refit_idempotent(self, small):
        series, panel = small
        fit = fit_mle(series, panel)
        again = fit_mle(series, panel, start=fit.beta_hat)
        np.testing.assert_allclose(again.beta_hat.flatten(), fit.beta_hat.flatten(), atol=1e-5)
        assert again.loglik >= fit.loglik - 1e-8

    def test_static_partial_equals_full(self):
        series, _ = draw(CoefVector([-0.5], [0.0, 0.0]), 3000, seed=1)
        panel = PredictorPanel.empty(3000)
        a = fit_mle(series, panel).beta_hat
        b = fit_partial_k_mle(series, panel)
        np.testing.assert_allclose(a.flatten(), b.flatten(), atol=1e-5)

    def test_partial_pins_scale(self, small):
        series, panel = small
        b = fit_partial_k_mle(series, panel)
        assert np.all(b.beta2[1:] == 0.0)

    def test_serialization_roundtrip(self, small):
        series, panel = small
        fit = fit_mle(series, panel)
        back = FitResult.from_json(fit.to_json())
        np.testing.assert_array_equal(back.beta_hat.flatten(), fit.beta_hat.flatten())
        assert back.to_json() == fit.to_json()


class TestOneStep:
    def test_lambda_max_grid_gives_intercepts_only(self, small):
        series, panel = small
        w = AdaptiveWeights.uniform(panel.p)
        gk, gs = almle_grids(series, panel, w, n_k=2, n_sigma=2)
        fit = fit_almle(series, panel, w, TuningGrid([gk.values[0] * 1.05]), TuningGrid([gs.values[0] * 1.05]))
        assert fit.n_active == 0

    def test_small_lambda_corner_near_mle(self, small):
        series, panel = small
        w = AdaptiveWeights.uniform(panel.p)
        gk, gs = almle_grids(series, panel, w, n_k=3, n_sigma=3)
        fit = fit_almle(series, panel, w, gk, gs, "BIC")
        mle = fit_mle(series, panel)
        corner = [n for n in fit.path if n["lambda_k"] == 1e-6 and n["lambda_sigma"] == 1e-6][0]
        assert corner["loglik"] >= mle.loglik - 1e-4

    def test_ic_recomputes(self, small):
        series, panel = small
        mle = fit_mle(series, panel)
        w = adaptive_weights(mle.beta_hat, fit_partial_k_mle(series, panel))
        gk, gs = almle_grids(series, panel, w, n_k=6, n_sigma=5)
        fit = fit_almle(series, panel, w, gk, gs, "BIC")
        assert fit.recompute_ic() == fit.ic_value
        np.testing.assert_array_equal(fit.active_k, np.flatnonzero(fit.beta_hat.beta1[1:]))


class TestTwoStep:
    def test_recovers_support(self, tal_pair):
        bic, _, _, _ = tal_pair
        # shape slopes are estimated noisily at this size; the true one must survive
        assert 0 in bic.active_k and bic.active_k.size < 4
        assert bic.active_sigma.tolist() == [1]

    def test_step2_subset_of_step1(self, tal_pair):
        for fit in tal_pair[:2]:
            assert set(fit.active_k) <= set(fit.extra["step1_active_k"])

    def test_ic_recomputes_exactly(self, tal_pair):
        for fit in tal_pair[:2]:
            assert fit.recompute_ic() == fit.ic_value

    def test_exact_zeros(self, tal_pair):
        b = tal_pair[0].beta_hat
        small = np.abs(b.flatten()) < 1e-12
        assert np.all(b.flatten()[small] == 0.0)

    def test_cache_reused_across_criteria(self, tal_pair):
        bic, hq, cache, n_after = tal_pair
        step1_bic = [n for n in bic.path if n["step"] == 1]
        step1_hq = [n for n in hq.path if n["step"] == 1]
        assert step1_bic == step1_hq
        # the second criterion adds at most one fresh Step-2 sweep
        assert len(cache) - n_after <= 10

    def test_criterion_validated(self, small):
        with pytest.raises(ValueError):
            fit_two_step_almle(*small, "XIC", n_k=3, n_sigma=3)


class TestDiagnostics:
    def test_positive_det(self, small):
        series, panel = small
        fit = fit_mle(series, panel)
        d = det_condition_diagnostic(fit.beta_hat, series, panel)
        assert d["det"] > 0 and not d["near_singular"]

    def test_duplicated_column(self):
        rng = np.random.default_rng(0)
        T = 2000
        z = rng.standard_normal(T)
        panel = PredictorPanel(np.column_stack([z, z]))
        series, _ = draw(CoefVector([-1.0, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]), T, seed=2)
        beta = CoefVector([-1.0, 0.2, 0.1], [0.0, 0.0, 0.0, 0.0])
        with pytest.warns(NearSingularWarning):
            d = det_condition_diagnostic(beta, series, panel)
        assert abs(d["normalized_det"]) < 1e-10

    def test_permutation_invariant(self, small):
        series, panel = small
        beta = fit_mle(series, panel).beta_hat
        perm = [2, 0, 3, 1]
        p2 = PredictorPanel(panel.values[:, perm])
        b2 = CoefVector(np.r_[beta.beta1[0], beta.beta1[1:][perm]],
                        np.r_[beta.beta2[0], beta.beta2[1:-1][perm], beta.beta2[-1]])
        a = det_condition_diagnostic(beta, series, panel)["abs_det"]
        b = det_condition_diagnostic(b2, series, p2)["abs_det"]
        assert a == pytest.approx(b, rel=1e-8)


class TestStandardize:
    def test_factors(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(1000)
        x = 2 * (x - x.mean()) / x.std()
        ones = rng.standard_normal(1000)
        ones = ones / ones.std()
        out = standardize_panel(PredictorPanel(np.column_stack([x, ones])))
        np.testing.assert_allclose(out.scale_factors, [2.0, 1.0], rtol=1e-12)
        np.testing.assert_allclose(out.values.std(axis=0), 1.0, rtol=1e-12)

    def test_random_walk_column(self):
        rng = np.random.default_rng(1)
        rw = np.cumsum(rng.standard_normal(5000))
        out = standardize_panel(PredictorPanel(rw[:, None], (I1,)))
        assert out.values.std() == pytest.approx(1.0)
        assert out.integration_order == (I1,)

    def test_constant_rejected(self):
        with pytest.raises(DegenerateInputError):
            standardize_panel(PredictorPanel(np.ones((50, 2)), (I0, I0)))
