"""Peaks-over-threshold GPD regression with a dynamic scale and adaptive lasso selection."""

__version__ = "0.1.0"

from .gpd import (CoefVector, GpdParams, PredictorPanel, gpd_cdf, gpd_logpdf, gpd_quantile,  # noqa: E402
                  link_shape, param_path)
from .likelihood import ExceedanceSeries, GpdLogLik  # noqa: E402
from .estimators import (FitResult, fit_almle, fit_mle, fit_two_step_almle, make_grid,  # noqa: E402
                         standardize_panel)
from .simulation import DgpSpec, StudyConfig, dgp_preset, run_study, simulate_series  # noqa: E402
from .risk import backtest, var_forecast, var_level  # noqa: E402
from .models import DynamicGPDRegressor, PanelStandardizer  # noqa: E402

__all__ = [
    "CoefVector", "GpdParams", "PredictorPanel", "gpd_cdf", "gpd_logpdf", "gpd_quantile", "link_shape",
    "param_path", "ExceedanceSeries", "GpdLogLik", "FitResult", "fit_almle", "fit_mle",
    "fit_two_step_almle", "make_grid", "standardize_panel", "DgpSpec", "StudyConfig", "dgp_preset",
    "run_study", "simulate_series", "backtest", "var_forecast", "var_level", "DynamicGPDRegressor",
    "PanelStandardizer",
]
