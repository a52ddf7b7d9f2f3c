"""scikit-learn style wrappers around the estimators.

``X`` is always the already-lagged predictor matrix (row ``t`` explains
observation ``t``) and ``y`` the excesses ``max(l_t - u_t, 0)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .estimators import CRITERIA, N_LAMBDA_K, N_LAMBDA_SIGMA, fit_mle, fit_two_step_almle
from .exceptions import DegenerateInputError
from .gpd import I0, I1, PredictorPanel, param_path
from .likelihood import ExceedanceSeries, GpdLogLik
from .risk import F_U_DEFAULT, var_level


class PanelStandardizer(TransformerMixin, BaseEstimator):
    """Divide each column by its (population) standard deviation.

    No centering: the model intercepts absorb the means, and the slopes
    keep the sign of the raw predictors.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        sd = X.std(axis=0)
        if np.any(~(sd > 0)):
            raise DegenerateInputError(f"zero-variance columns: {np.flatnonzero(~(sd > 0)).tolist()}")
        self.scale_ = sd
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        return check_array(X, dtype=float) * self.scale_


class DynamicGPDRegressor(BaseEstimator):
    """GPD regression with time-varying shape and scale.

    Parameters
    ----------
    method : {"tal", "mle"}
        Two-step adaptive lasso or plain maximum likelihood.
    criterion : {"AIC", "HQ", "BIC"}
        Tuning criterion for ``method="tal"``.
    standardize : bool
        Scale columns to unit sd before fitting; coefficients are reported
        on the standardized scale, ``scale_`` holds the divisors.
    integration_order : sequence of {"I0", "I1"} or None
        Column flags; only used for reporting.
    """

    def __init__(self, method="tal", criterion="BIC", n_lambda_k=N_LAMBDA_K, n_lambda_sigma=N_LAMBDA_SIGMA,
                 standardize=True, integration_order=None):
        self.method = method
        self.criterion = criterion
        self.n_lambda_k = n_lambda_k
        self.n_lambda_sigma = n_lambda_sigma
        self.standardize = standardize
        self.integration_order = integration_order

    def _panel(self, X):
        X = check_array(X, dtype=float)
        if hasattr(self, "scale_"):
            if X.shape[1] != self.scale_.size:
                raise ValueError(f"expected {self.scale_.size} columns, got {X.shape[1]}")
            X = X / self.scale_
        order = tuple(self.integration_order) if self.integration_order is not None else (I0,) * X.shape[1]
        return PredictorPanel(X, order, getattr(self, "scale_", None))

    def fit(self, X, y):
        if self.method not in ("tal", "mle"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "tal" and str(self.criterion).upper() not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        X = check_array(X, dtype=float)
        y = check_array(y, ensure_2d=False, dtype=float)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if self.integration_order is not None and any(o not in (I0, I1) for o in self.integration_order):
            raise ValueError("integration_order entries must be 'I0' or 'I1'")
        self.__dict__.pop("scale_", None)  # a refit must not reuse old divisors
        if self.standardize:
            self.scale_ = PanelStandardizer().fit(X).scale_
        panel = self._panel(X)
        series = ExceedanceSeries(y, np.zeros_like(y))
        if self.method == "mle":
            fit = fit_mle(series, panel)
        else:
            fit = fit_two_step_almle(series, panel, self.criterion, n_k=self.n_lambda_k,
                                     n_sigma=self.n_lambda_sigma)
        self.fit_ = fit
        self.coef_ = fit.beta_hat
        self.active_k_ = fit.active_k
        self.active_sigma_ = fit.active_sigma
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """``(T, 2)`` array of the implied ``k_t`` and ``sigma_t``."""
        check_is_fitted(self, "coef_")
        path = param_path(self.coef_, self._panel(X))
        return np.column_stack([path.k, path.sigma])

    def predict_var(self, X, u, alpha, F_u=F_U_DEFAULT):
        """One-step VaR at level ``alpha`` given thresholds ``u`` (scalar or per row)."""
        ks = self.predict(X)
        return var_level(ks[:, 0], ks[:, 1], np.broadcast_to(u, ks.shape[0]), alpha, F_u)

    def score(self, X, y):
        """Average log-likelihood per observation."""
        check_is_fitted(self, "coef_")
        y = check_array(y, ensure_2d=False, dtype=float)
        obj = GpdLogLik(ExceedanceSeries(y, np.zeros_like(y)), self._panel(X), shape_guard=None)
        return float(obj.loglik(self.coef_.flatten()) / y.size)
