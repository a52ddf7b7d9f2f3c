"""One-step-ahead VaR from a fitted model, coverage rates and the K-S PIT test.

Given the threshold ``u_t``, the probability ``F_u`` of a loss at or below
it and the GPD parameters of the excess, the VaR at level ``alpha > F_u`` is::

    VaR_t(alpha) = sigma_t / k_t * ((1 - (alpha - F_u) / (1 - F_u))^(-k_t) - 1) + u_t

Exceedances are checked through their probability integral transform
``G(y_t; k_t, sigma_t)``, which is standard uniform under a correct model.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError
from .gpd import CoefVector, PredictorPanel, param_path

F_U_DEFAULT = 0.90
ALPHAS = (0.90, 0.91, 0.92, 0.93, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99, 0.999, 0.9999)
KS_TERMS = 100
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class VarForecast:
    t: np.ndarray
    alpha: float
    var: np.ndarray
    u: np.ndarray
    k: np.ndarray
    sigma: np.ndarray


def _as_beta(beta):
    if isinstance(beta, CoefVector):
        return beta
    hat = getattr(beta, "beta_hat", None)
    if isinstance(hat, CoefVector):
        return hat
    return CoefVector.from_flat(beta)


def var_level(k, sigma, u, alpha, F_u=F_U_DEFAULT):
    """The VaR formula applied elementwise."""
    k, sigma, u, F_u = (np.asarray(a, dtype=float) for a in (k, sigma, u, F_u))
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    if np.any(alpha < F_u) or np.any((F_u <= 0) | (F_u >= 1)):
        raise DomainError("alpha must not fall below the threshold probability F_u")
    q = (alpha - F_u) / (1.0 - F_u)
    out = sigma / k * np.expm1(-k * np.log1p(-q)) + u
    return float(out) if out.ndim == 0 else out


def var_forecast(beta, panel: PredictorPanel, u, alpha: float, F_u=F_U_DEFAULT, rows=None) -> VarForecast:
    """VaR for every row of ``panel`` (or the ``rows`` selected).

    Row ``t`` of the panel holds the predictors observed at ``t-1``; the
    scale recursion is run over the full panel so the out-of-sample rows
    inherit ``sigma_{t-1}`` from the rows before them.
    """
    beta = _as_beta(beta)
    path = param_path(beta, panel)
    u = np.broadcast_to(np.asarray(u, dtype=float), (panel.T,))
    F_u = np.broadcast_to(np.asarray(F_u, dtype=float), (panel.T,))
    idx = np.arange(panel.T) if rows is None else np.asarray(rows)
    if np.any(alpha < F_u[idx]):
        raise DomainError(f"alpha={alpha} falls below the threshold probability")
    var = var_level(path.k[idx], path.sigma[idx], u[idx], alpha, F_u[idx])
    return VarForecast(idx, float(alpha), np.atleast_1d(var), u[idx].copy(), path.k[idx], path.sigma[idx])


def coverage_rate(losses, var) -> float:
    """Share of losses at or below their VaR."""
    losses = np.asarray(losses, dtype=float).reshape(-1)
    var = np.asarray(var, dtype=float).reshape(-1)
    if losses.shape != var.shape:
        raise ValueError(f"length mismatch: {losses.size} losses, {var.size} VaR values")
    if not losses.size:
        raise ValueError("empty sample")
    return float(np.mean(losses <= var))


def pit(y, k, sigma) -> np.ndarray:
    """GPD distribution function of each excess under its own parameters."""
    y, k, sigma = (np.asarray(a, dtype=float) for a in (y, k, sigma))
    return -np.expm1(-np.log1p(k * y / sigma) / k)


def kolmogorov_sf(x) -> float:
    """``P(K > x)`` for the Kolmogorov limit distribution.

    For ``x >= 1`` the alternating series ``2 sum (-1)^(j-1) exp(-2 j^2 x^2)``
    converges immediately; below 1 the equivalent Jacobi theta form
    ``1 - sqrt(2 pi)/x sum exp(-(2j-1)^2 pi^2 / (8 x^2))`` is used instead.
    Both are truncated at 100 terms.
    """
    x = float(x)
    if x <= 0.0:
        return 1.0
    j = np.arange(1, KS_TERMS + 1, dtype=float)
    if x >= 1.0:
        terms = np.exp(-2.0 * j * j * x * x)
        s = 2.0 * np.sum(terms * np.where(j % 2 == 1, 1.0, -1.0))
    else:
        cdf = math.sqrt(2.0 * math.pi) / x * np.sum(np.exp(-(2.0 * j - 1.0) ** 2 * math.pi ** 2 / (8.0 * x * x)))
        s = 1.0 - cdf
    return float(min(max(s, 0.0), 1.0))


def ks_uniform_test(values):
    """One-sample K-S test against U(0, 1): ``(D, p_value)``.

    ``D = sup |F_n - F|`` with the asymptotic p-value
    ``P(K > sqrt(n) D)``.
    """
    x = np.sort(np.asarray(values, dtype=float).reshape(-1))
    n = x.size
    if n < 10:
        raise DomainError("the K-S test needs at least 10 values")
    if np.any(~np.isfinite(x)) or x[0] < 0.0 or x[-1] > 1.0:
        raise DomainError("PIT values must lie in [0, 1]")
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
    return d, kolmogorov_sf(math.sqrt(n) * d)


@dataclass
class BacktestReport:
    coverage: dict
    ks_statistic: float
    ks_pvalue: float
    n_out: int
    n_exceed: int
    exceed_rate: float
    F_u: float | None
    pit: np.ndarray = field(repr=False, default=None)
    label: str = "series"

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "label": self.label,
                "coverage": {format(a, "g"): c for a, c in self.coverage.items()},
                "ks_statistic": self.ks_statistic, "ks_pvalue": self.ks_pvalue,
                "n_out": self.n_out, "n_exceed": self.n_exceed, "exceed_rate": self.exceed_rate,
                "F_u": self.F_u, "pit": None if self.pit is None else self.pit.tolist()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d) -> "BacktestReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError("unsupported backtest schema version")
        return cls({float(a): c for a, c in d["coverage"].items()}, d["ks_statistic"], d["ks_pvalue"],
                   d["n_out"], d["n_exceed"], d["exceed_rate"], d["F_u"],
                   None if d.get("pit") is None else np.array(d["pit"]), d.get("label", "series"))

    def write_csv(self, path) -> None:
        """One row in the layout of a coverage table: label, one column per alpha, K-S p-value."""
        alphas = list(self.coverage)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", *[format(a, "g") for a in alphas], "ks_pvalue"])
            w.writerow([self.label, *[format(self.coverage[a], ".17g") for a in alphas],
                        format(self.ks_pvalue, ".17g")])


def backtest(beta, panel: PredictorPanel, losses, u, *, split: float = 0.9, n_in: int | None = None,
             alphas=ALPHAS, F_u=F_U_DEFAULT, label: str = "series") -> BacktestReport:
    """Out-of-sample coverage at each ``alpha`` and the K-S test on the exceedance PIT.

    The first ``n_in`` rows (default ``floor(split * T)``) are in-sample.
    ``F_u`` may be a scalar or one probability per row; ``u`` must have
    been built causally (each ``u_t`` from losses before ``t``).
    """
    beta = _as_beta(beta)
    losses = np.asarray(losses, dtype=float).reshape(-1)
    T = panel.T
    if losses.size != T:
        raise ValueError("losses and panel rows differ in length")
    u = np.broadcast_to(np.asarray(u, dtype=float), (T,))
    F_arr = np.broadcast_to(np.asarray(F_u, dtype=float), (T,))
    if n_in is None:
        if not 0.0 < split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        n_in = int(math.floor(split * T))
    if not 0 <= n_in < T:
        raise ValueError("the out-of-sample period is empty")
    alphas = tuple(float(a) for a in alphas)
    if any(np.any(a < F_arr) for a in alphas):
        raise DomainError("every alpha must be at least the threshold probability")
    path = param_path(beta, panel)
    rows = np.arange(n_in, T)
    cov = {}
    for a in alphas:
        var = var_level(path.k[rows], path.sigma[rows], u[rows], a, F_arr[rows])
        cov[a] = coverage_rate(losses[rows], var)
    y = losses[rows] - u[rows]
    ex = y > 0
    z = pit(y[ex], path.k[rows][ex], path.sigma[rows][ex])
    if z.size >= 10:
        d, pv = ks_uniform_test(z)
    else:
        d, pv = float("nan"), float("nan")
    f_scalar = float(F_arr[0]) if np.all(F_arr == F_arr[0]) else None
    return BacktestReport(cov, d, pv, int(rows.size), int(np.count_nonzero(ex)),
                          float(np.mean(ex)), f_scalar, z, label)
