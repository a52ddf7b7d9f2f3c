"""Generalized Pareto primitives, coefficient containers and the parameter path.

The shape parameter lives in (0, 0.5) through a scaled logistic link and the
log-scale follows a first-order recursion driven by lagged predictors::

    logit(2 k_t)        = b1_0 + sum_j b1_j z_{j,t-1}
    log sigma_t         = b2_0 + sum_j b2_j z_{j,t-1} + b2_{p+1} log sigma_{t-1}

Row ``t`` of a :class:`PredictorPanel` always holds the predictor values that
drive observation ``t`` (i.e. the panel is already lagged).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .exceptions import DomainError, RecursionOverflowError

ETA_CLAMP = 35.0
#: |log sigma_t| above this signals a divergent recursion.
LOG_SIGMA_BOUND = 100.0

I0 = "I0"
I1 = "I1"


@dataclass(frozen=True)
class GpdParams:
    """Shape ``k`` in (0, 0.5) and scale ``sigma`` > 0 of a GPD."""

    k: float
    sigma: float

    def __post_init__(self):
        _check_params(self.k, self.sigma)


def _check_params(k, sigma):
    k = np.asarray(k, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(sigma))):
        raise DomainError("GPD parameters must be finite")
    if np.any(k <= 0.0) or np.any(k >= 0.5):
        raise DomainError("shape must satisfy 0 < k < 0.5")
    if np.any(sigma <= 0.0):
        raise DomainError("scale must be positive")
    return k, sigma


def _unpack(params, k, sigma):
    if params is not None:
        k, sigma = params.k, params.sigma
    return _check_params(k, sigma)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def gpd_cdf(y, params: GpdParams | None = None, *, k=None, sigma=None):
    """Distribution function ``1 - (1 + k y / sigma)^(-1/k)`` for ``y >= 0``."""
    k, sigma = _unpack(params, k, sigma)
    y = np.asarray(y, dtype=float)
    if np.any(np.isnan(y)) or np.any(y < 0):
        raise DomainError("GPD cdf requires y >= 0")
    out = -np.expm1(-np.log1p(k * y / sigma) / k)
    return _scalar_or_array(out)


def gpd_logpdf(y, params: GpdParams | None = None, *, k=None, sigma=None):
    """Log-density ``-log sigma - (1/k + 1) log(1 + k y / sigma)`` for ``y > 0``."""
    k, sigma = _unpack(params, k, sigma)
    y = np.asarray(y, dtype=float)
    if np.any(np.isnan(y)) or np.any(y <= 0):
        raise DomainError("GPD log-density requires y > 0")
    out = -np.log(sigma) - (1.0 / k + 1.0) * np.log1p(k * y / sigma)
    return _scalar_or_array(out)


def gpd_quantile(q, params: GpdParams | None = None, *, k=None, sigma=None):
    """Quantile ``(sigma/k) ((1-q)^(-k) - 1)`` for ``0 <= q < 1``."""
    k, sigma = _unpack(params, k, sigma)
    q = np.asarray(q, dtype=float)
    if np.any(np.isnan(q)) or np.any(q < 0) or np.any(q >= 1):
        raise DomainError("GPD quantile requires 0 <= q < 1")
    out = sigma / k * np.expm1(-k * np.log1p(-q))
    return _scalar_or_array(out)


def link_shape(eta):
    """Map a linear predictor to a shape in (0, 0.5) via ``0.5 / (1 + e^-eta)``.

    ``eta`` is clamped to [-35, 35] first, which keeps the result strictly
    inside the open interval in double precision.
    """
    eta = np.clip(np.asarray(eta, dtype=float), -ETA_CLAMP, ETA_CLAMP)
    return _scalar_or_array(0.5 / (1.0 + np.exp(-eta)))


def shape_logit(k):
    """Inverse of :func:`link_shape`: ``log(k / (0.5 - k))``."""
    k = np.asarray(k, dtype=float)
    return _scalar_or_array(np.log(k / (0.5 - k)))


@dataclass(frozen=True)
class CoefVector:
    """Shape block ``beta1`` (length p+1) and scale block ``beta2`` (length p+2).

    ``beta1 = [b1_0, b1_1..b1_p]``; ``beta2 = [b2_0, b2_1..b2_p, ar]``.
    The flat layout used by the likelihood and the optimizers is
    ``concat(beta1, beta2)`` of length ``2p + 3``.
    """

    beta1: np.ndarray
    beta2: np.ndarray

    def __post_init__(self):
        b1 = np.array(self.beta1, dtype=float).reshape(-1)
        b2 = np.array(self.beta2, dtype=float).reshape(-1)
        if b1.size < 1 or b2.size != b1.size + 1:
            raise ValueError(
                f"inconsistent block lengths: beta1 {b1.size}, beta2 {b2.size}"
            )
        if not (np.all(np.isfinite(b1)) and np.all(np.isfinite(b2))):
            raise ValueError("coefficients must be finite")
        if abs(b2[-1]) >= 1.0:
            raise ValueError("autoregressive coefficient must satisfy |ar| < 1")
        b1.setflags(write=False)
        b2.setflags(write=False)
        object.__setattr__(self, "beta1", b1)
        object.__setattr__(self, "beta2", b2)

    @property
    def p(self) -> int:
        return self.beta1.size - 1

    @property
    def ar(self) -> float:
        return float(self.beta2[-1])

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.beta1, self.beta2])

    @classmethod
    def from_flat(cls, x, p: int | None = None) -> "CoefVector":
        x = np.asarray(x, dtype=float).reshape(-1)
        if p is None:
            if (x.size - 3) % 2:
                raise ValueError(f"flat vector of length {x.size} is not 2p+3")
            p = (x.size - 3) // 2
        if x.size != 2 * p + 3:
            raise ValueError(f"expected length {2 * p + 3}, got {x.size}")
        return cls(x[: p + 1], x[p + 1 :])

    @classmethod
    def zeros(cls, p: int) -> "CoefVector":
        return cls(np.zeros(p + 1), np.zeros(p + 2))

    @property
    def shape_slopes(self) -> np.ndarray:
        return self.beta1[1:]

    @property
    def scale_slopes(self) -> np.ndarray:
        """Scale predictor slopes followed by the AR coefficient (length p+1)."""
        return self.beta2[1:]


def flat_index(p: int) -> dict:
    """Positions of the coefficient groups inside the flat ``2p+3`` vector."""
    return {
        "shape_intercept": 0,
        "shape_slopes": np.arange(1, p + 1),
        "scale_intercept": p + 1,
        "scale_slopes": np.arange(p + 2, 2 * p + 2),
        "ar": 2 * p + 2,
    }


def coefficient_names(predictor_names: Sequence[str]) -> list[str]:
    names = ["k:intercept"] + [f"k:{n}" for n in predictor_names]
    names += ["sigma:intercept"] + [f"sigma:{n}" for n in predictor_names]
    names.append("sigma:log_sigma_lag")
    return names


@dataclass(frozen=True)
class PredictorPanel:
    """T x p matrix of (lagged) predictors with per-column metadata.

    ``scale_factors`` are the divisors already applied to ``values``; a raw
    panel carries ones.
    """

    values: np.ndarray
    integration_order: tuple = ()
    scale_factors: np.ndarray | None = None
    names: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 1) if v.size else v.reshape(0, 0)
        if v.ndim != 2:
            raise ValueError("panel values must be a 2-D array")
        if np.any(np.isnan(v)) or not np.all(np.isfinite(v)):
            raise ValueError("panel values must be finite (no NaN)")
        T, p = v.shape
        order = tuple(self.integration_order) or (I0,) * p
        if len(order) != p or any(o not in (I0, I1) for o in order):
            raise ValueError("integration_order needs one 'I0'/'I1' flag per column")
        sf = np.ones(p) if self.scale_factors is None else np.array(self.scale_factors, dtype=float)
        if sf.shape != (p,) or np.any(sf <= 0) or not np.all(np.isfinite(sf)):
            raise ValueError("scale_factors must be positive, one per column")
        names = tuple(self.names) or tuple(f"z{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError("names must match the number of columns")
        v.setflags(write=False)
        sf.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "integration_order", order)
        object.__setattr__(self, "scale_factors", sf)
        object.__setattr__(self, "names", names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, T: int) -> "PredictorPanel":
        return cls(np.zeros((T, 0)))

    def rows(self, index) -> "PredictorPanel":
        return replace(self, values=self.values[index])


@dataclass(frozen=True)
class ParamPath:
    """Per-observation shape and scale implied by a coefficient vector."""

    k: np.ndarray
    sigma: np.ndarray
    log_sigma0: float
    eta: np.ndarray = field(repr=False, default=None)
    log_sigma: np.ndarray = field(repr=False, default=None)


def log_sigma_seed(beta2_intercept: float, ar: float) -> float:
    """Fixed point of the scale recursion with all predictors at zero."""
    return beta2_intercept / (1.0 - ar)


def _check_alignment(beta: CoefVector, panel: PredictorPanel):
    if beta.p != panel.p:
        raise ValueError(f"coefficients have p={beta.p} but panel has p={panel.p}")


def log_sigma_recursion(a: np.ndarray, ar: float, s0: float) -> np.ndarray:
    """``s_t = a_t + ar * s_{t-1}`` with ``s_0 = s0`` (returns s_1..s_T)."""
    if a.size == 0:
        return a.copy()
    if ar == 0.0:
        return a.copy()
    return lfilter([1.0], [1.0, -ar], a, zi=[ar * s0])[0]


def param_path(beta: CoefVector, panel: PredictorPanel, *, bound: float = LOG_SIGMA_BOUND) -> ParamPath:
    """Shape and scale paths for every row of ``panel``."""
    _check_alignment(beta, panel)
    Z = panel.values
    b1, b2 = beta.beta1, beta.beta2
    ar = float(b2[-1])
    if abs(ar) >= 1.0:
        raise DomainError("autoregressive coefficient must satisfy |ar| < 1")
    eta = b1[0] + Z @ b1[1:]
    a = b2[0] + Z @ b2[1:-1]
    s0 = log_sigma_seed(b2[0], ar)
    s = log_sigma_recursion(np.asarray(a, dtype=float), ar, s0)
    if s.size and (not np.all(np.isfinite(s)) or np.max(np.abs(s)) > bound):
        raise RecursionOverflowError(f"|log sigma_t| exceeded {bound}")
    k = np.asarray(link_shape(eta), dtype=float).reshape(-1)
    return ParamPath(k=k, sigma=np.exp(s), log_sigma0=s0, eta=eta, log_sigma=s)
