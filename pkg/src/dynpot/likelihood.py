"""Censored GPD log-likelihood with analytic score and Hessian.

Only exceedances (``y_t > 0``) contribute to the likelihood, but the scale
recursion runs over every row, so derivatives with respect to the scale
block flow backwards through ``log sigma_{t-1}``.  The score uses the adjoint
of the recursion (exact, O(T p)); :func:`score_truncated` evaluates the same
quantity through the explicit geometric power sum and serves as a second
route in tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .exceptions import DomainError, RecursionOverflowError
from .gpd import ETA_CLAMP, LOG_SIGMA_BOUND, CoefVector, PredictorPanel, log_sigma_recursion

#: iterates whose implied max_t k_t exceeds this are treated as inadmissible
SHAPE_GUARD = 0.499


@dataclass(frozen=True)
class ExceedanceSeries:
    """Censored excesses ``y_t = max(l_t - u_t, 0)`` and their thresholds."""

    y: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        u = np.broadcast_to(np.array(self.u, dtype=float), y.shape).copy()
        if np.any(~np.isfinite(y)) or np.any(y < 0):
            raise DomainError("excesses must be finite and non-negative")
        if np.any(~np.isfinite(u)):
            raise DomainError("thresholds must be finite")
        y.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)

    @property
    def T(self) -> int:
        return self.y.size

    @property
    def exceed_mask(self) -> np.ndarray:
        return self.y > 0

    @property
    def exceed_count(self) -> int:
        return int(np.count_nonzero(self.y > 0))

    @classmethod
    def from_losses(cls, losses, u) -> "ExceedanceSeries":
        losses = np.asarray(losses, dtype=float)
        u = np.broadcast_to(np.asarray(u, dtype=float), losses.shape)
        return cls(np.maximum(losses - u, 0.0), u)

    def rows(self, index) -> "ExceedanceSeries":
        return ExceedanceSeries(self.y[index], self.u[index])


def _pointwise(k, s, y, order):
    """Per-exceedance log-density and its derivatives in (eta, log sigma)."""
    sigma = np.exp(s)
    r = y / sigma
    w = k * r
    if np.any(1.0 + w <= 0):  # impossible for k > 0, y >= 0
        raise DomainError("1 + k y / sigma must be positive")
    A = np.log1p(w)
    inv1w = 1.0 / (1.0 + w)
    ll = -s - (1.0 / k + 1.0) * A
    if order == 0:
        return ll, None
    dk = k * (1.0 - 2.0 * k)  # dk / deta
    B = A - (1.0 + k) * w * inv1w
    l_k = B / k**2
    l_eta = l_k * dk
    l_s = (w / k - 1.0) * inv1w
    if order == 1:
        return ll, (l_eta, l_s)
    dB_dk = r * inv1w - w * inv1w - (1.0 + k) * r * inv1w**2
    l_kk = dB_dk / k**2 - 2.0 * B / k**3
    dB_ds = -w * inv1w + (1.0 + k) * w * inv1w**2
    l_ks = dB_ds / k**2
    l_ss = -(1.0 + k) / k * w * inv1w**2
    d2k = dk * (1.0 - 4.0 * k)
    l_ee = l_kk * dk**2 + l_k * d2k
    l_es = l_ks * dk
    return ll, (l_eta, l_s, l_ee, l_es, l_ss)


class GpdLogLik:
    """Log-likelihood of an exceedance series as a function of flat coefficients.

    Design matrices are built once, which makes repeated evaluations inside
    the optimizers cheap.  Use :meth:`__call__` for ``(loglik, score)``.
    """

    def __init__(self, series: ExceedanceSeries, panel: PredictorPanel, *,
                 shape_guard: float | None = SHAPE_GUARD, bound: float = LOG_SIGMA_BOUND):
        if series.T != panel.T:
            raise ValueError(f"series has T={series.T} but panel has T={panel.T}")
        self.series = series
        self.panel = panel
        self.p = panel.p
        self.T = series.T
        self.n_params = 2 * self.p + 3
        self.shape_guard = shape_guard
        self.bound = bound
        self.mask = series.exceed_mask
        self.idx = np.flatnonzero(self.mask)
        self.y_exc = series.y[self.idx]
        Z = panel.values
        self.X_full = np.column_stack([np.ones(self.T), Z])
        self.X_exc = self.X_full[self.idx]
        self.n_evals = 0
        self._guard = None

    # -- internals ---------------------------------------------------------
    def _split(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} coefficients, got {x.shape}")
        p = self.p
        return x[: p + 1], x[p + 1 : 2 * p + 2], float(x[2 * p + 2])

    def _path(self, x):
        b1, b2, ar = self._split(x)
        if abs(ar) >= 1.0:
            raise DomainError("autoregressive coefficient must satisfy |ar| < 1")
        s0 = b2[0] / (1.0 - ar)
        a = self.X_full @ b2
        s = log_sigma_recursion(a, ar, s0)
        if s.size and (not np.all(np.isfinite(s)) or np.max(np.abs(s)) > self.bound):
            raise RecursionOverflowError(f"|log sigma_t| exceeded {self.bound}")
        eta = np.clip(self.X_exc @ b1, -ETA_CLAMP, ETA_CLAMP)
        k = 0.5 / (1.0 + np.exp(-eta))
        return b1, b2, ar, s0, s, k

    def linear_guard(self):
        """The shape guard as linear rows ``[1, z_t] @ b1 <= eta_max`` for the optimizers."""
        if self.shape_guard is None or not self.T:
            return None
        if self._guard is None:
            from .optimize import LinearGuard

            # a hair inside the rejection level so boundary points stay admissible
            eta_max = float(np.log(self.shape_guard / (0.5 - self.shape_guard))) - 1e-9
            self._guard = LinearGuard(self.X_full, np.full(self.T, eta_max), np.arange(self.p + 1))
        return self._guard

    def shape_max(self, x) -> float:
        """Largest implied shape over all rows (not only exceedances)."""
        b1 = self._split(x)[0]
        if not self.T:
            return 0.25
        # the link is monotone, so only the largest linear predictor matters
        eta = min(float(np.max(self.X_full @ b1)), ETA_CLAMP)
        return 0.5 / (1.0 + np.exp(-eta))

    def admissible(self, x) -> bool:
        b1, b2, ar = self._split(x)
        if not np.all(np.isfinite(x)) or abs(ar) >= 1.0:
            return False
        if self.shape_guard is not None and self.shape_max(x) > self.shape_guard:
            return False
        try:
            self._path(x)
        except (RecursionOverflowError, FloatingPointError):
            return False
        return True

    # -- public evaluations ------------------------------------------------
    def loglik(self, x) -> float:
        self.n_evals += 1
        _, _, _, _, s, k = self._path(x)
        ll, _ = _pointwise(k, s[self.idx], self.y_exc, 0)
        return float(np.sum(ll))

    def loglik_and_score(self, x):
        self.n_evals += 1
        b1, b2, ar, s0, s, k = self._path(x)
        ll, (l_eta, l_s) = _pointwise(k, s[self.idx], self.y_exc, 1)
        g = np.empty(self.n_params)
        p = self.p
        g[: p + 1] = self.X_exc.T @ l_eta
        # adjoint of s_t = a_t + ar s_{t-1}: lam_t = l_s,t + ar lam_{t+1}
        gs = np.zeros(self.T)
        gs[self.idx] = l_s
        lam = np.ascontiguousarray(lfilter([1.0], [1.0, -ar], gs[::-1])[::-1]) if ar != 0.0 else gs
        g[p + 1 : 2 * p + 2] = self.X_full.T @ lam
        s_prev = np.concatenate([[s0], s[:-1]]) if self.T else s
        g_ar = float(lam @ s_prev) if self.T else 0.0
        lam1 = lam[0] if self.T else 0.0
        # the seed s0 = b2_0 / (1 - ar) depends on both the intercept and ar
        g[p + 1] += ar * lam1 / (1.0 - ar)
        g_ar += ar * lam1 * b2[0] / (1.0 - ar) ** 2
        g[2 * p + 2] = g_ar
        return float(np.sum(ll)), g

    def __call__(self, x):
        """``(loglik, score)``; ``(-inf, nan)`` for inadmissible iterates."""
        x = np.asarray(x, dtype=float)
        if self.shape_guard is not None and self.shape_max(x) > self.shape_guard:
            return -np.inf, np.full(self.n_params, np.nan)
        try:
            return self.loglik_and_score(x)
        except (RecursionOverflowError, DomainError):
            return -np.inf, np.full(self.n_params, np.nan)

    def scale_jacobian(self, x):
        """``D[t, :] = d log sigma_t / d(b2_0, b2_1..b2_p, ar)`` for every row."""
        b1, b2, ar, s0, s, _ = self._path(x)
        p = self.p
        s_prev = np.concatenate([[s0], s[:-1]])
        inputs = np.column_stack([self.X_full, s_prev])
        d0 = np.zeros(p + 2)
        d0[0] = 1.0 / (1.0 - ar)
        d0[-1] = b2[0] / (1.0 - ar) ** 2
        if ar == 0.0:
            D = inputs.copy()
        else:
            D = lfilter([1.0], [1.0, -ar], inputs, axis=0, zi=(ar * d0)[None, :])[0]
        return D, d0, s_prev

    def hessian(self, x) -> np.ndarray:
        b1, b2, ar, s0, s, k = self._path(x)
        p = self.p
        _, (l_eta, l_s, l_ee, l_es, l_ss) = _pointwise(k, s[self.idx], self.y_exc, 2)
        D, d0, _ = self.scale_jacobian(x)
        # row ar of d^2 s_t: r_t = ar r_{t-1} + D_{t-1} + e_ar D_{t-1, ar}
        D_prev = np.vstack([d0, D[:-1]])
        r_in = D_prev.copy()
        r_in[:, -1] += D_prev[:, -1]
        r0 = np.zeros(p + 2)
        r0[0] = 1.0 / (1.0 - ar) ** 2
        r0[-1] = 2.0 * b2[0] / (1.0 - ar) ** 3
        if ar == 0.0:
            Rt = r_in
        else:
            Rt = lfilter([1.0], [1.0, -ar], r_in, axis=0, zi=(ar * r0)[None, :])[0]
        De = D[self.idx]
        X1 = self.X_exc
        H = np.empty((self.n_params, self.n_params))
        H11 = X1.T @ (l_ee[:, None] * X1)
        H12 = X1.T @ (l_es[:, None] * De)
        H22 = De.T @ (l_ss[:, None] * De)
        R = Rt[self.idx].T @ l_s
        H22[-1, :] += R
        H22[:, -1] += R
        H22[-1, -1] -= R[-1]
        H[: p + 1, : p + 1] = H11
        H[: p + 1, p + 1 :] = H12
        H[p + 1 :, : p + 1] = H12.T
        H[p + 1 :, p + 1 :] = H22
        return 0.5 * (H + H.T)

    def score_truncated(self, x, tol: float = 1e-14) -> np.ndarray:
        """Score via the explicit sum ``sum_i ar^i (...)_{t-i}``, cut where |ar|^i < tol."""
        b1, b2, ar, s0, s, k = self._path(x)
        p = self.p
        _, (l_eta, l_s) = _pointwise(k, s[self.idx], self.y_exc, 1)
        g = np.empty(self.n_params)
        g[: p + 1] = self.X_exc.T @ l_eta
        s_prev = np.concatenate([[s0], s[:-1]])
        inputs = np.column_stack([self.X_full, s_prev])
        if ar == 0.0:
            n_terms = 1
        else:
            n_terms = max(1, int(np.ceil(np.log(tol) / np.log(abs(ar)))))
        powers = ar ** np.arange(n_terms)
        d0 = np.zeros(p + 2)
        d0[0] = 1.0 / (1.0 - ar)
        d0[-1] = b2[0] / (1.0 - ar) ** 2
        D = np.zeros_like(inputs)
        for i, c in enumerate(powers):
            if i >= self.T:
                break
            D[i:] += c * inputs[: self.T - i]
        # seed contribution ar^t d s0 for t < n_terms (t is 1-based)
        t1 = np.arange(1, min(n_terms, self.T) + 1)
        D[t1 - 1] += (ar ** t1)[:, None] * d0[None, :]
        g[p + 1 :] = D[self.idx].T @ l_s
        return g


# -- functional API --------------------------------------------------------
def _flat(beta):
    return beta.flatten() if isinstance(beta, CoefVector) else np.asarray(beta, dtype=float)


def loglik(beta, series: ExceedanceSeries, panel: PredictorPanel) -> float:
    """Censored log-likelihood; zero for a fully censored series."""
    return GpdLogLik(series, panel, shape_guard=None).loglik(_flat(beta))


def score(beta, series: ExceedanceSeries, panel: PredictorPanel) -> np.ndarray:
    """Gradient of :func:`loglik` ordered (b1_0..b1_p, b2_0..b2_p, ar)."""
    return GpdLogLik(series, panel, shape_guard=None).loglik_and_score(_flat(beta))[1]


def score_truncated(beta, series, panel, tol: float = 1e-14) -> np.ndarray:
    return GpdLogLik(series, panel, shape_guard=None).score_truncated(_flat(beta), tol)


def hessian(beta, series: ExceedanceSeries, panel: PredictorPanel) -> np.ndarray:
    """Symmetric matrix of second derivatives of :func:`loglik`."""
    return GpdLogLik(series, panel, shape_guard=None).hessian(_flat(beta))


def fd_steps(x, rel: float = 1e-5) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def central_difference(f, x, step=None) -> np.ndarray:
    """Central differences of a scalar or vector function ``f`` at ``x``.

    For vector-valued ``f`` the result has shape ``(len(f(x)), len(x))``.
    """
    x = np.asarray(x, dtype=float)
    h = fd_steps(x) if step is None else np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


def fd_gradient(beta, series=None, panel=None, step=None, *, func=None) -> np.ndarray:
    """Central finite-difference gradient of the log-likelihood.

    ``func`` replaces the log-likelihood by an arbitrary scalar function, which
    is how the polynomial-exactness checks hook in.
    """
    x = _flat(beta)
    if func is None:
        obj = GpdLogLik(series, panel, shape_guard=None)
        func = obj.loglik
    return central_difference(func, x, step)


def fd_hessian(beta, series, panel, step=None) -> np.ndarray:
    """Central differences of the analytic score."""
    obj = GpdLogLik(series, panel, shape_guard=None)
    H = central_difference(lambda z: obj.loglik_and_score(z)[1], _flat(beta), step)
    return 0.5 * (H + H.T)
