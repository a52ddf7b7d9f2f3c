"""Maximum likelihood and adaptive-lasso estimators of the dynamic GPD model.

All fits work on flat coefficient vectors ``[b1_0..b1_p, b2_0..b2_p, ar]``
and return a :class:`FitResult`.  Shape-predictor indices in active sets run
over ``0..p-1``; scale indices run over ``0..p`` with ``p`` standing for the
autoregressive term.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConvergenceError, DegenerateInputError, DomainError
from .gpd import CoefVector, PredictorPanel, coefficient_names, shape_logit
from .likelihood import ExceedanceSeries, GpdLogLik
from .optimize import BoxBounds, PenaltySpec, SolveReport, lambda_max, maximize_smooth, solve_penalized

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAMBDA_MIN = 1e-6
WEIGHT_EPS = 1e-8
N_LAMBDA_K = 50
N_LAMBDA_SIGMA = 30
CRITERIA = ("AIC", "HQ", "BIC")
DET_WARN = 1e-10


class LowExceedanceWarning(UserWarning):
    pass


class NearSingularWarning(UserWarning):
    pass


# -- small value types -----------------------------------------------------

@dataclass(frozen=True)
class TuningGrid:
    """Descending log-equispaced tuning values ending at ``1e-6``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size < 1 or np.any(v <= 0) or np.any(np.diff(v) >= 0):
            raise DomainError("grid values must be positive and strictly decreasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_nodes(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(self.values.tolist())


@dataclass(frozen=True)
class AdaptiveWeights:
    w_k: np.ndarray
    w_sigma: np.ndarray

    def __post_init__(self):
        w_k = np.array(self.w_k, dtype=float).reshape(-1)
        w_s = np.array(self.w_sigma, dtype=float).reshape(-1)
        if w_s.size != w_k.size + 1:
            raise ValueError("w_sigma must have one more entry than w_k (AR term)")
        for w in (w_k, w_s):
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "w_k", w_k)
        object.__setattr__(self, "w_sigma", w_s)

    @classmethod
    def uniform(cls, p: int) -> "AdaptiveWeights":
        return cls(np.ones(p), np.ones(p + 1))


@dataclass
class FitResult:
    """Estimated coefficients, supports and the tuning path that produced them."""

    beta_hat: CoefVector
    loglik: float
    T: int
    method: str
    ic_name: str | None = None
    ic_value: float | None = None
    lambda_chosen: tuple = (0.0, 0.0)
    reports: list = field(default_factory=list)
    path: list = field(default_factory=list)
    names: tuple = ()
    converged: bool = True
    warnings: list = field(default_factory=list)
    weights: AdaptiveWeights | None = None
    extra: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.beta_hat.p

    @property
    def active_k(self) -> np.ndarray:
        return np.flatnonzero(self.beta_hat.beta1[1:] != 0.0)

    @property
    def active_sigma(self) -> np.ndarray:
        return np.flatnonzero(self.beta_hat.beta2[1:] != 0.0)

    @property
    def n_active(self) -> int:
        return int(self.active_k.size + self.active_sigma.size)

    def recompute_ic(self, criterion: str | None = None, n_active: int | None = None) -> float:
        crit = criterion or self.ic_name
        n = self.n_active if n_active is None else n_active
        return ic_value(self.loglik, n, self.T, crit)

    def to_dict(self) -> dict:
        names = list(self.names) or [f"z{j + 1}" for j in range(self.p)]
        return {
            "schema_version": SCHEMA_VERSION,
            "method": self.method,
            "T": self.T,
            "predictors": names,
            "coefficient_names": coefficient_names(names),
            "beta1": self.beta_hat.beta1.tolist(),
            "beta2": self.beta_hat.beta2.tolist(),
            "active_k": self.active_k.tolist(),
            "active_sigma": self.active_sigma.tolist(),
            "loglik": self.loglik,
            "ic_name": self.ic_name,
            "ic_value": self.ic_value,
            "lambda_chosen": list(self.lambda_chosen),
            "converged": bool(self.converged),
            "warnings": list(self.warnings),
            "reports": [r.to_dict() if isinstance(r, SolveReport) else r for r in self.reports],
            "path": self.path,
            "weights": None if self.weights is None else {
                "w_k": self.weights.w_k.tolist(), "w_sigma": self.weights.w_sigma.tolist()},
            "extra": self.extra,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), allow_nan=True, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {d.get('schema_version')}")
        w = d.get("weights")
        return cls(
            beta_hat=CoefVector(d["beta1"], d["beta2"]),
            loglik=float(d["loglik"]),
            T=int(d["T"]),
            method=d["method"],
            ic_name=d.get("ic_name"),
            ic_value=d.get("ic_value"),
            lambda_chosen=tuple(d.get("lambda_chosen", (0.0, 0.0))),
            reports=list(d.get("reports", [])),
            path=list(d.get("path", [])),
            names=tuple(d.get("predictors", ())),
            converged=bool(d.get("converged", True)),
            warnings=list(d.get("warnings", [])),
            weights=None if w is None else AdaptiveWeights(w["w_k"], w["w_sigma"]),
            extra=dict(d.get("extra", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


# -- helpers -----------------------------------------------------------------

def _index(p):
    shape_slopes = np.arange(1, p + 1)
    scale_slopes = np.arange(p + 2, 2 * p + 3)  # includes the AR term
    return shape_slopes, scale_slopes


def _intercepts(p):
    return np.array([0, p + 1])


def _objective(series, panel):
    if not isinstance(series, ExceedanceSeries):
        raise TypeError("series must be an ExceedanceSeries")
    if not isinstance(panel, PredictorPanel):
        raise TypeError("panel must be a PredictorPanel")
    return GpdLogLik(series, panel)


def _check_count(series, p, warn_list):
    need = 10 * (2 * p + 3)
    n = series.exceed_count
    if n == 0:
        raise DegenerateInputError("no exceedances: the likelihood is flat")
    if n < need:
        msg = f"only {n} exceedances for {2 * p + 3} coefficients (recommended >= {need})"
        warnings.warn(msg, LowExceedanceWarning, stacklevel=3)
        warn_list.append(msg)


def static_start(series: ExceedanceSeries, p: int) -> np.ndarray:
    """Intercept-only starting point from the exceedance moments.

    Uses the method-of-moments GPD estimate clipped into the admissible shape
    range; the subsequent smooth solve refines it.
    """
    y = series.y[series.y > 0]
    x = np.zeros(2 * p + 3)
    if y.size < 2:
        return x
    m, v = float(np.mean(y)), float(np.var(y))
    k = 0.5 * (1.0 - m * m / v) if v > 0 else 0.1
    k = min(max(k, 0.02), STATIC_K_CAP)
    sigma = max(m * (1.0 - k), 1e-8)
    x[0] = shape_logit(k)
    x[p + 1] = math.log(sigma)
    return x


#: cap on the shape of the intercept-only start; heterogeneous data push the
#: static shape towards 0.5, where no slope direction is admissible
STATIC_K_CAP = 0.4


def _static_fit(obj, p, bounds):
    x0 = static_start(obj.series, p)
    hi = bounds.upper.copy()
    hi[0] = min(hi[0], float(shape_logit(STATIC_K_CAP)))
    capped = BoxBounds(bounds.lower, hi)
    return maximize_smooth(obj, capped.project(x0), capped, free=_intercepts(p))


# -- estimators ----------------------------------------------------------------

def fit_mle(series: ExceedanceSeries, panel: PredictorPanel, *, bounds: BoxBounds | None = None,
            start=None, max_iter: int = 2000) -> FitResult:
    """Full-model maximum likelihood from the intercept-only start."""
    p = panel.p
    warn_list: list = []
    _check_count(series, p, warn_list)
    obj = _objective(series, panel)
    bounds = bounds or BoxBounds.default(p)
    if start is None:
        x0, rep0 = _static_fit(obj, p, bounds)
        reports = [rep0]
    else:
        x0 = start.flatten() if isinstance(start, CoefVector) else np.asarray(start, dtype=float)
        reports = []
    x, rep = maximize_smooth(obj, x0, bounds, max_iter=max_iter)
    reports.append(rep)
    ll = rep.objective
    return FitResult(CoefVector.from_flat(x, p), ll, series.T, "mle", reports=reports,
                     names=panel.names, converged=rep.converged, warnings=warn_list)


def fit_partial_k_mle(series: ExceedanceSeries, panel: PredictorPanel, *,
                      bounds: BoxBounds | None = None) -> CoefVector:
    """MLE with every scale slope and the AR term pinned at zero."""
    p = panel.p
    _check_count(series, p, [])
    obj = _objective(series, panel)
    bounds = bounds or BoxBounds.default(p)
    x0, _ = _static_fit(obj, p, bounds)
    free = np.zeros(2 * p + 3, bool)
    free[: p + 2] = True
    x, rep = maximize_smooth(obj, x0, bounds, free=free)
    if not rep.converged:
        logger.warning("partial shape MLE did not converge: %s", rep.message)
    return CoefVector.from_flat(x, p)


def adaptive_weights(full_mle: CoefVector, partial_mle: CoefVector, eps: float = WEIGHT_EPS) -> AdaptiveWeights:
    """``w_k,i = 1/|b^k_1i * b_1i|`` and ``w_sigma,j = 1/|b_2j|`` with floored denominators."""
    if full_mle.p != partial_mle.p:
        raise ValueError("the two fits have different dimensions")
    dk = np.maximum(np.abs(partial_mle.beta1[1:] * full_mle.beta1[1:]), eps)
    ds = np.maximum(np.abs(full_mle.beta2[1:]), eps)
    return AdaptiveWeights(1.0 / dk, 1.0 / ds)


def make_grid(lam_max: float, n: int, lam_min: float = LAMBDA_MIN) -> TuningGrid:
    """``n`` log-equispaced values from ``lam_max`` down to ``lam_min``."""
    if not (np.isfinite(lam_max) and lam_max > lam_min) or n < 2:
        raise DomainError("need lam_max > 1e-6 and at least two nodes")
    hi, lo = math.log(lam_max), math.log(lam_min)
    step = (hi - lo) / (n - 1)
    v = np.exp(hi - step * np.arange(n))
    v[0], v[-1] = lam_max, lam_min
    return TuningGrid(v)


def ic_value(loglik: float, n_active: int, T: int, criterion: str) -> float:
    """``-2 loglik + pen * n_active`` for AIC, HQ or BIC."""
    if T < 2:
        raise DomainError("information criteria need T >= 2")
    crit = criterion.upper()
    if crit == "AIC":
        pen = 2.0
    elif crit == "HQ":
        pen = 2.0 * math.log(math.log(T))
    elif crit == "BIC":
        pen = math.log(T)
    else:
        raise ValueError(f"unknown criterion {criterion!r}")
    return -2.0 * loglik + pen * n_active


def _argmin_ic(nodes, criterion, T, count):
    """Index of the best converged node; ties go to the earlier (larger-lambda) node."""
    best, best_ic = None, np.inf
    for i, node in enumerate(nodes):
        if not node["converged"]:
            continue
        v = ic_value(node["loglik"], count(node), T, criterion)
        if v < best_ic:
            best, best_ic = i, v
    return best, best_ic


def _node(x, rep, lam_k, lam_s, p):
    b1 = x[1 : p + 1]
    b2 = x[p + 2 :]
    return {
        "lambda_k": float(lam_k),
        "lambda_sigma": float(lam_s),
        "loglik": float(rep.loglik),
        "n_active_k": int(np.count_nonzero(b1)),
        "n_active_sigma": int(np.count_nonzero(b2)),
        "converged": bool(rep.converged),
        "kkt": float(rep.kkt_violation),
        "iterations": int(rep.iterations),
    }


def _solve_node(obj, pen, start, bounds, free):
    return solve_penalized(obj, pen, start, bounds, free=free)


class SolveCache:
    """Memo of penalized solves keyed by stage and tuning values.

    Refitting the same data under another information criterion reuses the
    solves that the earlier fit already computed.
    """

    def __init__(self):
        self._store = {}

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        self._store[key] = value

    def __len__(self):
        return len(self._store)


def fit_almle(series: ExceedanceSeries, panel: PredictorPanel, weights: AdaptiveWeights,
              grid_k: TuningGrid, grid_sigma: TuningGrid, criterion: str = "BIC", *,
              bounds: BoxBounds | None = None) -> FitResult:
    """One-step adaptive lasso over the full ``grid_k x grid_sigma`` grid.

    For each shape value the scale values are swept from largest to smallest
    warm-starting each solve from the previous one.
    """
    p = panel.p
    warn_list: list = []
    _check_count(series, p, warn_list)
    obj = _objective(series, panel)
    bounds = bounds or BoxBounds.default(p)
    x_static, _ = _static_fit(obj, p, bounds)
    nodes, sols = [], []
    row_start = x_static
    for lk in grid_k:
        x = row_start
        for j, ls in enumerate(grid_sigma):
            pen = PenaltySpec(lk, ls, weights.w_k, weights.w_sigma)
            x, rep = _solve_node(obj, pen, x, bounds, None)
            if j == 0:
                row_start = x
            nodes.append(_node(x, rep, lk, ls, p))
            sols.append((x, rep))
    best, best_ic = _argmin_ic(nodes, criterion, series.T,
                               lambda n: n["n_active_k"] + n["n_active_sigma"])
    if best is None:
        raise ConvergenceError("no grid node converged")
    x, rep = sols[best]
    node = nodes[best]
    return FitResult(CoefVector.from_flat(x, p), node["loglik"], series.T, "almle", criterion.upper(),
                     best_ic, (node["lambda_k"], node["lambda_sigma"]), [rep], nodes, panel.names,
                     rep.converged, warn_list, weights)


def almle_grids(series: ExceedanceSeries, panel: PredictorPanel, weights: AdaptiveWeights, *,
                n_k: int = N_LAMBDA_K, n_sigma: int = N_LAMBDA_SIGMA, bounds: BoxBounds | None = None):
    """Shape and scale grids for :func:`fit_almle`, both topped at the intercept-only ``lambda_max``."""
    p = panel.p
    obj = _objective(series, panel)
    bounds = bounds or BoxBounds.default(p)
    x0, _ = _static_fit(obj, p, bounds)
    shape_slopes, scale_slopes = _index(p)
    lam_k, _ = lambda_max(obj, weights.w_k, shape_slopes, x0, bounds, refit=_intercepts(p))
    lam_s, _ = lambda_max(obj, weights.w_sigma, scale_slopes, x0, bounds, refit=_intercepts(p))
    return make_grid(max(lam_k, 10 * LAMBDA_MIN), n_k), make_grid(max(lam_s, 10 * LAMBDA_MIN), n_sigma)


@dataclass
class _TwoStepState:
    obj: GpdLogLik
    bounds: BoxBounds
    weights: AdaptiveWeights
    mle: FitResult
    grid_k: TuningGrid
    step1: list
    step1_x: list
    cache: SolveCache
    warn_list: list


def _prepare_two_step(series, panel, *, bounds=None, n_k=N_LAMBDA_K, n_sigma=N_LAMBDA_SIGMA,
                      mle: FitResult | None = None, cache: SolveCache | None = None):
    p = panel.p
    warn_list: list = []
    _check_count(series, p, warn_list)
    obj = _objective(series, panel)
    bounds = bounds or BoxBounds.default(p)
    cache = cache if cache is not None else SolveCache()
    if mle is None:
        mle = fit_mle(series, panel, bounds=bounds)
    partial = fit_partial_k_mle(series, panel, bounds=bounds)
    weights = adaptive_weights(mle.beta_hat, partial)
    shape_slopes, scale_slopes = _index(p)
    # Step 1: scale slopes and AR pinned at zero, shape penalized
    free1 = np.zeros(2 * p + 3, bool)
    free1[: p + 2] = True
    x_static = partial.flatten()
    x_static[shape_slopes] = 0.0
    lam_k, _ = lambda_max(obj, weights.w_k, shape_slopes, x_static, bounds,
                          refit=_intercepts(p))
    if not lam_k > LAMBDA_MIN:
        lam_k = 10 * LAMBDA_MIN
    grid_k = make_grid(lam_k, n_k)
    # The intercept-only point sits on the shape guard and is a KKT point
    # there for every lambda, so a sweep started from it never leaves.  The
    # path is traced from the small-lambda end instead, warm-started at the
    # partial MLE, and stored in grid order.
    nodes, xs = [None] * n_k, [None] * n_k
    x = partial.flatten()
    for i in range(n_k - 1, -1, -1):
        lk = float(grid_k.values[i])
        key = ("step1", lk)
        hit = cache.get(key)
        if hit is None:
            pen = PenaltySpec(lk, 0.0, weights.w_k, weights.w_sigma)
            hit = _solve_node(obj, pen, x, bounds, free1)
            cache.put(key, hit)
        x, rep = hit
        nodes[i] = _node(x, rep, lk, 0.0, p)
        xs[i] = (x, rep)
    return _TwoStepState(obj, bounds, weights, mle, grid_k, nodes, xs, cache, warn_list)


def _finish_two_step(state: _TwoStepState, series, panel, criterion, n_sigma=N_LAMBDA_SIGMA):
    p = panel.p
    T = series.T
    obj, bounds, weights = state.obj, state.bounds, state.weights
    shape_slopes, scale_slopes = _index(p)
    i1, ic1 = _argmin_ic(state.step1, criterion, T, lambda n: n["n_active_k"])
    if i1 is None:
        raise ConvergenceError("Step 1 produced no converged node; Step 2 refused")
    x1, rep1 = state.step1_x[i1]
    lam_k = state.step1[i1]["lambda_k"]
    # Step 2: excluded shape predictors stay pinned at zero
    free2 = np.ones(2 * p + 3, bool)
    free2[shape_slopes[x1[shape_slopes] == 0.0]] = False
    lam_s, _ = lambda_max(obj, weights.w_sigma, scale_slopes, x1, bounds)
    if not lam_s > LAMBDA_MIN:
        lam_s = 10 * LAMBDA_MIN
    grid_s = make_grid(lam_s, n_sigma)
    nodes, xs = [], []
    x = x1
    for ls in grid_s:
        key = ("step2", lam_k, ls)
        hit = state.cache.get(key)
        if hit is None:
            pen = PenaltySpec(lam_k, ls, weights.w_k, weights.w_sigma)
            x, rep = _solve_node(obj, pen, x, bounds, free2)
            hit = (x, rep)
            state.cache.put(key, hit)
        x, rep = hit
        nodes.append(_node(x, rep, lam_k, ls, p))
        xs.append((x, rep))
    i2, ic2 = _argmin_ic(nodes, criterion, T, lambda n: n["n_active_k"] + n["n_active_sigma"])
    if i2 is None:
        raise ConvergenceError("Step 2 produced no converged node")
    x2, rep2 = xs[i2]
    node = nodes[i2]
    path = [dict(n, step=1) for n in state.step1] + [dict(n, step=2) for n in nodes]
    extra = {"step1_lambda_k": lam_k, "step1_ic": ic1,
             "step1_active_k": np.flatnonzero(x1[shape_slopes]).tolist(),
             "lambda_k_max": float(state.grid_k.values[0]), "lambda_sigma_max": float(grid_s.values[0])}
    return FitResult(CoefVector.from_flat(x2, p), node["loglik"], T, "two_step_almle", criterion.upper(),
                     ic2, (lam_k, node["lambda_sigma"]), [rep1, rep2], path, panel.names,
                     bool(rep2.converged), list(state.warn_list), weights, extra)


def fit_two_step_almle(series: ExceedanceSeries, panel: PredictorPanel, criterion: str = "BIC", *,
                       bounds: BoxBounds | None = None, n_k: int = N_LAMBDA_K,
                       n_sigma: int = N_LAMBDA_SIGMA, mle: FitResult | None = None,
                       cache: SolveCache | None = None) -> FitResult:
    """Two-step adaptive lasso: shape selection first, then the scale block.

    Step 1 pins the scale slopes (and AR) at zero and selects the shape
    penalty by the criterion counting shape actives only.  Step 2 keeps that
    penalty, pins the excluded shape predictors and selects the scale
    penalty counting both blocks.
    """
    state = _prepare_two_step(series, panel, bounds=bounds, n_k=n_k, mle=mle, cache=cache)
    return _finish_two_step(state, series, panel, criterion, n_sigma)


def fit_two_step_all(series, panel, criteria=CRITERIA, **kw) -> dict:
    """Two-step fits for several criteria sharing the MLE, weights and solves."""
    n_sigma = kw.pop("n_sigma", N_LAMBDA_SIGMA)
    state = _prepare_two_step(series, panel, **kw)
    out = {c.upper(): _finish_two_step(state, series, panel, c, n_sigma) for c in criteria}
    return out, state.mle


# -- diagnostics ------------------------------------------------------------------

def det_condition_diagnostic(beta: CoefVector, series: ExceedanceSeries, panel: PredictorPanel,
                             *, warn: bool = True) -> dict:
    """Determinant of the negative Hessian over the intercepts and active slopes.

    Besides the raw determinant, the determinant of the unit-diagonal
    rescaled block is reported; a value below ``1e-10 * d`` (``d`` the block
    size) flags near-singularity.
    """
    p = beta.p
    x = beta.flatten()
    idx = np.concatenate([[0], 1 + np.flatnonzero(beta.beta1[1:]), [p + 1],
                          p + 2 + np.flatnonzero(beta.beta2[1:])])
    H = GpdLogLik(series, panel, shape_guard=None).hessian(x)
    A = -H[np.ix_(idx, idx)]
    sign, logdet = np.linalg.slogdet(A)
    det = float(sign * math.exp(logdet)) if sign != 0 else 0.0
    d = np.sqrt(np.abs(np.diag(A)))
    d[d == 0] = 1.0
    C = A / np.outer(d, d)
    ndet = float(np.linalg.det(C))
    near = abs(ndet) < DET_WARN * idx.size
    if near and warn:
        warnings.warn("Hessian block is near singular on the active set", NearSingularWarning, stacklevel=2)
    return {"det": det, "abs_det": abs(det), "normalized_det": ndet, "dimension": int(idx.size),
            "index": idx.tolist(), "near_singular": bool(near)}


def standardize_panel(raw: PredictorPanel) -> PredictorPanel:
    """Divide every column by its empirical (population) standard deviation."""
    if raw.p == 0:
        return raw
    sd = np.std(raw.values, axis=0)
    bad = ~(sd > 0) | ~np.isfinite(sd)
    if np.any(bad):
        cols = [raw.names[j] for j in np.flatnonzero(bad)]
        raise DegenerateInputError(f"zero-variance predictors cannot be standardized: {cols}")
    scale = sd * raw.scale_factors
    return PredictorPanel(raw.values / sd, raw.integration_order, scale, raw.names)


def wald_selection(fit: FitResult, series: ExceedanceSeries, panel: PredictorPanel, level: float = 0.05):
    """t-test selection at the MLE using the inverse observed information.

    Returns ``(active_k, active_sigma, ok)``.  If the negative Hessian is not
    positive definite nothing is selected and ``ok`` is False.
    """
    from scipy.stats import norm

    p = fit.p
    H = GpdLogLik(series, panel, shape_guard=None).hessian(fit.beta_hat.flatten())
    try:
        L = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        return np.array([], int), np.array([], int), False
    Linv = np.linalg.inv(L)
    se = np.sqrt(np.sum(Linv ** 2, axis=0))
    t = fit.beta_hat.flatten() / se
    crit = norm.ppf(1.0 - level / 2.0)
    shape_slopes, scale_slopes = _index(p)
    return (np.flatnonzero(np.abs(t[shape_slopes]) > crit),
            np.flatnonzero(np.abs(t[scale_slopes]) > crit), True)
