"""Monte Carlo data generating processes and the study metrics.

Losses are drawn from a Student-t body glued to a GPD tail above a fixed
threshold ``u``.  With ``F = F_{t(1/k_t)}`` the t distribution function and
``tau_t`` uniform::

    l_t = F^{-1}(tau_t)                                   if tau_t <= F(u)
    l_t = u + G^{-1}((tau_t - F(u)) / (1 - F(u)); k_t, sigma_t)   otherwise

where ``G`` is the GPD.  The shape and scale follow the model recursion with
the lagged-loss predictor ``log(|l_{t-1}| + 1 - r_m)`` in first position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr, stdtrit

from .exceptions import DomainError
from .gpd import I0, I1, CoefVector, PredictorPanel, link_shape, log_sigma_seed
from .likelihood import ExceedanceSeries

N_Z = 14
#: threshold of the presets, the 0.8 quantile of a t(3)
U_T3 = float(stdtrit(3.0, 0.8))
R_M = 0.05


@dataclass(frozen=True)
class DgpSpec:
    """True coefficients and predictor dynamics of a simulation design.

    ``beta1`` (16 entries) and ``beta2`` (17 entries) use the model layout:
    intercept, lagged loss, ``z_1..z_14`` and, for the scale block, the AR
    term last.  Entries flagged in ``local1``/``local2`` are local-to-zero:
    the stored number ``c`` stands for ``c / sqrt(T)``.
    """

    phi: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    local1: np.ndarray = None
    local2: np.ndarray = None
    u: float = U_T3
    r_m: float = R_M
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if not np.all(np.isin(phi, (0.0, 1.0))):
            raise ValueError("phi entries must be 0 or 1")
        b1 = np.array(self.beta1, dtype=float)
        b2 = np.array(self.beta2, dtype=float)
        p = phi.size + 1
        if b1.size != p + 1 or b2.size != p + 2:
            raise ValueError(f"expected {p + 1} shape and {p + 2} scale coefficients")
        l1 = np.zeros(b1.size, bool) if self.local1 is None else np.array(self.local1, dtype=bool)
        l2 = np.zeros(b2.size, bool) if self.local2 is None else np.array(self.local2, dtype=bool)
        if l1.shape != b1.shape or l2.shape != b2.shape:
            raise ValueError("local-to-zero masks must match the coefficient blocks")
        if not math.isfinite(self.u):
            raise ValueError("threshold must be finite")
        for name, v in (("phi", phi), ("beta1", b1), ("beta2", b2), ("local1", l1), ("local2", l2)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def p(self) -> int:
        return self.phi.size + 1

    def beta_true(self, T: int) -> CoefVector:
        root = math.sqrt(T)
        b1 = np.where(self.local1, self.beta1 / root, self.beta1)
        b2 = np.where(self.local2, self.beta2 / root, self.beta2)
        return CoefVector(b1, b2)

    def integration_order(self) -> tuple:
        return (I0,) + tuple(I1 if f == 1.0 else I0 for f in self.phi)

    def predictor_names(self) -> tuple:
        return ("lagloss",) + tuple(f"z{j + 1}" for j in range(self.phi.size))

    def with_seed(self, seed: int) -> "DgpSpec":
        return DgpSpec(self.phi, self.beta1, self.beta2, self.local1, self.local2,
                       self.u, self.r_m, int(seed), self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "phi": self.phi.tolist(), "beta1": self.beta1.tolist(),
            "beta2": self.beta2.tolist(), "local1": self.local1.tolist(), "local2": self.local2.tolist(),
            "u": self.u, "r_m": self.r_m, "seed": self.seed,
        }


def dgp_preset(which: int, T: int | None = None, seed: int = 0) -> DgpSpec:
    """One of the four simulation designs.

    1: five active stationary predictors in both blocks, ``z13, z14``
    inactive random walks.  2: as 1 with AR coefficient 0.7.  3: as 1 with
    ``z4`` a random walk whose coefficients are ``0.6/sqrt(T)`` in both
    blocks.  4: as 3 with AR 0.7.  ``T`` is accepted for symmetry with
    :meth:`DgpSpec.beta_true`, which resolves the local-to-zero entries.
    """
    if which not in (1, 2, 3, 4):
        raise ValueError("preset must be 1, 2, 3 or 4")
    phi = np.zeros(N_Z)
    phi[12] = phi[13] = 1.0
    b1 = np.zeros(N_Z + 2)
    b1[:6] = [-1.0, 0.3, -0.4, 0.2, 0.6, 0.6]
    b2 = np.zeros(N_Z + 3)
    # model order puts the AR coefficient last
    b2[:6] = [-1.0, 0.7, 0.4, 0.3, 0.5, 0.6]
    l1 = np.zeros(b1.size, bool)
    l2 = np.zeros(b2.size, bool)
    if which in (2, 4):
        b2[-1] = 0.7
    if which in (3, 4):
        phi[3] = 1.0
        l1[5] = l2[5] = True
    return DgpSpec(phi, b1, b2, l1, l2, seed=seed, name=f"DGP{which}")


def t_cdf(x, df):
    return stdtr(df, x)


def t_quantile(q, df):
    return stdtrit(df, q)


def draw_losses(tau, k, sigma, u):
    """Vectorized loss draw given uniforms and the parameter path."""
    tau, k, sigma = (np.asarray(a, dtype=float) for a in (tau, k, sigma))
    df = 1.0 / k
    Fu = stdtr(df, u)
    body = tau <= Fu
    out = np.empty(np.broadcast(tau, k).shape)
    out[body] = stdtrit(np.broadcast_to(df, out.shape)[body], tau[body])
    tail = ~body
    q = ((tau - Fu) / (1.0 - Fu))[tail]
    kt = np.broadcast_to(k, out.shape)[tail]
    st = np.broadcast_to(sigma, out.shape)[tail]
    out[tail] = u + st / kt * np.expm1(-kt * np.log1p(-q))
    return out


def _predictors(spec: DgpSpec, T: int, rng) -> np.ndarray:
    """``z_{j,t-1}`` for t = 1..T (row t drives observation t)."""
    eps = rng.standard_normal((T, spec.phi.size))
    Z = eps.copy()
    rw = spec.phi == 1.0
    Z[:, rw] = np.cumsum(eps[:, rw], axis=0)
    return Z


def simulate_series(spec: DgpSpec, T: int, *, seed: int | None = None, return_path: bool = False):
    """Draw ``T`` losses and the lagged predictor panel.

    Returns ``(losses, panel)`` (plus ``(k, sigma)`` when ``return_path``).
    The panel columns are the lagged loss followed by ``z_1..z_14`` and use
    ``l_0 = 0``; the scale recursion starts at its fixed point.
    """
    if T < 100:
        raise ValueError("T must be at least 100")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    beta = spec.beta_true(T)
    Z = _predictors(spec, T, rng)
    tau = rng.random(T)
    b1, b2 = beta.beta1, beta.beta2
    ar = beta.ar
    eta_x = b1[0] + Z @ b1[2:]
    s_x = b2[0] + Z @ b2[2:-1]
    c1, c2 = float(b1[1]), float(b2[1])
    u, off = float(spec.u), 1.0 - spec.r_m
    s_prev = log_sigma_seed(b2[0], ar)
    lagloss = np.empty(T)
    losses = np.empty(T)
    ks = np.empty(T)
    ss = np.empty(T)
    l_prev = 0.0
    eta_x, s_x, tau_l = eta_x.tolist(), s_x.tolist(), tau.tolist()
    for t in range(T):
        g = math.log(abs(l_prev) + off)
        eta = min(max(eta_x[t] + c1 * g, -35.0), 35.0)
        k = 0.5 / (1.0 + math.exp(-eta))
        s = s_x[t] + c2 * g + ar * s_prev
        df = 1.0 / k
        Fu = stdtr(df, u)
        tt = tau_l[t]
        if tt <= Fu:
            l = stdtrit(df, tt)
        else:
            q = (tt - Fu) / (1.0 - Fu)
            l = u + math.exp(s) / k * math.expm1(-k * math.log1p(-q))
        lagloss[t] = g
        losses[t] = l
        ks[t] = k
        ss[t] = s
        s_prev = s
        l_prev = l
    if not (np.all(ks > 0) and np.all(ks < 0.5)):
        raise DomainError("shape path left (0, 0.5)")
    panel = PredictorPanel(np.column_stack([lagloss, Z]), spec.integration_order(),
                           names=spec.predictor_names())
    if return_path:
        return losses, panel, (ks, np.exp(ss))
    return losses, panel


def extract_exceedances(losses, u) -> ExceedanceSeries:
    """``y_t = max(l_t - u, 0)`` against a constant threshold."""
    losses = np.asarray(losses, dtype=float)
    if not np.isfinite(u):
        raise ValueError("threshold must be finite")
    if not np.any(losses > u):
        raise ValueError("no losses exceed the threshold")
    return ExceedanceSeries.from_losses(losses, u)


# --- metrics -----------------------------------------------------------------

def _slope_blocks(x: CoefVector):
    return np.asarray(x.beta1[1:]), np.asarray(x.beta2[1:-1])


def coefficient_errors(beta_hat: CoefVector, beta_true: CoefVector, scale_factors, integration_order,
                       T: int) -> np.ndarray:
    """Signed estimation errors in the order intercepts, AR, shape slopes, scale slopes.

    Slopes fitted on standardized predictors are mapped back to the raw
    scale by dividing by the predictor's empirical sd; I(1) slopes are then
    magnified by ``sqrt(T)``.  Intercepts and the AR coefficient are
    compared directly.
    """
    if beta_hat.p != beta_true.p:
        raise ValueError("coefficient dimensions differ")
    sf = np.asarray(scale_factors, dtype=float)
    order = tuple(integration_order)
    if sf.size != beta_hat.p or len(order) != beta_hat.p:
        raise ValueError("scale factors and integration order need one entry per predictor")
    mag = np.where(np.array(order) == I1, math.sqrt(T), 1.0)
    h1, h2 = _slope_blocks(beta_hat)
    o1, o2 = _slope_blocks(beta_true)
    return np.concatenate([
        [beta_hat.beta1[0] - beta_true.beta1[0], beta_hat.beta2[0] - beta_true.beta2[0],
         beta_hat.ar - beta_true.ar],
        mag * (h1 / sf - o1),
        mag * (h2 / sf - o2),
    ])


def bias_mse(beta_hat: CoefVector, beta_true: CoefVector, scale_factors, integration_order, T: int):
    """Average absolute error and squared error over all true coefficients."""
    err = coefficient_errors(beta_hat, beta_true, scale_factors, integration_order, T)
    return float(np.mean(np.abs(err))), float(np.mean(err ** 2))


def monte_carlo_bias(errors) -> float:
    """``mean_j |mean_r err_rj|``: the absolute bias of every coefficient averaged.

    ``errors`` is a replications x coefficients array from
    :func:`coefficient_errors`.  Unlike the per-replication mean absolute
    error this one shrinks with the number of replications when an
    estimator is unbiased.
    """
    e = np.atleast_2d(np.asarray(errors, dtype=float))
    return float(np.mean(np.abs(np.mean(e, axis=0))))


_RATE_KEYS = ("tp_k_I0", "fp_k_I0", "tp_k_I1", "fp_k_I1",
              "tp_sigma_I0", "fp_sigma_I0", "tp_sigma_I1", "fp_sigma_I1")


@dataclass
class ReplicationResult:
    rates: dict
    ccr: float
    ar_selected: bool
    bias: float = float("nan")
    mse: float = float("nan")
    selected_k: np.ndarray = field(default=None, repr=False)
    selected_sigma: np.ndarray = field(default=None, repr=False)

    def row(self) -> dict:
        out = {k: self.rates.get(k, float("nan")) for k in _RATE_KEYS}
        out.update(ccr=self.ccr, ar=float(self.ar_selected), bias=self.bias, mse=self.mse)
        return out


def _rate(sel, truth_mask):
    n = int(np.sum(truth_mask))
    return float(np.mean(sel[truth_mask])) if n else float("nan")


def selection_metrics(active_k, active_sigma, truth: DgpSpec, T: int, *, ar_selected=None) -> ReplicationResult:
    """Selection rates split by block and integration order, plus the CCR.

    ``active_k`` indexes shape predictors ``0..p-1``; ``active_sigma``
    indexes scale predictors with ``p`` standing for the AR term (so it may
    be passed straight from a fit).  The CCR counts all ``2p + 1``
    candidates including the AR term.
    """
    beta = truth.beta_true(T)
    p = truth.p
    sel_k = np.zeros(p, bool)
    sel_k[np.asarray(list(active_k), dtype=int)] = True
    sig_idx = np.asarray(list(active_sigma), dtype=int)
    sel_s = np.zeros(p + 1, bool)
    sel_s[sig_idx] = True
    if ar_selected is not None:
        sel_s[p] = bool(ar_selected)
    true_k = beta.beta1[1:] != 0
    true_s = beta.beta2[1:] != 0
    i1 = np.array(truth.integration_order()) == I1
    rates = {}
    for blk, sel, tru in (("k", sel_k, true_k), ("sigma", sel_s[:p], true_s[:p])):
        for tag, m in (("I0", ~i1), ("I1", i1)):
            rates[f"tp_{blk}_{tag}"] = _rate(sel, tru & m)
            rates[f"fp_{blk}_{tag}"] = _rate(sel, ~tru & m)
    correct = np.sum(sel_k == true_k) + np.sum(sel_s == true_s)
    ccr = float(correct / (2 * p + 1))
    return ReplicationResult(rates, ccr, bool(sel_s[p]), selected_k=sel_k, selected_sigma=sel_s)


# --- the study -----------------------------------------------------------------

ESTIMATORS = ("mle", "tal", "almle")
TABLE1_COLUMNS = ("dgp", "T", "estimator", "n_ok", "n_failed", "bias", "mse", "bias_rep")
TABLE2_COLUMNS = ("dgp", "T", "estimator", "n_ok") + _RATE_KEYS + ("ccr", "ar")


@dataclass(frozen=True)
class StudyConfig:
    presets: tuple = (1,)
    T_list: tuple = (25_000,)
    n_reps: int = 20
    estimators: tuple = ("mle", "tal")
    criteria: tuple = ("AIC", "HQ", "BIC")
    base_seed: int = 0
    jobs: int = 1
    n_k: int = 50
    n_sigma: int = 30
    level: float = 0.05

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        for w in self.presets:
            if w not in (1, 2, 3, 4):
                raise ValueError("presets must be among 1..4")
        if any(T < 100 for T in self.T_list):
            raise ValueError("every T must be at least 100")
        object.__setattr__(self, "criteria", tuple(c.upper() for c in self.criteria))

    def seed(self, rep: int) -> int:
        return self.base_seed + rep

    def tasks(self):
        return [(w, T, r) for w in self.presets for T in self.T_list for r in range(self.n_reps)]

    def to_dict(self) -> dict:
        return {"presets": list(self.presets), "T_list": list(self.T_list), "n_reps": self.n_reps,
                "estimators": list(self.estimators), "criteria": list(self.criteria),
                "base_seed": self.base_seed, "n_k": self.n_k, "n_sigma": self.n_sigma,
                "level": self.level}


def _record(label, beta_hat, active_k, active_sigma, spec, panel, T, extra=None):
    beta_o = spec.beta_true(T)
    err = coefficient_errors(beta_hat, beta_o, panel.scale_factors, panel.integration_order, T)
    res = selection_metrics(active_k, active_sigma, spec, T)
    out = {"estimator": label}
    out.update(res.row())
    out.pop("bias")
    out.update(bias_rep=float(np.mean(np.abs(err))), mse=float(np.mean(err ** 2)), errors=err.tolist(),
               active_k=[int(i) for i in active_k], active_sigma=[int(i) for i in active_sigma])
    out.update(extra or {})
    return out


def run_replication(preset: int, T: int, rep: int, config: StudyConfig) -> dict:
    """Simulate one sample and fit every requested estimator to it.

    Failures are caught per estimator and reported in the ``failed`` map so
    the study can still emit partial tables.
    """
    from .estimators import (adaptive_weights, almle_grids, fit_almle, fit_mle, fit_partial_k_mle,
                             fit_two_step_all, standardize_panel, wald_selection)

    seed = config.seed(rep)
    spec = dgp_preset(preset, T, seed=seed)
    losses, raw = simulate_series(spec, T)
    series = extract_exceedances(losses, spec.u)
    panel = standardize_panel(raw)
    rows, failed = [], {}
    try:
        mle = fit_mle(series, panel)
    except Exception as exc:  # noqa: BLE001 - recorded, the study carries on
        return {"dgp": preset, "T": T, "rep": rep, "seed": seed, "rows": [],
                "failed": {"mle": f"{type(exc).__name__}: {exc}"}}
    if "mle" in config.estimators:
        ak, asg, ok = wald_selection(mle, series, panel, config.level)
        rows.append(_record("mle", mle.beta_hat, ak, asg, spec, panel, T,
                            {"converged": bool(mle.converged), "hessian_pd": bool(ok)}))
    if "tal" in config.estimators:
        try:
            fits, _ = fit_two_step_all(series, panel, config.criteria, mle=mle,
                                       n_k=config.n_k, n_sigma=config.n_sigma)
            for c in config.criteria:
                f = fits[c]
                rows.append(_record(f"tal+{c}", f.beta_hat, f.active_k, f.active_sigma, spec, panel, T,
                                    {"converged": bool(f.converged),
                                     "lambda_k": f.lambda_chosen[0], "lambda_sigma": f.lambda_chosen[1]}))
        except Exception as exc:  # noqa: BLE001
            failed["tal"] = f"{type(exc).__name__}: {exc}"
    if "almle" in config.estimators:
        try:
            w = adaptive_weights(mle.beta_hat, fit_partial_k_mle(series, panel))
            gk, gs = almle_grids(series, panel, w, n_k=config.n_k, n_sigma=config.n_sigma)
            for c in config.criteria:
                f = fit_almle(series, panel, w, gk, gs, c)
                rows.append(_record(f"almle+{c}", f.beta_hat, f.active_k, f.active_sigma, spec, panel, T,
                                    {"converged": bool(f.converged)}))
        except Exception as exc:  # noqa: BLE001
            failed["almle"] = f"{type(exc).__name__}: {exc}"
    return {"dgp": preset, "T": T, "rep": rep, "seed": seed, "rows": rows, "failed": failed}


def _run_task(args):
    preset, T, rep, config = args
    return run_replication(preset, T, rep, config)


@dataclass
class StudyTables:
    table1: list
    table2: list
    replications: list
    config: StudyConfig

    def failures(self) -> list:
        return [{"dgp": r["dgp"], "T": r["T"], "rep": r["rep"], "seed": r["seed"], "what": k, "error": v}
                for r in self.replications for k, v in r["failed"].items()]

    def rows(self, dgp: int, T: int, estimator: str) -> list:
        return [row for r in self.replications if r["dgp"] == dgp and r["T"] == T
                for row in r["rows"] if row["estimator"] == estimator]

    def lookup(self, table: int, dgp: int, T: int, estimator: str) -> dict:
        for row in (self.table1 if table == 1 else self.table2):
            if row["dgp"] == dgp and row["T"] == T and row["estimator"] == estimator:
                return row
        raise KeyError((table, dgp, T, estimator))

    def write(self, out_dir) -> dict:
        """Write ``table1.csv``, ``table2.csv``, ``replications.json`` and ``manifest.json``."""
        import csv
        import json
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, cols, rows in (("table1", TABLE1_COLUMNS, self.table1),
                                 ("table2", TABLE2_COLUMNS, self.table2)):
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for row in rows:
                    w.writerow([_fmt(row[c]) for c in cols])
            paths[name] = str(path)
        path = out / "replications.json"
        path.write_text(json.dumps(self.replications, indent=1) + "\n")
        paths["replications"] = str(path)
        manifest = {"schema_version": 1, "config": self.config.to_dict(),
                    "seeds": sorted({r["seed"] for r in self.replications}),
                    "tasks": [[r["dgp"], r["T"], r["rep"], r["seed"]] for r in self.replications],
                    "failures": self.failures()}
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1) + "\n")
        paths["manifest"] = str(path)
        return paths

    @classmethod
    def read(cls, out_dir) -> "StudyTables":
        import json
        from pathlib import Path

        out = Path(out_dir)
        manifest = json.loads((out / "manifest.json").read_text())
        c = manifest["config"]
        config = StudyConfig(tuple(c["presets"]), tuple(c["T_list"]), c["n_reps"], tuple(c["estimators"]),
                             tuple(c["criteria"]), c["base_seed"], 1, c["n_k"], c["n_sigma"], c["level"])
        reps = json.loads((out / "replications.json").read_text())
        return aggregate(reps, config)


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _labels(config: StudyConfig):
    out = []
    if "mle" in config.estimators:
        out.append("mle")
    for prefix in ("tal", "almle"):
        if prefix in config.estimators:
            out += [f"{prefix}+{c}" for c in config.criteria]
    return out


def aggregate(replications, config: StudyConfig) -> StudyTables:
    """Collapse per-replication records into the two study tables.

    ``table1`` reports the Monte Carlo bias (:func:`monte_carlo_bias`), the
    average per-replication MSE and, for reference, the average
    per-replication mean absolute error.
    """
    reps = sorted(replications, key=lambda r: (r["dgp"], r["T"], r["rep"]))
    t1, t2 = [], []
    for w in config.presets:
        for T in config.T_list:
            cell = [r for r in reps if r["dgp"] == w and r["T"] == T]
            for label in _labels(config):
                rows = [row for r in cell for row in r["rows"] if row["estimator"] == label]
                n_fail = len(cell) - len(rows)
                nan = float("nan")
                if rows:
                    errs = np.array([row["errors"] for row in rows])
                    b = monte_carlo_bias(errs)
                    mse = float(np.mean([row["mse"] for row in rows]))
                    brep = float(np.mean([row["bias_rep"] for row in rows]))
                else:
                    b = mse = brep = nan
                t1.append({"dgp": w, "T": T, "estimator": label, "n_ok": len(rows), "n_failed": n_fail,
                           "bias": b, "mse": mse, "bias_rep": brep})
                r2 = {"dgp": w, "T": T, "estimator": label, "n_ok": len(rows)}
                for k in _RATE_KEYS + ("ccr", "ar"):
                    vals = [row[k] for row in rows if not math.isnan(row[k])]
                    r2[k] = float(np.mean(vals)) if vals else nan
                t2.append(r2)
    return StudyTables(t1, t2, reps, config)


def run_study(config: StudyConfig | None = None, *, out_dir=None, progress=None, **kw) -> StudyTables:
    """Monte Carlo study over presets x sample sizes x replications.

    Replication ``r`` uses seed ``base_seed + r`` for every preset and
    sample size.  With ``jobs > 1`` the replications run in worker
    processes; results are ordered by task so the tables do not depend on
    the number of workers.  ``progress`` is called with each finished
    replication record.
    """
    config = config or StudyConfig(**kw)
    tasks = [(w, T, r, config) for (w, T, r) in config.tasks()]
    results = []
    if config.jobs == 1:
        for t in tasks:
            results.append(_run_task(t))
            if progress:
                progress(results[-1])
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            for res in pool.map(_run_task, tasks):
                results.append(res)
                if progress:
                    progress(res)
    tables = aggregate(results, config)
    if out_dir is not None:
        tables.write(out_dir)
    return tables
