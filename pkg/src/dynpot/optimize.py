"""Box-constrained smooth maximization and weighted-L1 penalized solves.

Objectives are callables ``f(x) -> (loglik, score)`` over flat coefficient
vectors; an inadmissible iterate is signalled by a non-finite log-likelihood
and makes the line searches shrink their step.  An objective may also expose
``linear_guard()`` returning a :class:`LinearGuard` ``G x <= h``.  The
shape guard of the likelihood is linear in the shape coefficients, so the
solvers can step exactly onto it and certify stationarity there instead of
stalling against an invisible wall.

:func:`maximize_smooth` is a projected L-BFGS ascent.  :func:`solve_penalized`
minimizes ``-loglik + sum_j c_j |x_j|`` with an accelerated proximal gradient
(FISTA with backtracking and function-value restarts); once the support
settles, the smooth problem restricted to the current orthant is polished
with the same projected L-BFGS and the result is accepted only when the KKT
certificate holds on the full problem.  Zeros are exact.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, nnls

from .exceptions import ConvergenceError

AR_BOUND = 0.99
COEF_BOUND = 50.0
#: slack below which a guard row counts as active
GUARD_ACTIVE = 1e-8
#: rounding room past a guard row granted to a step (the likelihood guard
#: itself sits 1e-9 beyond the rows, so this never makes a point inadmissible)
GUARD_OVERSHOOT = 1e-10
#: distance to a bound inside which a coordinate counts as on it (guarded steps)
BOX_ACTIVE = 1e-10
#: proximal iterations before the first smooth polish, its relative
#: tolerance (a fraction of the KKT tolerance) and its quasi-Newton memory
POLISH_AFTER = 5
POLISH_TOL = 0.3
POLISH_MEMORY = 20


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("bounds need lower < upper elementwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, p: int, bound: float = COEF_BOUND, ar_bound: float = AR_BOUND) -> "BoxBounds":
        n = 2 * p + 3
        lo, hi = np.full(n, -bound), np.full(n, bound)
        lo[-1], hi[-1] = -ar_bound, ar_bound
        return cls(lo, hi)

    @classmethod
    def unbounded(cls, n: int) -> "BoxBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def project(self, x):
        return np.clip(x, self.lower, self.upper)

    def contains(self, x) -> bool:
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


class LinearGuard:
    """Rows ``G @ v <= h`` with ``v = x[cols] - x[minus]`` that every iterate must respect.

    ``minus`` (optional, ``-1`` for none) lets the same rows act on a split
    ``x = x_plus - x_minus`` parametrization without copying ``G``.
    """

    def __init__(self, G, h, cols, minus=None):
        self.G = np.ascontiguousarray(G, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.cols = np.asarray(cols, dtype=int)
        self.minus = None if minus is None else np.asarray(minus, dtype=int)
        self._memo = deque(maxlen=4)

    def _v(self, x):
        v = x[self.cols]
        if self.minus is not None:
            has = self.minus >= 0
            v = v.copy()
            v[has] -= x[self.minus[has]]
        return v

    def slack(self, x):
        key = x.tobytes()
        for k, val in self._memo:
            if k == key:
                return val
        val = self.h - self.G @ self._v(x)
        self._memo.append((key, val))
        return val

    def rate(self, d):
        return self.G @ self._v(d)

    def normals(self, rows, n):
        N = np.zeros((len(rows), n))
        N[:, self.cols] = self.G[rows]
        if self.minus is not None:
            has = self.minus >= 0
            N[:, self.minus[has]] = -self.G[rows][:, has]
        return N

    def shift_into(self, x, free) -> np.ndarray:
        """Move ``x`` inside the rows along an all-ones (intercept) column if one is free."""
        worst = -np.min(self.slack(x), initial=np.inf)
        if worst <= 0.0:
            return x
        for j, col in enumerate(self.cols):
            if free[col] and np.all(self.G[:, j] == 1.0):
                x = x.copy()
                x[col] -= worst
                return x
        return x

    def restrict(self, mask, base) -> "LinearGuard | None":
        """The guard in the coordinates selected by ``mask`` with the rest at ``base``."""
        keep = mask[self.cols]
        if not keep.any():
            return None
        h = self.h
        if not keep.all():
            h = h - self.G[:, ~keep] @ base[self.cols[~keep]]
        pos = np.cumsum(mask) - 1
        G = self.G if keep.all() else self.G[:, keep]
        return LinearGuard(G, h, pos[self.cols[keep]])


@dataclass(frozen=True)
class PenaltySpec:
    """Weighted L1 penalty on the slope coordinates of a ``2p+3`` vector.

    Intercepts (flat positions 0 and p+1) are never penalized.  ``w_sigma``
    covers the p scale slopes followed by the AR coefficient.
    """

    lambda_k: float
    lambda_sigma: float
    w_k: np.ndarray
    w_sigma: np.ndarray

    def __post_init__(self):
        w_k = np.array(self.w_k, dtype=float).reshape(-1)
        w_s = np.array(self.w_sigma, dtype=float).reshape(-1)
        if w_s.size != w_k.size + 1:
            raise ValueError("w_sigma must have one more entry than w_k")
        if np.any(~np.isfinite(w_k)) or np.any(w_k <= 0) or np.any(~np.isfinite(w_s)) or np.any(w_s <= 0):
            raise ValueError("penalty weights must be positive and finite")
        if self.lambda_k < 0 or self.lambda_sigma < 0:
            raise ValueError("tuning parameters must be non-negative")
        object.__setattr__(self, "w_k", w_k)
        object.__setattr__(self, "w_sigma", w_s)

    @property
    def p(self) -> int:
        return self.w_k.size

    def thresholds(self) -> np.ndarray:
        return np.concatenate([[0.0], self.lambda_k * self.w_k, [0.0], self.lambda_sigma * self.w_sigma])

    def penalized_mask(self) -> np.ndarray:
        p = self.p
        m = np.ones(2 * p + 3, dtype=bool)
        m[0] = m[p + 1] = False
        return m


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    objective: float
    kkt_violation: float
    active: np.ndarray
    n_evals: int = 0
    message: str = ""
    loglik: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "objective": float(self.objective),
            "kkt_violation": float(self.kkt_violation),
            "active": [int(i) for i in self.active],
            "n_evals": int(self.n_evals),
            "message": self.message,
            "loglik": float(self.loglik),
        }


class _Counted:
    """Negated objective (a loss to minimize) with an evaluation counter.

    Points further past a guard row than the overshoot margin count as
    inadmissible, so every iterate keeps a safety gap to the likelihood's
    own cut-off.
    """

    def __init__(self, objective, guard=None):
        self.objective = objective
        self.guard = guard
        self.n = 0

    def __call__(self, x):
        self.n += 1
        if self.guard is not None and np.min(self.guard.slack(x)) < -GUARD_OVERSHOOT:
            return np.inf, None
        ll, g = self.objective(x)
        if not np.isfinite(ll):
            return np.inf, None
        return -float(ll), -np.asarray(g, dtype=float)


def _as_flat(x):
    return x.flatten() if hasattr(x, "beta1") else np.array(x, dtype=float).reshape(-1)


def _free_mask(free, n):
    if free is None:
        return np.ones(n, dtype=bool)
    free = np.asarray(free)
    if free.dtype == bool:
        return free.copy()
    m = np.zeros(n, dtype=bool)
    m[free] = True
    return m


def _guard_of(objective, guard):
    if guard is None or isinstance(guard, LinearGuard):
        return guard
    make = getattr(objective, "linear_guard", None)
    return make() if callable(make) else None


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(S, Y))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if S:
        s, y = S[-1], Y[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _cone_nnls(N, b, tol=1e-10):
    """``argmin ||N.T mu - b||`` over ``mu >= 0`` for a tall ``N``.

    At a degenerate vertex thousands of guard rows can be active while only a
    handful carry multipliers, so the rows are generated on demand: solve on a
    candidate subset and add the rows whose dual value is positive.
    """
    m, n = N.shape
    if m <= 4 * n + 8:
        return nnls(N.T, b)[0]
    cand = np.unique(np.concatenate([np.argmax(N, axis=0), np.argmin(N, axis=0)]))
    mu = np.zeros(m)
    for _ in range(50):
        sub = nnls(N[cand].T, b)[0]
        w = N @ (b - N[cand].T @ sub)
        w[cand] = -np.inf
        top = np.argsort(w)[-(2 * n):]
        top = top[w[top] > tol * (1.0 + np.linalg.norm(b)) * (1.0 + np.max(np.abs(N)))]
        if top.size == 0:
            break
        cand = np.union1d(cand, top)
    mu[cand] = sub
    return mu


def _stationarity(x, g, lo, hi, guard):
    """Projected gradient accounting for the box and the active guard rows.

    Returns ``(pg, normals, mu, binding)``: ``pg`` is the feasible
    steepest-descent step, ``normals`` the active guard rows (or None), ``mu``
    their multipliers and ``binding`` the box coordinates held at a bound.
    With guard rows active, the box faces at the bounds join the cone so that
    ``-pg`` is the exact projection onto the tangent cone.
    """
    rows = np.empty(0, int) if guard is None else np.flatnonzero(guard.slack(x) <= GUARD_ACTIVE)
    if rows.size == 0:
        return np.clip(x - g, lo, hi) - x, None, None, ((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0))
    near = BOX_ACTIVE * (1.0 + np.abs(x))
    at_lo, at_hi = x <= lo + near, x >= hi - near
    N = guard.normals(rows, x.size)
    box = np.flatnonzero(at_lo | at_hi)
    faces = np.zeros((box.size, x.size))
    faces[np.arange(box.size), box] = np.where(at_hi[box], 1.0, -1.0)
    mu_all = _cone_nnls(np.vstack([N, faces]), -g)
    mu, nu = mu_all[: rows.size], mu_all[rows.size :]
    r = g + N.T @ mu + faces.T @ nu
    binding = np.zeros(x.size, bool)
    binding[box[nu > 0]] = True
    pg = -r
    pg[binding] = 0.0
    return pg, N, mu, binding


def _working_set_direction(gf, S, Y, N, mu, binding):
    """Quasi-Newton step restricted to the null space of the binding guard rows."""
    W = N[mu > 0].copy()
    W[:, binding] = 0.0
    v = _two_loop(gf, S, Y)
    if W.shape[0] == 0:
        return -v
    U = np.column_stack([_two_loop(w, S, Y) for w in W])
    M = W @ U
    try:
        coef = np.linalg.solve(M, W @ v)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(M, W @ v, rcond=None)[0]
    d = -(v - U @ coef)
    d[binding] = 0.0
    return d


def _max_step(guard, x, d):
    """Largest step along ``d`` that keeps every guard row within the overshoot margin."""
    if guard is None:
        return np.inf
    rate = guard.rate(d)
    pos = rate > 1e-12 * (1.0 + np.max(np.abs(rate), initial=0.0))
    if not pos.any():
        return np.inf
    room = np.maximum(guard.slack(x)[pos] + 0.5 * GUARD_OVERSHOOT, 0.0)
    return float(np.min(room / rate[pos]))


def _box_step(x, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(d > 0, (hi - x) / d, np.inf)
        down = np.where(d < 0, (lo - x) / d, np.inf)
    return float(max(min(np.min(up, initial=np.inf), np.min(down, initial=np.inf)), 0.0))


def _projected_lbfgs(fun, x0, lo, hi, *, linear=None, guard=None, tol_rel=1e-6, max_iter=2000,
                     memory=10, refine=3):
    """Minimize ``fun(x) + linear @ x`` over the box ``[lo, hi]`` and the guard.

    ``fun`` returns ``(value, grad)`` with ``value = inf`` where inadmissible.
    Returns ``(x, f, g, iterations, converged, message)`` where ``f``/``g``
    include the linear term.  After the tolerance is met, up to ``refine``
    further quasi-Newton steps are taken (they are nearly free once the
    iteration is superlinear and tighten the answer well below tolerance).
    """
    c = np.zeros_like(x0) if linear is None else linear

    def total(x):
        f, g = fun(x)
        if not np.isfinite(f):
            return np.inf, None
        return f + c @ x, g + c

    x = np.clip(x0, lo, hi)
    f, g = total(x)
    if not np.isfinite(f):
        raise ConvergenceError("starting point is inadmissible")
    S, Y = deque(maxlen=memory), deque(maxlen=memory)
    message = "maximum iterations reached"
    converged = False
    it = 0
    extra = 0
    step = None
    for it in range(max_iter + 1):
        pg, N, mu, binding = _stationarity(x, g, lo, hi, guard)
        pgn = np.max(np.abs(pg), initial=0.0)
        if pgn <= tol_rel * (1.0 + abs(f)):
            converged = True
            message = "projected gradient below tolerance" if N is None else "stationary on the guard"
            if extra >= refine or pgn == 0.0:
                break
            extra += 1
        if it == max_iter:
            break
        gf = np.where(binding, 0.0, g)
        if N is None:
            d = -_two_loop(gf, S, Y)
            d[binding] = 0.0
        else:
            d = _working_set_direction(gf, S, Y, N, mu, binding)
        steep = pg
        if not np.all(np.isfinite(d)) or gf @ d >= -1e-12 * np.linalg.norm(gf) * np.linalg.norm(d):
            S.clear()
            Y.clear()
            d = steep
        elif N is not None and np.any(N @ d > 1e-10 * np.linalg.norm(d)):
            d = steep
        fn = None
        for attempt in range(2):
            alpha = 1.0 if S else min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
            alpha = min(alpha, _max_step(guard, x, d))
            if N is not None:
                # on the guard the step follows d exactly; the box caps it instead of a projection
                alpha = min(alpha, _box_step(x, d, lo, hi))
            floor = 1e-14 * (1.0 + np.max(np.abs(x))) / max(np.max(np.abs(d)), 1e-300)
            if extra:
                floor = max(floor, 1e-3 * alpha)
            while alpha >= floor and alpha > 0:
                xn = np.clip(x + alpha * d, lo, hi)
                step = xn - x
                fn, gn = total(xn)
                if np.isfinite(fn) and fn <= f + 1e-4 * (g @ step):
                    break
                # inadmissible points shrink faster than plain Armijo failures
                alpha *= 0.5 if np.isfinite(fn) else 0.25
                fn = None
            if fn is not None or extra or d is steep:
                break
            # quasi-Newton direction failed: retry once along the steepest descent
            S.clear()
            Y.clear()
            d = steep
        if fn is None or not np.any(step):
            if not converged:
                message = "line search failed"
            break
        yv = gn - g
        if step @ yv > 1e-10 * np.linalg.norm(step) * np.linalg.norm(yv):
            S.append(step)
            Y.append(yv)
        x, f, g = xn, fn, gn
    if converged:
        pg = _stationarity(x, g, lo, hi, guard)[0]
        converged = bool(np.max(np.abs(pg), initial=0.0) <= tol_rel * (1.0 + abs(f)))
    return x, f, g, it, converged, message


def maximize_smooth(objective, start, bounds: BoxBounds | None = None, *, free=None,
                    tol: float = 1e-6, max_iter: int = 2000, memory: int = 10, guard="auto"):
    """Projected quasi-Newton ascent of ``objective`` from ``start``.

    Coordinates outside ``free`` stay at their starting values.  A run that
    exhausts ``max_iter`` is reported as not converged rather than raised.
    """
    x0 = _as_flat(start)
    n = x0.size
    bounds = bounds or BoxBounds.unbounded(n)
    mask = _free_mask(free, n)
    g_full = _guard_of(objective, guard)
    fun = _Counted(objective, g_full)
    x0 = bounds.project(x0)
    if g_full is not None:
        x0 = bounds.project(g_full.shift_into(x0, mask))

    def sub(z):
        x = x0.copy()
        x[mask] = z
        f, g = fun(x)
        return (f, None) if g is None else (f, g[mask])

    if not mask.any():
        f, _ = fun(x0)
        return x0, SolveReport(bool(np.isfinite(f)), 0, -f, 0.0, np.flatnonzero(x0), fun.n,
                               "no free coordinates", -f)
    g_sub = None if g_full is None else g_full.restrict(mask, x0)
    lo, hi = bounds.lower[mask], bounds.upper[mask]
    z, f, g, it, ok, msg = _projected_lbfgs(sub, x0[mask], lo, hi, guard=g_sub,
                                            tol_rel=tol, max_iter=max_iter, memory=memory)
    x = x0.copy()
    x[mask] = z
    pg = _stationarity(z, g, lo, hi, g_sub)[0]
    report = SolveReport(ok, it, -f, float(np.max(np.abs(pg), initial=0.0)), np.flatnonzero(x), fun.n, msg, -f)
    return x, report


def soft_threshold(x, c):
    """``sign(x) max(|x| - c, 0)`` with exact zeros."""
    return np.where(np.abs(x) <= c, 0.0, x - np.sign(x) * c)


def kkt_violation(x, grad, c, bounds: BoxBounds, free) -> float:
    """Largest violation of the optimality conditions of ``-L + sum c|x|``.

    ``grad`` is the gradient of the loss ``-L``.  For zero penalized
    coordinates the condition is ``|dL/dx_j| <= c_j``; for nonzero ones
    ``dL/dx_j = c_j sign(x_j)``; box-active coordinates only need the
    correct sign.
    """
    lo, hi = bounds.lower, bounds.upper
    v = np.zeros_like(x)
    zero = (x == 0.0) & (c > 0)
    v[zero] = np.maximum(np.abs(grad[zero]) - c[zero], 0.0)
    nz = ~zero
    r = grad + c * np.sign(x)
    r[nz & (x <= lo) & (r > 0)] = 0.0
    r[nz & (x >= hi) & (r < 0)] = 0.0
    v[nz] = np.abs(r[nz])
    v[~free] = 0.0
    return float(np.max(v, initial=0.0))


def _penalty(x, c):
    return float(c @ np.abs(x))


def solve_penalized(objective, penalty, start, bounds: BoxBounds | None = None, *, free=None,
                    tol: float = 1e-5, max_iter: int = 5000, polish: bool = True, guard="auto"):
    """Minimize ``-loglik(x) + sum_j c_j |x_j|`` by accelerated proximal gradient.

    ``penalty`` is a :class:`PenaltySpec` or an explicit threshold vector
    ``c``.  Convergence means the KKT certificate holds to
    ``tol * (1 + |objective|)``.  When the solution rests on the shape guard
    the certificate is evaluated with non-negative multipliers on the active
    guard rows, which is the optimality condition of the guarded problem.
    """
    x = _as_flat(start)
    n = x.size
    c = penalty.thresholds() if isinstance(penalty, PenaltySpec) else np.asarray(penalty, dtype=float)
    if c.shape != (n,) or np.any(c < 0):
        raise ValueError("penalty thresholds must be non-negative, one per coordinate")
    bounds = bounds or BoxBounds.unbounded(n)
    mask = _free_mask(free, n)
    g_full = _guard_of(objective, guard)
    fun = _Counted(objective, g_full)
    x = bounds.project(x)
    if g_full is not None:
        x = bounds.project(g_full.shift_into(x, mask))
    fixed = x.copy()

    def prox(v, step):
        z = np.clip(soft_threshold(v, step * c), bounds.lower, bounds.upper)
        z[~mask] = fixed[~mask]
        return z

    def tol_abs(F):
        return tol * (1.0 + abs(F))

    def certify(x, g):
        viol, rows, _ = _guard_certificate(x, g, c, bounds, mask, g_full)
        return viol, rows is not None

    def report(ok, message):
        active = np.flatnonzero((x != 0) & (c > 0))
        return x, SolveReport(ok, it, F, viol, active, fun.n, message, -f)

    f, g = fun(x)
    if not np.isfinite(f):
        raise ConvergenceError("starting point is inadmissible")
    F = f + _penalty(x, c)
    it = 0
    viol, on_guard = certify(x, g)
    if viol <= tol_abs(F):
        return report(True, "start satisfies KKT" + (" on the shape guard" if on_guard else ""))

    L = max(1.0, float(np.max(np.abs(g[mask]), initial=1.0)))
    y, fy, gy = x, f, g
    t = 1.0
    x_old = x
    stable = 0
    stalls = 0
    support = (x != 0)
    next_polish = POLISH_AFTER
    message = "maximum iterations reached"
    converged = False
    while it < max_iter:
        it += 1
        ok = False
        while L < 1e20:
            z = prox(y - gy / L, 1.0 / L)
            fz, gz = fun(z)
            d = z - y
            if np.isfinite(fz) and fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fy):
                ok = True
                break
            L *= 2.0
        if not ok and y is not x:
            y, fy, gy, t = x, f, g, 1.0
            L = max(1.0, float(np.max(np.abs(g[mask]), initial=1.0)))
            continue
        if ok:
            Fz = fz + _penalty(z, c)
            if Fz > F and y is not x:
                # non-monotone step: restart momentum from the current iterate
                y, fy, gy, t = x, f, g, 1.0
                continue
            new_support = (z != 0)
            stable = stable + 1 if np.array_equal(new_support, support) else 0
            support = new_support
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            x_old = x
            x, f, g, F = z, fz, gz, Fz
            viol = kkt_violation(x, g, c, bounds, mask)
            if viol <= tol_abs(F):
                converged, message = True, "KKT certificate satisfied"
                break
        else:
            # no admissible prox step from x (pinned by the guard): polish now
            stable, next_polish = 3, it
        if polish and stable >= 3 and it >= next_polish:
            xp, fp, gp = _polish(fun, x, c, bounds, mask, tol, g_full)
            improved = False
            if xp is not None:
                Fp = fp + _penalty(xp, c)
                if Fp <= F + tol_abs(F):
                    improved = Fp < F - tol_abs(F)
                    x, f, g, F = xp, fp, gp, Fp
                    support = (x != 0)
                    viol, on_guard = certify(x, g)
                    if viol <= tol_abs(F):
                        converged = True
                        message = ("KKT certificate satisfied on the shape guard" if on_guard
                                   else "KKT certificate satisfied after polish")
                        break
            stalls = 0 if improved else stalls + 1
            if stalls >= 2 or (not ok and not improved):
                viol, on_guard = certify(x, g)
                message = "stalled against the shape guard" if on_guard else "stalled"
                break
            next_polish = it + 20
            y, fy, gy, t = x, f, g, 1.0
            x_old = x
            L = max(L * 0.5, 1e-8)
            continue
        if not ok:
            message = "no admissible proximal step"
            break
        beta = (t - 1.0) / t_new
        t = t_new
        y = x + beta * (x - x_old)
        if beta > 0:
            y = np.clip(y, bounds.lower, bounds.upper)
            fy, gy = fun(y)
            if not np.isfinite(fy):
                y, fy, gy, t = x, f, g, 1.0
        else:
            y, fy, gy = x, f, g
        L = max(L * 0.9, 1e-8)
    return report(converged, message)


def _split_guard(guard, var, pos_u, pos_p, pen_var, base):
    """Express ``guard`` in the split coordinates ``[x_u, x_plus, x_minus]``."""
    if guard is None:
        return None
    inside = var[guard.cols]
    if not inside.any():
        return None
    h = guard.h
    if not inside.all():
        h = h - guard.G[:, ~inside] @ base[guard.cols[~inside]]
    cols, minus = [], []
    for col in guard.cols[inside]:
        if pen_var[col]:
            cols.append(pos_p[col][0])
            minus.append(pos_p[col][1])
        else:
            cols.append(pos_u[col])
            minus.append(-1)
    G = guard.G if inside.all() else guard.G[:, inside]
    return LinearGuard(G, h, cols, minus)


def _polish(fun, x, c, bounds, mask, tol, guard=None, max_iter: int = 1000):
    """Smooth reformulation ``x_j = x_plus_j - x_minus_j`` of the penalized problem.

    With both halves non-negative the penalty becomes linear and the problem
    is a box-constrained smooth one, so projected L-BFGS applies directly and
    handles the shape guard through its working set.  Coordinates are exact
    zeros when both halves sit on their lower bound.  Returns ``(x, f, g)``
    or ``(None, None, None)`` if no admissible point could be produced.
    """
    pen = mask & (c > 0)
    unp = mask & (c == 0)
    iu, ip = np.flatnonzero(unp), np.flatnonzero(pen)
    nu, npn = iu.size, ip.size
    pos_u = {int(j): i for i, j in enumerate(iu)}
    pos_p = {int(j): (nu + i, nu + npn + i) for i, j in enumerate(ip)}
    lo = np.concatenate([bounds.lower[iu], np.zeros(2 * npn)])
    hi = np.concatenate([bounds.upper[iu], np.maximum(bounds.upper[ip], 0.0),
                         np.maximum(-bounds.lower[ip], 0.0)])
    z0 = np.concatenate([x[iu], np.maximum(x[ip], 0.0), np.maximum(-x[ip], 0.0)])
    lin = np.concatenate([np.zeros(nu), c[ip], c[ip]])
    base = x.copy()

    def assemble(z):
        xx = base.copy()
        xx[iu] = z[:nu]
        xx[ip] = z[nu : nu + npn] - z[nu + npn :]
        return xx

    def sub(z):
        f, g = fun(assemble(z))
        if g is None:
            return f, None
        return f, np.concatenate([g[iu], g[ip], -g[ip]])

    g_split = _split_guard(guard, mask, pos_u, pos_p, pen, base)
    try:
        z, _, _, _, _, _ = _projected_lbfgs(sub, z0, lo, hi, linear=lin, guard=g_split,
                                            tol_rel=tol * POLISH_TOL, max_iter=max_iter,
                                            memory=POLISH_MEMORY)
    except ConvergenceError:
        return None, None, None
    new = assemble(z)
    # halves resting on their bound count as zero, as they do inside the solve
    snap = new.copy()
    snap[ip[np.abs(new[ip]) <= BOX_ACTIVE]] = 0.0
    snap[snap == 0.0] = 0.0  # no negative zeros
    f, g = fun(snap)
    if np.isfinite(f):
        return snap, f, g
    f, g = fun(new)
    if not np.isfinite(f):
        return None, None, None
    return new, f, g


def _guard_certificate(x, grad, c, bounds, mask, guard):
    """KKT violation allowing non-negative multipliers on the active guard rows.

    Solves ``min_t`` over multipliers ``mu >= 0`` such that the
    multiplier-adjusted gradient satisfies every coordinate condition to
    within ``t``; rows enter by column generation.  Returns
    ``(violation, mu_rows, mu)``.
    """
    plain = kkt_violation(x, grad, c, bounds, mask)
    if guard is None:
        return plain, None, None
    rows = np.flatnonzero(guard.slack(x) <= GUARD_ACTIVE)
    if rows.size == 0:
        return plain, None, None
    idx = np.flatnonzero(mask)
    N = guard.normals(rows, x.size)[:, idx]
    zero = (x[idx] == 0.0) & (c[idx] > 0)
    a = grad[idx] + np.where(zero, 0.0, c[idx] * np.sign(x[idx]))
    e = np.where(zero, c[idx], 0.0)
    ub = np.concatenate([e - a, e + a])
    cand = np.unique(np.concatenate([np.argmax(N, axis=0), np.argmin(N, axis=0)]))
    best = None
    for _ in range(50):
        Ns = N[cand]
        A = np.block([[Ns.T, -np.ones((idx.size, 1))], [-Ns.T, -np.ones((idx.size, 1))]])
        cost = np.zeros(cand.size + 1)
        cost[-1] = 1.0
        res = linprog(cost, A_ub=A, b_ub=ub, bounds=(0, None), method="highs")
        if res.status != 0:
            break
        best = (cand, res.x[:-1])
        y = res.ineqlin.marginals
        red = -N @ (y[: idx.size] - y[idx.size :])
        red[cand] = np.inf
        top = np.argsort(red)[: 2 * idx.size]
        top = top[red[top] < -1e-12 * (1.0 + np.max(np.abs(y), initial=0.0))]
        if top.size == 0:
            break
        cand = np.union1d(cand, top)
    if best is None:
        return plain, None, None
    cand, mu = best
    adj = grad.copy()
    adj[idx] += N[cand].T @ mu
    return min(plain, kkt_violation(x, adj, c, bounds, mask)), rows[cand], mu


def lambda_max(objective, weights, block, start, bounds: BoxBounds | None = None, *,
               refit=None, safety: float = 1.05):
    """Smallest tuning value that keeps every coordinate of ``block`` at zero.

    The coordinates in ``block`` are set to zero, the ``refit`` coordinates
    (typically intercepts) are re-optimized, and the result is
    ``safety * max_j |dL/dx_j| / w_j`` over the block.  ``weights`` holds one
    weight per entry of ``block``.

    Returns ``(lambda, point)`` where ``point`` is the refitted base point.
    """
    x = _as_flat(start).copy()
    block = np.asarray(block)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != block.size or np.any(w <= 0):
        raise ValueError("need one positive weight per block coordinate")
    x[block] = 0.0
    if refit is not None and np.any(_free_mask(refit, x.size)):
        x, _ = maximize_smooth(objective, x, bounds, free=refit)
    ll, g = objective(x)
    if not np.isfinite(ll):
        raise ConvergenceError("base point for lambda_max is inadmissible")
    lam = float(np.max(np.abs(g[block]) / w)) * safety
    return lam, x
