"""Tick ingestion, five-minute bars, rolling thresholds and market indicators.

Trades are bucketed into 5-minute slots inside trading sessions.  The bar
price is the median trade price of the slot; losses are negative log
returns between consecutive bars of the same session.  Indicators come in
three frequency classes:

``W``  computed from the trades inside one bar,
``A``  computed across the last ``T_w`` bars,
``R``  a ratio between a ``W`` and an ``A`` quantity.

Values that cannot be computed (an empty bar, a zero denominator, a window
that crosses a session start) are reported through a validity mask rather
than as NaN; the CSV writer turns them into empty fields.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DegenerateInputError, IngestionError, InsufficientHistoryError
from .gpd import I0, PredictorPanel
from .likelihood import ExceedanceSeries

logger = logging.getLogger(__name__)

BAR_MS = 300_000
DAY_MS = 86_400_000
WINDOWS = (2, 6, 12)
SESSIONS_PER_WEEK = 5

W_CLASS = ("TV", "TQ", "MTVV", "MTQV", "AM", "EAM", "dur", "MNRV", "MRV")
A_CLASS = ("Roll", "RollMod", "RollNeg", "RollModNeg", "RAC", "AMI", "TVV", "RTVV", "TQV", "RTQV", "RV")
R_CLASS = ("VR", "MNRV2RV", "MRV2RV")
REGISTRY = W_CLASS + A_CLASS + R_CLASS

# column layout of the design, in the order of the published coefficient tables
_W_ORDER = ("TV", "TQ", "AM", "MTVV", "EAM", "MTQV", "MRV", "MNRV", "dur")
_SHORT_ORDER = ("AMI", "VR", "RV", "MNRV2RV", "MRV2RV")
_LONG_ORDER = ("AMI", "Roll", "RollNeg", "RollMod", "RollModNeg", "TVV", "TQV", "RTVV", "RTQV",
               "RAC", "VR", "RV", "MNRV2RV", "MRV2RV")


class EmptySessionWarning(UserWarning):
    pass


# -- ticks -------------------------------------------------------------------------

@dataclass(frozen=True)
class TickRecord:
    timestamp_ms: int
    price: float
    volume: float
    duration_ms: float | None = None


@dataclass(frozen=True)
class TickData:
    """Column arrays of a trade tape sorted by timestamp."""

    timestamp_ms: np.ndarray
    price: np.ndarray
    volume: np.ndarray
    duration_ms: np.ndarray | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamp_ms, dtype=np.int64).reshape(-1)
        px = np.asarray(self.price, dtype=float).reshape(-1)
        vol = np.asarray(self.volume, dtype=float).reshape(-1)
        if not (ts.size == px.size == vol.size):
            raise ValueError("tick columns have different lengths")
        if np.any(~(px > 0)) or np.any(~np.isfinite(px)) or np.any(~(vol > 0)) or np.any(~np.isfinite(vol)):
            raise ValueError("prices and volumes must be positive and finite")
        if ts.size and np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be nondecreasing")
        dur = None
        if self.duration_ms is not None:
            dur = np.asarray(self.duration_ms, dtype=float).reshape(-1)
            if dur.size != ts.size:
                raise ValueError("duration column has the wrong length")
        object.__setattr__(self, "timestamp_ms", ts)
        object.__setattr__(self, "price", px)
        object.__setattr__(self, "volume", vol)
        object.__setattr__(self, "duration_ms", dur)

    def __len__(self):
        return self.price.size

    @classmethod
    def from_records(cls, records) -> "TickData":
        records = list(records)
        has_dur = bool(records) and all(r.duration_ms is not None for r in records)
        return cls([r.timestamp_ms for r in records], [r.price for r in records],
                   [r.volume for r in records], [r.duration_ms for r in records] if has_dur else None)

    def subset(self, mask) -> "TickData":
        dur = None if self.duration_ms is None else self.duration_ms[mask]
        return TickData(self.timestamp_ms[mask], self.price[mask], self.volume[mask], dur)


def load_ticks(path) -> TickData:
    """Read a ``timestamp_ms,price,volume[,duration_ms]`` CSV.

    Rows are validated one by one; the first problem raises
    :class:`IngestionError` with the line number.
    """
    path = Path(path)
    ts, px, vol, dur = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError("empty file", path) from None
        if header not in (["timestamp_ms", "price", "volume"], ["timestamp_ms", "price", "volume", "duration_ms"]):
            raise IngestionError(f"unexpected header {header}", path, 1)
        with_dur = len(header) == 4
        last = None
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", path, line)
            try:
                t = int(row[0])
                p = float(row[1])
                v = float(row[2])
                d = float(row[3]) if with_dur and row[3].strip() else None
            except ValueError as exc:
                raise IngestionError(f"unparsable field ({exc})", path, line) from None
            if not (math.isfinite(p) and p > 0):
                raise IngestionError(f"price must be positive, got {row[1]}", path, line)
            if not (math.isfinite(v) and v > 0):
                raise IngestionError(f"volume must be positive, got {row[2]}", path, line)
            if last is not None and t < last:
                raise IngestionError("timestamps decrease", path, line)
            last = t
            ts.append(t)
            px.append(p)
            vol.append(v)
            dur.append(d)
    durations = None
    if with_dur and dur and all(d is not None for d in dur):
        durations = dur
    return TickData(np.array(ts, dtype=np.int64), px, vol, durations)


def write_ticks(ticks: TickData, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["timestamp_ms", "price", "volume"]
        if ticks.duration_ms is not None:
            cols.append("duration_ms")
        w.writerow(cols)
        for i in range(len(ticks)):
            row = [int(ticks.timestamp_ms[i]), _fmt(ticks.price[i]), _fmt(ticks.volume[i])]
            if ticks.duration_ms is not None:
                row.append(_fmt(ticks.duration_ms[i]))
            w.writerow(row)


@dataclass(frozen=True)
class SessionCalendar:
    """Daily trading hours given as minutes after midnight (UTC plus ``utc_offset_min``)."""

    open_min: int = 570
    close_min: int = 960
    utc_offset_min: int = 0

    def __post_init__(self):
        if not (0 <= self.open_min < self.close_min <= 1440):
            raise ValueError("need 0 <= open < close <= 1440 minutes")
        if (self.close_min - self.open_min) * 60_000 % BAR_MS:
            raise ValueError("session length must be a whole number of 5-minute slots")

    @property
    def bars_per_session(self) -> int:
        return (self.close_min - self.open_min) * 60_000 // BAR_MS

    def sessions(self, timestamp_ms) -> list:
        """``(start_ms, end_ms)`` of every calendar day touched by the timestamps."""
        ts = np.asarray(timestamp_ms, dtype=np.int64)
        if not ts.size:
            return []
        off = self.utc_offset_min * 60_000
        days = np.unique((ts + off) // DAY_MS)
        out = []
        for d in days.tolist():
            start = d * DAY_MS - off + self.open_min * 60_000
            out.append((start, start + (self.close_min - self.open_min) * 60_000))
        return out


# -- bars ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Bars:
    """Five-minute bars and the trades that fall into them.

    ``tick_start`` has one entry per bar plus a final sentinel, so the
    trades of bar ``t`` are ``ticks[tick_start[t]:tick_start[t + 1]]``.
    ``tick_return`` is the log return of every trade against the previous
    trade of the same session (0 for a session's first trade).
    """

    price: np.ndarray
    loss: np.ndarray
    loss_ok: np.ndarray
    n: np.ndarray
    session: np.ndarray
    start_ms: np.ndarray
    tick_start: np.ndarray
    ticks: TickData
    tick_return: np.ndarray
    bars_per_session: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return self.price.size

    @property
    def price_ok(self) -> np.ndarray:
        return np.isfinite(self.price)

    def trades(self, t: int) -> slice:
        return slice(int(self.tick_start[t]), int(self.tick_start[t + 1]))


def _median_sorted_groups(values, starts, counts):
    out = np.full(counts.size, np.nan)
    for b in np.flatnonzero(counts):
        seg = np.sort(values[starts[b]: starts[b] + counts[b]])
        m = seg.size
        out[b] = seg[m // 2] if m % 2 else 0.5 * (seg[m // 2 - 1] + seg[m // 2])
    return out


def build_bars(ticks: TickData, calendar: SessionCalendar | None = None) -> Bars:
    """Bucket trades into 5-minute slots of each session.

    Empty slots carry the previous bar price of the same session forward;
    slots before a session's first trade have no price.  Trades outside the
    sessions are dropped.  Sessions without any trade are skipped with an
    :class:`EmptySessionWarning`.
    """
    calendar = calendar or SessionCalendar()
    sessions = calendar.sessions(ticks.timestamp_ms)
    nb = calendar.bars_per_session
    ts = ticks.timestamp_ms
    keep = np.zeros(ts.size, bool)
    slot = np.full(ts.size, -1, dtype=np.int64)
    used = []
    for start, end in sessions:
        m = (ts >= start) & (ts < end)
        if not np.any(m):
            warnings.warn(f"session starting at {start} has no trades inside trading hours; skipped",
                          EmptySessionWarning, stacklevel=2)
            continue
        s = len(used)
        used.append(start)
        keep |= m
        slot[m] = s * nb + (ts[m] - start) // BAR_MS
    if not used:
        raise DegenerateInputError("no trades fall inside any session")
    dropped = int(ts.size - np.count_nonzero(keep))
    if dropped:
        logger.info("dropped %d trades outside trading hours", dropped)
    tk = ticks.subset(keep)
    slot = slot[keep]
    n_bars = len(used) * nb
    counts = np.bincount(slot, minlength=n_bars)
    tick_start = np.concatenate([[0], np.cumsum(counts)])
    price = _median_sorted_groups(tk.price, tick_start[:-1], counts)
    session = np.repeat(np.arange(len(used)), nb)
    first = np.arange(n_bars) % nb == 0
    # carry prices forward within a session
    for t in range(1, n_bars):
        if not first[t] and counts[t] == 0:
            price[t] = price[t - 1]
    loss = np.zeros(n_bars)
    loss_ok = np.zeros(n_bars, bool)
    prev = np.roll(price, 1)
    ok = ~first & np.isfinite(price) & np.isfinite(prev)
    loss[ok] = -(np.log(price[ok]) - np.log(prev[ok]))
    loss_ok[ok] = True
    lp = np.log(tk.price)
    tick_ret = np.zeros(lp.size)
    if lp.size > 1:
        tick_ret[1:] = np.diff(lp)
        sess_of_tick = session[slot]
        new = np.concatenate([[True], sess_of_tick[1:] != sess_of_tick[:-1]])
        tick_ret[new] = 0.0
    start_ms = np.array([s + k * BAR_MS for s in used for k in range(nb)], dtype=np.int64)
    return Bars(price, loss, loss_ok, counts, session, start_ms, tick_start, tk, tick_ret, nb)


# -- thresholds ----------------------------------------------------------------------------

def rolling_threshold(losses, h: int, q: float = 0.9, valid=None):
    """Empirical ``q``-quantile of the previous ``h`` losses.

    The quantile is the order statistic ``ceil(q h)`` of
    ``{l_{t-1}, ..., l_{t-h}}``, so ``u_t`` never uses ``l_t`` or later.
    When ``valid`` is given the window runs over the valid losses only.
    Returns ``(u, ok)`` with ``ok`` False on the warm-up.
    """
    losses = np.asarray(losses, dtype=float).reshape(-1)
    if h < 10:
        raise ValueError("the threshold window needs at least 10 observations")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    valid = np.ones(losses.size, bool) if valid is None else np.asarray(valid, bool)
    idx = np.flatnonzero(valid)
    if idx.size <= h:
        raise InsufficientHistoryError(f"need more than {h} losses, got {idx.size}")
    x = losses[idx]
    r = math.ceil(q * h - 1e-12)
    win = sliding_window_view(x[:-1], h)
    u_c = np.partition(win, r - 1, axis=1)[:, r - 1]
    u = np.zeros(losses.size)
    ok = np.zeros(losses.size, bool)
    u[idx[h:]] = u_c
    ok[idx[h:]] = True
    return u, ok


def parse_window(text, bars_per_session: int) -> int:
    """Window lengths such as ``"600"``, ``"600b"``, ``"5d"`` or ``"6w"`` in bars."""
    m = re.fullmatch(r"\s*(\d+)\s*([bdw]?)\s*", str(text))
    if not m:
        raise ValueError(f"cannot parse window {text!r}")
    n, unit = int(m.group(1)), m.group(2)
    if n <= 0:
        raise ValueError("window must be positive")
    if unit == "d":
        return n * bars_per_session
    if unit == "w":
        return n * bars_per_session * SESSIONS_PER_WEEK
    return n


# -- indicators ------------------------------------------------------------------------------

@dataclass(frozen=True)
class IndicatorSpec:
    name: str
    window: int | None = None

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ValueError(f"unknown indicator {self.name!r}")
        if self.name in W_CLASS:
            if self.window is not None:
                raise ValueError(f"{self.name} is computed within a bar and takes no window")
        elif self.window is None or int(self.window) < 2:
            raise ValueError(f"{self.name} needs a window of at least 2 bars")

    @property
    def frequency(self) -> str:
        if self.name in W_CLASS:
            return "W"
        return "A" if self.name in A_CLASS else "R"

    @property
    def label(self) -> str:
        return self.name if self.window is None else f"{self.name}_{self.window}"

    @classmethod
    def parse(cls, label: str) -> "IndicatorSpec":
        name, _, w = label.partition("_")
        return cls(name, int(w) if w else None)


def default_specs() -> list:
    """The 42 design columns in their canonical order."""
    out = [IndicatorSpec(n) for n in _W_ORDER]
    out += [IndicatorSpec(n, 2) for n in _SHORT_ORDER]
    for w in (6, 12):
        out += [IndicatorSpec(n, w) for n in _LONG_ORDER]
    return out


def canonical_order(specs) -> list:
    """Sort specs into the canonical layout; specs outside it follow by label."""
    ref = {s.label: i for i, s in enumerate(default_specs())}
    return sorted(specs, key=lambda s: (ref.get(s.label, len(ref)), s.label))


def _group_sum(x, bars: Bars):
    counts = bars.n
    out = np.zeros(counts.size)
    nz = np.flatnonzero(counts)
    if nz.size:
        out[nz] = np.add.reduceat(x, bars.tick_start[nz])
    return out


def _within(bars: Bars):
    """All W-class indicators at once (values, ok)."""
    if "W" in bars._cache:
        return bars._cache["W"]
    tk = bars.ticks
    n = bars.n.astype(float)
    ok = bars.n > 0
    safe_n = np.where(ok, n, 1.0)
    pv = tk.price * tk.volume
    rep = lambda a: np.repeat(a, bars.n)  # noqa: E731
    tv = _group_sum(pv, bars)
    tq = _group_sum(tk.volume, bars)
    mean_pv = tv / safe_n
    mean_v = tq / safe_n
    mtvv = np.sqrt(_group_sum((pv - rep(mean_pv)) ** 2, bars) / safe_n)
    mtqv = np.sqrt(_group_sum((tk.volume - rep(mean_v)) ** 2, bars) / safe_n)
    am = _group_sum(np.abs(bars.tick_return) / pv, bars) / safe_n
    hi = np.full(n.size, -np.inf)
    lo = np.full(n.size, np.inf)
    nz = np.flatnonzero(ok)
    if nz.size:
        hi[nz] = np.maximum.reduceat(tk.price, bars.tick_start[nz])
        lo[nz] = np.minimum.reduceat(tk.price, bars.tick_start[nz])
    eam = np.where(ok, (hi - lo) / np.where(ok, tv, 1.0), 0.0)
    out = {"TV": tv, "TQ": tq, "MTVV": mtvv, "MTQV": mtqv, "AM": am, "EAM": eam}
    oks = {k: ok.copy() for k in out}
    if tk.duration_ms is not None:
        out["dur"] = _group_sum(tk.duration_ms, bars) / safe_n
        oks["dur"] = ok.copy()
    else:
        out["dur"] = np.zeros(n.size)
        oks["dur"] = np.zeros(n.size, bool)
    bar_lp = np.log(np.where(bars.price_ok, bars.price, 1.0))
    dev = np.log(tk.price) - rep(bar_lp)
    out["MNRV"] = np.sqrt(_group_sum(dev ** 2, bars) / safe_n)
    oks["MNRV"] = ok.copy()
    out["MRV"] = np.sqrt(_group_sum(bars.tick_return ** 2, bars))
    oks["MRV"] = ok.copy()
    # population variance of the within-bar log-price deviations (used by VR)
    mdev = _group_sum(dev, bars) / safe_n
    out["_vardev"] = _group_sum((dev - rep(mdev)) ** 2, bars) / safe_n
    oks["_vardev"] = ok.copy()
    for k in out:
        out[k] = np.where(oks[k], out[k], 0.0)
    bars._cache["W"] = (out, oks)
    return out, oks


def _windows(x, ok, w, shift=0):
    """Trailing windows ``x[t-shift-w+1 .. t-shift]`` for every t (zeros/False where short)."""
    n = x.size
    pad = w - 1 + shift
    xp = np.concatenate([np.zeros(pad), x])
    op = np.concatenate([np.zeros(pad, bool), ok])
    X = sliding_window_view(xp, w)[:n]
    O = np.all(sliding_window_view(op, w)[:n], axis=1)
    return X, O


def _pop_cov(X, Y):
    return np.mean((X - X.mean(axis=1, keepdims=True)) * (Y - Y.mean(axis=1, keepdims=True)), axis=1)


def _pop_sd(X):
    return np.sqrt(np.mean((X - X.mean(axis=1, keepdims=True)) ** 2, axis=1))


def _across(name, w, bars: Bars):
    key = (name, w)
    if key in bars._cache:
        return bars._cache[key]
    W, Wok = _within(bars)
    r = -bars.loss  # 5-min log return
    rok = bars.loss_ok
    dp = np.where(rok, bars.price - np.roll(bars.price, 1), 0.0)
    if name in ("Roll", "RollMod", "RollNeg", "RollModNeg"):
        X, ox = _windows(dp, rok, w)
        Y, oy = _windows(dp, rok, w, shift=1)
        ok = ox & oy
        val = _pop_cov(X, Y)
        if name in ("RollMod", "RollModNeg"):
            val = val / np.where(bars.price_ok, bars.price, 1.0)
        if name.endswith("Neg"):
            val = np.where(val < 0, val, 0.0)
    elif name == "RAC":
        X, ox = _windows(r, rok, w)
        Y, oy = _windows(r, rok, w, shift=1)
        sx, sy = _pop_sd(X), _pop_sd(Y)
        ok = ox & oy & (sx > 0) & (sy > 0)
        val = _pop_cov(X, Y) / np.where(ok, sx * sy, 1.0)
    elif name == "AMI":
        X, ox = _windows(np.abs(r), rok, w)
        V, ov = _windows(W["TV"], Wok["TV"], w)
        ok = ox & ov
        val = np.mean(X / np.where(V > 0, V, 1.0), axis=1)
    elif name in ("TVV", "RTVV", "TQV", "RTQV"):
        base = "TV" if name in ("TVV", "RTVV") else "TQ"
        V, ok = _windows(W[base], Wok[base], w)
        val = _pop_sd(V)
        if name.startswith("R"):
            m = V.mean(axis=1)
            ok = ok & (m > 0)
            val = val / np.where(ok, m, 1.0)
    elif name == "RV":
        X, ok = _windows(r, rok, w)
        val = np.sqrt(np.sum(X ** 2, axis=1))
    elif name == "VR":
        X, ox = _windows(r, rok, w)
        vr = np.mean((X - X.mean(axis=1, keepdims=True)) ** 2, axis=1)
        ok = ox & Wok["_vardev"] & (vr > 0)
        n = bars.n.astype(float)
        val = w * W["_vardev"] / np.where(ok, n * vr, 1.0)
    elif name in ("MNRV2RV", "MRV2RV"):
        rv, rv_ok = _across("RV", w, bars)
        num = W[name[:-3]]
        ok = rv_ok & Wok[name[:-3]] & (rv > 0)
        val = num / np.where(ok, rv, 1.0)
    else:  # pragma: no cover - guarded by IndicatorSpec
        raise ValueError(name)
    val = np.where(ok, val, 0.0)
    bars._cache[key] = (val, ok)
    return val, ok


def indicator_series(spec: IndicatorSpec, bars: Bars):
    """``(values, ok)`` of one indicator for every bar; values are 0 where not ok."""
    if spec.frequency == "W":
        W, Wok = _within(bars)
        return W[spec.name], Wok[spec.name]
    return _across(spec.name, int(spec.window), bars)


def compute_indicator(spec: IndicatorSpec, bars: Bars, t: int):
    """Indicator value at bar ``t``, or ``None`` when it is undefined there."""
    if not 0 <= t < len(bars):
        raise IndexError(t)
    val, ok = indicator_series(spec, bars)
    return float(val[t]) if ok[t] else None


# -- feature tables and designs -----------------------------------------------------------------

@dataclass
class FeatureTable:
    """One row per bar with a defined loss and threshold.

    ``values[i]`` holds the indicators of bar ``t[i] - 1`` (one-step lag);
    ``ok[i]`` marks which of them are defined.
    """

    t: np.ndarray
    loss: np.ndarray
    u: np.ndarray
    labels: tuple
    values: np.ndarray
    ok: np.ndarray
    dropped_warmup: int = 0

    def header(self) -> list:
        return ["t", "loss", "u", *self.labels]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for i in range(self.t.size):
                row = [int(self.t[i]), _fmt(self.loss[i]), _fmt(self.u[i])]
                row += [_fmt(v) if o else "" for v, o in zip(self.values[i], self.ok[i])]
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "FeatureTable":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestionError("empty features file", path) from None
            if header[:3] != ["t", "loss", "u"]:
                raise IngestionError("features header must start with t,loss,u", path, 1)
            labels = tuple(header[3:])
            for lab in labels:
                try:
                    IndicatorSpec.parse(lab)
                except ValueError as exc:
                    raise IngestionError(str(exc), path, 1) from None
            ts, ls, us, vals, oks = [], [], [], [], []
            for line, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise IngestionError(f"expected {len(header)} fields, got {len(row)}", path, line)
                try:
                    ts.append(int(row[0]))
                    ls.append(float(row[1]))
                    us.append(float(row[2]))
                    vals.append([float(c) if c != "" else 0.0 for c in row[3:]])
                except ValueError as exc:
                    raise IngestionError(f"unparsable field ({exc})", path, line) from None
                oks.append([c != "" for c in row[3:]])
        k = len(labels)
        return cls(np.array(ts, dtype=np.int64), np.array(ls), np.array(us), labels,
                   np.array(vals, dtype=float).reshape(-1, k), np.array(oks, dtype=bool).reshape(-1, k))

    def design(self):
        """Drop rows with any undefined indicator; see :func:`build_design`."""
        keep = np.all(self.ok, axis=1)
        if not np.any(keep):
            raise DegenerateInputError("no row has every indicator defined")
        panel = PredictorPanel(self.values[keep], (I0,) * len(self.labels), names=self.labels)
        series = ExceedanceSeries.from_losses(self.loss[keep], self.u[keep])
        return Design(panel, series, self.t[keep], self.loss[keep], self.u[keep],
                      int(np.count_nonzero(~keep)), _drop_counts(self))


def _drop_counts(table: FeatureTable) -> dict:
    bad = ~table.ok
    return {lab: int(np.count_nonzero(bad[:, j])) for j, lab in enumerate(table.labels) if np.any(bad[:, j])}


@dataclass
class Design:
    panel: PredictorPanel
    series: ExceedanceSeries
    t: np.ndarray
    loss: np.ndarray
    u: np.ndarray
    dropped: int
    undefined_by_column: dict


def feature_table(bars: Bars, specs=None, *, h: int = 600, q: float = 0.9) -> FeatureTable:
    specs = canonical_order(specs if specs is not None else default_specs())
    u, u_ok = rolling_threshold(bars.loss, h, q, valid=bars.loss_ok)
    rows = np.flatnonzero(bars.loss_ok & u_ok)
    lag = rows - 1
    cols, oks = [], []
    for s in specs:
        v, o = indicator_series(s, bars)
        cols.append(v[lag])
        oks.append(o[lag])
    values = np.column_stack(cols) if cols else np.zeros((rows.size, 0))
    ok = np.column_stack(oks) if oks else np.zeros((rows.size, 0), bool)
    warm = int(np.count_nonzero(bars.loss_ok & ~u_ok))
    return FeatureTable(rows, bars.loss[rows], u[rows], tuple(s.label for s in specs), values, ok, warm)


def build_design(bars: Bars, specs=None, *, h: int = 600, q: float = 0.9) -> Design:
    """Aligned design: indicators at ``t-1`` against the excess of bar ``t``.

    Rows where any indicator is undefined are dropped and counted; the
    columns follow the canonical order regardless of the order of ``specs``.
    """
    return feature_table(bars, specs, h=h, q=q).design()


def simulate_ticks(n_sessions: int = 5, *, seed: int = 0, calendar: SessionCalendar | None = None,
                   rate_per_bar: float = 20.0, p0: float = 100.0, day0: int = 19_000,
                   with_duration: bool = True) -> TickData:
    """A synthetic trade tape: Poisson arrivals, a heavy-tailed random-walk price.

    Sessions fall on consecutive weekdays starting at day number ``day0``.
    Used by the self-test pipelines, not meant to mimic any market.
    """
    calendar = calendar or SessionCalendar()
    rng = np.random.default_rng(seed)
    ts, px, vol, dur = [], [], [], []
    price = p0
    day = day0
    for _ in range(n_sessions):
        while (day + 3) % 7 >= 5:  # 1970-01-01 was a Thursday
            day += 1
        start = day * DAY_MS - calendar.utc_offset_min * 60_000 + calendar.open_min * 60_000
        length = calendar.bars_per_session * BAR_MS
        k = rng.poisson(rate_per_bar * calendar.bars_per_session)
        times = np.sort(rng.integers(0, length, size=k))
        vol_scale = np.exp(0.5 * rng.standard_normal())
        steps = 2e-4 * vol_scale * rng.standard_t(4, size=k)
        path = price * np.exp(np.cumsum(steps))
        ts.append(start + times)
        px.append(np.round(path, 4))
        vol.append(rng.integers(1, 50, size=k) * 100.0)
        dur.append(rng.exponential(800.0, size=k).round(0) + 1.0)
        price = float(path[-1]) if k else price
        day += 1
    tsa = np.concatenate(ts).astype(np.int64)
    return TickData(tsa, np.concatenate(px), np.concatenate(vol),
                    np.concatenate(dur) if with_duration else None)


def _fmt(v) -> str:
    return format(float(v), ".17g")
