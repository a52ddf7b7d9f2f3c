"""Loop-by-loop evaluation of the indicator formulas, used as the test oracle.

Written directly from the formula tables with plain Python floats and no
shared code with the package, so the two implementations only agree when
both follow the same conventions (population moments, session-bounded
windows, undefined when a denominator or input is missing).
"""
import csv
import math

BAR_MS = 300_000
DAY_MS = 86_400_000


def read_ticks(path):
    rows = list(csv.DictReader(open(path)))
    return [(int(r["timestamp_ms"]), float(r["price"]), float(r["volume"]),
             float(r["duration_ms"]) if r.get("duration_ms") else None) for r in rows]


def _median(xs):
    s = sorted(xs)
    m = len(s)
    return s[m // 2] if m % 2 else 0.5 * (s[m // 2 - 1] + s[m // 2])


def _mean(xs):
    return sum(xs) / len(xs)


def _pvar(xs):
    m = _mean(xs)
    return sum((x - m) ** 2 for x in xs) / len(xs)


def _pcov(xs, ys):
    mx, my = _mean(xs), _mean(ys)
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / len(xs)


def bars_from_ticks(ticks, open_min, close_min):
    nb = (close_min - open_min) * 60_000 // BAR_MS
    days = sorted({t // DAY_MS for t, *_ in ticks})
    bars = []
    for s, d in enumerate(days):
        start = d * DAY_MS + open_min * 60_000
        sess = [tk for tk in ticks if start <= tk[0] < start + nb * BAR_MS]
        prev_px = None
        for b in range(nb):
            lo = start + b * BAR_MS
            trades = [tk for tk in sess if lo <= tk[0] < lo + BAR_MS]
            bars.append({"session": s, "first": b == 0, "trades": trades})
        # trade returns against the previous trade of the session
        for bar in bars[-nb:]:
            rets = []
            for tk in bar["trades"]:
                rets.append(0.0 if prev_px is None else math.log(tk[1]) - math.log(prev_px))
                prev_px = tk[1]
            bar["rets"] = rets
    for i, bar in enumerate(bars):
        if bar["trades"]:
            bar["P"] = _median([tk[1] for tk in bar["trades"]])
        elif not bar["first"] and bars[i - 1].get("P") is not None:
            bar["P"] = bars[i - 1]["P"]
        else:
            bar["P"] = None
        if not bar["first"] and bar["P"] is not None and bars[i - 1]["P"] is not None:
            bar["R"] = math.log(bar["P"]) - math.log(bars[i - 1]["P"])
        else:
            bar["R"] = None
    return bars


def within(bar, name):
    tr = bar["trades"]
    n = len(tr)
    if n == 0:
        return None
    P = [t[1] for t in tr]
    V = [t[2] for t in tr]
    PV = [p * v for p, v in zip(P, V)]
    if name == "TV":
        return sum(PV)
    if name == "TQ":
        return sum(V)
    if name == "MTVV":
        return math.sqrt(_pvar(PV))
    if name == "MTQV":
        return math.sqrt(_pvar(V))
    if name == "AM":
        return sum(abs(r) / pv for r, pv in zip(bar["rets"], PV)) / n
    if name == "EAM":
        return (max(P) - min(P)) / sum(PV)
    if name == "dur":
        d = [t[3] for t in tr]
        return None if any(x is None for x in d) else sum(d) / n
    if name == "MNRV":
        lp = math.log(bar["P"])
        return math.sqrt(sum((math.log(p) - lp) ** 2 for p in P) / n)
    if name == "MRV":
        return math.sqrt(sum(r * r for r in bar["rets"]))
    raise KeyError(name)


def across(bars, t, name, w):
    def R(j):
        return bars[j]["R"] if j >= 0 else None

    def dP(j):
        return bars[j]["P"] - bars[j - 1]["P"] if j >= 1 and bars[j]["R"] is not None else None

    if name in ("Roll", "RollMod", "RollNeg", "RollModNeg"):
        x = [dP(t - j) for j in range(w)]
        y = [dP(t - 1 - j) for j in range(w)]
        if None in x or None in y:
            return None
        v = _pcov(x, y)
        if name.startswith("RollMod"):
            v = v / bars[t]["P"]
        if name.endswith("Neg"):
            v = v if v < 0 else 0.0
        return v
    if name == "RAC":
        x = [R(t - j) for j in range(w)]
        y = [R(t - 1 - j) for j in range(w)]
        if None in x or None in y:
            return None
        sx, sy = math.sqrt(_pvar(x)), math.sqrt(_pvar(y))
        if sx == 0 or sy == 0:
            return None
        return _pcov(x, y) / (sx * sy)
    if name == "AMI":
        terms = []
        for j in range(w):
            r = R(t - j)
            tv = within(bars[t - j], "TV") if t - j >= 0 else None
            if r is None or tv is None:
                return None
            terms.append(abs(r) / tv)
        return sum(terms) / w
    if name in ("TVV", "RTVV", "TQV", "RTQV"):
        base = "TV" if "TV" in name else "TQ"
        xs = [within(bars[t - j], base) if t - j >= 0 else None for j in range(w)]
        if None in xs:
            return None
        sd = math.sqrt(_pvar(xs))
        if name.startswith("R"):
            m = _mean(xs)
            return None if m <= 0 else sd / m
        return sd
    if name == "RV":
        x = [R(t - j) for j in range(w)]
        return None if None in x else math.sqrt(sum(r * r for r in x))
    if name == "VR":
        x = [R(t - j) for j in range(w)]
        tr = bars[t]["trades"]
        if None in x or not tr or _pvar(x) == 0:
            return None
        lp = math.log(bars[t]["P"])
        dev = [math.log(tk[1]) - lp for tk in tr]
        return w * _pvar(dev) / (len(tr) * _pvar(x))
    if name in ("MNRV2RV", "MRV2RV"):
        rv = across(bars, t, "RV", w)
        num = within(bars[t], name[:-3])
        if rv is None or num is None or rv == 0:
            return None
        return num / rv
    raise KeyError(name)


def indicator(bars, t, label):
    name, _, w = label.partition("_")
    return within(bars[t], name) if not w else across(bars, t, name, int(w))


def features(bars, labels, h, q=0.9):
    """Rows ``(t, loss, u, indicators at t-1)`` for bars with a loss and a full threshold window."""
    valid = [t for t, b in enumerate(bars) if b["R"] is not None]
    out = []
    r = math.ceil(q * h - 1e-12)
    for i, t in enumerate(valid):
        if i < h:
            continue
        past = sorted(-bars[s]["R"] for s in valid[i - h:i])
        u = past[r - 1]
        out.append((t, -bars[t]["R"], u, [indicator(bars, t - 1, lab) for lab in labels]))
    return out
