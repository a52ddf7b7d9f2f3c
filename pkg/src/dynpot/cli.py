"""Command-line entry point: ``dynpot simulate|fit|features|backtest|study``.

Every subcommand accepts ``--config FILE.toml`` whose keys are the long
option names (dashes or underscores); flags given on the command line win.
Exit codes: 0 success, 1 invalid input or configuration, 2 a computation
that could not be completed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import (ConvergenceError, DegenerateInputError, DomainError, IngestionError,
                         RecursionOverflowError)

logger = logging.getLogger("dynpot")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# defaults live here rather than in argparse so a config file can fill the gaps
DEFAULTS = {
    "simulate": {"dgp": 1, "T": 25_000, "seed": 0, "out": None},
    "fit": {"data": None, "out": None, "estimator": "tal", "ic": "bic", "in_sample": 0.9,
            "n_lambda_k": 50, "n_lambda_sigma": 30},
    "features": {"ticks": None, "out": None, "window_h": "6w", "q": 0.9, "open": "09:30",
                 "close": "16:00", "utc_offset": 0},
    "backtest": {"fit": None, "data": None, "out": None, "alphas": None, "F_u": 0.9, "label": "series"},
    "study": {"dgp": "1", "T": "25000", "reps": 20, "seed": 0, "jobs": 1, "estimators": "mle,tal",
              "ic": "aic,hq,bic", "out": None, "n_lambda_k": 50, "n_lambda_sigma": 30},
}
REQUIRED = {"simulate": ("out",), "fit": ("data", "out"), "features": ("ticks", "out"),
            "backtest": ("fit", "data", "out"), "study": ("out",)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynpot", description="Dynamic peaks-over-threshold GPD regression.")
    p.add_argument("--version", action="version", version=f"dynpot {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a sample from a simulation design")
    s.add_argument("--dgp", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")

    f = sub.add_parser("fit", help="fit a model to a data or features CSV")
    f.add_argument("--data")
    f.add_argument("--out")
    f.add_argument("--estimator", choices=("mle", "almle", "tal"))
    f.add_argument("--ic", help="aic, hq, bic or a comma list")
    f.add_argument("--in-sample", dest="in_sample", type=float)
    f.add_argument("--n-lambda-k", dest="n_lambda_k", type=int)
    f.add_argument("--n-lambda-sigma", dest="n_lambda_sigma", type=int)

    x = sub.add_parser("features", help="bars, thresholds and indicators from a tick CSV")
    x.add_argument("--ticks")
    x.add_argument("--out")
    x.add_argument("--window-h", dest="window_h", help="threshold window: bars, or with suffix d/w")
    x.add_argument("--q", type=float)
    x.add_argument("--open")
    x.add_argument("--close")
    x.add_argument("--utc-offset", dest="utc_offset", type=int, help="minutes")

    b = sub.add_parser("backtest", help="out-of-sample VaR coverage and K-S test")
    b.add_argument("--fit")
    b.add_argument("--data")
    b.add_argument("--out")
    b.add_argument("--alphas", help="comma list")
    b.add_argument("--F-u", dest="F_u", type=float)
    b.add_argument("--label")

    st = sub.add_parser("study", help="Monte Carlo study")
    st.add_argument("--dgp", help="comma list of designs")
    st.add_argument("--T", help="comma list of sample sizes")
    st.add_argument("--reps", type=int)
    st.add_argument("--seed", type=int)
    st.add_argument("--jobs", type=int)
    st.add_argument("--estimators")
    st.add_argument("--ic")
    st.add_argument("--out")
    st.add_argument("--n-lambda-k", dest="n_lambda_k", type=int)
    st.add_argument("--n-lambda-sigma", dest="n_lambda_sigma", type=int)

    for sp in (s, f, x, b, st):
        sp.add_argument("--config", help="TOML file with option values")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _load_config(path, command) -> dict:
    try:
        import tomllib as tomli
    except ImportError:  # python < 3.11
        import tomli

    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if command in raw and isinstance(raw[command], dict):
        raw = raw[command]
    cfg = {}
    allowed = DEFAULTS[command]
    for k, v in raw.items():
        key = k.replace("-", "_")
        if key not in allowed:
            raise ValidationError(f"{path}: unknown key {k!r} for '{command}'")
        cfg[key] = v
    return cfg


def resolve(args) -> dict:
    """Defaults < config file < command-line flags."""
    cmd = args.command
    merged = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        merged.update(_load_config(args.config, cmd))
    for k in DEFAULTS[cmd]:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    missing = [k for k in REQUIRED[cmd] if merged.get(k) in (None, "")]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return merged


def _int_list(text, what):
    try:
        vals = [int(str(v).strip()) for v in str(text).split(",") if str(v).strip()]
    except ValueError:
        raise ValidationError(f"{what} must be a comma list of integers, got {text!r}") from None
    if not vals:
        raise ValidationError(f"{what} is empty")
    return vals


def _word_list(text):
    if isinstance(text, (list, tuple)):
        return [str(t).strip().lower() for t in text]
    return [t.strip().lower() for t in str(text).split(",") if t.strip()]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=True) + "\n")


# -- data files ------------------------------------------------------------------------

def write_data_csv(path, t, loss, u, panel):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "loss", "u", *panel.names])
        for i in range(panel.T):
            w.writerow([int(t[i]), format(float(loss[i]), ".17g"), format(float(u[i]), ".17g"),
                        *[format(float(v), ".17g") for v in panel.values[i]]])


def read_design(path):
    """A ``t,loss,u,<predictors>`` CSV as a design.

    Works for both the simulate output and a features file; rows with
    undefined (empty) predictor values are dropped.  A ``truth.json`` next
    to the file supplies the integration orders.
    """
    from .features import Design
    from .gpd import I0, PredictorPanel
    from .likelihood import ExceedanceSeries

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or header[:3] != ["t", "loss", "u"] or len(header) < 4:
        raise IngestionError("expected a header t,loss,u,<predictors>", path, 1)
    names = tuple(header[3:])
    rows, bad = [], 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(f"expected {len(header)} fields, got {len(row)}", path, line)
            if any(c == "" for c in row[3:]):
                bad += 1
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise IngestionError(f"unparsable field ({exc})", path, line) from None
    if not rows:
        raise DegenerateInputError(f"{path}: no complete rows")
    a = np.array(rows)
    order = (I0,) * len(names)
    truth = path.parent / "truth.json"
    if truth.exists():
        meta = json.loads(truth.read_text())
        if tuple(meta.get("predictors", ())) == names:
            order = tuple(meta["integration_order"])
    panel = PredictorPanel(a[:, 3:], order, names=names)
    series = ExceedanceSeries.from_losses(a[:, 1], a[:, 2])
    return Design(panel, series, a[:, 0].astype(np.int64), a[:, 1], a[:, 2], bad, {})


# -- subcommands ------------------------------------------------------------------------

def cmd_simulate(cfg) -> int:
    from .simulation import dgp_preset, simulate_series

    if cfg["dgp"] not in (1, 2, 3, 4):
        raise ValidationError("--dgp must be 1, 2, 3 or 4")
    if cfg["T"] < 100:
        raise ValidationError("--T must be at least 100")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = dgp_preset(cfg["dgp"], cfg["T"], seed=cfg["seed"])
    losses, panel = simulate_series(spec, cfg["T"])
    T = cfg["T"]
    write_data_csv(out / "data.csv", np.arange(1, T + 1), losses, np.full(T, spec.u), panel)
    truth = {"schema_version": 1, "T": T, "spec": spec.to_dict(),
             "beta_true": spec.beta_true(T).flatten().tolist(),
             "predictors": list(panel.names), "integration_order": list(panel.integration_order)}
    _write_json(out / "truth.json", truth)
    logger.info("wrote %s", out)
    return EXIT_OK


def _coef_table(path, fit):
    names = list(fit.names) or [f"z{j + 1}" for j in range(fit.p)]
    b1, b2 = fit.beta_hat.beta1, fit.beta_hat.beta2
    cell = lambda v: "" if v == 0.0 else format(float(v), ".17g")  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predictor", "k", "sigma"])
        w.writerow(["intercept", format(float(b1[0]), ".17g"), format(float(b2[0]), ".17g")])
        for j, n in enumerate(names):
            w.writerow([n, cell(b1[j + 1]), cell(b2[j + 1])])
        w.writerow(["log_sigma_lag", "", cell(b2[-1])])


def cmd_fit(cfg) -> int:
    from .estimators import (SolveCache, adaptive_weights, almle_grids, fit_almle, fit_mle,
                             fit_partial_k_mle, fit_two_step_all)
    from .gpd import PredictorPanel

    ics = [c.upper() for c in _word_list(cfg["ic"])]
    if not ics or any(c not in ("AIC", "HQ", "BIC") for c in ics):
        raise ValidationError("--ic must list aic, hq or bic")
    frac = float(cfg["in_sample"])
    if not 0.0 < frac <= 1.0:
        raise ValidationError("--in-sample must lie in (0, 1]")
    d = read_design(cfg["data"])
    n_in = int(np.floor(frac * d.panel.T))
    raw = d.panel.rows(slice(0, n_in))
    sd = raw.values.std(axis=0)
    if np.any(~(sd > 0)):
        bad = [raw.names[j] for j in np.flatnonzero(~(sd > 0))]
        raise DegenerateInputError(f"zero-variance predictors in the in-sample rows: {bad}")
    panel = PredictorPanel(raw.values / sd, raw.integration_order, sd, raw.names)
    series = d.series.rows(slice(0, n_in))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    extra = {"scale_factors": sd.tolist(), "n_in_sample": n_in, "data": str(cfg["data"]),
             "dropped_rows": int(d.dropped)}
    fits = {}
    if cfg["estimator"] == "mle":
        fits["MLE"] = fit_mle(series, panel)
    elif cfg["estimator"] == "tal":
        fits, _ = fit_two_step_all(series, panel, ics, n_k=cfg["n_lambda_k"], n_sigma=cfg["n_lambda_sigma"],
                                   cache=SolveCache())
    else:
        mle = fit_mle(series, panel)
        w = adaptive_weights(mle.beta_hat, fit_partial_k_mle(series, panel))
        gk, gs = almle_grids(series, panel, w, n_k=cfg["n_lambda_k"], n_sigma=cfg["n_lambda_sigma"])
        for c in ics:
            fits[c] = fit_almle(series, panel, w, gk, gs, c)
    single = len(fits) == 1
    for tag, fit in fits.items():
        fit.extra.update(extra)
        stem = "fit" if single else f"fit_{tag.lower()}"
        fit_json = json.loads(fit.to_json())
        _write_json(out / f"{stem}.json", fit_json)
        _coef_table(out / f"{stem}_coefficients.csv", fit)
        logger.info("%s: shape %s scale %s", tag, fit.active_k.tolist(), fit.active_sigma.tolist())
    return EXIT_OK


def cmd_features(cfg) -> int:
    from .features import SessionCalendar, build_bars, feature_table, load_ticks, parse_window

    def minutes(text):
        try:
            h, m = str(text).split(":")
            return int(h) * 60 + int(m)
        except ValueError:
            raise ValidationError(f"times must look like HH:MM, got {text!r}") from None

    try:
        cal = SessionCalendar(minutes(cfg["open"]), minutes(cfg["close"]), int(cfg["utc_offset"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    try:
        h = parse_window(cfg["window_h"], cal.bars_per_session)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if not 0.0 < float(cfg["q"]) < 1.0:
        raise ValidationError("--q must lie in (0, 1)")
    if not Path(cfg["ticks"]).exists():
        raise ValidationError(f"tick file not found: {cfg['ticks']}")
    ticks = load_ticks(cfg["ticks"])
    bars = build_bars(ticks, cal)
    table = feature_table(bars, h=h, q=float(cfg["q"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    logger.info("%d bars, %d feature rows, window %d bars", len(bars), table.t.size, h)
    return EXIT_OK


def cmd_backtest(cfg) -> int:
    from .estimators import FitResult
    from .gpd import PredictorPanel
    from .risk import ALPHAS, backtest

    fit_path = Path(cfg["fit"])
    if not fit_path.exists():
        raise ValidationError(f"fit file not found: {fit_path}")
    fit = FitResult.from_json(fit_path.read_text())
    F_u = float(cfg["F_u"])
    if not 0.0 < F_u < 1.0:
        raise ValidationError("--F-u must lie in (0, 1)")
    if cfg["alphas"] is None:
        alphas = [a for a in ALPHAS if a >= F_u]
    else:
        try:
            src = cfg["alphas"]
            alphas = [float(a) for a in (src if isinstance(src, list) else str(src).split(","))]
        except ValueError:
            raise ValidationError("--alphas must be a comma list of numbers") from None
    bad = [a for a in alphas if not F_u <= a < 1.0]
    if bad:
        raise ValidationError(f"alphas {bad} fall outside [F_u, 1) with F_u = {F_u}")
    d = read_design(cfg["data"])
    if tuple(fit.names) and tuple(fit.names) != d.panel.names:
        raise ValidationError("the data columns do not match the predictors of the fit")
    sf = np.asarray(fit.extra.get("scale_factors", np.ones(d.panel.p)), dtype=float)
    panel = PredictorPanel(d.panel.values / sf, d.panel.integration_order, sf, d.panel.names)
    n_in = int(fit.extra.get("n_in_sample", int(np.floor(0.9 * panel.T))))
    rep = backtest(fit.beta_hat, panel, d.loss, d.u, n_in=n_in, alphas=alphas, F_u=F_u, label=cfg["label"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "backtest.json", rep.to_dict())
    rep.write_csv(out / "coverage.csv")
    logger.info("coverage %s, K-S p = %.4g", {format(a, "g"): round(c, 4) for a, c in rep.coverage.items()},
                rep.ks_pvalue)
    return EXIT_OK


def cmd_study(cfg) -> int:
    from .simulation import StudyConfig, run_study

    presets = _int_list(cfg["dgp"], "--dgp")
    Ts = _int_list(cfg["T"], "--T")
    ests = _word_list(cfg["estimators"])
    ics = [c.upper() for c in _word_list(cfg["ic"])]
    if any(c not in ("AIC", "HQ", "BIC") for c in ics):
        raise ValidationError("--ic must list aic, hq or bic")
    try:
        config = StudyConfig(tuple(presets), tuple(Ts), int(cfg["reps"]), tuple(ests), tuple(ics),
                             int(cfg["seed"]), int(cfg["jobs"]), int(cfg["n_lambda_k"]),
                             int(cfg["n_lambda_sigma"]))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None

    def progress(r):
        logger.info("dgp %s T %s rep %s done%s", r["dgp"], r["T"], r["rep"],
                    f" (failed: {sorted(r['failed'])})" if r["failed"] else "")

    tables = run_study(config, out_dir=cfg["out"], progress=progress)
    fails = tables.failures()
    if fails:
        logger.warning("%d estimator runs failed; see manifest.json", len(fails))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "features": cmd_features,
            "backtest": cmd_backtest, "study": cmd_study}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            return COMMANDS[args.command](cfg)
    except (ValidationError, IngestionError) as exc:
        print(f"dynpot: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, DegenerateInputError, RecursionOverflowError, DomainError) as exc:
        print(f"dynpot: computation failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as exc:
        print(f"dynpot: I/O error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
