import csv
import math
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynpot.exceptions import IngestionError, InsufficientHistoryError
from dynpot.features import (BAR_MS, DAY_MS, REGISTRY, EmptySessionWarning, FeatureTable, IndicatorSpec,
                             SessionCalendar, TickData, build_bars, build_design, canonical_order,
                             compute_indicator, default_specs, feature_table, indicator_series, load_ticks,
                             parse_window, rolling_threshold, simulate_ticks, write_ticks)

DATA = Path(__file__).parent / "data"
FIXTURE_CAL = SessionCalendar(570, 650)
# the formulas are evaluated in a different operation order by the oracle,
# so agreement is required to a few ulps rather than bit for bit
ULPS = 1e-13

DAY = 19_001 * DAY_MS + 570 * 60_000


def tape(trades, duration=False):
    """Ticks from ``(bar, second, price, volume)`` tuples in one session."""
    ts = [DAY + b * BAR_MS + s * 1000 for b, s, _, _ in trades]
    dur = [100.0] * len(trades) if duration else None
    return TickData(ts, [p for _, _, p, _ in trades], [v for _, _, _, v in trades], dur)


def read_golden(name):
    rows = list(csv.reader(open(DATA / name)))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def fixture_bars():
    return build_bars(load_ticks(DATA / "ticks_fixture.csv"), FIXTURE_CAL)


class TestBars:
    def test_odd_median(self):
        b = build_bars(tape([(0, 1, 10.0, 1), (0, 2, 12.0, 1), (0, 3, 11.0, 1)]), SessionCalendar(570, 580))
        assert b.price[0] == 11.0

    def test_even_median(self):
        b = build_bars(tape([(0, 1, 10.0, 1), (0, 2, 12.0, 1)]), SessionCalendar(570, 580))
        assert b.price[0] == 11.0

    def test_loss(self):
        b = build_bars(tape([(0, 1, 100.0, 1), (1, 1, 99.0, 1)]), SessionCalendar(570, 580))
        assert b.loss_ok.tolist() == [False, True]
        assert b.loss[1] == pytest.approx(-math.log(0.99), rel=1e-15)
        assert b.loss[1] == pytest.approx(0.01005033585350145, rel=1e-15)

    def test_carry_forward(self):
        b = build_bars(tape([(0, 1, 100.0, 1), (2, 1, 101.0, 1)]), SessionCalendar(570, 585))
        assert b.price.tolist() == [100.0, 100.0, 101.0]
        assert b.n.tolist() == [1, 0, 1]
        assert b.loss[1] == 0.0 and b.loss_ok[1]

    def test_no_loss_across_sessions(self, fixture_bars):
        first = np.arange(len(fixture_bars)) % fixture_bars.bars_per_session == 0
        assert not np.any(fixture_bars.loss_ok[first])

    def test_trades_outside_hours_dropped(self, fixture_bars):
        raw = load_ticks(DATA / "ticks_fixture.csv")
        assert fixture_bars.n.sum() == len(raw) - 3

    def test_empty_session_warns(self):
        ticks = tape([(0, 1, 10.0, 1)])
        # a second day touched only before the open
        ticks = TickData(np.r_[ticks.timestamp_ms, DAY + DAY_MS - 3_600_000], [10.0, 10.0], [1.0, 1.0])
        with pytest.warns(EmptySessionWarning):
            b = build_bars(ticks, SessionCalendar(570, 580))
        assert len(b) == 2


class TestIngestion:
    def test_line_numbers(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("timestamp_ms,price,volume\n1,10,5\n2,-1,5\n")
        with pytest.raises(IngestionError, match=r"t.csv:3"):
            load_ticks(p)

    def test_decreasing_time(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("timestamp_ms,price,volume\n5,10,5\n2,10,5\n")
        with pytest.raises(IngestionError, match="decrease"):
            load_ticks(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time,price,volume\n")
        with pytest.raises(IngestionError):
            load_ticks(p)

    def test_roundtrip(self, tmp_path):
        ticks = simulate_ticks(2, seed=3)
        write_ticks(ticks, tmp_path / "x.csv")
        back = load_ticks(tmp_path / "x.csv")
        np.testing.assert_array_equal(back.price, ticks.price)
        np.testing.assert_array_equal(back.duration_ms, ticks.duration_ms)


class TestThreshold:
    def test_order_statistic(self):
        losses = np.r_[np.arange(1.0, 11.0), 0.0]
        u, ok = rolling_threshold(losses, 10, 0.9)
        assert ok.tolist() == [False] * 10 + [True]
        assert u[10] == 9.0

    def test_constant(self):
        u, ok = rolling_threshold(np.full(40, 0.3), 10)
        np.testing.assert_array_equal(u[ok], 0.3)

    def test_no_look_ahead(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(300)
        u1, _ = rolling_threshold(x, 50)
        y = x.copy()
        y[200:] += rng.standard_normal(100) * 10
        u2, _ = rolling_threshold(y, 50)
        np.testing.assert_array_equal(u1[:201], u2[:201])

    def test_iid_exceedance_rate(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(60_000)
        u, ok = rolling_threshold(x, 600)
        rate = np.mean(x[ok] > u[ok])
        # serially dependent indicators: widen the binomial band
        assert abs(rate - 0.1) < 3 * 2.576 * math.sqrt(0.09 / ok.sum())

    def test_short_window(self):
        with pytest.raises(ValueError):
            rolling_threshold(np.ones(100), 5)
        with pytest.raises(InsufficientHistoryError):
            rolling_threshold(np.ones(10), 10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(10, 40), st.floats(0.5, 0.99))
    def test_matches_sorted_window(self, seed, h, q):
        x = np.random.default_rng(seed).standard_normal(h + 15)
        u, ok = rolling_threshold(x, h, q)
        r = math.ceil(q * h - 1e-12)
        for t in np.flatnonzero(ok):
            assert u[t] == np.sort(x[t - h:t])[r - 1]


class TestWindows:
    def test_units(self):
        assert parse_window("600", 78) == 600
        assert parse_window("600b", 78) == 600
        assert parse_window("5d", 78) == 390
        assert parse_window("6w", 78) == 78 * 5 * 6
        with pytest.raises(ValueError):
            parse_window("6m", 78)


class TestIndicators:
    def test_single_trade_bar(self):
        b = build_bars(tape([(0, 1, 10.0, 5.0)]), SessionCalendar(570, 575))
        assert compute_indicator(IndicatorSpec("TV"), b, 0) == 50.0
        assert compute_indicator(IndicatorSpec("TQ"), b, 0) == 5.0
        assert compute_indicator(IndicatorSpec("MTVV"), b, 0) == 0.0

    def test_amihud_single_return(self):
        p0 = 10.0 / math.exp(0.01)
        b = build_bars(tape([(0, 1, p0, 1.0), (1, 1, 10.0, 5.0)]), SessionCalendar(570, 580))
        assert compute_indicator(IndicatorSpec("AM"), b, 1) == pytest.approx(0.01 / 50, rel=1e-12)

    def test_roll_hand_path(self):
        prices = [100.0, 101.0, 100.0, 101.0]
        b = build_bars(tape([(i, 1, p, 1.0) for i, p in enumerate(prices)]), SessionCalendar(570, 590))
        # dP = (+1, -1, +1): cov((-1, +1), (+1, -1)) = -1
        assert compute_indicator(IndicatorSpec("Roll", 2), b, 3) == -1.0
        assert compute_indicator(IndicatorSpec("RollNeg", 2), b, 3) == -1.0
        assert compute_indicator(IndicatorSpec("RollMod", 2), b, 3) == pytest.approx(-1 / 101)
        assert compute_indicator(IndicatorSpec("Roll", 2), b, 2) is None

    def test_empty_bar_undefined(self):
        b = build_bars(tape([(0, 1, 100.0, 1), (2, 1, 101.0, 1)]), SessionCalendar(570, 585))
        assert compute_indicator(IndicatorSpec("TV"), b, 1) is None
        assert compute_indicator(IndicatorSpec("RV", 2), b, 2) is not None

    def test_duration_absent(self):
        b = build_bars(tape([(0, 1, 10.0, 5.0)]), SessionCalendar(570, 575))
        assert compute_indicator(IndicatorSpec("dur"), b, 0) is None

    def test_registry_and_layout(self):
        assert len(REGISTRY) == 23
        specs = default_specs()
        assert len(specs) == 42
        labels = [s.label for s in specs]
        assert labels[0] == "TV" and labels[-1] == "MRV2RV_12"
        assert {s.name for s in specs} == set(REGISTRY)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            IndicatorSpec("TV", 6)
        with pytest.raises(ValueError):
            IndicatorSpec("Roll")
        with pytest.raises(ValueError):
            IndicatorSpec("Kyle", 6)

    def test_canonical_order_stable(self):
        specs = default_specs()
        shuffled = [specs[i] for i in np.random.default_rng(0).permutation(len(specs))]
        assert canonical_order(shuffled) == specs


class TestGolden:
    def test_every_indicator_matches_fixture(self, fixture_bars):
        header, rows = read_golden("golden_indicators.csv")
        assert len(rows) == len(fixture_bars)
        checked = 0
        for j, lab in enumerate(header[3:], start=3):
            val, ok = indicator_series(IndicatorSpec.parse(lab), fixture_bars)
            for t, row in enumerate(rows):
                assert (row[j] != "") == bool(ok[t]), (lab, t)
                if row[j]:
                    g = float(row[j])
                    assert format(g, ".17g") == row[j]
                    assert abs(val[t] - g) <= ULPS * abs(g), (lab, t, val[t], g)
                    checked += 1
        assert checked > 1000

    def test_prices_and_losses(self, fixture_bars):
        _, rows = read_golden("golden_indicators.csv")
        for t, row in enumerate(rows):
            assert float(row[1]) == fixture_bars.price[t]
            if row[2]:
                assert fixture_bars.loss[t] == pytest.approx(float(row[2]), rel=ULPS, abs=1e-300)

    def test_features_file(self, fixture_bars, tmp_path):
        header, rows = read_golden("golden_features.csv")
        table = feature_table(fixture_bars, h=10)
        table.write_csv(tmp_path / "f.csv")
        got = list(csv.reader(open(tmp_path / "f.csv")))
        assert got[0] == header
        assert len(got) - 1 == len(rows)
        for a, b in zip(got[1:], rows):
            assert a[:1] == b[:1]
            for x, y in zip(a[1:], b[1:]):
                assert (x == "") == (y == "")
                if y:
                    assert abs(float(x) - float(y)) <= ULPS * abs(float(y))

    def test_csv_roundtrip_exact(self, fixture_bars, tmp_path):
        table = feature_table(fixture_bars, h=10)
        table.write_csv(tmp_path / "f.csv")
        back = FeatureTable.read_csv(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.values[table.ok], table.values[table.ok])
        np.testing.assert_array_equal(back.ok, table.ok)


class TestDesign:
    def test_design_drops_undefined(self, fixture_bars):
        table = feature_table(fixture_bars, h=10)
        d = table.design()
        assert d.panel.p == 42
        assert d.dropped == int(np.count_nonzero(~np.all(table.ok, axis=1)))
        assert d.panel.T + d.dropped == table.t.size

    def test_indicators_lagged(self, fixture_bars):
        table = feature_table(fixture_bars, h=10)
        tv, _ = indicator_series(IndicatorSpec("TV"), fixture_bars)
        np.testing.assert_array_equal(table.values[:, 0], tv[table.t - 1])

    def test_simulated_pipeline(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptySessionWarning)
            bars = build_bars(simulate_ticks(12, seed=8))
        d = build_design(bars, h=200)
        assert d.panel.T > 0 and np.all(np.isfinite(d.panel.values))
        sd = d.panel.values.std(axis=0)
        z = d.panel.values / sd
        np.testing.assert_allclose(z.std(axis=0), 1.0, rtol=1e-12)

    def test_ratio_zero_rv_dropped(self):
        # flat prices: RV = 0 leaves MRV2RV undefined
        trades = [(b, 1, 100.0, 1.0) for b in range(14)]
        bars = build_bars(tape(trades), SessionCalendar(570, 640))
        _, ok = indicator_series(IndicatorSpec("MRV2RV", 2), bars)
        assert not ok.any()
        table = feature_table(bars, [IndicatorSpec("MRV2RV", 2), IndicatorSpec("TV")], h=10)
        with pytest.raises(Exception):
            table.design()
