"""Tick loading and binning.

Ticks are kept columnar (:class:`TickData`) because realistic inputs hold
millions of events; iterating a ``TickData`` still yields :class:`TickRecord`
objects for code that wants one event at a time.

Binning produces a :class:`BinnedPanel`: for every bin of length ``tau`` the
mid-price prevailing at bin open, the price increment to the next bin open
and the net signed traded volume of every asset.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NS_PER_SECOND = 1_000_000_000
TICK_COLUMNS = ("ts_ns", "asset", "event", "price", "signed_qty", "bid", "ask")
PANEL_COLUMNS = ("bin_open_ts", "day", "asset", "p_open", "delta_p", "q")
CALENDAR_COLUMNS = ("date", "open_ts_ns", "close_ts_ns")


class TickFormatError(ValueError):
    """Raised when a tick or calendar file cannot be parsed.

    ``lines`` holds the 1-based line numbers of the offending rows.
    """

    def __init__(self, message: str, lines: Sequence[int] = ()):
        self.lines = list(lines)
        if self.lines:
            shown = ", ".join(str(x) for x in self.lines[:20])
            message = f"{message} (line {shown}{', ...' if len(self.lines) > 20 else ''})"
        super().__init__(message)


@dataclass(frozen=True, slots=True)
class TickRecord:
    """One trade or quote event."""

    timestamp: int
    asset: int
    kind: str  # "T" or "Q"
    signed_volume: float = math.nan
    trade_price: float = math.nan
    bid: float = math.nan
    ask: float = math.nan

    @property
    def is_trade(self) -> bool:
        return self.kind == "T"

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


@dataclass(frozen=True, eq=False)
class TickData(Sequence):
    """Columnar store of tick events sorted by timestamp.

    Events sharing a timestamp keep their input order, so each asset's
    stream stays in its original (non-decreasing) order.
    """

    ts: np.ndarray  # int64 ns
    asset: np.ndarray  # int32
    is_trade: np.ndarray  # bool
    price: np.ndarray
    qty: np.ndarray
    bid: np.ndarray
    ask: np.ndarray
    symbols: tuple[str, ...]

    def __post_init__(self):
        for arr in (self.ts, self.asset, self.is_trade, self.price, self.qty, self.bid, self.ask):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, ts, asset, is_trade, price, qty, bid, ask, symbols) -> "TickData":
        ts = np.asarray(ts, dtype=np.int64)
        order = np.argsort(ts, kind="stable")
        return cls(
            ts=ts[order],
            asset=np.asarray(asset, dtype=np.int32)[order],
            is_trade=np.asarray(is_trade, dtype=bool)[order],
            price=np.asarray(price, dtype=float)[order],
            qty=np.asarray(qty, dtype=float)[order],
            bid=np.asarray(bid, dtype=float)[order],
            ask=np.asarray(ask, dtype=float)[order],
            symbols=tuple(symbols),
        )

    @classmethod
    def empty(cls, symbols: Sequence[str] = ()) -> "TickData":
        z = np.zeros(0)
        return cls.from_arrays(z, z, z, z, z, z, z, symbols)

    @classmethod
    def from_records(cls, records: Sequence[TickRecord], symbols: Sequence[str]) -> "TickData":
        cols = list(zip(*[(r.timestamp, r.asset, r.is_trade, r.trade_price,
                           r.signed_volume, r.bid, r.ask) for r in records])) or [()] * 7
        return cls.from_arrays(*cols, symbols=symbols)

    @property
    def n_assets(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.ts)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        if self.is_trade[i]:
            return TickRecord(int(self.ts[i]), int(self.asset[i]), "T",
                              signed_volume=float(self.qty[i]), trade_price=float(self.price[i]))
        return TickRecord(int(self.ts[i]), int(self.asset[i]), "Q",
                          bid=float(self.bid[i]), ask=float(self.ask[i]))

    def __iter__(self) -> Iterator[TickRecord]:
        for i in range(len(self)):
            yield self[i]

    def for_asset(self, a: int) -> list[TickRecord]:
        """Ordered event stream of asset ``a``."""
        return [self[i] for i in np.flatnonzero(self.asset == a)]

    def select_assets(self, assets: Sequence[int]) -> "TickData":
        """Restrict to ``assets``, renumbered 0..len(assets)-1 in the given order."""
        assets = list(assets)
        remap = np.full(self.n_assets, -1, dtype=np.int32)
        remap[assets] = np.arange(len(assets), dtype=np.int32)
        keep = remap[self.asset] >= 0
        return TickData(self.ts[keep], remap[self.asset[keep]], self.is_trade[keep],
                        self.price[keep], self.qty[keep], self.bid[keep], self.ask[keep],
                        tuple(self.symbols[a] for a in assets))


@dataclass(frozen=True, eq=False)
class TradingCalendar:
    """Business days with their open/close timestamps (ns)."""

    dates: tuple[str, ...]
    open_ns: np.ndarray
    close_ns: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.open_ns, dtype=np.int64)
        c = np.asarray(self.close_ns, dtype=np.int64)
        object.__setattr__(self, "open_ns", o)
        object.__setattr__(self, "close_ns", c)
        if not (len(self.dates) == len(o) == len(c)):
            raise ValueError("calendar columns have different lengths")
        if np.any(c <= o):
            raise ValueError("calendar day with close <= open")
        if len(o) > 1 and np.any(o[1:] < c[:-1]):
            raise ValueError("calendar days overlap or are out of order")

    @classmethod
    def regular(cls, n_days: int, session_seconds: float, start_ns: int = 0,
                day_seconds: int = 86_400) -> "TradingCalendar":
        """``n_days`` sessions of equal length starting every ``day_seconds``."""
        opens = start_ns + np.arange(n_days, dtype=np.int64) * day_seconds * NS_PER_SECOND
        closes = opens + int(round(session_seconds * NS_PER_SECOND))
        return cls(tuple(f"day{k:04d}" for k in range(n_days)), opens, closes)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def open_seconds(self) -> float:
        return float(np.sum(self.close_ns - self.open_ns)) / NS_PER_SECOND

    def subset(self, days: Sequence[int]) -> "TradingCalendar":
        days = list(days)
        return TradingCalendar(tuple(self.dates[k] for k in days), self.open_ns[days], self.close_ns[days])


@dataclass(frozen=True, eq=False)
class BinnedPanel:
    """Synchronized per-bin increments and flows of ``n`` assets.

    Row ``t`` describes the window ``[bin_open_ts[t], bin_open_ts[t] + tau)``.
    ``day`` holds the calendar index of the day each bin belongs to.
    """

    tau: float
    bin_open_ts: np.ndarray
    day: np.ndarray
    p_open: np.ndarray
    delta_p: np.ndarray
    q: np.ndarray
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        for arr in (self.bin_open_ts, self.day, self.p_open, self.delta_p, self.q):
            arr.setflags(write=False)
        if not (self.delta_p.shape == self.q.shape == self.p_open.shape):
            raise ValueError("panel arrays must share one shape")
        if not self.symbols:
            object.__setattr__(self, "symbols", tuple(f"A{i}" for i in range(self.delta_p.shape[1])))

    @property
    def n_bins(self) -> int:
        return self.delta_p.shape[0]

    @property
    def n_assets(self) -> int:
        return self.delta_p.shape[1]

    @property
    def days(self) -> np.ndarray:
        return np.unique(self.day)

    def day_slices(self) -> dict[int, slice]:
        """Contiguous row range of each day (rows are stored in day order)."""
        if self.n_bins == 0:
            return {}
        cuts = np.flatnonzero(np.diff(self.day)) + 1
        starts = np.r_[0, cuts]
        stops = np.r_[cuts, self.n_bins]
        return {int(self.day[s]): slice(int(s), int(e)) for s, e in zip(starts, stops)}

    def select_days(self, days) -> "BinnedPanel":
        keep = np.isin(self.day, np.asarray(list(days)))
        return self._take(keep, slice(None))

    def select_assets(self, assets: Sequence[int]) -> "BinnedPanel":
        assets = list(assets)
        return self._take(slice(None), assets)

    def _take(self, rows, cols) -> "BinnedPanel":
        syms = self.symbols if isinstance(cols, slice) else tuple(self.symbols[c] for c in cols)
        return BinnedPanel(self.tau, self.bin_open_ts[rows], self.day[rows],
                           self.p_open[rows][:, cols], self.delta_p[rows][:, cols],
                           self.q[rows][:, cols], syms)

    def to_csv(self, path) -> None:
        """Long-format export, one row per (bin, asset)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PANEL_COLUMNS)
            for t in range(self.n_bins):
                for a in range(self.n_assets):
                    w.writerow((int(self.bin_open_ts[t]), int(self.day[t]), self.symbols[a],
                                repr(float(self.p_open[t, a])), repr(float(self.delta_p[t, a])),
                                repr(float(self.q[t, a]))))


def read_panel_csv(path, tau: float) -> BinnedPanel:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    symbols = list(dict.fromkeys(r["asset"] for r in rows))
    n = len(symbols)
    if len(rows) % max(n, 1):
        raise TickFormatError(f"{path}: ragged panel export")
    m = len(rows) // max(n, 1)
    col = {s: i for i, s in enumerate(symbols)}
    ts, day = np.zeros(m, np.int64), np.zeros(m, np.int64)
    p, dp, q = (np.zeros((m, n)) for _ in range(3))
    for k, r in enumerate(rows):
        t, a = divmod(k, n)
        if col[r["asset"]] != a:
            raise TickFormatError(f"{path}: assets not in a fixed order", [k + 2])
        ts[t], day[t] = int(r["bin_open_ts"]), int(r["day"])
        p[t, a], dp[t, a], q[t, a] = float(r["p_open"]), float(r["delta_p"]), float(r["q"])
    return BinnedPanel(tau, ts, day, p, dp, q, tuple(symbols))


def _field(value: str, lineno: int, name: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise TickFormatError(f"unparsable {name} {value!r}", [lineno]) from None


def load_ticks(path, assets: Sequence[str] | None = None,
               columns: dict[str, str] | None = None) -> TickData:
    """Read a tick CSV.

    Parameters
    ----------
    path : path-like
        CSV with header ``ts_ns,asset,event,price,signed_qty,bid,ask``.
    assets : sequence of str, optional
        Asset universe; symbol ``assets[i]`` becomes index ``i``. Symbols
        outside the universe are an error. Without a universe, indices are
        assigned in order of first appearance.
    columns : dict, optional
        Maps the canonical column names above to the names used in the file.

    Returns
    -------
    TickData

    Raises
    ------
    TickFormatError
        Unknown symbol, unparsable field, zero-volume trade or a timestamp
        going backwards within one asset. The offending line numbers are
        attached to the exception.
    """
    colmap = {c: c for c in TICK_COLUMNS}
    colmap.update(columns or {})
    universe = {s: i for i, s in enumerate(assets)} if assets is not None else None
    symbols: dict[str, int] = dict(universe) if universe is not None else {}
    ts, aid, trade, price, qty, bid, ask = ([] for _ in range(7))
    last_ts: dict[int, int] = {}
    bad_order: list[int] = []
    crossed = 0

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return TickData.empty(tuple(symbols))
        header = [h.strip() for h in header]
        try:
            pos = {c: header.index(colmap[c]) for c in TICK_COLUMNS}
        except ValueError as exc:
            raise TickFormatError(f"missing column in header: {exc}", [1]) from None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            row = row + [""] * (len(header) - len(row))
            get = lambda c: row[pos[c]].strip()  # noqa: E731
            sym = get("asset")
            if sym not in symbols:
                if universe is not None:
                    raise TickFormatError(f"unknown asset symbol {sym!r}", [lineno])
                symbols[sym] = len(symbols)
            a = symbols[sym]
            try:
                t = int(get("ts_ns"))
            except ValueError:
                raise TickFormatError(f"unparsable timestamp {get('ts_ns')!r}", [lineno]) from None
            ev = get("event").upper()
            if ev == "T":
                v = _field(get("signed_qty"), lineno, "signed_qty")
                px = _field(get("price"), lineno, "price")
                if v == 0:
                    raise TickFormatError("trade with zero volume", [lineno])
                row_vals = (True, px, v, math.nan, math.nan)
            elif ev == "Q":
                b = _field(get("bid"), lineno, "bid")
                k = _field(get("ask"), lineno, "ask")
                if k < b:
                    crossed += 1
                    continue
                row_vals = (False, math.nan, math.nan, b, k)
            else:
                raise TickFormatError(f"unknown event type {ev!r}", [lineno])
            if t < last_ts.get(a, t):
                bad_order.append(lineno)
            last_ts[a] = t
            ts.append(t)
            aid.append(a)
            for lst, val in zip((trade, price, qty, bid, ask), row_vals):
                lst.append(val)

    if bad_order:
        raise TickFormatError("timestamps go backwards within an asset", bad_order)
    if crossed:
        logger.warning("%s: dropped %d crossed quotes (ask < bid)", path, crossed)
    return TickData.from_arrays(ts, aid, trade, price, qty, bid, ask, tuple(symbols))


def write_ticks(ticks: TickData, path) -> None:
    """Write ``ticks`` in the CSV layout read by :func:`load_ticks`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TICK_COLUMNS)
        syms = ticks.symbols
        for i in range(len(ticks)):
            a = syms[ticks.asset[i]]
            if ticks.is_trade[i]:
                w.writerow((int(ticks.ts[i]), a, "T", repr(float(ticks.price[i])),
                            repr(float(ticks.qty[i])), "", ""))
            else:
                w.writerow((int(ticks.ts[i]), a, "Q", "", "",
                            repr(float(ticks.bid[i])), repr(float(ticks.ask[i]))))


def load_calendar(path) -> TradingCalendar:
    dates, opens, closes = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                dates.append(row["date"])
                opens.append(int(row["open_ts_ns"]))
                closes.append(int(row["close_ts_ns"]))
            except (KeyError, TypeError, ValueError):
                raise TickFormatError("bad calendar row", [lineno]) from None
    return TradingCalendar(tuple(dates), np.array(opens, np.int64), np.array(closes, np.int64))


def write_calendar(cal: TradingCalendar, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALENDAR_COLUMNS)
        for d, o, c in zip(cal.dates, cal.open_ns, cal.close_ns):
            w.writerow((d, int(o), int(c)))


def _bin_day(ticks: TickData, lo: int, hi: int, open_ns: int, close_ns: int,
             tau_ns: int, n: int):
    nb = (close_ns - open_ns) // tau_ns
    if nb <= 0:
        return None
    edges = open_ns + np.arange(nb + 1, dtype=np.int64) * tau_ns
    ts = ticks.ts[lo:hi]
    asset = ticks.asset[lo:hi]
    trade = ticks.is_trade[lo:hi]

    prices = np.full((nb + 1, n), np.nan)
    quote = ~trade
    mids = 0.5 * (ticks.bid[lo:hi] + ticks.ask[lo:hi])
    for a in range(n):
        sel = quote & (asset == a)
        qts = ts[sel]
        if qts.size == 0:
            continue
        idx = np.searchsorted(qts, edges, side="right") - 1
        ok = idx >= 0
        prices[ok, a] = mids[sel][idx[ok]]

    valid = ~np.isnan(prices[:-1]).any(axis=1) & ~np.isnan(prices[1:]).any(axis=1)
    if not valid.any():
        return None
    first = int(np.argmax(valid))
    if not valid[first:].all():  # carried-forward prices cannot lapse
        raise AssertionError("invalid bin after a valid one")

    in_window = trade & (ts < edges[-1])
    tb = (ts[in_window] - open_ns) // tau_ns
    q = np.bincount(tb * n + asset[in_window], weights=ticks.qty[lo:hi][in_window],
                    minlength=nb * n).reshape(nb, n)
    if first:
        logger.debug("day opening at %d: %d leading bins without quotes dropped", open_ns, first)
    return edges[first:-1], prices[first:-1], prices[first + 1:] - prices[first:-1], q[first:]


def bin_ticks(ticks: TickData, tau: float, cal: TradingCalendar) -> BinnedPanel:
    """Aggregate ticks into bins of ``tau`` seconds within each trading day.

    Bins are half-open ``[t, t + tau)``; a trade stamped exactly on a
    boundary belongs to the later bin. The bin-open price is the mid of the
    last quote at or before ``t`` on the same day. A trailing partial bin
    at the close is dropped, and so are leading bins before every asset
    has quoted.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(cal) == 0:
        raise ValueError("empty trading calendar")
    tau_ns = int(round(tau * NS_PER_SECOND))
    n = ticks.n_assets
    lo = np.searchsorted(ticks.ts, cal.open_ns, side="left")
    hi = np.searchsorted(ticks.ts, cal.close_ns, side="left")

    parts = []
    for k in range(len(cal)):
        out = _bin_day(ticks, lo[k], hi[k], int(cal.open_ns[k]), int(cal.close_ns[k]), tau_ns, n)
        if out is None:
            logger.info("day %s yields no valid bins at tau=%gs", cal.dates[k], tau)
            continue
        parts.append((k, *out))

    if not parts:
        z = np.zeros((0, n))
        return BinnedPanel(tau, np.zeros(0, np.int64), np.zeros(0, np.int64), z, z.copy(), z.copy(),
                           ticks.symbols)
    return BinnedPanel(
        tau,
        np.concatenate([p[1] for p in parts]),
        np.concatenate([np.full(len(p[1]), p[0], dtype=np.int64) for p in parts]),
        np.vstack([p[2] for p in parts]),
        np.vstack([p[3] for p in parts]),
        np.vstack([p[4] for p in parts]),
        ticks.symbols,
    )


def trading_frequency(ticks: TickData, cal: TradingCalendar) -> np.ndarray:
    """Trades per second of open market time, per asset."""
    if len(cal) == 0:
        raise ValueError("empty trading calendar")
    seconds = cal.open_seconds
    if seconds <= 0:
        raise ValueError("calendar has no open seconds")
    lo = np.searchsorted(ticks.ts, cal.open_ns, side="left")
    hi = np.searchsorted(ticks.ts, cal.close_ns, side="left")
    counts = np.zeros(ticks.n_assets)
    for a, b in zip(lo, hi):
        sel = ticks.is_trade[a:b]
        counts += np.bincount(ticks.asset[a:b][sel], minlength=ticks.n_assets)
    return counts / seconds
