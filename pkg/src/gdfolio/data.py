"""
Return panels: CSV ingestion, simple/log returns, and a seeded factor-model
market generator.

CSV files are wide: a literal ``date`` header followed by one column per
asset (and optionally a benchmark column). Missing data is an error, never
imputed.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import IngestionError


@dataclass
class ReturnsPanel:
    """T x n per-period returns aligned on a shared date axis."""

    assets: list[str]
    dates: list[str]
    returns: np.ndarray
    benchmark: np.ndarray | None = None
    benchmark_name: str | None = None

    def __post_init__(self):
        self.assets = list(self.assets)
        self.dates = list(self.dates)
        self.returns = np.asarray(self.returns, dtype=float)
        if self.returns.ndim != 2 or self.returns.shape != (len(self.dates), len(self.assets)):
            raise IngestionError(
                f"returns shape {self.returns.shape} does not match "
                f"{len(self.dates)} dates x {len(self.assets)} assets")
        if self.benchmark is not None:
            self.benchmark = np.asarray(self.benchmark, dtype=float)
            if self.benchmark.shape != (len(self.dates),):
                raise IngestionError("benchmark length differs from the date axis")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_periods(self) -> int:
        return len(self.dates)

    def subset(self, assets=None, start: int = 0, stop: int | None = None) -> "ReturnsPanel":
        """Select asset columns (indices) and a contiguous period window."""
        cols = np.arange(self.n_assets) if assets is None else np.asarray(assets, dtype=int)
        rows = slice(start, stop)
        return ReturnsPanel(
            assets=[self.assets[i] for i in cols],
            dates=self.dates[rows],
            returns=self.returns[rows][:, cols],
            benchmark=None if self.benchmark is None else self.benchmark[rows],
            benchmark_name=self.benchmark_name,
        )

    def to_csv(self, path) -> None:
        """Write in the same wide format ``load_panel(..., mode="returns")`` reads."""
        header = ["date", *self.assets]
        if self.benchmark is not None:
            header.append(self.benchmark_name or "benchmark")
        rows = []
        for t, date in enumerate(self.dates):
            row = [date, *(repr(float(v)) for v in self.returns[t])]
            if self.benchmark is not None:
                row.append(repr(float(self.benchmark[t])))
            rows.append(row)
        write_csv_atomic(path, header, rows)


@dataclass
class PricePanel:
    assets: list[str]
    dates: list[str]
    prices: np.ndarray
    benchmark: np.ndarray | None = None
    benchmark_name: str | None = None


def write_csv_atomic(path, header, rows) -> None:
    """Write UTF-8, LF-terminated CSV via a temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_header(path) -> list[str]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return next(csv.reader(fh), [])
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path}: not UTF-8 ({exc})") from exc


def _read_wide(path, benchmark: str | None):
    header = _read_header(path)
    if not header or header[0] != "date":
        raise IngestionError(f"{path}: first header field must be 'date'")
    seen = set()
    for name in header:
        if name in seen:
            raise IngestionError(f"{path}: duplicate column {name!r}")
        seen.add(name)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: cannot parse CSV ({exc})") from exc
    dates = list(frame["date"])
    parsed = pd.to_datetime(pd.Series(dates), format="ISO8601", errors="coerce")
    for i, (raw, ts) in enumerate(zip(dates, parsed)):
        line = i + 2  # header is line 1
        if pd.isna(ts):
            raise IngestionError(f"{path}: line {line}: bad date {raw!r}")
        if i > 0:
            if ts == parsed.iloc[i - 1]:
                raise IngestionError(f"{path}: line {line}: duplicate date {raw}")
            if ts < parsed.iloc[i - 1]:
                raise IngestionError(f"{path}: line {line}: date {raw} is not increasing")
    columns = [c for c in frame.columns[1:]]
    if benchmark is not None and benchmark not in columns:
        raise IngestionError(f"{path}: benchmark column {benchmark!r} not found")
    values = np.empty((len(dates), len(columns)))
    for j, col in enumerate(columns):
        for i, cell in enumerate(frame[col]):
            text = cell.strip()
            if text == "":
                raise IngestionError(f"{path}: line {i + 2}, column {col!r}: missing value")
            try:
                values[i, j] = float(text)
            except ValueError:
                raise IngestionError(
                    f"{path}: line {i + 2}, column {col!r}: not a number {cell!r}") from None
            if not np.isfinite(values[i, j]):
                raise IngestionError(f"{path}: line {i + 2}, column {col!r}: non-finite value")
    assets = [c for c in columns if c != benchmark]
    asset_idx = [columns.index(c) for c in assets]
    bench = values[:, columns.index(benchmark)] if benchmark is not None else None
    return dates, assets, values[:, asset_idx], bench


def read_prices(path, benchmark: str | None = None) -> PricePanel:
    dates, assets, prices, bench = _read_wide(path, benchmark)
    if len(dates) < 3:
        raise IngestionError(f"{path}: need at least 3 price rows, got {len(dates)}")
    return PricePanel(assets, dates, prices, bench, benchmark)


def simple_returns(prices: PricePanel) -> ReturnsPanel:
    """``p_t / p_{t-1} - 1``; the first date is dropped."""
    p = prices.prices
    if np.any(p[:-1] == 0):
        raise IngestionError("zero price makes the next simple return undefined")
    bench = None if prices.benchmark is None else prices.benchmark[1:] / prices.benchmark[:-1] - 1.0
    return ReturnsPanel(prices.assets, prices.dates[1:], p[1:] / p[:-1] - 1.0,
                        bench, prices.benchmark_name)


def log_returns(prices: PricePanel) -> ReturnsPanel:
    """``ln(p_t / p_{t-1})``; every price must be positive."""
    p = prices.prices
    series = [p] if prices.benchmark is None else [p, prices.benchmark]
    for arr in series:
        if np.any(arr <= 0):
            raise IngestionError("log returns need strictly positive prices")
    bench = None if prices.benchmark is None else np.log(prices.benchmark[1:] / prices.benchmark[:-1])
    return ReturnsPanel(prices.assets, prices.dates[1:], np.log(p[1:] / p[:-1]),
                        bench, prices.benchmark_name)


def load_panel(path, mode: str = "returns", benchmark: str | None = None,
               kind: str = "simple") -> ReturnsPanel:
    """Load a wide CSV as a return panel.

    ``mode="prices"`` converts prices to returns (``kind`` selects simple or
    log returns); ``mode="returns"`` passes the values through.
    """
    if mode == "returns":
        dates, assets, values, bench = _read_wide(path, benchmark)
        if len(dates) < 2:
            raise IngestionError(f"{path}: need at least 2 return rows, got {len(dates)}")
        return ReturnsPanel(assets, dates, values, bench, benchmark)
    if mode == "prices":
        prices = read_prices(path, benchmark)
        if kind == "simple":
            return simple_returns(prices)
        if kind == "log":
            return log_returns(prices)
        raise ValueError(f"unknown return kind {kind!r}")
    raise ValueError(f"unknown mode {mode!r}; expected 'prices' or 'returns'")


def compound(returns, start: float = 1.0) -> np.ndarray:
    """Price path implied by simple returns, starting at ``start``."""
    growth = np.cumprod(1.0 + np.asarray(returns, dtype=float), axis=0)
    return start * np.concatenate([np.ones((1,) + growth.shape[1:]), growth])


# ---------------------------------------------------------------------------
# synthetic markets

@dataclass
class SyntheticMarketSpec:
    """Linear factor model ``r_t = mu + B f_t + e_t`` with ``f ~ N(0, I)``."""

    n_assets: int
    n_periods: int
    means: np.ndarray
    loadings: np.ndarray          # n x k
    idio_vol: np.ndarray          # n
    seed: int = 0
    start_date: str = "2020-01-01"
    asset_prefix: str = "A"
    benchmark_name: str = "INDEX"

    def __post_init__(self):
        self.means = np.broadcast_to(np.asarray(self.means, float), (self.n_assets,)).copy()
        self.loadings = np.asarray(self.loadings, float).reshape(self.n_assets, -1)
        self.idio_vol = np.broadcast_to(np.asarray(self.idio_vol, float), (self.n_assets,)).copy()
        if np.any(self.idio_vol < 0):
            raise ValueError("idiosyncratic volatilities must be >= 0")

    def covariance(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.idio_vol ** 2)

    @classmethod
    def random(cls, n_assets: int, n_periods: int, n_factors: int = 2, seed: int = 0,
               mean_range=(-0.0005, 0.0015), beta_range=(0.004, 0.012),
               loading_scale: float = 0.004, idio_range=(0.005, 0.02),
               **kwargs) -> "SyntheticMarketSpec":
        """Daily-scale parameters drawn from a seeded generator.

        Factor 0 is a market factor with positive loadings drawn from
        ``beta_range``; the remaining factors have zero-mean normal loadings.
        """
        rng = np.random.default_rng(seed)
        loadings = rng.normal(0.0, loading_scale, size=(n_assets, n_factors))
        loadings[:, 0] = rng.uniform(*beta_range, size=n_assets)
        return cls(
            n_assets=n_assets,
            n_periods=n_periods,
            means=rng.uniform(*mean_range, size=n_assets),
            loadings=loadings,
            idio_vol=rng.uniform(*idio_range, size=n_assets),
            seed=seed,
            **kwargs,
        )


def _business_days(start: str, count: int) -> list[str]:
    # numpy day resolution covers long synthetic panels that overflow pandas timestamps
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(count), roll="forward")
    return [str(d) for d in days]


def synthesize(spec: SyntheticMarketSpec) -> ReturnsPanel:
    """Draw a return panel; the benchmark is the equal-weight average of all assets."""
    rng = np.random.default_rng(spec.seed)
    T, n = spec.n_periods, spec.n_assets
    factors = rng.standard_normal((T, spec.loadings.shape[1]))
    noise = rng.standard_normal((T, n)) * spec.idio_vol
    returns = spec.means + factors @ spec.loadings.T + noise
    width = max(2, len(str(n)))
    assets = [f"{spec.asset_prefix}{i:0{width}d}" for i in range(n)]
    return ReturnsPanel(
        assets=assets,
        dates=_business_days(spec.start_date, T),
        returns=returns,
        benchmark=returns.mean(axis=1),
        benchmark_name=spec.benchmark_name,
    )


def write_prices_csv(panel: ReturnsPanel, path, start: float = 100.0) -> None:
    """Emit the price file whose simple returns reproduce ``panel``.

    An extra leading row (one business day before the first return date)
    holds the starting prices.
    """
    prices = compound(panel.returns, start)
    first = (pd.Timestamp(panel.dates[0]) - pd.offsets.BDay(1)).strftime("%Y-%m-%d")
    dates = [first, *panel.dates]
    header = ["date", *panel.assets]
    bench = None
    if panel.benchmark is not None:
        header.append(panel.benchmark_name or "benchmark")
        bench = compound(panel.benchmark, start)
    rows = []
    for t, date in enumerate(dates):
        row = [date, *(repr(float(v)) for v in prices[t])]
        if bench is not None:
            row.append(repr(float(bench[t])))
        rows.append(row)
    write_csv_atomic(path, header, rows)

