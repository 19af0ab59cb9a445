"""Series ingestion, chronological splitting, contexts, and calibration storage."""

from __future__ import annotations

import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rarecp.errors import (
    ColumnMissingError,
    DataError,
    EmptySeriesError,
    FileMissingError,
    ForecastMissingError,
    NonNumericCellError,
)

FRACTION_SUM_TOL = 1e-9
DEFAULT_SIGMA_FLOOR = 1e-6
DEFAULT_WINDOW = 64


@dataclass(frozen=True)
class TimeSeries:
    """Univariate target series in file/row order."""

    values: np.ndarray
    name: str = "series"
    frequency_tag: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 1:
            raise DataError("a series needs at least one value")
        if not np.all(np.isfinite(values)):
            raise DataError(f"series {self.name!r} contains non-finite values")

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.60
    cal_frac: float = 0.15
    test_frac: float = 0.25

    def __post_init__(self):
        fracs = (self.train_frac, self.cal_frac, self.test_frac)
        if any(f <= 0.0 for f in fracs):
            raise DataError("split fractions must all be positive")
        if abs(sum(fracs) - 1.0) > FRACTION_SUM_TOL:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass(frozen=True)
class SplitIndices:
    """Contiguous, disjoint index ranges ordered train < cal < test."""

    train: range
    cal: range
    test: range


def chronological_split(n: int, spec: SplitSpec) -> SplitIndices:
    """Split [0, n) chronologically.

    Train and calibration get floor(frac * n) rows; the remainder goes to
    the test segment so earlier segments never exceed their fractions.
    """
    if n < 1:
        raise DataError("cannot split an empty series")
    n_train = int(np.floor(spec.train_frac * n))
    n_cal = int(np.floor(spec.cal_frac * n))
    n_test = n - n_train - n_cal
    if n_train < 1 or n_cal < 1 or n_test < 1:
        raise DataError(
            f"split of n={n} leaves an empty segment "
            f"(train={n_train}, cal={n_cal}, test={n_test})"
        )
    return SplitIndices(
        train=range(0, n_train),
        cal=range(n_train, n_train + n_cal),
        test=range(n_train + n_cal, n),
    )


def build_context(
    history: np.ndarray,
    forecast: float | None,
    window: int,
    include_forecast: bool = True,
) -> np.ndarray:
    """Flattened window of the last ``window`` values, optionally with the forecast.

    Shorter histories are left-padded with their earliest value ("edge"
    padding) so the feature dimension stays fixed for early time steps.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 1:
        raise DataError("history must be 1-D")
    if history.size == 0:
        raise DataError("cannot build a context from an empty history")
    if window < 1:
        raise DataError("window must be >= 1")
    if history.size >= window:
        feats = history[-window:]
    else:
        pad = np.full(window - history.size, history[0])
        feats = np.concatenate([pad, history])
    if include_forecast:
        if forecast is None:
            raise DataError("include_forecast=True requires a forecast value")
        feats = np.concatenate([feats, [float(forecast)]])
    feats = np.array(feats, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(feats)):
        raise DataError("context contains non-finite values")
    return feats


def context_dim(window: int, include_forecast: bool) -> int:
    return window + (1 if include_forecast else 0)


@dataclass(frozen=True)
class CalibrationEntry:
    context: np.ndarray
    residual: float
    time_index: int


class CalibrationStore:
    """FIFO window of (context, signed residual) pairs.

    Entries arrive in time order, only after their target is observed;
    once full, the oldest entry is evicted first. Backed by ring buffers so
    eviction is O(1); the ordered context/residual views used by retrieval
    are cached until the next mutation.
    """

    def __init__(self, capacity: int, context_dim: int):
        if capacity < 1:
            raise DataError("store capacity must be >= 1")
        if context_dim < 1:
            raise DataError("store context dimension must be >= 1")
        self.capacity = int(capacity)
        self._dim = int(context_dim)
        self._contexts = np.zeros((self.capacity, self._dim))
        self._residuals = np.zeros(self.capacity)
        self._times = np.zeros(self.capacity, dtype=np.int64)
        self._start = 0
        self._size = 0
        self._version = 0
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return self._size

    @property
    def version(self) -> int:
        """Mutation counter; lets callers invalidate derived caches."""
        return self._version

    @property
    def context_dim(self) -> int:
        return self._dim

    def append(self, entry: CalibrationEntry) -> None:
        context = np.asarray(entry.context, dtype=np.float64)
        if context.shape != (self._dim,):
            raise DataError(
                f"entry context has shape {context.shape}, expected ({self._dim},)"
            )
        if not np.isfinite(entry.residual):
            raise DataError("entry residual must be finite")
        if self._size > 0:
            last = self._times[(self._start + self._size - 1) % self.capacity]
            if entry.time_index <= last:
                raise DataError(
                    f"time_index {entry.time_index} does not increase past {last}"
                )
        pos = (self._start + self._size) % self.capacity
        if self._size == self.capacity:
            self._start = (self._start + 1) % self.capacity
        else:
            self._size += 1
        self._contexts[pos] = context
        self._residuals[pos] = float(entry.residual)
        self._times[pos] = int(entry.time_index)
        self._version += 1
        self._cache = None

    def _ordered(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._cache is None:
            idx = (self._start + np.arange(self._size)) % self.capacity
            self._cache = (
                self._contexts[idx].copy(),
                self._residuals[idx].copy(),
                self._times[idx].copy(),
            )
        return self._cache

    def contexts(self) -> np.ndarray:
        return self._ordered()[0]

    def residuals(self) -> np.ndarray:
        return self._ordered()[1]

    def time_indices(self) -> np.ndarray:
        return self._ordered()[2]

    def entries(self) -> list[CalibrationEntry]:
        ctx, res, times = self._ordered()
        return [
            CalibrationEntry(context=ctx[i], residual=float(res[i]), time_index=int(times[i]))
            for i in range(self._size)
        ]

    @classmethod
    def from_entries(
        cls, entries, capacity: int | None = None
    ) -> "CalibrationStore":
        entries = list(entries)
        if not entries:
            raise DataError("cannot build a store from zero entries")
        dim = np.asarray(entries[0].context).size
        store = cls(capacity or len(entries), dim)
        for entry in entries[-store.capacity :]:
            store.append(entry)
        return store


def store_update(store: CalibrationStore, entry: CalibrationEntry) -> CalibrationStore:
    """Append ``entry``, evicting the oldest entry if the store is full."""
    store.append(entry)
    return store


@dataclass(frozen=True)
class DatasetDescriptor:
    """Componentwise statistics of the initial calibration contexts."""

    dataset_id: int
    mu: np.ndarray
    sigma: np.ndarray
    log_n: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise DataError("descriptor mu and sigma must be matching 1-D vectors")
        if np.any(sigma <= 0.0):
            raise DataError("descriptor sigma must be strictly positive (floored)")

    @property
    def dim(self) -> int:
        return int(self.mu.size)


def compute_descriptor(
    contexts: np.ndarray,
    dataset_id: int = 0,
    sigma_floor: float = DEFAULT_SIGMA_FLOOR,
) -> DatasetDescriptor:
    """Population mean/std of the initial calibration contexts, plus log count.

    ``sigma`` is floored componentwise so constant features never divide
    by zero downstream.
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 2 or contexts.shape[0] == 0:
        raise DataError("compute_descriptor needs a non-empty (n, p) context matrix")
    mu = contexts.mean(axis=0)
    sigma = contexts.std(axis=0)
    sigma = np.maximum(sigma, sigma_floor)
    return DatasetDescriptor(
        dataset_id=int(dataset_id),
        mu=mu,
        sigma=sigma,
        log_n=float(np.log(contexts.shape[0])),
    )


def normalize_context(context: np.ndarray, descriptor: DatasetDescriptor) -> np.ndarray:
    """Z-score a context (or a row matrix of contexts) with descriptor stats."""
    context = np.asarray(context, dtype=np.float64)
    return (context - descriptor.mu) / descriptor.sigma


# ---------------------------------------------------------------------------
# forecast sources
# ---------------------------------------------------------------------------


class ForecastSource(ABC):
    """Point-forecast backbone interface: history in, one-step forecast out."""

    @abstractmethod
    def point_forecast(self, history: np.ndarray, time_index: int) -> float:
        ...


class NaiveForecast(ForecastSource):
    """Last observed value."""

    def point_forecast(self, history: np.ndarray, time_index: int) -> float:
        history = np.asarray(history, dtype=np.float64)
        if history.size == 0:
            raise DataError("naive forecast needs at least one past value")
        return float(history[-1])


class SeasonalNaiveForecast(ForecastSource):
    """Value one season (``period`` steps) back; falls back to the earliest value."""

    def __init__(self, period: int):
        if period < 1:
            raise DataError("seasonal period must be >= 1")
        self.period = int(period)

    def point_forecast(self, history: np.ndarray, time_index: int) -> float:
        history = np.asarray(history, dtype=np.float64)
        if history.size == 0:
            raise DataError("seasonal forecast needs at least one past value")
        if history.size < self.period:
            return float(history[0])
        return float(history[-self.period])


class PrecomputedForecast(ForecastSource):
    """Forecasts cached by time index; a missing index fails loudly."""

    def __init__(self, forecasts: dict[int, float]):
        self._forecasts = {int(k): float(v) for k, v in forecasts.items()}
        if any(not np.isfinite(v) for v in self._forecasts.values()):
            raise DataError("precomputed forecasts must be finite")

    def point_forecast(self, history: np.ndarray, time_index: int) -> float:
        try:
            return self._forecasts[int(time_index)]
        except KeyError:
            raise ForecastMissingError(
                f"no precomputed forecast for time index {time_index}"
            ) from None

    def __len__(self) -> int:
        return len(self._forecasts)


def backbone_forecast(
    source: ForecastSource, history: np.ndarray, time_index: int = -1
) -> float:
    return source.point_forecast(np.asarray(history, dtype=np.float64), time_index)


def make_forecast_source(kind: str, path: str | None = None) -> ForecastSource:
    """Build a source from a config string: ``naive``, ``seasonal:<s>``, ``file``."""
    if kind == "naive":
        return NaiveForecast()
    if kind.startswith("seasonal:"):
        return SeasonalNaiveForecast(int(kind.split(":", 1)[1]))
    if kind == "file":
        if path is None:
            raise DataError("forecast kind 'file' needs a forecast CSV path")
        return load_forecast_csv(path)
    raise DataError(f"unknown forecast source {kind!r}")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_series_csv(path: str | Path, column: str) -> TimeSeries:
    """Load one numeric column (selected by header name) as a series.

    Distinct failure modes raise distinct errors: missing file, missing
    column, non-numeric cell (reported with its row number), empty series.
    """
    path = Path(path)
    if not path.exists():
        raise FileMissingError(f"series file not found: {path}")
    values: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or column not in header:
            raise ColumnMissingError(
                f"column {column!r} not found in {path} (columns: {header})"
            )
        col = header.index(column)
        # plain csv.reader keeps blank lines visible (as empty rows), so a
        # blank value row fails loudly instead of being skipped
        for row_number, row in enumerate(reader, start=1):
            cell = row[col] if len(row) > col else None
            try:
                value = float(cell)
            except (TypeError, ValueError):
                raise NonNumericCellError(
                    f"non-numeric cell at row {row_number} in column {column!r}: {cell!r}"
                ) from None
            if not np.isfinite(value):
                raise NonNumericCellError(
                    f"non-finite value at row {row_number} in column {column!r}"
                )
            values.append(value)
    if not values:
        raise EmptySeriesError(f"no data rows in {path}")
    return TimeSeries(values=np.asarray(values), name=path.stem)


def load_forecast_csv(path: str | Path) -> PrecomputedForecast:
    """Load a (time_index, forecast) CSV into a precomputed source."""
    path = Path(path)
    if not path.exists():
        raise FileMissingError(f"forecast file not found: {path}")
    forecasts: dict[int, float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"time_index", "forecast"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ColumnMissingError(
                f"forecast CSV {path} must have columns {sorted(required)}"
            )
        for row_number, row in enumerate(reader, start=1):
            try:
                idx = int(row["time_index"])
                value = float(row["forecast"])
            except (TypeError, ValueError):
                raise NonNumericCellError(
                    f"bad forecast row {row_number} in {path}: {row!r}"
                ) from None
            forecasts[idx] = value
    if not forecasts:
        raise EmptySeriesError(f"no forecast rows in {path}")
    return PrecomputedForecast(forecasts)
