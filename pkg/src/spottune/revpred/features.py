"""Engineered price features, training max-price generation and revocation labels."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spottune.market import (
    GRID,
    HOUR,
    InsufficientHistoryError,
    MarketError,
    PriceTrace,
    avg_price,
    price_at,
    regularize,
)

HISTORY_LEN = 59
N_FEATURES = 6
FEATURE_NAMES = (
    "current_price",
    "avg_price_1h",
    "num_changes_1h",
    "time_since_last_change",
    "is_workday",
    "hour_of_day",
)
MAX_PRICE_DELTA = (0.00001, 0.2)
TRIM = 0.2


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class FeatureRecord:
    current_price: float
    avg_price_1h: float
    num_changes_1h: int
    time_since_last_change: float
    is_workday: bool
    hour_of_day: int

    def __post_init__(self):
        if self.num_changes_1h < 0:
            raise ValueError("num_changes_1h must be >= 0")
        if not 0 <= self.hour_of_day <= 23:
            raise ValueError("hour_of_day must be in 0..23")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.current_price,
                self.avg_price_1h,
                self.num_changes_1h,
                self.time_since_last_change,
                float(self.is_workday),
                self.hour_of_day,
            ]
        )

    @classmethod
    def from_array(cls, row) -> FeatureRecord:
        return cls(
            float(row[0]), float(row[1]), int(row[2]), float(row[3]), bool(row[4]), int(row[5])
        )


@dataclass(frozen=True)
class LabeledSample:
    history: tuple[FeatureRecord, ...]
    present: FeatureRecord
    max_price: float
    label: bool
    time: int = 0

    def __post_init__(self):
        if len(self.history) != HISTORY_LEN:
            raise ValueError(f"history must hold exactly {HISTORY_LEN} records")
        if self.max_price < self.present.current_price:
            raise ValueError("max_price below current price")


@dataclass(frozen=True)
class ClassBalance:
    phi_plus: float
    phi_minus: float

    @classmethod
    def from_labels(cls, labels) -> ClassBalance:
        labels = np.asarray(labels, dtype=bool)
        if labels.size == 0:
            raise DatasetError("no labels")
        phi_plus = float(labels.sum()) / labels.size
        return cls(phi_plus, 1.0 - phi_plus)

    @property
    def trainable(self) -> bool:
        return 0.0 < self.phi_plus < 1.0


def _calendar(t: float) -> tuple[bool, int]:
    stamp = dt.datetime.fromtimestamp(t, tz=dt.timezone.utc)
    return stamp.weekday() < 5, stamp.hour


def engineer_features(trace: PriceTrace, t: float) -> FeatureRecord:
    """Six features over the hour (t - 1h, t]; works on raw or regular traces."""
    if t - HOUR < trace.start:
        raise InsufficientHistoryError(f"{trace.name}: need one hour of history before t={t}")
    current = price_at(trace, t)
    avg = avg_price(trace, t, HOUR)
    i = trace.index_at(t)
    times, prices = trace.times, trace.prices
    changes = 0
    last_change = None
    for j in range(i, 0, -1):
        if prices[j] != prices[j - 1]:
            if last_change is None:
                last_change = times[j]
            if times[j] > t - HOUR:
                changes += 1
        if times[j] <= t - HOUR and last_change is not None:
            break
    since = t - (last_change if last_change is not None else trace.start)
    workday, hour = _calendar(t)
    return FeatureRecord(current, avg, changes, float(since), workday, hour)


def feature_matrix(trace: PriceTrace) -> np.ndarray:
    """Features for every grid point of a regular trace; rows lacking an hour of history are NaN."""
    if not trace.is_regular():
        raise MarketError(f"{trace.name}: feature_matrix needs a regularized trace")
    w = HOUR // GRID
    n = len(trace)
    prices = trace.prices
    times = trace.times
    out = np.full((n, N_FEATURES), np.nan)
    if n <= w:
        return out
    out[:, 0] = prices
    csum = np.concatenate([[0.0], np.cumsum(prices)])
    idx = np.arange(w, n)
    out[w:, 1] = (csum[idx] - csum[idx - w]) / w
    changed = np.zeros(n, dtype=np.int64)
    changed[1:] = prices[1:] != prices[:-1]
    ccount = np.cumsum(changed)
    out[w:, 2] = ccount[idx] - ccount[idx - w]
    last = np.where(changed.astype(bool), np.arange(n), 0)
    last = np.maximum.accumulate(last)
    out[:, 3] = times - times[last]
    days = (times // 86400 + 3) % 7  # 1970-01-01 was a Thursday; Monday == 0
    out[:, 4] = (days < 5).astype(float)
    out[:, 5] = (times % 86400) // 3600
    out[:w] = np.nan
    return out


def trimmed_delta_mean(deltas, literal: bool = False) -> float:
    """Mean of sorted deltas after dropping the smallest and largest 20%.

    ``literal=True`` follows the pre-processing pseudo-code word for word:
    indices strictly inside (0.2 L, 0.8 L), divided by 0.6 L.
    """
    d = np.sort(np.asarray(deltas, dtype=float))
    n = len(d)
    if n < 5:
        raise InsufficientHistoryError(f"need at least 5 price deltas, got {n}")
    if literal:
        keep = [i for i in range(n) if TRIM * n < i < (1 - TRIM) * n]
        return float(d[keep].sum() / ((1 - 2 * TRIM) * n))
    k = int(math.floor(TRIM * n + 1e-9))
    return float(d[k : n - k].mean())


def _window_deltas(trace: PriceTrace, t: float) -> np.ndarray:
    taus = np.arange(t - HOUR + GRID, t, GRID)
    if len(taus) == 0 or taus[0] - GRID < trace.start:
        raise InsufficientHistoryError(f"{trace.name}: need one hour of history before t={t}")
    idx = np.searchsorted(trace.times, np.concatenate(([taus[0] - GRID], taus)), side="right") - 1
    p = trace.prices[idx]
    cur, prev = p[1:], p[:-1]
    return np.abs(cur - prev)


def training_max_price(trace: PriceTrace, t: float, literal: bool = False) -> float:
    return price_at(trace, t) + trimmed_delta_mean(_window_deltas(trace, t), literal)


def inference_max_price(current_price: float, rng: np.random.Generator) -> float:
    return current_price + rng.uniform(*MAX_PRICE_DELTA)


def label_sample(trace: PriceTrace, t: float, max_price: float) -> bool:
    """True iff any grid price in (t, t + 1h] exceeds ``max_price``."""
    if t + HOUR > trace.end:
        raise InsufficientHistoryError(f"{trace.name}: need one hour of lookahead after t={t}")
    i = trace.index_at(t)
    j = trace.index_at(t + HOUR)
    return bool(np.any(trace.prices[i + 1 : j + 1] > max_price))


@dataclass
class SampleSet:
    """Columnar labeled samples for one market."""

    instance: str
    on_demand_price: float
    times: np.ndarray  # (N,)
    history: np.ndarray  # (N, 59, 6)
    present: np.ndarray  # (N, 6)
    max_price: np.ndarray  # (N,)
    label: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(
            tuple(FeatureRecord.from_array(r) for r in self.history[i]),
            FeatureRecord.from_array(self.present[i]),
            float(self.max_price[i]),
            bool(self.label[i]),
            int(self.times[i]),
        )

    @property
    def balance(self) -> ClassBalance:
        return ClassBalance.from_labels(self.label)

    def subset(self, mask) -> SampleSet:
        return SampleSet(
            self.instance,
            self.on_demand_price,
            self.times[mask],
            self.history[mask],
            self.present[mask],
            self.max_price[mask],
            self.label[mask],
        )

    def split_at(self, t: float) -> tuple[SampleSet, SampleSet]:
        """Chronological split: samples before ``t`` and samples at or after it."""
        before = self.times < t
        return self.subset(before), self.subset(~before)

    @classmethod
    def concat(cls, parts: list[SampleSet]) -> SampleSet:
        if not parts:
            raise DatasetError("nothing to concatenate")
        return cls(
            parts[0].instance,
            parts[0].on_demand_price,
            np.concatenate([p.times for p in parts]),
            np.concatenate([p.history for p in parts]),
            np.concatenate([p.present for p in parts]),
            np.concatenate([p.max_price for p in parts]),
            np.concatenate([p.label for p in parts]),
        )


def build_dataset(
    trace: PriceTrace, stride: int = GRID, literal: bool = False
) -> tuple[SampleSet, ClassBalance]:
    """One sample per ``stride`` seconds with full history and one hour of lookahead."""
    if stride <= 0 or stride % GRID:
        raise DatasetError(f"stride must be a positive multiple of {GRID}s")
    if not trace.is_regular():
        trace = regularize(trace)
    w = HOUR // GRID
    n = len(trace)
    first = w + HISTORY_LEN
    last = n - 1 - w
    if last < first:
        raise DatasetError(
            f"{trace.name}: trace spans {trace.end - trace.start}s, "
            f"need at least {(first + w) * GRID}s for one sample"
        )
    idx = np.arange(first, last + 1, stride // GRID)
    feats = feature_matrix(trace)
    hist_idx = idx[:, None] + np.arange(-HISTORY_LEN, 0)[None, :]

    deltas = np.abs(np.diff(trace.prices))  # deltas[j - 1] = |p[j] - p[j-1]|
    # deltas for tau in (t - 1h, t): j = i-59 .. i-1
    windows = sliding_window_view(deltas, HISTORY_LEN)  # windows[s] = deltas[s : s + 59]
    win = windows[idx - HISTORY_LEN - 1]
    if literal:
        trim = np.array([trimmed_delta_mean(row, literal=True) for row in win])
    else:
        k = int(math.floor(TRIM * HISTORY_LEN + 1e-9))
        trim = np.sort(win, axis=1)[:, k : HISTORY_LEN - k].mean(axis=1)
    max_price = trace.prices[idx] + trim

    future = sliding_window_view(trace.prices[1:], w)  # future[i] = prices[i+1 : i+61]
    label = future[idx].max(axis=1) > max_price

    samples = SampleSet(
        trace.name,
        trace.instance.on_demand_price,
        trace.times[idx].copy(),
        feats[hist_idx],
        feats[idx],
        max_price,
        label,
    )
    return samples, samples.balance


def dataset_cache_path(cache_dir, trace_id: str, stride: int) -> Path:
    return Path(cache_dir) / f"{trace_id}__stride{stride}.npz"


def save_dataset(samples: SampleSet, cache_dir, trace_id: str, stride: int) -> Path:
    path = dataset_cache_path(cache_dir, trace_id, stride)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        instance=np.array(samples.instance),
        on_demand_price=np.array(samples.on_demand_price),
        times=samples.times,
        history=samples.history,
        present=samples.present,
        max_price=samples.max_price,
        label=samples.label,
    )
    return path


def load_dataset(cache_dir, trace_id: str, stride: int) -> SampleSet | None:
    path = dataset_cache_path(cache_dir, trace_id, stride)
    if not path.exists():
        return None
    with np.load(path) as z:
        return SampleSet(
            str(z["instance"]),
            float(z["on_demand_price"]),
            z["times"],
            z["history"],
            z["present"],
            z["max_price"],
            z["label"],
        )
