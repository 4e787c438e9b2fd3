"""Spot market price traces, revocation and per-second billing with the first-hour refund."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

GRID = 60
HOUR = 3600
REFUND_WINDOW = 3600
TOL = 1e-9


class MarketError(Exception):
    pass


class TraceParseError(MarketError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InsufficientHistoryError(MarketError):
    pass


class AcquisitionRejectedError(MarketError):
    pass


@dataclass(frozen=True)
class InstanceType:
    name: str
    cpus: int
    memory_gb: float
    on_demand_price: float

    def __post_init__(self):
        if self.cpus < 1:
            raise ValueError(f"{self.name}: cpus must be >= 1")
        if self.on_demand_price <= 0:
            raise ValueError(f"{self.name}: on-demand price must be positive")


# Table of the six instance types used in the experiments (us-east-1, 2017).
CATALOG: dict[str, InstanceType] = {
    it.name: it
    for it in (
        InstanceType("r4.large", 2, 15.25, 0.133),
        InstanceType("r3.xlarge", 4, 30.0, 0.33),
        InstanceType("r4.xlarge", 4, 30.5, 0.266),
        InstanceType("m4.2xlarge", 8, 32.0, 0.4),
        InstanceType("r4.2xlarge", 8, 61.0, 0.532),
        InstanceType("m4.4xlarge", 16, 64.0, 0.8),
    )
}


def make_catalog(instances: Iterable[InstanceType]) -> dict[str, InstanceType]:
    catalog: dict[str, InstanceType] = {}
    for inst in instances:
        if inst.name in catalog:
            raise ValueError(f"duplicate instance type {inst.name!r}")
        catalog[inst.name] = inst
    return catalog


def _instance_for(name: str, catalog: Mapping[str, InstanceType] | None) -> InstanceType:
    if catalog is not None and name in catalog:
        return catalog[name]
    if name in CATALOG:
        return CATALOG[name]
    # on-demand price is only used for feature scaling; unknown markets get a unit placeholder
    return InstanceType(name, 1, 0.0, 1.0)


@dataclass(frozen=True)
class PricePoint:
    timestamp: int
    price: float


@dataclass(frozen=True, eq=False)
class PriceTrace:
    """Step-function price series for one market.

    The price posted at ``times[i]`` holds until ``times[i + 1]``; the last
    price holds until ``times[-1]`` and the trace ends there.
    """

    instance: InstanceType
    times: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        prices = np.asarray(self.prices, dtype=np.float64)
        if times.ndim != 1 or times.shape != prices.shape:
            raise ValueError("times and prices must be 1-d arrays of equal length")
        if len(times) and np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(prices <= 0):
            raise ValueError("prices must be positive")
        times.setflags(write=False)
        prices.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "prices", prices)

    @classmethod
    def from_points(cls, instance: InstanceType, points: Sequence[PricePoint]) -> PriceTrace:
        return cls(instance, [p.timestamp for p in points], [p.price for p in points])

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, PriceTrace):
            return NotImplemented
        return (
            self.instance == other.instance
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.prices, other.prices)
        )

    __hash__ = object.__hash__

    @property
    def name(self) -> str:
        return self.instance.name

    @property
    def start(self) -> int:
        return int(self.times[0])

    @property
    def end(self) -> int:
        return int(self.times[-1])

    @property
    def points(self) -> list[PricePoint]:
        return [PricePoint(int(t), float(p)) for t, p in zip(self.times, self.prices)]

    def is_regular(self, interval: int = GRID) -> bool:
        return len(self.times) < 2 or bool(np.all(np.diff(self.times) == interval))

    def index_at(self, t: float) -> int:
        """Index of the last point at or before ``t``."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0:
            raise InsufficientHistoryError(f"{self.name}: t={t} precedes trace start {self.start}")
        return i


def price_at(trace: PriceTrace, t: float) -> float:
    return float(trace.prices[trace.index_at(t)])


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        value = float(raw)
    except ValueError:
        value = None
    if value is not None:
        if not math.isfinite(value):
            raise ValueError(f"bad timestamp {raw!r}")
        return int(value)
    stamp = dt.datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return int(stamp.timestamp())


def _parse_price(raw: str) -> float:
    price = float(raw)
    if not math.isfinite(price) or price <= 0:
        raise ValueError(f"price must be positive and finite, got {raw!r}")
    return price


def ingest_trace(
    source,
    catalog: Mapping[str, InstanceType] | None = None,
    skip_bad: bool = False,
    errors: list | None = None,
) -> dict[str, PriceTrace]:
    """Read ``timestamp,instance_type,price`` rows into one raw trace per market.

    ``source`` is a path or an open text stream. Rows with the same timestamp
    collapse to the last one read. With ``skip_bad`` malformed rows are
    appended to ``errors`` instead of raising.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return ingest_trace(fh, catalog, skip_bad, errors)
    text = source.read()
    if not text.strip():
        return {}
    dialect = csv.excel
    try:
        dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t|")
    except csv.Error:
        pass
    reader = csv.reader(io.StringIO(text), dialect)
    header = [h.strip().lower() for h in next(reader)]
    try:
        cols = [header.index(c) for c in ("timestamp", "instance_type", "price")]
    except ValueError:
        raise TraceParseError(1, f"header must contain timestamp,instance_type,price; got {header}")

    raw: dict[str, dict[int, float]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) < len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(row)}")
            ts = _parse_timestamp(row[cols[0]])
            name = row[cols[1]].strip()
            if not name:
                raise ValueError("empty instance_type")
            price = _parse_price(row[cols[2]])
        except ValueError as exc:
            err = TraceParseError(lineno, str(exc))
            if not skip_bad:
                raise err from None
            if errors is not None:
                errors.append(err)
            continue
        raw.setdefault(name, {})[ts] = price

    traces = {}
    for name, by_time in raw.items():
        times = sorted(by_time)
        traces[name] = PriceTrace(
            _instance_for(name, catalog), np.array(times), np.array([by_time[t] for t in times])
        )
    return traces


def write_traces(traces: Iterable[PriceTrace], dest) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            return write_traces(traces, fh)
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["timestamp", "instance_type", "price"])
    for trace in traces:
        for t, p in zip(trace.times, trace.prices):
            writer.writerow([int(t), trace.name, repr(float(p))])


def regularize(trace: PriceTrace, interval: int = GRID) -> PriceTrace:
    """Forward-fill onto a grid anchored at the first timestamp.

    The grid stops at the last raw timestamp rounded down to the grid.
    """
    if len(trace) == 0:
        raise MarketError("cannot regularize an empty trace")
    grid = np.arange(trace.start, trace.end + 1, interval, dtype=np.int64)
    idx = np.searchsorted(trace.times, grid, side="right") - 1
    return PriceTrace(trace.instance, grid, trace.prices[idx])


def _integrate(trace: PriceTrace, a: float, b: float) -> float:
    """Integral of the step price over [a, b] in $/hr * seconds."""
    if b <= a:
        return 0.0
    times, prices = trace.times, trace.prices
    i = trace.index_at(a)
    total = 0.0
    lo = a
    while lo < b:
        hi = float(times[i + 1]) if i + 1 < len(times) else math.inf
        seg_end = min(hi, b)
        total += prices[i] * (seg_end - lo)
        lo = seg_end
        i += 1
    return total


def avg_price(trace: PriceTrace, t: float, window: float = HOUR) -> float:
    """Time-weighted mean of the step price over [t - window, t]."""
    if t - window < trace.start:
        raise InsufficientHistoryError(
            f"{trace.name}: need {window}s of history before t={t}, trace starts at {trace.start}"
        )
    if t > trace.end:
        raise MarketError(f"{trace.name}: t={t} beyond trace end {trace.end}")
    return _integrate(trace, t - window, t) / window


def revocation_time(trace: PriceTrace, t_start: float, max_price: float) -> int | None:
    """First grid time after ``t_start`` at which the price exceeds ``max_price``."""
    if price_at(trace, t_start) > max_price:
        raise AcquisitionRejectedError(
            f"{trace.name}: price {price_at(trace, t_start)} above max price {max_price} at t={t_start}"
        )
    first = int(np.searchsorted(trace.times, t_start, side="right"))
    over = np.flatnonzero(trace.prices[first:] > max_price)
    if len(over) == 0:
        return None
    return int(trace.times[first + over[0]])


@dataclass
class Acquisition:
    instance: str
    start_time: float
    max_price: float
    end_time: float | None = None
    end_reason: str | None = None  # revoked | self_shutdown | finished

    REASONS = ("revoked", "self_shutdown", "finished")

    def close(self, end_time: float, reason: str) -> None:
        if reason not in self.REASONS:
            raise ValueError(f"unknown end reason {reason!r}")
        if end_time < self.start_time:
            raise ValueError("end_time precedes start_time")
        self.end_time = end_time
        self.end_reason = reason

    @property
    def duration(self) -> float:
        if self.end_time is None:
            raise ValueError("acquisition still open")
        return self.end_time - self.start_time


def bill(trace: PriceTrace, acq: Acquisition) -> tuple[float, bool]:
    """Charge for a closed acquisition at the market price, per second.

    Revocations inside the first instance hour are fully refunded.
    """
    if acq.end_time is None or acq.end_reason is None:
        raise ValueError("cannot bill an open acquisition")
    if acq.end_reason == "revoked" and acq.duration < REFUND_WINDOW:
        return 0.0, True
    start = math.floor(acq.start_time)
    end = math.floor(acq.end_time)
    return float(_integrate(trace, start, end) / HOUR), False


@dataclass
class LedgerRecord:
    acquisition: Acquisition
    charge: float
    refunded: bool
    job: str = ""
    steps: int = 0

    def row(self) -> dict:
        a = self.acquisition
        return {
            "job": self.job,
            "instance": a.instance,
            "start": a.start_time,
            "end": a.end_time,
            "reason": a.end_reason,
            "charge": self.charge,
            "refunded": self.refunded,
            "steps": self.steps,
        }


@dataclass
class BillingLedger:
    records: list[LedgerRecord] = field(default_factory=list)

    def add(self, trace: PriceTrace, acq: Acquisition, job: str = "", steps: int = 0) -> LedgerRecord:
        charge, refunded = bill(trace, acq)
        rec = LedgerRecord(acq, charge, refunded, job, steps)
        self.records.append(rec)
        return rec

    @property
    def total(self) -> float:
        return math.fsum(r.charge for r in self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def synthetic_trace(
    instance: InstanceType,
    start: int,
    duration: int,
    rng: np.random.Generator,
    base_fraction: float = 0.25,
    change_rate: float = 1 / 45,
    volatility: float = 0.08,
    spike_prob: float = 0.15,
    spike_scale: float = 2.5,
) -> PriceTrace:
    """Regular 1-minute trace with Poisson price changes and occasional spikes.

    Prices hover around ``base_fraction`` of the on-demand price.
    """
    n = duration // GRID + 1
    base = instance.on_demand_price * base_fraction
    prices = np.empty(n)
    level = base
    current = base
    spike_left = 0
    for i in range(n):
        if spike_left > 0:
            spike_left -= 1
            if spike_left == 0:
                current = level
        elif rng.random() < change_rate:
            if rng.random() < spike_prob:
                current = level * (1 + spike_scale * rng.random())
                spike_left = int(rng.integers(2, 30))
            else:
                level = float(np.clip(level * np.exp(volatility * rng.normal()), 0.5 * base, 2.0 * base))
                current = level
        prices[i] = round(current, 4)
    return PriceTrace(instance, start + GRID * np.arange(n), prices)
