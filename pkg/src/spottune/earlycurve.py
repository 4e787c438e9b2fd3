"""Staged reciprocal-quadratic learning-curve model.

Each stage predicts ``1 / (a0 k^2 + a1 k + a2) + a3`` on a half-open step
interval ``[l, r)``; stages tile ``[0, T)``. Stages are split online when the
relative metric change jumps above ``xi`` after ``window`` steady steps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, nnls


class CurveError(Exception):
    pass


class TraceTooShortError(CurveError):
    pass


@dataclass(frozen=True, eq=False)
class MetricTrace:
    steps: np.ndarray
    metrics: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        metrics = np.asarray(self.metrics, dtype=float)
        if steps.ndim != 1 or steps.shape != metrics.shape:
            raise ValueError("steps and metrics must be 1-d and equally long")
        if len(steps) and steps[0] < 0:
            raise ValueError("steps must be non-negative")
        if np.any(np.diff(steps) <= 0):
            raise ValueError("steps must be strictly increasing")
        if np.any(~np.isfinite(metrics)) or np.any(metrics <= 0):
            raise ValueError("metrics must be positive and finite")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "metrics", metrics)

    @classmethod
    def from_values(cls, values: Sequence[float], start: int = 0) -> MetricTrace:
        return cls(np.arange(start, start + len(values)), np.asarray(values, dtype=float))

    def __len__(self) -> int:
        return len(self.steps)

    def __eq__(self, other):
        if not isinstance(other, MetricTrace):
            return NotImplemented
        return np.array_equal(self.steps, other.steps) and np.array_equal(self.metrics, other.metrics)

    __hash__ = object.__hash__

    def head(self, n: int) -> MetricTrace:
        return MetricTrace(self.steps[:n], self.metrics[:n])

    @property
    def covered_steps(self) -> int:
        return int(self.steps[-1]) + 1 if len(self) else 0


@dataclass
class FitConfig:
    xi: float = 0.5
    epsilon: float = 0.01
    window: int = 5
    a3_grid: int = 64
    theta: float = 0.7
    refine: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon < self.xi:
            raise ValueError("need 0 < epsilon < xi")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must be in (0, 1]")
        if self.window < 1 or self.a3_grid < 1:
            raise ValueError("window and a3_grid must be positive")


@dataclass
class Stage:
    l: int
    r: int
    a0: float
    a1: float
    a2: float
    a3: float

    def __post_init__(self):
        if self.l >= self.r:
            raise ValueError(f"empty stage interval [{self.l}, {self.r})")
        if min(self.a0, self.a1, self.a2, self.a3) < 0:
            raise ValueError("stage coefficients must be non-negative")

    @property
    def coef(self) -> tuple[float, float, float, float]:
        return self.a0, self.a1, self.a2, self.a3

    def value(self, k):
        k = np.asarray(k, dtype=float)
        return 1.0 / (self.a0 * k * k + self.a1 * k + self.a2) + self.a3

    def contains(self, k) -> bool:
        return self.l <= k < self.r


@dataclass
class StagedCurve:
    stages: list[Stage]
    horizon: int
    rss: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a curve needs at least one stage")
        if self.stages[0].l != 0 or self.stages[-1].r != self.horizon:
            raise ValueError("stages must cover [0, horizon)")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.r != b.l:
                raise ValueError("stages must be contiguous and disjoint")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "rss": self.rss,
            "stages": [asdict(s) for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> StagedCurve:
        return cls([Stage(**s) for s in d["stages"]], int(d["horizon"]), float(d.get("rss", "nan")))


def change_rates(metrics) -> np.ndarray:
    """zeta[i] = |L_i - L_{i-1}| / L_{i-1}; zeta[0] is NaN."""
    L = np.asarray(metrics, dtype=float)
    z = np.full(len(L), np.nan)
    z[1:] = np.abs(np.diff(L)) / L[:-1]
    return z


def _is_break(zeta: np.ndarray, i: int, cfg: FitConfig) -> bool:
    if i <= cfg.window:
        return False
    steady = zeta[i - cfg.window : i]
    return bool(zeta[i] > cfg.xi and np.all(steady < cfg.epsilon))


def stage_break(trace: MetricTrace, i: int, config: FitConfig | None = None) -> bool:
    cfg = config or FitConfig()
    return _is_break(change_rates(trace.metrics), i, cfg)


def partition_stages(trace: MetricTrace, config: FitConfig | None = None) -> list[tuple[int, int]]:
    cfg = config or FitConfig()
    if len(trace) == 0:
        raise CurveError("empty trace")
    zeta = change_rates(trace.metrics)
    bounds = [0]
    for i in range(len(trace)):
        if _is_break(zeta, i, cfg):
            bounds.append(int(trace.steps[i]))
    bounds.append(trace.covered_steps)
    return list(zip(bounds[:-1], bounds[1:]))


def _design(k: np.ndarray) -> np.ndarray:
    return np.stack([k * k, k, np.ones_like(k)], axis=1)


def _nnls_for(A, scale, k_L, a3):
    y = 1.0 / (k_L - a3)
    coef, _ = nnls(A / scale, y)
    return coef / scale


def _rss(coef, a3, A, L) -> float:
    q = A @ coef
    if np.any(q <= 0):
        return math.inf
    return float(np.sum((1.0 / q + a3 - L) ** 2))


def fit_stage(
    steps, metrics, config: FitConfig | None = None, l: int | None = None, r: int | None = None
) -> Stage:
    """Grid over a3 with an NNLS fit of 1/(L - a3) on [k^2, k, 1], then a bounded refinement."""
    cfg = config or FitConfig()
    k = np.asarray(steps, dtype=float)
    L = np.asarray(metrics, dtype=float)
    if len(k) < 4:
        raise CurveError(f"fit_stage needs at least 4 points, got {len(k)}")
    l = int(k[0]) if l is None else l
    r = int(k[-1]) + 1 if r is None else r
    A = _design(k)
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    m = float(L.min())

    candidates = [0.0] + [m * j / (cfg.a3_grid + 1) for j in range(1, cfg.a3_grid + 1)]
    best = None
    for a3 in candidates:
        if np.any(L - a3 <= 0):
            continue
        coef = _nnls_for(A, scale, L, a3)
        rss = _rss(coef, a3, A, L)
        if best is None or rss < best[0]:
            best = (rss, coef, a3)
    if best is None or not math.isfinite(best[0]):
        raise CurveError("no admissible a3 candidate")
    rss, coef, a3 = best

    if cfg.refine and rss > 0:
        x0 = np.append(coef, a3)
        upper = np.array([np.inf, np.inf, np.inf, m])
        x0 = np.clip(x0, 0.0, np.nextafter(upper, 0))

        def resid(x):
            q = np.maximum(A @ x[:3], 1e-12)
            return 1.0 / q + x[3] - L

        def jac(x):
            q = np.maximum(A @ x[:3], 1e-12)
            J = np.empty((len(L), 4))
            J[:, :3] = -A / (q * q)[:, None]
            J[:, 3] = 1.0
            return J

        try:
            sol = least_squares(
                resid, x0, jac=jac, bounds=(np.zeros(4), upper), x_scale="jac",
                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
            )
            x = np.maximum(sol.x, 0.0)
            cand = _rss(x[:3], x[3], A, L)
            if cand < rss:
                rss, coef, a3 = cand, x[:3], float(x[3])
        except ValueError:
            pass

    a0, a1, a2 = (float(c) for c in coef)
    return Stage(l, r, a0, a1, a2, float(a3))


def _flat_stage(L, l, r) -> Stage:
    return Stage(l, r, 0.0, 0.0, 1.0 / float(np.mean(L)), 0.0)


def fit_curve(trace: MetricTrace, config: FitConfig | None = None, staged: bool = True) -> StagedCurve:
    """Partition (or not) and fit every stage; stages with under 4 points are held flat."""
    cfg = config or FitConfig()
    if len(trace) < 4:
        raise CurveError(f"need at least 4 metric points to fit a curve, got {len(trace)}")
    intervals = partition_stages(trace, cfg) if staged else [(0, trace.covered_steps)]
    stages = []
    for l, r in intervals:
        mask = (trace.steps >= l) & (trace.steps < r)
        k, L = trace.steps[mask], trace.metrics[mask]
        if len(k) >= 4:
            stages.append(fit_stage(k, L, cfg, l, r))
        else:
            stages.append(_flat_stage(L, l, r))
    curve = StagedCurve(stages, trace.covered_steps)
    curve.rss = curve_residual(curve, trace)
    return curve


def predict_metric(curve: StagedCurve, k):
    """Curve value at step(s) ``k``; steps past the horizon use the last stage."""
    k_arr = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k_arr < 0):
        raise ValueError("steps must be non-negative")
    out = np.empty_like(k_arr)
    rights = np.array([s.r for s in curve.stages])
    idx = np.minimum(np.searchsorted(rights, k_arr, side="right"), len(curve.stages) - 1)
    for j, stage in enumerate(curve.stages):
        sel = idx == j
        if np.any(sel):
            out[sel] = stage.value(k_arr[sel])
    return float(out[0]) if np.ndim(k) == 0 else out


def curve_residual(curve: StagedCurve, trace: MetricTrace) -> float:
    return float(np.sum((predict_metric(curve, trace.steps) - trace.metrics) ** 2))


def required_steps(max_trial_steps: int, theta: float) -> int:
    return int(math.ceil(theta * max_trial_steps - 1e-9))


def predict_final(
    trace: MetricTrace, max_trial_steps: int, config: FitConfig | None = None, staged: bool = True
) -> float:
    """Extrapolated metric after the last of ``max_trial_steps`` steps (0-based step max - 1)."""
    cfg = config or FitConfig()
    need = required_steps(max_trial_steps, cfg.theta)
    if trace.covered_steps < need:
        raise TraceTooShortError(
            f"trace covers {trace.covered_steps} steps; need {need} "
            f"(theta={cfg.theta} x max_trial_steps={max_trial_steps})"
        )
    curve = fit_curve(trace, cfg, staged=staged)
    return predict_metric(curve, max_trial_steps - 1)


def detect_plateau(trace: MetricTrace, config: FitConfig | None = None) -> bool:
    cfg = config or FitConfig()
    if len(trace) < cfg.window + 1:
        return False
    zeta = change_rates(trace.metrics[-(cfg.window + 1) :])
    return bool(np.all(zeta[1:] < cfg.epsilon))


def rank_models(predictions: Mapping[str, float], mcnt: int, direction: str = "minimize") -> list[str]:
    if direction not in ("minimize", "maximize"):
        raise ValueError("direction must be 'minimize' or 'maximize'")
    if not 0 < mcnt <= len(predictions):
        raise ValueError(f"mcnt={mcnt} but only {len(predictions)} predictions")
    sign = 1.0 if direction == "minimize" else -1.0
    return sorted(predictions, key=lambda hp: (sign * predictions[hp], hp))[:mcnt]


def read_metric_trace(source) -> MetricTrace:
    """Two-column ``step,metric`` file; a header row is optional."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_metric_trace(fh)
    steps, metrics = [], []
    prev = None
    for lineno, row in enumerate(csv.reader(source), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
            continue
        try:
            if len(row) < 2:
                raise ValueError("expected two columns")
            step = int(row[0])
            metric = float(row[1])
            if step < 0:
                raise ValueError("negative step")
            if prev is not None and step <= prev:
                raise ValueError(f"step {step} does not increase on {prev}")
            if not math.isfinite(metric) or metric <= 0:
                raise ValueError(f"metric must be positive, got {row[1]!r}")
        except ValueError as exc:
            raise CurveError(f"line {lineno}: {exc}") from None
        steps.append(step)
        metrics.append(metric)
        prev = step
    return MetricTrace(np.array(steps, dtype=np.int64), np.array(metrics))


def write_metric_trace(trace: MetricTrace, dest) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            return write_metric_trace(trace, fh)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["step", "metric"])
    for k, v in zip(trace.steps, trace.metrics):
        w.writerow([int(k), repr(float(v))])


def save_curve(curve: StagedCurve, path) -> None:
    Path(path).write_text(json.dumps(curve.to_dict(), indent=2, sort_keys=True) + "\n")


def load_curve(path) -> StagedCurve:
    return StagedCurve.from_dict(json.loads(Path(path).read_text()))
