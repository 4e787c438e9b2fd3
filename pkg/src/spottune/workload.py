"""Synthetic HPT workloads: metric curves, step-time jitter and checkpoint cost."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from spottune.earlycurve import MetricTrace, Stage, StagedCurve, predict_metric, read_metric_trace
from spottune.market import CATALOG, InstanceType

MB_PER_GB = 1024.0
NOTICE_LEAD = 120.0
# Measured checkpoint throughput to S3: 1-core t2.micro and 16-core m4.4xlarge.
CKPT_SPEED_1CPU = 62.83
CKPT_SPEED_16CPU = 134.22


class WorkloadError(Exception):
    pass


@dataclass
class SyntheticModelSpec:
    stages: list[Stage]
    sigma: float = 0.0
    cadence: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        StagedCurve(self.stages, self.stages[-1].r)  # validates the partition

    @property
    def horizon(self) -> int:
        return self.stages[-1].r

    @property
    def curve(self) -> StagedCurve:
        return StagedCurve(self.stages, self.horizon)

    def noiseless(self, k):
        return predict_metric(self.curve, k)


def _truncated_noise(rng: np.random.Generator, sigma: float, n: int) -> np.ndarray:
    bound = min(5 * sigma, 0.99)
    eta = rng.normal(0.0, sigma, n)
    bad = np.abs(eta) > bound
    while np.any(bad):
        eta[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(eta) > bound
    return eta


def gen_curve(spec: SyntheticModelSpec, upto_step: int | None = None) -> MetricTrace:
    """Noisy samples of the staged curve at steps 0, cadence, ... below ``upto_step``.

    Noise is drawn over the whole horizon so every prefix is identical.
    """
    upto = spec.horizon if upto_step is None else upto_step
    if upto > spec.horizon:
        raise WorkloadError(f"upto_step {upto} beyond horizon {spec.horizon}")
    k_all = np.arange(0, spec.horizon, spec.cadence)
    clean = predict_metric(spec.curve, k_all)
    if spec.sigma > 0:
        clean = clean * (1.0 + _truncated_noise(np.random.default_rng(spec.seed), spec.sigma, len(k_all)))
    keep = k_all < upto
    return MetricTrace(k_all[keep], clean[keep])


@dataclass
class PerfProfile:
    base_spb: dict[str, float]
    cov: float = 0.05

    def __post_init__(self):
        if not 0 <= self.cov <= 0.1:
            raise ValueError("cov must be within [0, 0.1]")
        if any(v <= 0 for v in self.base_spb.values()):
            raise ValueError("base seconds-per-step must be positive")


def step_duration(profile: PerfProfile, instance: str, rng: np.random.Generator) -> float:
    """Lognormal step time with mean ``base_spb`` and the profile's coefficient of variation."""
    try:
        base = profile.base_spb[instance]
    except KeyError:
        raise WorkloadError(f"no performance profile for {instance!r}") from None
    if profile.cov == 0:
        return base
    s2 = math.log1p(profile.cov**2)
    return float(base * math.exp(rng.normal(-s2 / 2, math.sqrt(s2))))


@dataclass
class CheckpointProfile:
    model_size_mb: float
    speed_mb_per_s: dict[str, float]

    def __post_init__(self):
        if self.model_size_mb < 0:
            raise ValueError("model size must be >= 0")
        if any(v <= 0 for v in self.speed_mb_per_s.values()):
            raise ValueError("checkpoint speeds must be positive")


def checkpoint_time(profile: CheckpointProfile, instance: str) -> float:
    try:
        return profile.model_size_mb / profile.speed_mb_per_s[instance]
    except KeyError:
        raise WorkloadError(f"no checkpoint speed for {instance!r}") from None


def checkpoint_feasible(profile: CheckpointProfile, instance: str, notice_lead: float = NOTICE_LEAD) -> bool:
    return checkpoint_time(profile, instance) <= notice_lead


def max_model_size_mb(speed_mb_per_s: float, notice_lead: float = NOTICE_LEAD) -> float:
    return speed_mb_per_s * notice_lead


def cpu_checkpoint_speed(cpus: int) -> float:
    """Log-linear in core count through the 1-core and 16-core measurements."""
    return CKPT_SPEED_1CPU + (CKPT_SPEED_16CPU - CKPT_SPEED_1CPU) * math.log2(cpus) / 4.0


def default_checkpoint_speeds(catalog: Mapping[str, InstanceType] = CATALOG) -> dict[str, float]:
    return {name: cpu_checkpoint_speed(it.cpus) for name, it in catalog.items()}


# Relative per-step slowdown beyond what core count explains; older r3 hosts are slow.
_QUIRK = {"r3.xlarge": 1.3, "r4.2xlarge": 1.1, "m4.2xlarge": 0.95}


def default_spb(catalog: Mapping[str, InstanceType], ref_spb: float, scaling: float = 0.7) -> dict[str, float]:
    """Seconds per step relative to a 2-core machine, sublinear in cores."""
    return {
        name: ref_spb * (2.0 / it.cpus) ** scaling * _QUIRK.get(name, 1.0)
        for name, it in catalog.items()
    }


def replay_trace(source) -> MetricTrace:
    return read_metric_trace(source)


@dataclass
class JobSpec:
    hp_id: str
    curve: SyntheticModelSpec | MetricTrace
    perf: PerfProfile
    checkpoint: CheckpointProfile
    params: dict = field(default_factory=dict)

    def metric_trace(self, upto: int) -> MetricTrace:
        if isinstance(self.curve, SyntheticModelSpec):
            return gen_curve(self.curve, upto)
        t = self.curve
        if t.covered_steps < upto:
            raise WorkloadError(f"{self.hp_id}: replayed trace covers {t.covered_steps} < {upto} steps")
        return t.head(int(np.searchsorted(t.steps, upto)))

    def true_final(self, max_trial_steps: int) -> float:
        """Metric after the last step: noiseless curve value, or the replayed observation."""
        if isinstance(self.curve, SyntheticModelSpec):
            return float(self.curve.noiseless(max_trial_steps - 1))
        t = self.metric_trace(max_trial_steps)
        return float(t.metrics[-1])


@dataclass
class Workload:
    name: str
    max_trial_steps: int
    jobs: list[JobSpec]
    direction: str = "minimize"
    seed: int = 0

    def __post_init__(self):
        ids = [j.hp_id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise WorkloadError("duplicate hp ids")
        if self.max_trial_steps < 1:
            raise WorkloadError("max_trial_steps must be positive")

    def job(self, hp_id: str) -> JobSpec:
        for j in self.jobs:
            if j.hp_id == hp_id:
                return j
        raise KeyError(hp_id)

    def true_ranking(self) -> list[str]:
        sign = 1.0 if self.direction == "minimize" else -1.0
        finals = {j.hp_id: j.true_final(self.max_trial_steps) for j in self.jobs}
        return sorted(finals, key=lambda h: (sign * finals[h], h))

    def to_dict(self) -> dict:
        def curve_dict(c):
            if isinstance(c, SyntheticModelSpec):
                return {
                    "kind": "synthetic",
                    "sigma": c.sigma,
                    "cadence": c.cadence,
                    "seed": c.seed,
                    "stages": [s.__dict__ for s in c.stages],
                }
            return {"kind": "trace", "steps": c.steps.tolist(), "metrics": c.metrics.tolist()}

        return {
            "name": self.name,
            "max_trial_steps": self.max_trial_steps,
            "direction": self.direction,
            "seed": self.seed,
            "jobs": [
                {
                    "hp_id": j.hp_id,
                    "params": j.params,
                    "curve": curve_dict(j.curve),
                    "perf": {"base_spb": j.perf.base_spb, "cov": j.perf.cov},
                    "checkpoint": {
                        "model_size_mb": j.checkpoint.model_size_mb,
                        "speed_mb_per_s": j.checkpoint.speed_mb_per_s,
                    },
                }
                for j in self.jobs
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Workload:
        jobs = []
        for j in d["jobs"]:
            c = j["curve"]
            if c["kind"] == "synthetic":
                curve = SyntheticModelSpec(
                    [Stage(**s) for s in c["stages"]], c["sigma"], c.get("cadence", 1), c["seed"]
                )
            else:
                curve = MetricTrace(np.array(c["steps"]), np.array(c["metrics"]))
            jobs.append(
                JobSpec(
                    j["hp_id"],
                    curve,
                    PerfProfile(dict(j["perf"]["base_spb"]), j["perf"]["cov"]),
                    CheckpointProfile(j["checkpoint"]["model_size_mb"], dict(j["checkpoint"]["speed_mb_per_s"])),
                    dict(j.get("params", {})),
                )
            )
        return cls(d["name"], int(d["max_trial_steps"]), jobs, d.get("direction", "minimize"), d.get("seed", 0))


def save_bundle(workloads: list[Workload], path) -> None:
    Path(path).write_text(json.dumps([w.to_dict() for w in workloads], indent=1, sort_keys=True) + "\n")


def load_bundle(path) -> list[Workload]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [Workload.from_dict(d) for d in data]


def _stage_hitting(k_end: int, final: float, a1: float, a0: float, start: float, l: int, r: int) -> Stage:
    """Stage with value ``start`` at step l (approximately) and ``final`` at k_end."""
    q_end = a0 * k_end * k_end + a1 * k_end
    # pick a2 so that 1/(a2) + a3 ~= start and 1/(q_end + a2) + a3 == final
    a2 = 1.0 / max(start - final, 1e-6)
    a3 = final - 1.0 / (q_end + a2)
    if a3 < 0:
        a3 = 0.0
    return Stage(l, r, a0, a1, a2, a3)


def separated_workload(
    n_jobs: int = 16,
    max_trial_steps: int = 100,
    separation: float = 0.10,
    sigma: float = 0.01,
    seed: int = 0,
    ref_spb: float = 60.0,
    model_size_mb: float = 500.0,
    cov: float = 0.05,
    catalog: Mapping[str, InstanceType] = CATALOG,
    name: str = "separated",
) -> Workload:
    """Single-stage jobs whose true final metrics are spaced by at least ``separation``.

    Curve shapes are randomized so early metrics do not trivially give the final order.
    """
    rng = np.random.default_rng(seed)
    finals = 0.2 * (1.0 + separation) ** np.arange(n_jobs)
    order = rng.permutation(n_jobs)
    speeds = default_checkpoint_speeds(catalog)
    k_end = max_trial_steps - 1
    jobs = []
    for i in range(n_jobs):
        final = float(finals[order[i]])
        start = final * rng.uniform(2.0, 6.0)
        a1 = rng.uniform(0.02, 0.3) / final
        a0 = rng.uniform(0.0, 1.0) * a1 / max_trial_steps
        stage = _stage_hitting(k_end, final, a1, a0, start, 0, max_trial_steps)
        spec = SyntheticModelSpec([stage], sigma, 1, int(rng.integers(2**31)))
        perf = PerfProfile(default_spb(catalog, ref_spb * rng.uniform(0.8, 1.25)), cov)
        jobs.append(JobSpec(f"hp{i:02d}", spec, perf, CheckpointProfile(model_size_mb, speeds)))
    return Workload(name, max_trial_steps, jobs, seed=seed)


# Algorithms and their 2x2x2x2 hyper-parameter grids.
BENCHMARKS = {
    "LoR": {"bs": (128, 64), "lr": (1e-2, 1e-3), "dr": (1.0, 0.95), "ds": (1000, 2000)},
    "SVM": {"bs": (128, 64), "lr": (1e-2, 1e-3), "dr": (1.0, 0.95), "kernel": ("RBF", "Linear")},
    "GBTR": {"bs": (128, 64), "lr": (1e-1, 1e-2), "nt": (10, 15), "depth": (5, 8)},
    "LiR": {"bs": (128, 64), "lr": (1e-2, 1e-3), "dr": (1.0, 0.95), "ds": (1000, 2000)},
    "AlexNet": {"bs": (128, 64), "lr": (1e-1, 1e-2), "dr": (1.0, 0.95), "de": (40, 60)},
    "ResNet": {"bs": (32, 64), "version": (1, 2), "depth": (20, 29), "de": (40, 60)},
}
_STAGED = {"AlexNet", "ResNet"}
_MODEL_MB = {"LoR": 16.0, "SVM": 16.0, "GBTR": 40.0, "LiR": 8.0, "AlexNet": 240.0, "ResNet": 90.0}


def grid_settings(space: Mapping[str, tuple]) -> list[dict]:
    keys = sorted(space)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(space[k] for k in keys))]


def benchmark_workload(
    algorithm: str,
    seed: int = 0,
    max_trial_steps: int = 100,
    sigma: float | None = None,
    ref_spb: float = 60.0,
    cov: float = 0.05,
    catalog: Mapping[str, InstanceType] = CATALOG,
) -> Workload:
    """16 grid settings for one algorithm with per-seed random curve coefficients.

    The numbers only mimic the shape of real runs; multi-stage algorithms get a
    learning-rate drop partway through and smoother per-epoch noise, since a
    stage break is only recognised after a steady stretch.
    """
    if algorithm not in BENCHMARKS:
        raise WorkloadError(f"unknown algorithm {algorithm!r}")
    rng = np.random.default_rng([seed, sorted(BENCHMARKS).index(algorithm)])
    speeds = default_checkpoint_speeds(catalog)
    ckpt = CheckpointProfile(_MODEL_MB[algorithm], speeds)
    k_end = max_trial_steps - 1
    if sigma is None:
        sigma = 0.002 if algorithm in _STAGED else 0.01
    jobs = []
    for i, hp in enumerate(grid_settings(BENCHMARKS[algorithm])):
        final = 0.1 * rng.uniform(1.0, 4.0)
        start = final * rng.uniform(2.0, 8.0)
        a1 = rng.uniform(0.02, 0.3) / final
        a0 = rng.uniform(0.0, 1.0) * a1 / max_trial_steps
        if algorithm in _STAGED:
            drop_at = int(max_trial_steps * rng.uniform(0.45, 0.6))
            plateau = final / 0.4
            first = _stage_hitting(drop_at - 1, plateau, a1 * 3, a0, start * 2.5, 0, drop_at)
            s2 = 0.4 * plateau
            q_drop = 1.0 / (0.15 * s2)  # stage value at the drop is exactly s2
            second = Stage(drop_at, max_trial_steps, 0.0, 0.5 * q_drop / drop_at, 0.5 * q_drop, 0.85 * s2)
            stages = [first, second]
        else:
            stages = [_stage_hitting(k_end, final, a1, a0, start, 0, max_trial_steps)]
        spb_scale = (128 / hp["bs"]) ** 0.3 if "bs" in hp else 1.0
        perf = PerfProfile(default_spb(catalog, ref_spb * spb_scale * rng.uniform(0.8, 1.25)), cov)
        spec = SyntheticModelSpec(stages, sigma, 1, int(rng.integers(2**31)))
        jobs.append(JobSpec(f"{algorithm}-{i:02d}", spec, perf, ckpt, hp))
    return Workload(algorithm, max_trial_steps, jobs, seed=seed)


def default_bundle(seed: int = 0, max_trial_steps: int = 100, **kw) -> list[Workload]:
    return [benchmark_workload(a, seed, max_trial_steps, **kw) for a in BENCHMARKS]
