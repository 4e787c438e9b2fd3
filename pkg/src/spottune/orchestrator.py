"""Discrete-event simulation of cost-aware HPT on revocable instances.

The loop polls every ``poll_interval`` seconds. Each running job is checked
for, in order: a revocation notice, reaching its step target (or a plateau),
and running longer than ``rotation_limit`` on one instance. Waiting jobs are
then placed on the instance with the lowest expected step cost.

Every job draws from its own random streams, so a job's trajectory does not
depend on other jobs or on theta until it stops.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from spottune import __version__
from spottune.earlycurve import (
    CurveError,
    FitConfig,
    MetricTrace,
    detect_plateau,
    predict_final,
    rank_models,
    required_steps,
)
from spottune.market import (
    HOUR,
    Acquisition,
    BillingLedger,
    InstanceType,
    InsufficientHistoryError,
    MarketError,
    PriceTrace,
    avg_price,
    bill,
    price_at,
    revocation_time,
)
from spottune.revpred.features import HISTORY_LEN, feature_matrix, inference_max_price
from spottune.revpred.model import PredictorModel, encode_history, predict_encoded
from spottune.workload import JobSpec, Workload, checkpoint_time, step_duration

log = logging.getLogger(__name__)

# Per-job random streams.
_STREAM_STEPS = 0
_STREAM_PRICE = 1


class SimulationError(Exception):
    pass


class SimulationHorizonError(SimulationError):
    def __init__(self, t: float, instance: str, end: int):
        super().__init__(f"price trace for {instance} ends at {end}, simulation reached t={t}")
        self.t = t


class ProvisioningError(SimulationError):
    pass


@dataclass
class SimConfig:
    metric: str = "loss"
    max_trial_steps: int = 100
    theta: float = 0.7
    mcnt: int = 3
    c0: float = 100.0
    poll_interval: int = 10
    notice_lead: int = 120
    rotation_limit: int = 3600
    seed: int = 0
    ema_beta: float = 0.5
    literal_m_init: bool = False
    direction: str = "minimize"
    xi: float = 0.5
    epsilon: float = 0.01
    start_time: int | None = None
    record_events: bool = False

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must be in (0, 1]")
        if self.mcnt < 1:
            raise ValueError("mcnt must be >= 1")
        for name in ("max_trial_steps", "c0", "poll_interval", "notice_lead", "rotation_limit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.direction not in ("minimize", "maximize"):
            raise ValueError("direction must be minimize or maximize")

    @property
    def fit(self) -> FitConfig:
        return FitConfig(xi=self.xi, epsilon=self.epsilon, theta=self.theta)

    @property
    def early_shutdown(self) -> bool:
        # theta == 1 switches curve prediction off entirely, plateau stop included
        return self.theta < 1.0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class PerfMatrix:
    """Seconds per step for each (instance, hp); unobserved cells hold the instance default."""

    def __init__(self, defaults: Mapping[str, float]):
        if any(v <= 0 for v in defaults.values()):
            raise ValueError("initial seconds-per-step must be positive")
        self.defaults = dict(defaults)
        self.values: dict[tuple[str, str], float] = {}
        self.counts: dict[tuple[str, str], int] = {}

    def __getitem__(self, key: tuple[str, str]) -> float:
        inst, _ = key
        return self.values.get(key, self.defaults[inst])

    def count(self, inst: str, hp: str) -> int:
        return self.counts.get((inst, hp), 0)


def init_perf_matrix(catalog, c0: float, literal: bool = False) -> PerfMatrix:
    """Every cell starts at c0 / cpus (or c0 * cpus with ``literal``)."""
    if c0 <= 0:
        raise ValueError("C0 must be positive")
    insts = catalog.values() if isinstance(catalog, Mapping) else catalog
    return PerfMatrix({it.name: (c0 * it.cpus if literal else c0 / it.cpus) for it in insts})


def update_metrics(matrix: PerfMatrix, instance: str, hp: str, observed_spb: float, beta: float = 0.5) -> PerfMatrix:
    if not observed_spb > 0:
        raise ValueError(f"observed seconds-per-step must be positive, got {observed_spb}")
    key = (instance, hp)
    n = matrix.counts.get(key, 0)
    matrix.values[key] = observed_spb if n == 0 else beta * observed_spb + (1 - beta) * matrix.values[key]
    matrix.counts[key] = n + 1
    return matrix


def step_cost(matrix: PerfMatrix, instance: str, hp: str, p: float, avg: float) -> float:
    """Expected dollars per step up to a constant factor: M * (1 - p) * avg price."""
    if not 0 <= p <= 1:
        raise ValueError(f"revocation probability {p} outside [0, 1]")
    if avg <= 0:
        raise ValueError("average price must be positive")
    return matrix[instance, hp] * (1.0 - p) * avg


class ConstantPredictor:
    def __init__(self, p: float):
        self.p = float(p)

    def probability(self, trace: PriceTrace, t: float, max_price: float) -> float:
        return self.p


class ModelPredictor:
    """Adapter from a trained per-market model to (trace, t, max price) queries.

    Queries use the grid minute at or before ``t``; history encodings are cached.
    """

    def __init__(self, model: PredictorModel):
        self.model = model
        self._features: dict[int, np.ndarray] = {}
        self._encoded: dict[tuple[int, int], np.ndarray] = {}

    def probability(self, trace: PriceTrace, t: float, max_price: float) -> float:
        key = id(trace)
        if key not in self._features:
            self._features[key] = feature_matrix(trace)
        feats = self._features[key]
        i = trace.index_at(t)
        if i - HISTORY_LEN < HOUR // 60:
            raise InsufficientHistoryError(f"{trace.name}: not enough history for a prediction at t={t}")
        if (key, i) not in self._encoded:
            self._encoded[(key, i)] = encode_history(self.model, feats[i - HISTORY_LEN : i])
        return float(predict_encoded(self.model, self._encoded[(key, i)], feats[i], [max_price])[0])


def _predictor_for(predictor, name: str):
    if predictor is None:
        return None
    if isinstance(predictor, Mapping):
        return predictor.get(name)
    return predictor


@dataclass
class Choice:
    instance: str
    max_price: float
    cost: float
    p: float
    avg_price: float


def get_best_inst(
    t: float,
    hp: str,
    matrix: PerfMatrix,
    pool: Sequence[str],
    predictor,
    traces: Mapping[str, PriceTrace],
    rng: np.random.Generator,
) -> Choice:
    """Lowest expected step cost over the pool; ties go to lower average price, then name."""
    best = None
    for name in sorted(pool):
        trace = traces[name]
        current = price_at(trace, t)
        maxp = inference_max_price(current, rng)
        pred = _predictor_for(predictor, name)
        if pred is None:
            continue
        try:
            p = float(pred.probability(trace, t, maxp))
            avg = avg_price(trace, t)
        except MarketError as exc:
            log.debug("skipping %s at t=%s: %s", name, t, exc)
            continue
        cost = step_cost(matrix, name, hp, p, avg)
        key = (cost, avg, name)
        if best is None or key < best[0]:
            best = (key, Choice(name, maxp, cost, p, avg))
    if best is None:
        raise ProvisioningError(f"no instance in the pool could be priced at t={t} for {hp}")
    return best[1]


@dataclass
class _Job:
    index: int
    spec: JobSpec
    metrics: MetricTrace
    rng_steps: np.random.Generator
    rng_price: np.random.Generator
    state: str = "waiting"
    target: int = 0
    steps_done: int = 0
    ckpt_steps: int = 0
    executed: int = 0
    lost: int = 0
    plateaued: bool = False
    continued: bool = False
    acq: Acquisition | None = None
    revoke_at: int | None = None
    acq_steps: int = 0
    step_started: float = 0.0
    next_step_end: float | None = None
    ready_at: float = 0.0
    finished_at: float | None = None
    done_at: float | None = None
    acquisitions: int = 0
    checkpoints: list = field(default_factory=list)

    @property
    def hp(self) -> str:
        return self.spec.hp_id


@dataclass
class Report:
    policy: str
    total_cost: float
    exploration_cost: float
    jct: float
    completion_time: float
    pcr: float
    free_steps_fraction: float
    refunded_value: float
    selected: list[str]
    predictions: dict[str, float]
    top1_hit: bool | None
    top3_hit: bool | None
    lost_steps: int
    jobs: list[dict]
    ledger: list[dict]
    seed: int
    config_digest: str
    theta: float
    version: str = __version__
    events: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> Report:
        return cls(**d)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj)}")


LEDGER_COLUMNS = ("job", "instance", "start", "end", "reason", "charge", "refunded", "steps")


def pcr(jct: float, cost: float, alpha: float = 1.0) -> float:
    """Performance-cost rate alpha / (JCT * cost) with JCT in hours."""
    denom = (jct / HOUR) * cost
    return math.inf if denom <= 0 else alpha / denom


def normalize_pcr(reports: Mapping[str, Report], reference: str) -> dict[str, float]:
    """PCR of every report relative to ``reference``, which scores exactly 1."""
    ref = reports[reference]
    out = {}
    for name, r in reports.items():
        if name == reference:
            out[name] = 1.0
            continue
        num = ref.jct * ref.total_cost
        den = r.jct * r.total_cost
        out[name] = math.inf if den <= 0 else (num / den if num > 0 else 0.0)
    return out


Provisioner = Callable[[float, _Job], Choice]


class SimState:
    """Mutable state of one simulation: jobs, performance matrix, ledger and event log."""

    def __init__(
        self,
        config: SimConfig,
        traces: Mapping[str, PriceTrace],
        pool: Sequence[str],
        workload: Workload,
        matrix: PerfMatrix,
        early_shutdown: bool,
        theta: float,
    ):
        self.cfg = config
        self.traces = traces
        self.pool = list(pool)
        self.workload = workload
        self.matrix = matrix
        self.early = early_shutdown
        self.theta = theta
        self.ledger = BillingLedger()
        self.events: list[dict] = []
        self.provision: Provisioner | None = None
        max_steps = workload.max_trial_steps
        self.jobs = []
        for i, spec in enumerate(sorted(workload.jobs, key=lambda j: j.hp_id)):
            self.jobs.append(
                _Job(
                    i,
                    spec,
                    spec.metric_trace(max_steps),
                    np.random.default_rng([config.seed, i, _STREAM_STEPS]),
                    np.random.default_rng([config.seed, i, _STREAM_PRICE]),
                    target=required_steps(max_steps, theta),
                )
            )

    def _event(self, t, job, kind, **detail):
        if self.cfg.record_events:
            self.events.append({"t": t, "job": job.hp, "kind": kind, **detail})

    def _ckpt(self, job: _Job, inst: str) -> float:
        return checkpoint_time(job.spec.checkpoint, inst)

    def _advance(self, job: _Job, t: float) -> None:
        limit = t if job.revoke_at is None else min(t, job.revoke_at)
        inst = job.acq.instance
        while (
            job.next_step_end is not None
            and job.steps_done < job.target
            and job.next_step_end <= limit
        ):
            dur = job.next_step_end - job.step_started
            job.steps_done += 1
            job.executed += 1
            job.acq_steps += 1
            update_metrics(self.matrix, inst, job.hp, dur, self.cfg.ema_beta)
            job.step_started = job.next_step_end
            if job.steps_done < job.target:
                job.next_step_end = job.step_started + step_duration(job.spec.perf, inst, job.rng_steps)
            else:
                job.next_step_end = None

    def _close(self, job: _Job, end: float, reason: str) -> None:
        trace = self.traces[job.acq.instance]
        if end > trace.end:
            raise SimulationHorizonError(end, trace.name, trace.end)
        job.acq.close(end, reason)
        rec = self.ledger.add(trace, job.acq, job.hp, job.acq_steps)
        self._event(end, job, "close", instance=job.acq.instance, reason=reason,
                    charge=rec.charge, refunded=rec.refunded, steps=job.acq_steps)
        job.acq = None
        job.revoke_at = None
        job.next_step_end = None
        job.acq_steps = 0

    def _lose_progress(self, job: _Job, t: float) -> None:
        lost = job.steps_done - job.ckpt_steps
        if lost:
            log.warning("%s: checkpoint did not finish before revocation; %d steps lost", job.hp, lost)
        job.lost += lost
        job.steps_done = job.ckpt_steps
        self._event(t, job, "lost", steps=lost)

    def _stop(self, job: _Job, t: float, reason: str, state: str) -> None:
        """Checkpoint then shut the instance down; a revocation during the checkpoint loses it."""
        c = self._ckpt(job, job.acq.instance)
        end = t + c
        if job.revoke_at is not None and job.revoke_at <= end:
            self._lose_progress(job, t)
            job.ready_at = t
            self._close(job, job.revoke_at, "revoked")
            job.state = "waiting"
            return
        job.ckpt_steps = job.steps_done
        job.checkpoints.append((end, job.steps_done))
        job.ready_at = end
        self._close(job, end, reason)
        job.state = state
        if state in ("finished", "done"):
            job.finished_at = end

    def _handle(self, job: _Job, t: float, continuation: bool) -> str | None:
        self._advance(job, t)
        inst = job.acq.instance
        if job.revoke_at is not None and job.revoke_at - t <= self.cfg.notice_lead:
            window = job.revoke_at - t
            c = self._ckpt(job, inst)
            if 0 <= window and c <= window:
                job.ckpt_steps = job.steps_done
                job.checkpoints.append((t + c, job.steps_done))
                job.ready_at = t + c
            else:
                self._lose_progress(job, t)
                job.ready_at = t
            self._event(t, job, "notice", instance=inst, revoke_at=job.revoke_at)
            self._close(job, job.revoke_at, "revoked")
            job.state = "waiting"
            return "notice"
        reached = job.steps_done >= job.target
        if not reached and self.early and not continuation and job.steps_done > 5:
            if detect_plateau(job.metrics.head(job.steps_done), self.cfg.fit):
                job.plateaued = True
                reached = True
        if reached:
            self._event(t, job, "plateau" if job.plateaued and job.steps_done < job.target else "target")
            self._stop(job, t, "finished", "done" if continuation else "finished")
            return "complete"
        if t - job.acq.start_time > self.cfg.rotation_limit:
            self._event(t, job, "rotate", instance=inst)
            self._stop(job, t, "self_shutdown", "waiting")
            return "rotate"
        return None

    def _deploy(self, job: _Job, t: float) -> None:
        choice = self.provision(t, job)
        trace = self.traces[choice.instance]
        job.acq = Acquisition(choice.instance, t, choice.max_price)
        job.revoke_at = revocation_time(trace, t, choice.max_price)
        job.acquisitions += 1
        restore = self._ckpt(job, choice.instance) if job.ckpt_steps > 0 else 0.0
        job.step_started = max(t, job.ready_at) + restore
        job.next_step_end = job.step_started + step_duration(job.spec.perf, choice.instance, job.rng_steps)
        job.state = "running"
        self._event(t, job, "deploy", instance=choice.instance,
                    max_price=choice.max_price if math.isfinite(choice.max_price) else None,
                    p=choice.p, cost=choice.cost, revoke_at=job.revoke_at)

    def handle_tick(self, jobs: list[_Job], t: float, continuation: bool = False) -> list[tuple[str, str]]:
        """One poll: at most one event per running job, then redeploy every waiting job.

        Returns (hp, action) pairs with action in notice/complete/rotate/deploy.
        """
        actions = []
        for job in jobs:
            if job.state == "running":
                trace = self.traces[job.acq.instance]
                if t > trace.end:
                    raise SimulationHorizonError(t, trace.name, trace.end)
                kind = self._handle(job, t, continuation)
                if kind:
                    actions.append((job.hp, kind))
        for job in jobs:
            if job.state == "waiting":
                self._deploy(job, t)
                actions.append((job.hp, "deploy"))
        return actions

    def run(self, jobs: list[_Job], t0: float, continuation: bool = False) -> float:
        """Poll until every job in ``jobs`` stops; returns the last stop time."""
        t = t0
        active = list(jobs)
        while active:
            self.handle_tick(active, t, continuation)
            active = [j for j in active if j.state not in ("finished", "done")]
            t += self.cfg.poll_interval
        return max(j.finished_at for j in jobs)


def default_start(config: SimConfig, traces: Mapping[str, PriceTrace], pool: Sequence[str]) -> int:
    if config.start_time is not None:
        return config.start_time
    start = max(traces[p].start for p in pool) + 2 * HOUR
    poll = config.poll_interval
    return int(math.ceil(start / poll) * poll)


def _check_inputs(catalog, traces, pool, workload):
    if not pool:
        raise SimulationError("empty instance pool")
    for name in pool:
        if name not in traces:
            raise SimulationError(f"no price trace for {name}")
        if name not in catalog:
            raise SimulationError(f"{name} missing from the catalog")
        for job in workload.jobs:
            if name not in job.perf.base_spb or name not in job.checkpoint.speed_mb_per_s:
                raise SimulationError(f"{job.hp_id} has no profile for {name}")


def _simulate(
    policy: str,
    config: SimConfig,
    catalog: Mapping[str, InstanceType],
    traces: Mapping[str, PriceTrace],
    pool: Sequence[str],
    workload: Workload,
    provisioner_factory,
    theta: float,
    early: bool,
) -> Report:
    _check_inputs(catalog, traces, pool, workload)
    max_steps = workload.max_trial_steps
    if config.max_trial_steps != max_steps:
        raise SimulationError(
            f"config max_trial_steps={config.max_trial_steps} but workload uses {max_steps}"
        )
    matrix = init_perf_matrix([catalog[p] for p in pool], config.c0, config.literal_m_init)
    eng = SimState(config, traces, pool, workload, matrix, early, theta)
    eng.provision = provisioner_factory(eng)
    t0 = default_start(config, traces, pool)

    selected_at = eng.run(eng.jobs, t0)
    exploration_cost = eng.ledger.total

    predictions = {}
    need = required_steps(max_steps, theta)
    for job in eng.jobs:
        trace = job.metrics.head(job.steps_done)
        if job.steps_done >= max_steps or not early:
            predictions[job.hp] = float(trace.metrics[-1])
        elif job.plateaued and job.steps_done < need:
            predictions[job.hp] = float(trace.metrics[-1])
        else:
            try:
                predictions[job.hp] = predict_final(trace, max_steps, config.fit)
            except CurveError:
                # too few points to fit (tiny theta); fall back to the last observation
                predictions[job.hp] = float(trace.metrics[-1])
    mcnt = min(config.mcnt, len(eng.jobs))
    selected = rank_models(predictions, mcnt, config.direction)

    cont = []
    for job in eng.jobs:
        if job.hp in selected and job.steps_done < max_steps and not job.plateaued:
            job.state = "waiting"
            job.target = max_steps
            job.continued = True
            cont.append(job)
    completion = selected_at
    if cont:
        poll = config.poll_interval
        t1 = int(math.ceil(selected_at / poll) * poll)
        completion = eng.run(cont, t1, continuation=True)
    for job in eng.jobs:
        if job.state == "finished" and job not in cont:
            job.done_at = job.finished_at

    return _report(policy, config, eng, t0, selected_at, completion, exploration_cost,
                   predictions, selected, theta)


def _report(policy, config, eng, t0, selected_at, completion, exploration_cost,
            predictions, selected, theta) -> Report:
    records = eng.ledger.records
    total_steps = sum(r.steps for r in records)
    free_steps = sum(r.steps for r in records if r.refunded)
    refunded_value = 0.0
    for r in records:
        if r.refunded:
            a = r.acquisition
            shadow = Acquisition(a.instance, a.start_time, a.max_price, a.end_time, "self_shutdown")
            refunded_value += bill(eng.traces[a.instance], shadow)[0]
    truth = eng.workload.true_ranking()
    best = truth[0] if truth else None
    jct = selected_at - t0
    cost = eng.ledger.total
    jobs = [
        {
            "hp": j.hp,
            "state": j.state,
            "steps_done": j.steps_done,
            "executed": j.executed,
            "lost": j.lost,
            "plateaued": j.plateaued,
            "continued": j.continued,
            "acquisitions": j.acquisitions,
            "finished_at": j.finished_at,
        }
        for j in eng.jobs
    ]
    ledger = [r.row() for r in records]
    return Report(
        policy=policy,
        total_cost=cost,
        exploration_cost=exploration_cost,
        jct=jct,
        completion_time=completion - t0,
        pcr=pcr(jct, cost),
        free_steps_fraction=free_steps / total_steps if total_steps else 0.0,
        refunded_value=float(refunded_value),
        selected=selected,
        predictions=predictions,
        top1_hit=(selected[0] == best) if best else None,
        top3_hit=(best in selected[:3]) if best else None,
        lost_steps=sum(j.lost for j in eng.jobs),
        jobs=jobs,
        ledger=ledger,
        seed=config.seed,
        config_digest=config.digest(),
        theta=theta,
        events=eng.events,
    )


def run_simulation(
    config: SimConfig,
    catalog: Mapping[str, InstanceType],
    traces: Mapping[str, PriceTrace],
    workload: Workload,
    predictor,
    pool: Sequence[str] | None = None,
) -> Report:
    """Cost-aware provisioning with early shutdown and top-mcnt continuation.

    ``predictor`` is one object with ``probability(trace, t, max_price)`` or a
    mapping from instance name to such objects; unmapped instances are skipped.
    """
    pool = sorted(pool if pool is not None else traces)

    def factory(eng: SimState):
        def provision(t, job):
            return get_best_inst(t, job.hp, eng.matrix, eng.pool, predictor, eng.traces, job.rng_price)

        return provision

    return _simulate(
        f"spottune(theta={config.theta:g})", config, catalog, traces, pool, workload, factory,
        config.theta, config.early_shutdown,
    )


def simulate_baseline(
    config: SimConfig,
    catalog: Mapping[str, InstanceType],
    traces: Mapping[str, PriceTrace],
    workload: Workload,
    instance_name: str,
) -> Report:
    """Every job on its own copy of one instance type with an unbeatable max price; theta = 1.

    Shares the event loop with ``run_simulation``, including hourly rotation.
    """
    if instance_name not in catalog:
        raise SimulationError(f"unknown instance {instance_name!r}")

    def factory(eng: SimState):
        def provision(t, job):
            trace = eng.traces[instance_name]
            return Choice(instance_name, math.inf, 0.0, 0.0, price_at(trace, t))

        return provision

    return _simulate(
        f"single-spot({instance_name})", config, catalog, traces, [instance_name], workload,
        factory, 1.0, False,
    )


def ledger_rows(report: Report) -> list[list]:
    return [[row[c] for c in LEDGER_COLUMNS] for row in report.ledger]


SWEEP_COLUMNS = (
    "theta", "total_cost", "exploration_cost", "jct", "completion_time", "free_steps_fraction",
    "refunded_value", "top1_hit", "top3_hit", "cost_reversal", "reversal_cause",
)


def theta_sweep(
    config: SimConfig,
    catalog,
    traces,
    workload: Workload,
    predictor,
    thetas: Sequence[float] = tuple(round(0.1 * i, 1) for i in range(1, 11)),
    pool: Sequence[str] | None = None,
) -> list[dict]:
    """One simulation per theta; cost drops against the previous theta are flagged.

    A drop in exploration cost can only come from more refunded acquisitions
    (a job stopped by us at low theta gets revoked inside its first hour at a
    higher one); anything else is the shorter continuation phase.
    """
    rows = []
    prev = None
    for th in thetas:
        cfg = SimConfig(**{**asdict(config), "theta": th})
        rep = run_simulation(cfg, catalog, traces, workload, predictor, pool)
        row = {
            "theta": th,
            "total_cost": rep.total_cost,
            "exploration_cost": rep.exploration_cost,
            "jct": rep.jct,
            "completion_time": rep.completion_time,
            "free_steps_fraction": rep.free_steps_fraction,
            "refunded_value": rep.refunded_value,
            "top1_hit": rep.top1_hit,
            "top3_hit": rep.top3_hit,
            "cost_reversal": False,
            "reversal_cause": "",
        }
        if prev is not None and rep.total_cost < prev["total_cost"] - 1e-9:
            row["cost_reversal"] = True
            if rep.exploration_cost < prev["exploration_cost"] - 1e-9:
                row["reversal_cause"] = "refund_timing"
            else:
                row["reversal_cause"] = "continuation"
        rows.append(row)
        prev = row
    return rows
