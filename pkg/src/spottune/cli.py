"""Command-line entry point.

Configuration is a JSON document with these optional sections; flags override it::

    {
      "seed": 0,
      "paths":    {"traces": DIR, "workload": FILE, "models": DIR, "out": DIR},
      "sim":      {<SimConfig fields>},
      "train":    {<TrainConfig fields>, "stride": 60,
                   "train_until": EPOCH, "eval_from": EPOCH},
      "simulate": {"pool": [NAMES], "constant_p": null,
                   "thetas": [0.1, ..., 1.0]}
    }

The default config path comes from ``$SPOTTUNE_CONFIG``.
Exit codes: 0 success, 1 usage, 2 data error, 3 simulation error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from spottune import __version__
from spottune.earlycurve import (
    CurveError,
    FitConfig,
    curve_residual,
    fit_curve,
    predict_final,
    read_metric_trace,
)
from spottune.market import CATALOG, MarketError, PriceTrace, ingest_trace, regularize, write_traces
from spottune.orchestrator import (
    LEDGER_COLUMNS,
    SWEEP_COLUMNS,
    ConstantPredictor,
    ModelPredictor,
    Report,
    SimConfig,
    SimulationError,
    default_start,
    normalize_pcr,
    run_simulation,
    simulate_baseline,
    theta_sweep,
)
from spottune.revpred import (
    DatasetError,
    TrainConfig,
    UntrainableError,
    build_dataset,
    evaluate,
    load_model,
    save_model,
    train,
)
from spottune.workload import WorkloadError, default_bundle, load_bundle

log = logging.getLogger("spottune")

CONFIG_ENV = "SPOTTUNE_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SIM = 0, 1, 2, 3
ARCHS = ("logistic", "sequence")
DEFAULT_THETAS = [round(0.1 * i, 1) for i in range(1, 11)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration -----------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {p} must be a JSON object")
    return cfg


def _set(cfg: dict, section: str | None, key: str, value) -> None:
    if value is None:
        return
    if section is None:
        cfg[key] = value
    else:
        cfg.setdefault(section, {})[key] = value


def resolve(args) -> dict:
    """Config file merged with command-line overrides."""
    cfg = copy.deepcopy(load_config(args.config))
    _set(cfg, None, "seed", args.seed)
    for key in ("traces", "workload", "models", "out"):
        _set(cfg, "paths", key, getattr(args, key, None))
    cfg.setdefault("seed", 0)
    return cfg


def config_digest(cfg: dict) -> str:
    """Hash of the resolved configuration; the output location does not affect results."""
    cfg = copy.deepcopy(cfg)
    cfg.get("paths", {}).pop("out", None)
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(cfg: dict) -> dict:
    return {"seed": cfg["seed"], "config_digest": config_digest(cfg), "version": __version__}


def _path(cfg: dict, key: str, must_exist: bool = True) -> Path:
    val = cfg.get("paths", {}).get(key)
    if val is None:
        raise UsageError(f"missing --{key}")
    p = Path(val)
    if must_exist and not p.exists():
        raise UsageError(f"{key} path {p} does not exist")
    return p


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_plain) + "\n")


def _plain(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(type(obj))


def _write_table(path: Path, header, rows, stamp: dict) -> None:
    buf = io.StringIO()
    buf.write("# spottune {version} seed={seed} config={config_digest}\n".format(**stamp))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    path.write_text(buf.getvalue())


def read_table(path) -> list[dict]:
    """Read a table written by this tool, skipping the provenance comment line."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def load_traces(directory: Path) -> dict[str, PriceTrace]:
    files = sorted(directory.glob("*.csv")) if directory.is_dir() else [directory]
    traces: dict[str, PriceTrace] = {}
    for f in files:
        for name, tr in ingest_trace(f, CATALOG).items():
            if name in traces:
                raise MarketError(f"{name} appears in more than one trace file")
            traces[name] = tr if tr.is_regular() else regularize(tr)
    if not traces:
        raise MarketError(f"no price traces in {directory}")
    return traces


# -- commands ----------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = resolve(args)
    out = _path(cfg, "out", must_exist=False)
    sources = []
    for src in args.inputs:
        p = Path(src)
        if p.is_dir():
            sources.extend(sorted(p.glob("*.csv")))
        elif p.is_file():
            sources.append(p)
        else:
            raise UsageError(f"input {p} does not exist")
    if not sources:
        raise MarketError("no input files found")
    merged: dict[str, list] = {}
    for src in sources:
        errors: list = []
        for name, tr in ingest_trace(src, CATALOG, skip_bad=args.skip_bad, errors=errors).items():
            merged.setdefault(name, []).append(tr)
        for err in errors:
            log.warning("%s: skipped bad row: %s", src, err)
    if not merged:
        raise MarketError("inputs contained no price records")
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(merged):
        parts = merged[name]
        times = np.concatenate([p.times for p in parts])
        prices = np.concatenate([p.prices for p in parts])
        # later files win on duplicate timestamps, as rows do within a file
        _, last = np.unique(times[::-1], return_index=True)
        keep = len(times) - 1 - last
        tr = PriceTrace(parts[0].instance, times[keep], prices[keep])
        reg = regularize(tr, args.interval)
        write_traces([reg], out / f"{name}.csv")
        print(f"{name}: {len(tr)} records -> {len(reg)} grid points")
    return EXIT_OK


def _train_cfg(cfg: dict, arch: str) -> TrainConfig:
    section = {k: v for k, v in cfg.get("train", {}).items() if k in {f.name for f in fields(TrainConfig)}}
    section["architecture"] = arch
    section.setdefault("seed", cfg["seed"])
    return TrainConfig(**section)


def _apply_train_flags(cfg: dict, args) -> None:
    for key in ("epochs", "stride", "train_until", "eval_from"):
        _set(cfg, "train", key, getattr(args, key, None))


def _datasets(cfg: dict, traces) -> dict:
    stride = int(cfg.get("train", {}).get("stride", 60))
    out = {}
    for name in sorted(traces):
        out[name] = build_dataset(traces[name], stride)[0]
    return out


def cmd_train_revpred(args) -> int:
    cfg = resolve(args)
    _apply_train_flags(cfg, args)
    tcfg = cfg.get("train", {})
    if tcfg.get("train_until") is None:
        raise UsageError("--train-until is required")
    until = int(tcfg["train_until"])
    traces = load_traces(_path(cfg, "traces"))
    out = _path(cfg, "models", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    archs = ARCHS if args.arch == "both" else (args.arch,)
    summary = []
    for name, samples in _datasets(cfg, traces).items():
        # a sample's label looks one hour ahead; keep every label inside the training window
        train_set = samples.subset(samples.times + 3600 <= until)
        if len(train_set) == 0:
            raise DatasetError(f"{name}: no samples before {until}")
        for arch in archs:
            model = train(train_set, _train_cfg(cfg, arch))
            save_model(model, out / f"{name}.{arch}.npz")
            summary.append({"instance": name, "architecture": arch, "samples": len(train_set),
                            "phi_plus": model.balance.phi_plus, "final_loss": model.loss_history[-1]})
            print(f"{name} {arch}: {len(train_set)} samples, loss {model.loss_history[-1]:.4f}")
    _dump_json(out / "training.json", {**_stamp(cfg), "train_until": until, "models": summary})
    return EXIT_OK


EVAL_COLUMNS = ("instance", "architecture", "n", "accuracy", "f1", "precision", "recall", "tp", "fp", "tn", "fn")


def cmd_eval_revpred(args) -> int:
    cfg = resolve(args)
    _apply_train_flags(cfg, args)
    tcfg = cfg.get("train", {})
    if tcfg.get("eval_from") is None:
        raise UsageError("--eval-from is required")
    start = int(tcfg["eval_from"])
    if tcfg.get("train_until") is not None and start < int(tcfg["train_until"]):
        raise UsageError(f"evaluation window starting {start} overlaps training up to {tcfg['train_until']}")
    models_dir = _path(cfg, "models")
    traces = load_traces(_path(cfg, "traces"))
    rows = []
    for name, samples in _datasets(cfg, traces).items():
        _, held = samples.split_at(start)
        if len(held) == 0:
            raise DatasetError(f"{name}: no samples at or after {start}")
        for arch in ARCHS:
            path = models_dir / f"{name}.{arch}.npz"
            if not path.exists():
                continue
            m = evaluate(load_model(path), held)
            rows.append({"instance": name, "architecture": arch, "n": len(held), **m})
    if not rows:
        raise DatasetError(f"no trained models in {models_dir} match the traces")
    stamp = _stamp(cfg)
    out = Path(cfg.get("paths", {}).get("out") or models_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "revpred_eval.csv", EVAL_COLUMNS, [[r[c] for c in EVAL_COLUMNS] for r in rows], stamp)
    _dump_json(out / "revpred_eval.json", {**stamp, "eval_from": start, "results": rows})
    print(f"{'instance':<12} {'model':<9} {'n':>6} {'acc':>6} {'f1':>6} {'tp':>5} {'fp':>5} {'tn':>5} {'fn':>5}")
    for r in rows:
        print(f"{r['instance']:<12} {r['architecture']:<9} {r['n']:>6} {r['accuracy']:6.3f} {r['f1']:6.3f} "
              f"{r['tp']:>5} {r['fp']:>5} {r['tn']:>5} {r['fn']:>5}")
    return EXIT_OK


def _sim_config(cfg: dict, args) -> SimConfig:
    section = dict(cfg.get("sim", {}))
    for key in ("theta", "mcnt", "c0", "start_time"):
        _set(section, None, key, getattr(args, key, None))
    section.setdefault("seed", cfg["seed"])
    known = {f.name for f in fields(SimConfig)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown sim settings: {sorted(unknown)}")
    return SimConfig(**section)


def _predictor(cfg: dict, args, pool):
    scfg = cfg.get("simulate", {})
    const = args.constant_p if args.constant_p is not None else scfg.get("constant_p")
    models = cfg.get("paths", {}).get("models")
    if const is not None:
        return ConstantPredictor(float(const))
    if models is None:
        raise UsageError("need --models or --constant-p")
    preds = {}
    for name in pool:
        path = Path(models) / f"{name}.{args.arch}.npz"
        if path.exists():
            preds[name] = ModelPredictor(load_model(path))
    if not preds:
        raise DatasetError(f"no {args.arch} models for the pool in {models}")
    return preds


def _baseline_instances(traces, pool, workload, t0) -> dict[str, str]:
    """Cheapest spot price at submission, and lowest mean seconds-per-step."""
    cheapest = min(pool, key=lambda n: (float(traces[n].prices[traces[n].index_at(t0)]), n))
    mean_spb = {n: np.mean([j.perf.base_spb[n] for j in workload.jobs]) for n in pool}
    fastest = min(pool, key=lambda n: (mean_spb[n], n))
    return {"cheapest": cheapest, "fastest": fastest}


def _write_report(path: Path, report: Report, stamp: dict) -> None:
    d = report.to_dict()
    d["manifest"] = stamp
    _dump_json(path, d)


def cmd_simulate(args) -> int:
    cfg = resolve(args)
    _set(cfg, "sim", "theta", args.theta)
    sim = _sim_config(cfg, args)
    traces = load_traces(_path(cfg, "traces"))
    if cfg.get("paths", {}).get("workload"):
        workloads = load_bundle(_path(cfg, "workload"))
    else:
        workloads = default_bundle(cfg["seed"], sim.max_trial_steps)
    pool = sorted(cfg.get("simulate", {}).get("pool") or traces)
    missing = [p for p in pool if p not in traces]
    if missing:
        raise UsageError(f"pool instances without traces: {missing}")
    predictor = _predictor(cfg, args, pool)
    out = _path(cfg, "out", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)

    pcr_rows = []
    for wl in workloads:
        wsim = SimConfig(**{**asdict(sim), "max_trial_steps": wl.max_trial_steps, "direction": wl.direction})
        ref_cfg = SimConfig(**{**asdict(wsim), "theta": 0.7})
        reports = {"spottune": run_simulation(wsim, CATALOG, traces, wl, predictor, pool)}
        if wsim.theta != 0.7:
            reports["spottune_ref"] = run_simulation(ref_cfg, CATALOG, traces, wl, predictor, pool)
        t0 = default_start(wsim, traces, pool)
        for label, inst in _baseline_instances(traces, pool, wl, t0).items():
            reports[label] = simulate_baseline(wsim, CATALOG, traces, wl, inst)
        ref = "spottune" if wsim.theta == 0.7 else "spottune_ref"
        norm = normalize_pcr(reports, ref)
        for label, rep in reports.items():
            _write_report(out / f"{wl.name}.{label}.json", rep, stamp)
            _write_table(out / f"{wl.name}.{label}.ledger.csv", LEDGER_COLUMNS,
                         [[row[c] for c in LEDGER_COLUMNS] for row in rep.ledger], stamp)
            pcr_rows.append([wl.name, label, rep.policy, rep.total_cost, rep.jct, rep.completion_time,
                             rep.free_steps_fraction, norm[label], rep.top1_hit, rep.top3_hit])
            print(f"{wl.name:<8} {label:<12} cost={rep.total_cost:.4f} jct={rep.jct / 3600:.2f}h "
                  f"free={rep.free_steps_fraction:.2f} pcr={norm[label]:.3f}")
        if args.theta_sweep:
            thetas = cfg.get("simulate", {}).get("thetas", DEFAULT_THETAS)
            rows = theta_sweep(wsim, CATALOG, traces, wl, predictor, thetas, pool)
            _write_table(out / f"{wl.name}.theta_sweep.csv", SWEEP_COLUMNS,
                         [[r[c] for c in SWEEP_COLUMNS] for r in rows], stamp)
            for r in rows:
                if r["cost_reversal"]:
                    print(f"{wl.name}: cost drops at theta={r['theta']} ({r['reversal_cause']})")
    _write_table(out / "summary.csv",
                 ("workload", "run", "policy", "total_cost", "jct", "completion_time",
                  "free_steps_fraction", "normalized_pcr", "top1_hit", "top3_hit"),
                 pcr_rows, stamp)
    return EXIT_OK


def cmd_fit_curve(args) -> int:
    cfg = resolve(args)
    trace = read_metric_trace(args.trace)
    fc = FitConfig(theta=args.theta if args.theta is not None else cfg.get("sim", {}).get("theta", 0.7))
    result = {**_stamp(cfg), "trace": Path(args.trace).name, "theta": fc.theta}
    max_steps = args.max_trial_steps or trace.covered_steps
    for label, staged in (("staged", True), ("single", False)):
        curve = fit_curve(trace, fc, staged=staged)
        entry = {
            "curve": curve.to_dict(),
            "residual": curve_residual(curve, trace),
            "predicted_final": predict_final(trace, max_steps, fc, staged=staged) if args.predict else None,
        }
        result[label] = entry
        print(f"{label:<7} stages={len(curve.stages)} residual={entry['residual']:.6g}"
              + (f" final={entry['predicted_final']:.6g}" if args.predict else ""))
    if args.out:
        _dump_json(Path(args.out), result)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = resolve(args)
    files = []
    for src in args.reports:
        p = Path(src)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    reports = {}
    for f in files:
        try:
            d = json.loads(f.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"{f}: {exc}") from None
        if "total_cost" not in d:
            continue
        d.pop("manifest", None)
        reports[f.stem] = Report.from_dict(d)
    if not reports:
        raise DatasetError("no report files found")
    # PCR is normalized within each workload (file stem prefix before the first dot)
    groups: dict[str, dict] = {}
    for k, r in reports.items():
        groups.setdefault(k.split(".")[0], {})[k] = r
    rows = []
    for g in sorted(groups):
        members = groups[g]
        ref = next((k for k in sorted(members) if args.reference and k.endswith(args.reference)), None)
        if ref is None:
            ref = next((k for k, r in sorted(members.items())
                        if r.theta == 0.7 and r.policy.startswith("spottune")), None)
        if ref is None:
            raise UsageError(f"no reference run for workload {g!r}")
        norm = normalize_pcr(members, ref)
        rows += [[k, r.policy, r.total_cost, r.jct, r.free_steps_fraction, norm[k]]
                 for k, r in sorted(members.items())]
    header = ("report", "policy", "total_cost", "jct", "free_steps_fraction", "normalized_pcr")
    if args.out:
        _write_table(Path(args.out), header, rows, _stamp(cfg))
    for row in rows:
        print(f"{row[0]:<28} cost={row[2]:.4f} jct={row[3] / 3600:.2f}h free={row[4]:.2f} pcr={row[5]:.3f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spottune", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"spottune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=os.environ.get(CONFIG_ENV), help=f"JSON config (default ${CONFIG_ENV})")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("ingest", help="regularize raw price csv files"))
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--skip-bad", action="store_true")
    p.add_argument("--interval", type=int, default=60)
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("train-revpred", help="train revocation predictors per instance"))
    p.add_argument("--traces")
    p.add_argument("--models", help="output directory for model files")
    p.add_argument("--train-until", type=int)
    p.add_argument("--eval-from", type=int)
    p.add_argument("--arch", choices=("both",) + ARCHS, default="both")
    p.add_argument("--epochs", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_train_revpred)

    p = common(sub.add_parser("eval-revpred", help="score predictors on a held-out window"))
    p.add_argument("--traces")
    p.add_argument("--models")
    p.add_argument("--out")
    p.add_argument("--train-until", type=int)
    p.add_argument("--eval-from", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_eval_revpred)

    p = common(sub.add_parser("simulate", help="run the tuner and both single-instance baselines"))
    p.add_argument("--traces")
    p.add_argument("--workload", help="workload bundle JSON (default: built-in demo bundle)")
    p.add_argument("--models")
    p.add_argument("--arch", choices=ARCHS, default="sequence")
    p.add_argument("--constant-p", type=float)
    p.add_argument("--out")
    p.add_argument("--theta", type=float)
    p.add_argument("--mcnt", type=int)
    p.add_argument("--c0", type=float)
    p.add_argument("--start-time", type=int)
    p.add_argument("--theta-sweep", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("fit-curve", help="fit staged and single-stage curves to a metric trace"))
    p.add_argument("trace")
    p.add_argument("--theta", type=float)
    p.add_argument("--max-trial-steps", type=int)
    p.add_argument("--predict", action="store_true", help="also extrapolate the final metric")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_curve)

    p = common(sub.add_parser("report", help="tabulate report files with normalized PCR"))
    p.add_argument("reports", nargs="+")
    p.add_argument("--reference", help="run label used as PCR reference, e.g. spottune")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spottune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as exc:
        print(f"spottune: simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except (MarketError, CurveError, DatasetError, UntrainableError, WorkloadError, OSError, ValueError) as exc:
        print(f"spottune: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
