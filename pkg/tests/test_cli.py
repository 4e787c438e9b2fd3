import json

import numpy as np
import pytest

from builders import T0
from spottune.cli import main, read_table
from spottune.earlycurve import MetricTrace, write_metric_trace
from spottune.market import CATALOG, synthetic_trace, write_traces
from spottune.workload import save_bundle, separated_workload

POOL = ["r4.large", "r4.xlarge", "m4.2xlarge"]


@pytest.fixture(scope="module")
def traces_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("raw")
    for i, name in enumerate(POOL):
        tr = synthetic_trace(CATALOG[name], T0, 2 * 86400, np.random.default_rng(i))
        write_traces([tr], d / f"{name}.csv")
    return d


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    p = tmp_path_factory.mktemp("wl") / "bundle.json"
    save_bundle([separated_workload(n_jobs=6, max_trial_steps=40, seed=1, name="sep")], p)
    return p


def test_ingest(traces_dir, tmp_path, capsys):
    assert main(["ingest", str(traces_dir), "--out", str(tmp_path / "out")]) == 0
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == sorted(f"{n}.csv" for n in POOL)


def test_ingest_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["ingest", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_ingest_skip_bad(tmp_path, caplog):
    raw = tmp_path / "raw.csv"
    raw.write_text("timestamp,instance_type,price\n0,a,0.1\n60,a,oops\n120,a,0.2\n")
    assert main(["ingest", str(raw), "--out", str(tmp_path / "o")]) == 2
    assert main(["ingest", str(raw), "--out", str(tmp_path / "o"), "--skip-bad"]) == 0
    assert "skipped bad row" in caplog.text


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--theta", "abc"])
    assert exc.value.code == 1


def test_config_env_and_override(traces_dir, bundle, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "seed": 4,
        "paths": {"traces": str(traces_dir), "workload": str(bundle)},
        "sim": {"theta": 0.5},
        "simulate": {"constant_p": 0.1},
    }))
    monkeypatch.setenv("SPOTTUNE_CONFIG", str(cfg))
    out = tmp_path / "sim"
    assert main(["simulate", "--out", str(out), "--seed", "7"]) == 0
    rep = json.loads((out / "sep.spottune.json").read_text())
    assert rep["seed"] == 7 and rep["theta"] == 0.5
    assert rep["manifest"]["seed"] == 7
    # the theta=0.7 reference run is produced because theta differs
    rows = {r["run"]: r for r in read_table(out / "summary.csv")}
    assert float(rows["spottune_ref"]["normalized_pcr"]) == 1.0


def test_simulate_deterministic(traces_dir, bundle, tmp_path):
    args = ["simulate", "--traces", str(traces_dir), "--workload", str(bundle), "--constant-p", "0.2",
            "--theta-sweep"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "sep.theta_sweep.csv" in files and "sep.cheapest.ledger.csv" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(read_table(tmp_path / "a" / "sep.theta_sweep.csv")) == 10
    first = (tmp_path / "a" / "summary.csv").read_text().splitlines()[0]
    assert first.startswith("# spottune") and "seed=0" in first and "config=" in first
    rows = {r["run"]: r for r in read_table(tmp_path / "a" / "summary.csv")}
    assert float(rows["spottune"]["normalized_pcr"]) == 1.0
    assert set(rows) == {"spottune", "cheapest", "fastest"}


def test_simulate_horizon_error(traces_dir, bundle, tmp_path):
    code = main(["simulate", "--traces", str(traces_dir), "--workload", str(bundle), "--constant-p", "0",
                 "--start-time", str(T0 + 2 * 86400 - 600), "--out", str(tmp_path)])
    assert code == 3


def test_simulate_needs_predictor(traces_dir, tmp_path):
    assert main(["simulate", "--traces", str(traces_dir), "--out", str(tmp_path)]) == 1


def test_report(traces_dir, bundle, tmp_path, capsys):
    main(["simulate", "--traces", str(traces_dir), "--workload", str(bundle), "--constant-p", "0",
          "--out", str(tmp_path / "s")])
    assert main(["report", str(tmp_path / "s"), "--out", str(tmp_path / "pcr.csv")]) == 0
    rows = {r["report"]: r for r in read_table(tmp_path / "pcr.csv")}
    assert float(rows["sep.spottune"]["normalized_pcr"]) == 1.0


def test_train_eval_revpred(traces_dir, tmp_path, capsys):
    split = T0 + 36 * 3600
    common = ["--traces", str(traces_dir), "--models", str(tmp_path / "m"), "--stride", "600"]
    assert main(["train-revpred", *common, "--train-until", str(split), "--epochs", "2"]) == 0
    assert main(["eval-revpred", *common, "--eval-from", str(split), "--train-until", str(split)]) == 0
    out = capsys.readouterr().out
    assert "logistic" in out and "sequence" in out
    rows = read_table(tmp_path / "m" / "revpred_eval.csv")
    assert {r["architecture"] for r in rows} == {"logistic", "sequence"}
    assert len(rows) == 2 * len(POOL)
    # overlapping windows are refused
    assert main(["eval-revpred", *common, "--eval-from", str(split - 60), "--train-until", str(split)]) == 1


def test_train_constant_trace_untrainable(tmp_path):
    tr = synthetic_trace(CATALOG["r4.large"], T0, 6 * 3600, np.random.default_rng(0), change_rate=0.0)
    write_traces([tr], tmp_path / "flat.csv")
    code = main(["train-revpred", "--traces", str(tmp_path / "flat.csv"), "--models", str(tmp_path / "m"),
                 "--train-until", str(T0 + 6 * 3600)])
    assert code == 2


def test_fit_curve(tmp_path, capsys):
    k = np.arange(100, dtype=float)
    L = np.where(k < 50, 0.5 + 1.0 / (0.2 * k + 1), 0.1 + 1.0 / (0.1 * k + 5))
    L = L * (1 + 0.001 * np.random.default_rng(0).standard_normal(100))
    write_metric_trace(MetricTrace.from_values(L), tmp_path / "m.csv")
    assert main(["fit-curve", str(tmp_path / "m.csv"), "--predict", "--out", str(tmp_path / "fit.json")]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert len(fit["staged"]["curve"]["stages"]) == 2
    assert fit["staged"]["residual"] < fit["single"]["residual"]
    assert fit["seed"] == 0 and "config_digest" in fit and "version" in fit


def test_fit_curve_short(tmp_path):
    write_metric_trace(MetricTrace.from_values([1.0, 0.5, 0.3]), tmp_path / "s.csv")
    assert main(["fit-curve", str(tmp_path / "s.csv")]) == 2
