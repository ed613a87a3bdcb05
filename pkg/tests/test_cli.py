import csv
import textwrap

import pytest

from rapsa.cli import (NOT_REACHED, ExperimentConfig, _int_list, build_problem, compare_runs,
                       iterations_to, load_config, main, run_experiment)
from rapsa.core import Constant, parse_schedule
from rapsa.data_io import read_trace_csv, write_trace_csv
from rapsa.engine import RunTrace
from rapsa.errors import ConfigurationError

BASE = """
[experiment]
version = 1
algorithm = {algorithm}
T = {T}
seeds = {seeds}
record_every = {record_every}
{extra_experiment}

[problem]
kind = {kind}
p = {p}
N = {N}

[blocks]
B = {B}
I = {I}
L = {L}
{extra_blocks}

[schedule]
step = {step}
{extra}
"""

DEFAULTS = dict(algorithm="rapsa", T=1, seeds="0", record_every=1, extra_experiment="",
                kind="synthetic-linear", p=8, N=40, B="1", I=1, L=1, extra_blocks="",
                step="constant:0.01", extra="")


def write_config(tmp_path, name="exp.ini", **overrides):
    values = {**DEFAULTS, **overrides}
    path = tmp_path / name
    path.write_text(textwrap.dedent(BASE.format(**values)))
    return path


def _trace(gaps, step=10):
    tr = RunTrace()
    for k, g in enumerate(gaps):
        tr.append(k * step, k * 100.0, 0.0, g, g)
    return tr


def test_int_list():
    assert _int_list("0-3, 7,9") == [0, 1, 2, 3, 7, 9]
    assert _int_list("5") == [5]


def test_degenerate_run(tmp_path):
    cfg = load_config(write_config(tmp_path))
    result = run_experiment(cfg, tmp_path / "out")
    traces = sorted((tmp_path / "out").glob("trace_*.csv"))
    assert [p.name for p in traces] == ["trace_B1_seed0.csv"]
    assert len(read_trace_csv(traces[0])) == 2
    assert not result["failures"]
    for name in ("manifest.csv", "bounds.txt", "metrics.csv", "summary.txt"):
        assert (tmp_path / "out" / name).exists()
    with open(tmp_path / "out" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows == [{"B": "1", "seed": "0", "status": "ok", "file": "trace_B1_seed0.csv"}]


def test_reproducible_apart_from_wall_clock(tmp_path):
    path = write_config(tmp_path, T=60, seeds="0-1", record_every=20, B="2, 4", I=2, L=3,
                        extra_experiment="threshold = 1e-1")
    cfg = load_config(path)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b", threads=3)
    for name in ("trace_B2_seed0.csv", "trace_B4_seed1.csv", "trace_B4_mean.csv"):
        ta, tb = read_trace_csv(tmp_path / "a" / name), read_trace_csv(tmp_path / "b" / name)
        assert (ta.t, ta.features, ta.objective, ta.gap) == (tb.t, tb.features, tb.objective, tb.gap)
    assert (tmp_path / "a" / "bounds.txt").read_text() == (tmp_path / "b" / "bounds.txt").read_text()
    assert a["summary"] == b["summary"]
    assert set(a["averaged"]) == {2, 4}


@pytest.mark.parametrize("overrides, field", [
    (dict(algorithm="sgd"), "experiment.algorithm"),
    (dict(kind="cubic"), "problem.kind"),
    (dict(B="2", I=3), "blocks.I"),
    (dict(extra_blocks="memory = 5"), "blocks.memory"),
    (dict(algorithm="arapsa"), "blocks.memory"),
    (dict(algorithm="async-rapsa"), "delay"),
    (dict(extra="[delay]\nmu = 2\ndelta_max = 5"), "delay"),
    (dict(seeds="1,1"), "experiment.seeds"),
    (dict(L=0), "blocks.L"),
])
def test_validation_names_field(tmp_path, overrides, field):
    with pytest.raises(ConfigurationError, match=field.replace(".", r"\.")):
        load_config(write_config(tmp_path, **overrides))


def test_bad_values(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, step="linear:1"))
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, T="many"))
    path = write_config(tmp_path, name="v2.ini")
    path.write_text(path.read_text().replace("version = 1", "version = 2"))
    with pytest.raises(ConfigurationError, match="version"):
        load_config(path)
    (tmp_path / "partial.ini").write_text("[experiment]\nT = 1\n")
    with pytest.raises(ConfigurationError, match=r"\[problem\]"):
        load_config(tmp_path / "partial.ini")


def test_compare_identical():
    tr = _trace([1.0, 0.1, 0.01])
    rec = compare_runs(tr, tr, 0.05)
    assert rec["iterations_ratio"] == 1.0
    assert rec["features_ratio"] == 1.0
    assert rec["final_gap_ratio"] == 1.0


def test_compare_sentinel():
    fast, slow = _trace([1.0, 0.1, 0.01]), _trace([1.0, 0.5, 0.2])
    assert iterations_to(fast, 0.05) == (20, 200.0)
    assert iterations_to(slow, 0.05) is None
    rec = compare_runs(fast, slow, 0.05)
    assert rec["iterations_to"] == (20, NOT_REACHED)
    assert rec["iterations_ratio"] == NOT_REACHED
    assert rec["final_gap_ratio"] == pytest.approx(0.05)


def test_cli_compare_and_bounds(tmp_path, capsys):
    write_trace_csv(_trace([1.0, 0.1, 0.01]), tmp_path / "a.csv")
    write_trace_csv(_trace([1.0, 0.5, 0.2]), tmp_path / "b.csv")
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--eps", "0.05"]) == 0
    out = capsys.readouterr().out
    assert NOT_REACHED in out and "iterations_to" in out

    cfg = write_config(tmp_path, B="2, 4", I=2, step="diminishing:0.03,500")
    assert main(["bounds", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "[B=2]" in out and "[B=4]" in out and "C_sync" in out


def test_cli_run_and_errors(tmp_path, capsys):
    cfg = write_config(tmp_path, T=5, B="2", I=1)
    assert main(["run", str(cfg), "--seed-override", "3-4", "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "trace_B2_seed4.csv").exists()
    assert "final gap" in capsys.readouterr().out
    assert main(["run", str(tmp_path / "missing.ini")]) == 2
    assert main(["run", str(write_config(tmp_path, name="bad.ini", kind="cubic"))]) == 2
    assert "problem.kind" in capsys.readouterr().err


def test_failed_cell_recorded(tmp_path):
    cfg = load_config(write_config(tmp_path, T=400, B="1", step="constant:100"))
    result = run_experiment(cfg, tmp_path / "out")
    assert result["failures"] and "FAILED" in result["summary"]
    with open(tmp_path / "out" / "manifest.csv") as fh:
        assert next(csv.DictReader(fh))["status"].startswith("failed")
    assert main(["run", str(tmp_path / "exp.ini"), "--out-dir", str(tmp_path / "o2")]) == 1


def test_async_config_runs(tmp_path):
    path = write_config(tmp_path, algorithm="async-arapsa", T=50, B="4", I=2, L=2,
                        step="diminishing:0.03,500", extra_blocks="memory = 3",
                        extra="[delay]\nmu = 2\nsigma = 0.3\ndelta_max = 4")
    cfg = load_config(path)
    assert cfg.is_async and cfg.method == "arapsa" and cfg.delay.delta_max == 4
    result = run_experiment(cfg, tmp_path / "out")
    assert result["averaged"][4].meta["method"] == "async-arapsa"
    assert "C_async" in (tmp_path / "out" / "bounds.txt").read_text()


def test_logistic_summary_reports_accuracy(tmp_path):
    cfg = ExperimentConfig(algorithm="rapsa", T=1000, seeds=[0], record_every=100,
                           problem={"kind": "logistic-synthetic", "p": "50", "N": "4000"},
                           B=[10], I=4, L=10, schedule=parse_schedule("hybrid:0.5,100")).validate()
    bundle = build_problem(cfg.problem)
    assert bundle.problem.lam == pytest.approx(4000 ** -0.5)
    result = run_experiment(cfg, tmp_path / "out")
    assert result["rows"][0]["test_accuracy"] >= 0.95
    assert "test acc" in result["summary"]


def test_mnist_missing_is_configuration_error(monkeypatch, tmp_path):
    monkeypatch.delenv("RAPSA_MNIST_DIR", raising=False)
    with pytest.raises(ConfigurationError, match="mnist"):
        build_problem({"kind": "logistic-mnist", "mnist_dir": str(tmp_path)})


def test_config_defaults():
    cfg = ExperimentConfig(schedule=Constant(0.1))
    assert cfg.validate() is cfg
    assert cfg.sync_config(8, 0).r == pytest.approx(1 / 8)
