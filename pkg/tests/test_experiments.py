import csv
import json

import pytest

from securebayes.experiments import (
    SETTINGS,
    ExperimentConfig,
    RunReport,
    compare_settings,
    emit_plot_data,
    run_experiment,
    with_setting,
)
from securebayes.protocol import ConfigError


def quick(setting, **kw):
    base = dict(model="density", setting=setting, repeats=2, epsilons=(0.5, 1.0), iters=30)
    return ExperimentConfig(**(base | kw))


@pytest.fixture(scope="module")
def density_reports():
    return [run_experiment(quick(s)) for s in SETTINGS]


def test_defaults():
    cfg = ExperimentConfig(model="logistic")
    assert (cfg.split, cfg.repeats, cfg.tau, cfg.T) == (0.8, 10, 320, 500)
    assert ExperimentConfig().tau == 1000
    assert cfg.aux_c == 3500.0


def test_validation():
    for bad in (dict(model="cox"), dict(setting="fhe"), dict(epsilons=()), dict(split=0.0), dict(backend="gpu"),
                dict(gamma=True)):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"colour": 1})
    cfg = ExperimentConfig.from_dict({"model": "survival", "privacy": {"epsilon": [0.1, 1], "T": 3}, "lambda": 0.01})
    assert cfg.epsilons == (0.1, 1.0) and cfg.T == 3 and cfg.tau == 320 and cfg.lam == 0.01


def test_report_contents_and_op_reconciliation(density_reports):
    rep = density_reports[2]
    assert len(rep.runs) == 4 and rep.metric_name == "theta_err"
    run = rep.runs[0]
    assert run.spec["epsilon"] == 0.5 and len(run.curve) == 30
    server = run.phase_ops["server"]
    total = {k: server["precompute"].get(k, 0) + server["iterate"].get(k, 0) for k in run.ops["server"]}
    assert total == run.ops["server"]
    summed = {}
    for ops in run.iteration_ops:
        for k, v in ops.items():
            summed[k] = summed.get(k, 0) + v
    assert all(summed.get(k, 0) == v for k, v in server["iterate"].items())


def test_identical_seeds_give_identical_summaries(density_reports):
    again = [run_experiment(quick(s)) for s in SETTINGS]
    a, b = compare_settings(*density_reports), compare_settings(*again)
    assert a.rows == b.rows and a.deltas == b.deltas


def test_compare_settings_rejects_mismatched_configs(density_reports):
    other = run_experiment(quick("plain", seed=7, repeats=1, epsilons=(1.0,)))
    with pytest.raises(ConfigError):
        compare_settings(density_reports[0], other)
    summary = compare_settings(*density_reports)
    assert set(summary.deltas) == {0.5, 1.0}
    assert {r["phase"] for r in summary.op_table} == {"precompute", "iterate"}
    assert "dp-he-distributed minus dp-central" in summary.text()


def test_plot_files(tmp_path, density_reports):
    files = emit_plot_data(density_reports, "learning-curve", tmp_path)
    assert len(files) == 6
    with files[0].open() as fh:
        assert next(csv.reader(fh)) == ["iter", "theta_err"]
    sweep = emit_plot_data(density_reports, "epsilon-sweep", tmp_path)[0]
    rows = list(csv.reader(sweep.open()))
    assert len(rows) - 1 == 2 * len(SETTINGS)
    timing = emit_plot_data(density_reports, "timing", tmp_path)[0]
    rows = list(csv.reader(timing.open()))
    assert rows[0] == ["phase", "party", "seconds", "HM", "SM", "rot", "enc", "dec"]
    assert {r[1] for r in rows[1:]} == {"csp", "server", "sites"}
    with pytest.raises(ValueError):
        emit_plot_data(density_reports, "pie", tmp_path)


def test_report_persistence(tmp_path):
    rep = run_experiment(quick("dp-central", out=str(tmp_path), repeats=1, epsilons=(1.0,)))
    saved = json.loads((tmp_path / "report_density_dp-central.json").read_text())
    assert saved["runs"][0]["metric"] == rep.runs[0].metric
    assert (tmp_path / "curve_density_dp-central_eps1.csv").exists()
    assert isinstance(rep, RunReport)


def test_classification_settings_run_on_small_budgets():
    cfg = ExperimentConfig(model="survival", setting="dp-central", repeats=1, iters=20)
    for s in SETTINGS:
        rep = run_experiment(with_setting(cfg, s))
        assert 0.0 <= rep.runs[0].metric <= 1.0


def test_missing_dataset_and_strict_privacy(tmp_path):
    with pytest.raises(Exception, match="not found"):
        run_experiment(quick("plain", data_path=str(tmp_path / "nope.csv")))
    from securebayes.dp_accounting import InfeasibleSpecError
    with pytest.raises(InfeasibleSpecError):
        run_experiment(quick("dp-central", epsilons=(100.0,), T=1, strict=True))
