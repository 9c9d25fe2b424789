"""
End-to-end tests for the experiment pipeline and the command line.

Tests:
1. Synthetic fixture generation (cardinality, determinism)
2. Centralized smoke run and federated determinism (byte-identical report.json)
3. Config validation surfaces field names and exit codes
4. Sweeps: one row per combination, stable row seeds, protocol defaults
5. Checkpoint explanation and output containment
"""

import json
import os
import sys
from pathlib import Path

import pandas as pd
import pytest

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.cli import EXIT_DATASET_ERROR, EXIT_INVALID_CONFIG, EXIT_OK, main
from src.config import ExperimentConfig
from src.experiment import protocol_sweep_defaults, run_experiment, run_id_for, run_sweep, sweep_seed


def base_config(synthetic_files, out_dir, **overrides):
    csv_path, schema_path = synthetic_files
    raw = {
        "dataset": {"path": str(csv_path), "schema_path": str(schema_path), "test_fraction": 0.2},
        "architecture": {"hidden_units": [8]},
        "mode": "federated",
        "federated": {
            "n_clients": 4,
            "fraction_fit": 1.0,
            "local_epochs": 1,
            "max_rounds": 3,
            "batch_size": 32,
            "convergence": {"mode": "fixed"},
        },
        "output_dir": str(out_dir),
        "seed": 0,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


def write_config(tmp_path, raw, name="config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(raw, indent=2), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_line_count_and_determinism(tmp_path):
    args = ["synth", "--n-samples", "1000", "--n-features", "5", "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    first = (tmp_path / "a" / "synthetic.csv").read_bytes()
    assert first.count(b"\n") == 1001
    assert first == (tmp_path / "b" / "synthetic.csv").read_bytes()
    assert (tmp_path / "a" / "synthetic_schema.json").read_bytes() == (tmp_path / "b" / "synthetic_schema.json").read_bytes()


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_centralized_smoke(tmp_path, synthetic_files, capsys):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "runs"))
    assert main(["run", "--config", str(config), "--mode", "centralized"]) == EXIT_OK
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert report["mode"] == "centralized"
    assert len(report["rounds"]) >= 1
    assert (run_dir / "rounds.csv").is_file()
    assert (run_dir / "model.npz").is_file()


def test_federated_report_is_byte_identical(tmp_path, synthetic_files):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "unused"))
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "first")]) == EXIT_OK
    assert main(["run", "--config", str(config), "--out", str(tmp_path / "second")]) == EXIT_OK
    (first,) = list((tmp_path / "first").iterdir())
    (second,) = list((tmp_path / "second").iterdir())
    assert first.name == second.name
    for name in ("report.json", "rounds.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_seed_flag_changes_run(tmp_path, synthetic_files, capsys):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "runs"))
    main(["run", "--config", str(config)])
    main(["run", "--config", str(config), "--seed", "5"])
    dirs = [Path(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert dirs[0] != dirs[1]
    assert json.loads((dirs[1] / "report.json").read_text(encoding="utf-8"))["config"]["seed"] == 5


def test_report_config_round_trips(tmp_path, synthetic_files):
    config = ExperimentConfig.model_validate(base_config(synthetic_files, tmp_path / "runs"))
    result = run_experiment(config)
    echoed = json.loads((result.run_dir / "report.json").read_text(encoding="utf-8"))
    reparsed = ExperimentConfig.model_validate(echoed["config"])
    assert reparsed.model_dump(exclude={"output_dir", "workers"}) == config.model_dump(exclude={"output_dir", "workers"})
    assert run_id_for(reparsed) == echoed["run_id"] == result.run_id


def test_run_writes_comparison_and_shap(tmp_path, synthetic_files):
    raw = base_config(
        synthetic_files,
        tmp_path / "runs",
        compare_centralized=True,
        explain={"enabled": True, "background_size": 20, "max_instances": 15},
    )
    events = []
    result = run_experiment(ExperimentConfig.model_validate(raw), callback=events.append)
    names = {p.name for p in result.files}
    assert {"report.json", "rounds.csv", "timings.csv", "model.npz", "centralized_rounds.csv",
            "comparison.csv", "shap_beeswarm.csv", "shap_bar.csv", "shap_instances.csv"} <= names

    comparison = pd.read_csv(result.run_dir / "comparison.csv")
    assert list(comparison.columns) == ["metric", "federated", "centralized", "difference"]
    beeswarm = pd.read_csv(result.run_dir / "shap_beeswarm.csv")
    assert len(beeswarm) == 15 * len(result.shap.feature_names)
    assert beeswarm["normalized_value"].between(0.0, 1.0).all()
    instances = pd.read_csv(result.run_dir / "shap_instances.csv")
    assert instances["instance_id"].tolist() == sorted(beeswarm["instance_id"].unique().tolist())
    assert not instances["adjusted"].any()

    assert events[-1]["complete"] is True
    assert sum(1 for e in events if e.get("event") == "round") == 3 + 3
    assert events[-1]["steps"][0].startswith("Starting federated run")
    assert any(step.startswith("Run ") and "finished" in step for step in events[-1]["steps"])
    report = json.loads((result.run_dir / "report.json").read_text(encoding="utf-8"))
    assert set(report["class_distribution"]) == {"train", "test", "clients", "total"}
    assert report["class_distribution"]["total"]["normal"] + report["class_distribution"]["total"]["anomalous"] == 1000


def test_outputs_stay_under_output_dir(tmp_path, synthetic_files):
    out_dir = (tmp_path / "runs").resolve()
    raw = base_config(synthetic_files, out_dir, compare_centralized=True,
                      explain={"enabled": True, "background_size": 10, "max_instances": 5})
    result = run_experiment(ExperimentConfig.model_validate(raw))
    for path in result.files:
        assert out_dir in Path(path).resolve().parents
    assert [p.name for p in tmp_path.iterdir() if p.name != "runs"] == []


# ---------------------------------------------------------------------------
# Validation / errors
# ---------------------------------------------------------------------------


def test_zero_fraction_rejected_naming_field(tmp_path, synthetic_files, capsys):
    raw = base_config(synthetic_files, tmp_path / "runs", federated={"fraction_fit": 0.0})
    status = main(["run", "--config", str(write_config(tmp_path, raw))])
    assert status == EXIT_INVALID_CONFIG
    assert "fraction_fit" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_all_validation_errors_listed(tmp_path, synthetic_files, capsys):
    raw = base_config(synthetic_files, tmp_path / "runs", federated={"fraction_fit": 0.0, "local_epochs": 0})
    assert main(["run", "--config", str(write_config(tmp_path, raw))]) == EXIT_INVALID_CONFIG
    err = capsys.readouterr().err
    assert "fraction_fit" in err
    assert "local_epochs" in err


def test_sweep_axes_outside_sweep_mode_rejected(tmp_path, synthetic_files):
    raw = base_config(synthetic_files, tmp_path / "runs", sweep={"n_clients": [2, 4]})
    assert main(["run", "--config", str(write_config(tmp_path, raw))]) == EXIT_INVALID_CONFIG


def test_missing_dataset_exit_code(tmp_path, synthetic_files):
    raw = base_config(synthetic_files, tmp_path / "runs")
    raw["dataset"]["path"] = str(tmp_path / "absent.csv")
    assert main(["run", "--config", str(write_config(tmp_path, raw))]) == EXIT_DATASET_ERROR


def test_sweep_command_needs_sweep_mode(tmp_path, synthetic_files):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "runs"))
    assert main(["sweep", "--config", str(config)]) == EXIT_INVALID_CONFIG


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def test_sweep_one_row_per_combination(tmp_path, synthetic_files, capsys):
    raw = base_config(synthetic_files, tmp_path / "runs", mode="sweep", sweep={"n_clients": [2, 4]})
    assert main(["sweep", "--config", str(write_config(tmp_path, raw))]) == EXIT_OK
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])

    long_form = pd.read_csv(run_dir / "sweep.csv")
    assert list(long_form["n_clients"]) == [2, 4]
    for column in ("accuracy", "precision", "recall", "f1", "auc", "loss", "rounds_to_convergence"):
        assert long_form[column].notna().all()
    assert list(long_form["seed"]) == [sweep_seed(0, {"n_clients": 2}), sweep_seed(0, {"n_clients": 4})]
    for row_id in long_form["run_id"]:
        assert (run_dir / "rows" / row_id / "report.json").is_file()

    table = pd.read_csv(run_dir / "sweep_table.csv")
    assert list(table.columns) == ["metric", "n_clients=2", "n_clients=4"]
    assert "communication_rounds" in set(table["metric"])


def test_sweep_cartesian_product(tmp_path, synthetic_files):
    raw = base_config(
        synthetic_files,
        tmp_path / "runs",
        mode="sweep",
        sweep={"n_clients": [2, 4], "local_epochs": [1, 2]},
        federated={"max_rounds": 2},
    )
    result = run_sweep(ExperimentConfig.model_validate(raw))
    combos = [tuple(sorted(row.axis_values.items())) for row in result.table.rows]
    assert len(combos) == 4
    assert len(set(combos)) == 4


def test_sweep_seed_stable_under_new_axis_points():
    assert sweep_seed(0, {"n_clients": 4}) == sweep_seed(0, {"n_clients": 4})
    assert sweep_seed(0, {"n_clients": 4}) != sweep_seed(0, {"n_clients": 8})
    assert sweep_seed(10, {"n_clients": 4}) - sweep_seed(0, {"n_clients": 4}) == 10


def test_protocol_defaults_per_axis(synthetic_files, tmp_path):
    def defaults(sweep, federated=None, architecture=None):
        raw = base_config(synthetic_files, tmp_path, mode="sweep", sweep=sweep)
        raw["federated"] = federated or {}
        if architecture is not None:
            raw["architecture"] = architecture
        return protocol_sweep_defaults(ExperimentConfig.model_validate(raw))

    assert defaults({"n_clients": [2, 4]}) == {"local_epochs": 1, "fraction_fit": 1.0}
    assert defaults({"fraction_fit": [0.1, 0.5]}) == {"local_epochs": 1, "n_clients": 8}
    assert defaults({"fraction_fit": [0.1]}, architecture={"preset": "unsw_nb15"})["n_clients"] == 12
    assert defaults({"local_epochs": [1, 2]}) == {"fraction_fit": 1.0}
    assert defaults({"local_epochs": [1, 2]}, federated={"fraction_fit": 0.5}) == {}
    assert defaults({"n_clients": [2], "local_epochs": [1]}) == {}
    assert defaults({"n_clients": [2], "protocol_defaults": False}) == {}


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------


def test_explain_saved_checkpoint(tmp_path, synthetic_files, capsys):
    raw = base_config(synthetic_files, tmp_path / "runs", explain={"background_size": 10, "max_instances": 8})
    config = write_config(tmp_path, raw)
    assert main(["run", "--config", str(config)]) == EXIT_OK
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert not (run_dir / "shap_bar.csv").exists()

    status = main(["explain", "--config", str(config), "--checkpoint", str(run_dir / "model.npz")])
    assert status == EXIT_OK
    bar = pd.read_csv(run_dir / "shap_bar.csv")
    assert list(bar["rank"]) == list(range(1, len(bar) + 1))
    assert len(pd.read_csv(run_dir / "shap_beeswarm.csv")) == 8 * len(bar)


def test_explain_missing_checkpoint(tmp_path, synthetic_files):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "runs"))
    status = main(["explain", "--config", str(config), "--checkpoint", str(tmp_path / "none.npz")])
    assert status == EXIT_DATASET_ERROR


def test_run_id_ignores_output_location(tmp_path, synthetic_files):
    a = ExperimentConfig.model_validate(base_config(synthetic_files, tmp_path / "a"))
    b = ExperimentConfig.model_validate(base_config(synthetic_files, tmp_path / "b", workers=3))
    c = ExperimentConfig.model_validate(base_config(synthetic_files, tmp_path / "a", seed=1))
    assert run_id_for(a) == run_id_for(b)
    assert run_id_for(a) != run_id_for(c)
    assert len(run_id_for(a)) == 12


@pytest.mark.parametrize("mode", ["federated", "centralized"])
def test_mode_flag_overrides_config(tmp_path, synthetic_files, capsys, mode):
    config = write_config(tmp_path, base_config(synthetic_files, tmp_path / "runs"))
    assert main(["run", "--config", str(config), "--mode", mode]) == EXIT_OK
    run_dir = Path(capsys.readouterr().out.strip().splitlines()[-1])
    assert json.loads((run_dir / "report.json").read_text(encoding="utf-8"))["mode"] == mode
