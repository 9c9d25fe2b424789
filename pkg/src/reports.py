"""
Experiment artifact writers.

All files of one run land in a single run directory:
- report.json: RunReport summary (mode, config echo, convergence, metrics per round)
- rounds.csv: one row per round or epoch
- timings.csv: wall time per round (kept out of the two files above so they
  stay byte-identical across reruns)
- model.npz: final global model (see checkpoint.py)
- shap_beeswarm.csv / shap_bar.csv / shap_instances.csv: explanation exports
- comparison.csv: federated vs centralized final metrics
- sweep.csv / sweep_table.csv: parameter sweep results
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from loguru import logger

from .checkpoint import save_checkpoint
from .structures import MetricsBundle, RunReport, ShapMatrix, SweepTable
from .xai import bar_export, beeswarm_export, instances_export

METRIC_COLUMNS = ["accuracy", "precision", "recall", "f1", "auc", "loss"]
CONFUSION_COLUMNS = ["tp", "tn", "fp", "fn"]


def dump_json(payload: Dict[str, Any]) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def combination_label(axis_values: Dict[str, Any]) -> str:
    """Column header for one sweep combination, e.g. `n_clients=4|local_epochs=2`."""
    return "|".join(f"{name}={value}" for name, value in axis_values.items())


class ReportWriter:
    """
    Writes the artifacts of one run into `run_dir`.

    Every path returned lies inside run_dir; the directory is created on
    first use.
    """

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[Path] = []
        logger.info(f"Initialized ReportWriter in {self.run_dir}")

    def _record(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug(f"Wrote {path}")
        return path

    def write_report(self, report: RunReport, extra: Optional[Dict[str, Any]] = None) -> Path:
        payload = report.to_dict()
        if extra:
            payload.update(extra)
        path = self.run_dir / "report.json"
        path.write_text(dump_json(payload), encoding="utf-8")
        return self._record(path)

    def write_rounds(self, report: RunReport, name: str = "rounds.csv") -> Path:
        columns = ["round", "selected_clients", *METRIC_COLUMNS, *CONFUSION_COLUMNS]
        frame = pd.DataFrame([log.row() for log in report.rounds], columns=columns)
        return self._record(_write_frame(frame, self.run_dir / name))

    def write_timings(self, report: RunReport, name: str = "timings.csv") -> Path:
        frame = pd.DataFrame(
            {
                "round": [log.round_index for log in report.rounds],
                "wall_time_s": [log.wall_time for log in report.rounds],
            }
        )
        return self._record(_write_frame(frame, self.run_dir / name))

    def write_checkpoint(self, report: RunReport, name: str = "model.npz") -> Path:
        return self._record(save_checkpoint(report.final_params, self.run_dir / name))

    def write_shap(self, shap: ShapMatrix) -> List[Path]:
        beeswarm = _write_frame(beeswarm_export(shap), self.run_dir / "shap_beeswarm.csv")
        bar = _write_frame(bar_export(shap), self.run_dir / "shap_bar.csv")
        instances = _write_frame(instances_export(shap), self.run_dir / "shap_instances.csv")
        adjusted = sum(vec.adjusted for vec in shap.vectors)
        if adjusted:
            logger.info(f"{adjusted} of {len(shap.vectors)} sampled explanations had their residual redistributed")
        return [self._record(beeswarm), self._record(bar), self._record(instances)]

    def write_comparison(self, federated: MetricsBundle, centralized: MetricsBundle) -> Path:
        """comparison.csv: metric, federated, centralized, difference (federated - centralized)."""
        fed, cen = federated.as_dict(), centralized.as_dict()
        frame = pd.DataFrame(
            {
                "metric": METRIC_COLUMNS,
                "federated": [fed[m] for m in METRIC_COLUMNS],
                "centralized": [cen[m] for m in METRIC_COLUMNS],
                "difference": [fed[m] - cen[m] for m in METRIC_COLUMNS],
            }
        )
        return self._record(_write_frame(frame, self.run_dir / "comparison.csv"))

    def write_sweep(self, table: SweepTable) -> List[Path]:
        """
        Write the sweep in long form and in the metric-rows layout.

        sweep.csv: one row per combination with axis values, seed, run_id,
        every metric, confusion counts, rounds_to_convergence and converged.
        sweep_table.csv: one row per metric (plus communication_rounds), one
        column per combination.
        """
        records = []
        for row in table.rows:
            record: Dict[str, Any] = dict(row.axis_values)
            record["seed"] = row.seed
            record["run_id"] = row.run_id
            record.update(row.metrics.as_dict())
            record["rounds_to_convergence"] = row.rounds_to_convergence
            record["converged"] = row.converged
            records.append(record)
        columns = [
            *table.axes,
            "seed",
            "run_id",
            *METRIC_COLUMNS,
            *CONFUSION_COLUMNS,
            "rounds_to_convergence",
            "converged",
        ]
        long_form = _write_frame(pd.DataFrame(records, columns=columns), self.run_dir / "sweep.csv")

        wide: Dict[str, List[Any]] = {"metric": [*METRIC_COLUMNS, "communication_rounds"]}
        for row in table.rows:
            values = row.metrics.as_dict()
            wide[combination_label(row.axis_values)] = [
                *(values[m] for m in METRIC_COLUMNS),
                row.rounds_to_convergence,
            ]
        table_layout = _write_frame(pd.DataFrame(wide), self.run_dir / "sweep_table.csv")
        logger.info(f"Wrote sweep tables for {len(table.rows)} combinations to {self.run_dir}")
        return [self._record(long_form), self._record(table_layout)]
