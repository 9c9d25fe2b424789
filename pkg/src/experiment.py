"""
End-to-end experiment pipeline.

dataio (load, subsample, split, fit/apply preprocessing, partition)
  -> fedsim (federated or centralized training)
  -> metrics (per round, inside fedsim)
  -> xai (optional Shapley export)
  -> reports (JSON / CSV / checkpoint under <output_dir>/<run_id>/)

Progress is pushed through an optional callback so the CLI and the HTTP
service can share one implementation.
"""

import hashlib
import itertools
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from loguru import logger

from .checkpoint import load_checkpoint
from .config import ExperimentConfig, SchemaConfig, XAIConfig
from .dataio import (
    class_distribution,
    load_dataset,
    partition_clients,
    preprocess_apply,
    preprocess_fit,
    split_table,
    subsample_table,
)
from .fedsim import run_centralized, run_federated
from .nn import model_fn
from .reports import ReportWriter, dump_json
from .structures import (
    Architecture,
    ExperimentResult,
    ModelParams,
    PreparedDataset,
    RunReport,
    ShapMatrix,
    SweepResult,
    SweepRow,
    SweepTable,
)
from .xai import explain_model, sample_rows

# Seed-stream tags for the explanation samples, kept apart from training streams
BACKGROUND_STREAM = 1
EXPLANATION_STREAM = 2
# Sweep row seeds are base_seed + (hash of axis values mod SWEEP_SEED_SPAN)
SWEEP_SEED_SPAN = 1_000_003


def run_id_for(config: ExperimentConfig) -> str:
    """First 12 hex chars of SHA-256 over the canonical config JSON (output_dir and workers excluded)."""
    payload = config.model_dump(mode="json", exclude={"output_dir", "workers"})
    return hashlib.sha256(dump_json(payload).encode("utf-8")).hexdigest()[:12]


def sweep_seed(base_seed: int, axis_values: Dict[str, Any]) -> int:
    """Stable per-combination seed; adding axis points never changes existing rows."""
    digest = hashlib.sha256(dump_json(axis_values).encode("utf-8")).hexdigest()
    return base_seed + int(digest[:12], 16) % SWEEP_SEED_SPAN


def protocol_sweep_defaults(config: ExperimentConfig) -> Dict[str, Any]:
    """
    Fixed FLConfig values of the reference protocol for a single-axis sweep.

    clients sweep: E=1, Fr=1; fraction sweep: E=1, M=12 for the UNSW-NB15
    preset else 8; epochs sweep: Fr=1. Fields written in the config file
    are left alone.
    """
    sweep = config.sweep
    if sweep is None or not sweep.protocol_defaults:
        return {}
    axes = list(sweep.axes())
    if len(axes) != 1:
        return {}
    if axes[0] == "n_clients":
        defaults: Dict[str, Any] = {"local_epochs": 1, "fraction_fit": 1.0}
    elif axes[0] == "fraction_fit":
        clients = 12 if config.architecture.preset == "unsw_nb15" else 8
        defaults = {"local_epochs": 1, "n_clients": clients}
    else:
        defaults = {"fraction_fit": 1.0}
    explicit = config.federated.model_fields_set
    return {name: value for name, value in defaults.items() if name not in explicit}


class ExperimentPipeline:
    """
    Runs experiments, sweeps and checkpoint explanations for one config.

    Args:
        config: Validated experiment description
        base_dir: Directory that relative dataset/schema paths are resolved
            against (the config file's directory); None uses the CWD
        callback: Receives progress dicts; the last one has complete=True
    """

    def __init__(
        self,
        config: ExperimentConfig,
        base_dir: Optional[Path] = None,
        callback: Optional[Callable[[Dict[str, Any]], None]] = None,
    ):
        self.config = config
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.callback = callback
        self.intermediate_log: List[str] = []
        logger.info(f"Initialized ExperimentPipeline (mode={config.mode}, seed={config.seed})")

    def _send_update(self, step_description: Optional[str] = None, **data: Any) -> None:
        if step_description:
            self.intermediate_log.append(step_description)
            logger.info(step_description)
        if self.callback is None:
            return
        payload: Dict[str, Any] = {"event": "step", "message": step_description, "complete": False}
        payload.update(data)
        self.callback(payload)

    def _send_complete(self, **data: Any) -> None:
        if self.callback is None:
            return
        payload: Dict[str, Any] = {"event": "complete", "complete": True, "steps": list(self.intermediate_log)}
        payload.update(data)
        self.callback(payload)

    def _forward_round(self, payload: Dict[str, Any]) -> None:
        if self.callback is not None:
            self.callback({**payload, "complete": False})

    # ------------------------------------------------------------------
    # Data
    # ------------------------------------------------------------------

    def prepare_data(self) -> Tuple[SchemaConfig, PreparedDataset, PreparedDataset]:
        """Load, subsample, split raw rows, fit on train and replay on test."""
        cfg = self.config
        schema_path = cfg.resolve_path(cfg.dataset.schema_path, self.base_dir)
        data_path = cfg.resolve_path(cfg.dataset.path, self.base_dir)
        self._send_update(f"Loading dataset {data_path} with schema {schema_path}")

        schema = SchemaConfig.from_file(schema_path)
        table = load_dataset(data_path, schema)
        if cfg.dataset.max_rows is not None:
            table = subsample_table(table, schema, cfg.dataset.max_rows, cfg.seed)
        train_raw, test_raw = split_table(table, schema, cfg.dataset.test_fraction, cfg.seed)
        train = preprocess_fit(train_raw, schema)
        test = preprocess_apply(test_raw, train.transform)
        self._send_update(
            f"Prepared {train.n_samples} train / {test.n_samples} test rows with {train.n_features} features"
        )
        return schema, train, test

    def _architecture(self, n_features: int) -> Architecture:
        return Architecture(input_dim=n_features, hidden_units=tuple(self.config.architecture.resolved_units()))

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def _federated(
        self, config: ExperimentConfig, train: PreparedDataset, test: PreparedDataset, workers: int
    ) -> Tuple[RunReport, Dict[str, Any]]:
        fl = config.fl_config()
        partitions = partition_clients(train, fl.n_clients, config.seed)
        distribution = class_distribution(train, test, partitions)
        report = run_federated(
            partitions,
            test,
            self._architecture(train.n_features),
            fl,
            threshold=config.threshold,
            workers=workers,
            callback=self._forward_round,
        )
        return report, distribution

    def _centralized(self, config: ExperimentConfig, train: PreparedDataset, test: PreparedDataset) -> RunReport:
        fl = config.federated
        return run_centralized(
            train,
            test,
            self._architecture(train.n_features),
            epochs=config.resolved_centralized_epochs(),
            batch_size=fl.batch_size,
            seed=config.seed,
            learning_rate=fl.learning_rate,
            threshold=config.threshold,
            convergence=fl.convergence,
            callback=self._forward_round,
        )

    def _explain(self, params: ModelParams, train: PreparedDataset, test: PreparedDataset, xai: XAIConfig) -> ShapMatrix:
        seed = self.config.seed
        background_idx = sample_rows(train.n_samples, xai.background_size, (seed, BACKGROUND_STREAM))
        instance_idx = sample_rows(test.n_samples, xai.max_instances, (seed, EXPLANATION_STREAM))
        self._send_update(
            f"Explaining {len(instance_idx)} test instances against {len(background_idx)} background rows"
        )
        return explain_model(
            model_fn(params),
            test.features[instance_idx],
            train.features[background_idx],
            test.feature_names,
            instance_ids=[int(i) for i in instance_idx],
            exact_max_features=xai.exact_max_features,
            n_permutations=xai.n_permutations,
            seed=seed,
            workers=self.config.workers,
        )

    def _write_run(
        self,
        writer: ReportWriter,
        config: ExperimentConfig,
        run_id: str,
        report: RunReport,
        distribution: Dict[str, Any],
        train: PreparedDataset,
        extra: Optional[Dict[str, Any]] = None,
    ) -> None:
        report.config = config.model_dump(mode="json", exclude={"output_dir", "workers"})
        report.class_distribution = distribution
        arch = report.final_params.architecture
        summary: Dict[str, Any] = {
            "run_id": run_id,
            "architecture": {"input_dim": arch.input_dim, "hidden_units": list(arch.hidden_units)},
            "feature_names": list(train.feature_names),
        }
        summary.update(extra or {})
        writer.write_report(report, summary)
        writer.write_rounds(report)
        writer.write_timings(report)
        writer.write_checkpoint(report)

    def run(self) -> ExperimentResult:
        """
        Execute a federated or centralized experiment and write its artifacts.

        Returns:
            ExperimentResult listing every file written under the run directory

        Raises:
            ValueError: If called on a sweep config
        """
        cfg = self.config
        if cfg.mode == "sweep":
            raise ValueError("sweep configs run through ExperimentPipeline.sweep()")

        run_id = run_id_for(cfg)
        run_dir = Path(cfg.output_dir) / run_id
        self._send_update(f"Starting {cfg.mode} run {run_id} -> {run_dir}")
        _, train, test = self.prepare_data()

        centralized: Optional[RunReport] = None
        if cfg.mode == "federated":
            report, distribution = self._federated(cfg, train, test, cfg.workers)
            if cfg.compare_centralized:
                self._send_update("Training centralized baseline for comparison")
                centralized = self._centralized(cfg, train, test)
        else:
            report = self._centralized(cfg, train, test)
            distribution = class_distribution(train, test)

        distribution["total"] = {
            key: train.class_counts()[key] + test.class_counts()[key] for key in ("normal", "anomalous")
        }
        logger.info(f"Class distribution: {distribution}")

        writer = ReportWriter(run_dir)
        extra: Dict[str, Any] = {}
        if centralized is not None:
            extra["centralized"] = {
                "rounds_run": len(centralized.rounds),
                "rounds_to_convergence": centralized.rounds_to_convergence,
                "converged": centralized.converged,
                "final_metrics": centralized.final_metrics.as_dict(),
            }
        self._write_run(writer, cfg, run_id, report, distribution, train, extra)
        if centralized is not None:
            writer.write_rounds(centralized, "centralized_rounds.csv")
            writer.write_comparison(report.final_metrics, centralized.final_metrics)

        shap: Optional[ShapMatrix] = None
        if cfg.explain.enabled:
            shap = self._explain(report.final_params, train, test, cfg.explain)
            writer.write_shap(shap)

        final = report.final_metrics
        self._send_update(
            f"Run {run_id} finished: {len(report.rounds)} rounds, accuracy={final.accuracy:.4f}, "
            f"rounds_to_convergence={report.rounds_to_convergence}",
        )
        self._send_complete(
            run_id=run_id,
            run_dir=str(run_dir),
            rounds_run=len(report.rounds),
            rounds_to_convergence=report.rounds_to_convergence,
            converged=report.converged,
            final_metrics=final.as_dict(),
        )
        return ExperimentResult(
            run_id=run_id, run_dir=run_dir, report=report, centralized=centralized, shap=shap, files=writer.written
        )

    # ------------------------------------------------------------------
    # Sweeps
    # ------------------------------------------------------------------

    def _row_config(self, axis_values: Dict[str, Any], defaults: Dict[str, Any]) -> ExperimentConfig:
        cfg = self.config
        federated = cfg.federated.model_dump()
        federated.update(defaults)
        federated.update(axis_values)
        raw = cfg.model_dump()
        raw.update(
            {
                "mode": "federated",
                "sweep": None,
                "federated": federated,
                "seed": sweep_seed(cfg.seed, axis_values),
                "compare_centralized": False,
                "explain": XAIConfig().model_dump(),
            }
        )
        return ExperimentConfig.model_validate(raw)

    def sweep(self) -> SweepResult:
        """
        One federated run per combination of the sweep axes.

        The dataset split and preprocessing use the base seed and are shared
        by every row; each row trains with its own axis-derived seed and
        writes its artifacts under rows/<row run id>/. Rows run on up to
        `workers` threads; the tables are merged in combination order.

        Raises:
            ValueError: If the config is not in sweep mode
        """
        cfg = self.config
        if cfg.mode != "sweep" or cfg.sweep is None:
            raise ValueError(f"sweep() needs a sweep-mode config, got mode '{cfg.mode}'")

        axes = cfg.sweep.axes()
        names = list(axes)
        combos = [dict(zip(names, values)) for values in itertools.product(*axes.values())]
        defaults = protocol_sweep_defaults(cfg)
        run_id = run_id_for(cfg)
        run_dir = Path(cfg.output_dir) / run_id
        self._send_update(
            f"Starting sweep {run_id}: {len(combos)} combinations over {names}"
            + (f", fixed {defaults}" if defaults else "")
        )
        _, train, test = self.prepare_data()
        row_configs = [self._row_config(combo, defaults) for combo in combos]

        def _run_row(index: int) -> SweepRow:
            row_cfg = row_configs[index]
            row_id = run_id_for(row_cfg)
            self._send_update(f"Sweep row {index + 1}/{len(combos)}: {combos[index]} (seed {row_cfg.seed})")
            report, distribution = self._federated(row_cfg, train, test, workers=1)
            self._write_run(ReportWriter(run_dir / "rows" / row_id), row_cfg, row_id, report, distribution, train)
            return SweepRow(
                axis_values=combos[index],
                seed=row_cfg.seed,
                run_id=row_id,
                metrics=report.final_metrics,
                rounds_to_convergence=report.rounds_to_convergence,
                converged=report.converged,
            )

        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
            rows = list(pool.map(_run_row, range(len(combos))))

        table = SweepTable(axes=names, rows=rows)
        writer = ReportWriter(run_dir)
        files = writer.write_sweep(table)
        self._send_complete(run_id=run_id, run_dir=str(run_dir), rows=len(rows))
        return SweepResult(run_id=run_id, run_dir=run_dir, table=table, files=files)

    # ------------------------------------------------------------------
    # Checkpoint explanation
    # ------------------------------------------------------------------

    def explain_checkpoint(self, checkpoint: str | Path) -> ExperimentResult:
        """
        Explain a saved model on this config's data split without retraining.

        Raises:
            ValueError: If the checkpoint input width differs from the dataset's
        """
        cfg = self.config
        params = load_checkpoint(checkpoint)
        run_id = run_id_for(cfg)
        run_dir = Path(cfg.output_dir) / run_id
        _, train, test = self.prepare_data()
        if params.architecture.input_dim != train.n_features:
            raise ValueError(
                f"checkpoint {checkpoint} expects {params.architecture.input_dim} features, "
                f"dataset encodes {train.n_features}"
            )
        xai = cfg.explain.model_copy(update={"enabled": True})
        shap = self._explain(params, train, test, xai)
        writer = ReportWriter(run_dir)
        writer.write_shap(shap)
        self._send_complete(run_id=run_id, run_dir=str(run_dir))
        return ExperimentResult(run_id=run_id, run_dir=run_dir, shap=shap, files=writer.written)


def run_experiment(
    config: ExperimentConfig,
    base_dir: Optional[Path] = None,
    callback: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> ExperimentResult:
    return ExperimentPipeline(config, base_dir, callback).run()


def run_sweep(
    config: ExperimentConfig,
    base_dir: Optional[Path] = None,
    callback: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> SweepResult:
    return ExperimentPipeline(config, base_dir, callback).sweep()


def explain_checkpoint(
    checkpoint: str | Path,
    config: ExperimentConfig,
    base_dir: Optional[Path] = None,
    callback: Optional[Callable[[Dict[str, Any]], None]] = None,
) -> ExperimentResult:
    return ExperimentPipeline(config, base_dir, callback).explain_checkpoint(checkpoint)
