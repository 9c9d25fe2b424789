import asyncio
import contextlib
import json
from typing import Any, AsyncGenerator, Dict, List, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from loguru import logger
from pydantic import BaseModel
from sse_starlette.sse import EventSourceResponse

from src.config import ExperimentConfig
from src.experiment import run_experiment, run_sweep

load_dotenv()

app = FastAPI(
    title="FedIDS-XAI experiment service",
    description="API server running federated intrusion-detection experiments with static and streaming endpoints.",
)


class ExperimentResponse(BaseModel):
    run_id: str
    run_dir: str
    mode: str
    rounds_run: Optional[int] = None
    rounds_to_convergence: Optional[int] = None
    converged: Optional[bool] = None
    final_metrics: Optional[Dict[str, float]] = None
    sweep_rows: Optional[List[Dict[str, Any]]] = None
    files: List[str] = []


def _execute(config: ExperimentConfig, callback=None) -> ExperimentResponse:
    if config.mode == "sweep":
        result = run_sweep(config, callback=callback)
        rows = [
            {
                **row.axis_values,
                "seed": row.seed,
                "run_id": row.run_id,
                "rounds_to_convergence": row.rounds_to_convergence,
                "converged": row.converged,
                **row.metrics.as_dict(),
            }
            for row in result.table.rows
        ]
        return ExperimentResponse(
            run_id=result.run_id,
            run_dir=str(result.run_dir),
            mode=config.mode,
            sweep_rows=rows,
            files=[str(p) for p in result.files],
        )

    result = run_experiment(config, callback=callback)
    report = result.report
    return ExperimentResponse(
        run_id=result.run_id,
        run_dir=str(result.run_dir),
        mode=config.mode,
        rounds_run=len(report.rounds),
        rounds_to_convergence=report.rounds_to_convergence,
        converged=report.converged,
        final_metrics={k: float(v) for k, v in report.final_metrics.as_dict().items()},
        files=[str(p) for p in result.files],
    )


@app.get("/health")
def health_check() -> dict[str, str]:
    """Lightweight health check endpoint."""
    return {"status": "ok"}


@app.post("/experiments", response_model=ExperimentResponse)
async def experiments_endpoint(config: ExperimentConfig) -> ExperimentResponse:
    """Run an experiment (or sweep) to completion and return its summary."""
    try:
        return await asyncio.to_thread(_execute, config)
    except Exception as e:
        logger.exception(f"Experiment failed {e}")
        raise HTTPException(status_code=500, detail=f"Experiment failed: {e}")


@app.post("/experiments/stream")
async def experiments_stream_endpoint(config: ExperimentConfig) -> EventSourceResponse:
    """Streaming endpoint that emits SSE progress events (one per round) and a final complete event."""
    loop = asyncio.get_running_loop()
    queue: asyncio.Queue[Dict[str, Any]] = asyncio.Queue()

    def pipeline_callback(update: Dict[str, Any]) -> None:
        loop.call_soon_threadsafe(queue.put_nowait, update)

    def run_pipeline() -> None:
        try:
            _execute(config, pipeline_callback)
        except Exception as exc:
            logger.exception("Streaming experiment failed")
            error_payload = {"event": "error", "error": str(exc), "complete": True}
            loop.call_soon_threadsafe(queue.put_nowait, error_payload)

    pipeline_task = asyncio.create_task(asyncio.to_thread(run_pipeline))

    async def event_publisher() -> AsyncGenerator[Dict[str, str], None]:
        try:
            while True:
                update = await queue.get()
                yield {"data": json.dumps(update)}
                if update.get("complete") is True:
                    break
        except asyncio.CancelledError:
            pipeline_task.cancel()
            raise
        finally:
            with contextlib.suppress(Exception):
                await pipeline_task

    return EventSourceResponse(event_publisher(), media_type="text/event-stream")


__all__ = ["app"]
