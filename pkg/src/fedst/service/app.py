"""FastAPI service wrapping the federated experiment lab.

Experiment endpoints run synchronously: desk-scale configurations finish in
seconds to minutes, and the CLI thin client simply waits for the response.
"""

from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError, ExperimentConfig, resolve_output_dir
from ..data import DataError, SyntheticConfig, generate_synthetic, save_matrix_binary
from ..harness import run_ablation, run_federated_experiment, run_sweep
from . import schemas

app = FastAPI(title="fedst", version=__version__)


def _config(req: schemas.ExperimentRequest) -> ExperimentConfig:
    try:
        return ExperimentConfig(**req.model_dump())
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _summary(bundle, out_dir) -> schemas.RunSummary:
    return schemas.RunSummary(
        out_dir=str(out_dir),
        best_round=bundle.best_round,
        rounds=bundle.config["rounds"],
        final_test=schemas.TestMetrics(**bundle.final_test),
        total_seconds=bundle.total_seconds,
    )


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/datasets/synthetic", response_model=schemas.SynthResponse)
def make_synthetic(req: schemas.SynthRequest):
    cfg = SyntheticConfig(
        clients=req.clients,
        nodes_per_client=req.nodes_per_client,
        t_total=req.t_total,
        shared_prototypes=req.prototypes,
        client_amplitude=req.amplitude,
        noise_std=req.noise_std,
    )
    try:
        series, parts = generate_synthetic(cfg, req.seed)
    except DataError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    out = Path(req.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_matrix_binary(out, series.values)
    index_path = None
    if req.partition_index_out:
        index_path = Path(req.partition_index_out)
        index_path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{p.client_id}: " + " ".join(str(i) for i in p.node_indices) for p in parts]
        index_path.write_text("\n".join(lines) + "\n")
    return schemas.SynthResponse(
        out_path=str(out),
        t_total=series.t_total,
        num_nodes=series.num_nodes,
        partition_index_path=str(index_path) if index_path else None,
    )


@app.post("/experiments/run", response_model=schemas.RunResponse)
def run_experiment(req: schemas.ExperimentRequest):
    cfg = _config(req)
    out_dir = resolve_output_dir(cfg, f"run_seed{cfg.seed}_{cfg.mode}")
    try:
        bundle = run_federated_experiment(cfg, out_dir=out_dir)
    except (DataError, ConfigError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return _summary(bundle, out_dir)


@app.post("/experiments/ablate", response_model=schemas.AblateResponse)
def run_ablation_suite(req: schemas.ExperimentRequest):
    cfg = _config(req)
    out_dir = resolve_output_dir(cfg, f"ablation_seed{cfg.seed}")
    try:
        bundles = run_ablation(cfg, out_dir=out_dir)
    except (DataError, ConfigError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return schemas.AblateResponse(
        out_dir=str(out_dir),
        variants={name: _summary(b, Path(out_dir) / name) for name, b in bundles.items()},
    )


@app.post("/experiments/sweep", response_model=schemas.SweepResponse)
def run_parameter_sweep(req: schemas.SweepRequest):
    cfg = _config(req.config)
    if not req.grid:
        raise HTTPException(status_code=422, detail="sweep grid is empty")
    out_dir = resolve_output_dir(cfg, f"sweep_seed{cfg.seed}")
    try:
        results = run_sweep(cfg, req.grid, out_dir=out_dir)
    except (DataError, ConfigError, TypeError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    points = []
    for res in results:
        name = "_".join(f"{k}{v}" for k, v in sorted(res["overrides"].items()))
        points.append(
            schemas.SweepPoint(
                overrides=res["overrides"],
                summary=_summary(res["bundle"], Path(out_dir) / name),
            )
        )
    return schemas.SweepResponse(out_dir=str(out_dir), points=points)
