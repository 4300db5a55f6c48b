"""Request/response models for the HTTP surface.

``ExperimentRequest`` mirrors the flat experiment config field-for-field; a
test asserts the two never drift apart.
"""

from typing import Optional

from pydantic import BaseModel, Field


class ExperimentRequest(BaseModel):
    data_path: Optional[str] = None
    data_format: Optional[str] = None
    partition_strategy: str = "contiguous-blocks"
    partition_index_path: Optional[str] = None
    synth_nodes_per_client: int = 10
    synth_t_total: int = 2880
    synth_prototypes: int = 3
    synth_amplitude: float = 4.0
    synth_noise_std: float = 1.0
    clients: int = 4
    lookback: int = 12
    horizon: int = 12
    train_frac: float = 0.6
    val_frac: float = 0.2
    rounds: int = 100
    local_epochs: int = 1
    lr: float = 0.005
    batch_size: int = 64
    momentum_alpha: float = 0.5
    similarity_tau: float = 0.3
    top_k: int = 3
    global_patterns: int = 16
    personal_patterns: int = 64
    mi_weight: float = 0.1
    fusion_temperature: float = 0.5
    prox_mu: float = 0.01
    mode: str = "feddis"
    no_cd: bool = False
    no_gp: bool = False
    no_wu: bool = False
    no_cps: bool = False
    init_strategy: str = "default"
    hidden_dim: int = 64
    embed_dim: int = 10
    mape_mask_threshold: float = 0.1
    seed: int = 0
    output_dir: Optional[str] = None


class TestMetrics(BaseModel):
    mae: Optional[float] = None
    rmse: Optional[float] = None
    mape_pct: Optional[float] = None


class RunSummary(BaseModel):
    out_dir: str
    best_round: int
    rounds: int
    final_test: TestMetrics
    total_seconds: float


class RunResponse(RunSummary):
    pass


class AblateResponse(BaseModel):
    out_dir: str
    variants: dict[str, RunSummary]


class SweepPoint(BaseModel):
    overrides: dict
    summary: RunSummary


class SweepRequest(BaseModel):
    config: ExperimentRequest = Field(default_factory=ExperimentRequest)
    grid: dict[str, list]


class SweepResponse(BaseModel):
    out_dir: str
    points: list[SweepPoint]


class SynthRequest(BaseModel):
    out_path: str
    clients: int = 4
    nodes_per_client: int = 10
    t_total: int = 2880
    prototypes: int = 3
    amplitude: float = 4.0
    noise_std: float = 1.0
    seed: int = 0
    partition_index_out: Optional[str] = None


class SynthResponse(BaseModel):
    out_path: str
    t_total: int
    num_nodes: int
    partition_index_path: Optional[str] = None


class HealthResponse(BaseModel):
    status: str
    version: str
