"""Experiment orchestration: metrics, the round loop, ablations, sweeps and
report emission."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as dataf
from .config import ExperimentConfig, resolve_output_dir
from .disentangle import ClientModel
from .federation import FederatedClient, run_round_over_wire, save_checkpoint
from .disentangle import GLOBAL_BANK_NAME, is_shared_param

ABLATION_VARIANTS = ("full", "no_cd", "no_gp", "no_wu", "no_cps")


# ---------------------------------------------------------------------------
# Metrics

def compute_metrics(pred: np.ndarray, truth: np.ndarray, mask_threshold: float = 0.1) -> dict:
    """MAE, RMSE and masked MAPE (percent) on denormalized values."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    err = pred - truth
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    mask = np.abs(truth) > mask_threshold
    if mask.any():
        mape = float(100.0 * (np.abs(err)[mask] / np.abs(truth)[mask]).mean())
    else:
        mape = None  # every entry masked; MAPE undefined
    return {"mae": mae, "rmse": rmse, "mape_pct": mape}


@dataclass
class MetricRecord:
    round: int
    split: str
    client_id: str  # client index as string, or "macro"
    mae: float
    rmse: float
    mape_pct: float | None
    seconds: float


@dataclass
class ReportBundle:
    config: dict
    records: list[MetricRecord] = field(default_factory=list)
    round_log: list[dict] = field(default_factory=list)
    final_test: dict = field(default_factory=dict)
    best_round: int = 0
    total_seconds: float = 0.0
    artifacts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Experiment assembly

def build_series(cfg: ExperimentConfig):
    if cfg.data_path:
        series = dataf.load_dataset(cfg.data_path, cfg.data_format)
        parts = dataf.partition_nodes(
            series, cfg.clients, cfg.partition_strategy, cfg.partition_index_path
        )
    else:
        synth = dataf.SyntheticConfig(
            clients=cfg.clients,
            nodes_per_client=cfg.synth_nodes_per_client,
            t_total=cfg.synth_t_total,
            shared_prototypes=cfg.synth_prototypes,
            client_amplitude=cfg.synth_amplitude,
            noise_std=cfg.synth_noise_std,
        )
        series, parts = dataf.generate_synthetic(synth, cfg.seed)
    return series, parts


def build_clients(cfg: ExperimentConfig) -> list[FederatedClient]:
    _, parts = build_series(cfg)
    clients = []
    for part in parts:
        windows = dataf.make_windows(part, cfg.lookback, cfg.horizon, cfg.splits)
        bound, _ = dataf.split_bounds(part.local_series.shape[0], cfg.splits)
        stats = dataf.fit_norm_stats(part.local_series[:bound])
        torch.manual_seed(cfg.seed * 1000 + part.client_id)
        model = ClientModel(
            num_nodes=part.num_nodes,
            in_dim=1,
            hidden_dim=cfg.hidden_dim,
            embed_dim=cfg.embed_dim,
            horizon=cfg.horizon,
            personal_patterns=cfg.personal_patterns,
            global_patterns=cfg.global_patterns,
            momentum=cfg.momentum_alpha,
            init_strategy=cfg.init_strategy,
            bank_seed=cfg.seed * 1000 + part.client_id,
        )
        clients.append(
            FederatedClient(
                client_id=part.client_id,
                model=model,
                windows=windows,
                stats=stats,
                lr=cfg.lr,
                batch_size=cfg.batch_size,
                mi_weight=0.0 if cfg.no_cd else cfg.mi_weight,
                mode=cfg.mode,
                prox_mu=cfg.prox_mu,
                no_cd=cfg.no_cd,
                seed=cfg.seed * 1000 + part.client_id + 7,
            )
        )
    return clients


def _evaluate(clients: list[FederatedClient], split: str, round_idx: int,
              mask_threshold: float) -> list[MetricRecord]:
    t0 = time.perf_counter()
    records = []
    per_client = []
    weights = []
    for client in clients:
        pred, truth = client.evaluate(split)
        if pred.size == 0:
            continue
        m = compute_metrics(pred, truth, mask_threshold)
        per_client.append(m)
        weights.append(client.sample_count)
        records.append(MetricRecord(round_idx, split, str(client.client_id),
                                    m["mae"], m["rmse"], m["mape_pct"], 0.0))
    seconds = time.perf_counter() - t0
    if per_client:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        macro = {}
        for key in ("mae", "rmse", "mape_pct"):
            vals = [m[key] for m in per_client]
            macro[key] = None if any(v is None for v in vals) else float(np.dot(w, vals))
        records.append(MetricRecord(round_idx, split, "macro",
                                    macro["mae"], macro["rmse"], macro["mape_pct"], seconds))
    return records


def _macro(records: list[MetricRecord], round_idx: int, split: str) -> MetricRecord | None:
    for r in records:
        if r.round == round_idx and r.split == split and r.client_id == "macro":
            return r
    return None


# ---------------------------------------------------------------------------
# The federated loop

def run_federated_experiment(cfg: ExperimentConfig, out_dir=None, emit: bool = True) -> ReportBundle:
    """Run the full round loop and (optionally) write the report bundle to disk."""
    t_start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % (2**32))

    clients = build_clients(cfg)
    bundle = ReportBundle(config=cfg.to_dict())

    bundle.records.extend(_evaluate(clients, "val", 0, cfg.mape_mask_threshold))

    best_mae = float("inf")
    best_round = 0
    best_snaps = [c.state_snapshot() for c in clients]
    payloads = None
    for round_idx in range(1, cfg.rounds + 1):
        t_round = time.perf_counter()
        payloads, loss_records, agg_seconds = run_round_over_wire(
            clients, payloads, cfg.local_epochs, cfg.mode,
            cfg.top_k, cfg.similarity_tau, cfg.fusion_temperature,
            no_gp=cfg.no_gp, no_wu=cfg.no_wu, no_cps=cfg.no_cps,
        )
        for client, payload in zip(clients, payloads):
            client.install(payload)
        round_records = _evaluate(clients, "val", round_idx, cfg.mape_mask_threshold)
        bundle.records.extend(round_records)
        round_seconds = time.perf_counter() - t_round
        for client, rec in zip(clients, loss_records):
            bundle.round_log.append({
                "round": round_idx,
                "client_id": client.client_id,
                "train_loss": rec.train_loss,
                "pred_loss": rec.pred_loss,
                "mi_loss": rec.mi_loss,
                "agg_seconds": agg_seconds,
                "round_seconds": round_seconds,
            })
        macro = _macro(round_records, round_idx, "val")
        if macro is not None and macro.mae < best_mae:
            best_mae = macro.mae
            best_round = round_idx
            best_snaps = [c.state_snapshot() for c in clients]

    # test once, at the best-validation checkpoint
    for client, snap in zip(clients, best_snaps):
        client.load_snapshot(snap)
    test_records = _evaluate(clients, "test", best_round, cfg.mape_mask_threshold)
    bundle.records.extend(test_records)
    macro_test = _macro(test_records, best_round, "test")
    bundle.final_test = {
        "mae": macro_test.mae if macro_test else None,
        "rmse": macro_test.rmse if macro_test else None,
        "mape_pct": macro_test.mape_pct if macro_test else None,
    }
    bundle.best_round = best_round
    bundle.total_seconds = time.perf_counter() - t_start

    if emit:
        out = Path(out_dir) if out_dir else resolve_output_dir(cfg, f"run_seed{cfg.seed}_{cfg.mode}")
        emit_report(bundle, out, clients=clients)
    return bundle


def run_ablation(cfg: ExperimentConfig, out_dir=None, emit: bool = True) -> dict[str, ReportBundle]:
    """The full model plus the four single-component removals, same seed."""
    out = Path(out_dir) if out_dir else resolve_output_dir(cfg, f"ablation_seed{cfg.seed}")
    bundles = {}
    for variant in ABLATION_VARIANTS:
        flags = {f: (f == variant) for f in ("no_cd", "no_gp", "no_wu", "no_cps")}
        vcfg = cfg.replace(mode="feddis", output_dir=None, **flags)
        bundles[variant] = run_federated_experiment(
            vcfg, out_dir=out / variant if emit else None, emit=emit
        )
    return bundles


def run_sweep(cfg: ExperimentConfig, grid: dict[str, list], out_dir=None, emit: bool = True):
    """Cartesian grid over config fields (e.g. global_patterns/personal_patterns/top_k)."""
    out = Path(out_dir) if out_dir else resolve_output_dir(cfg, f"sweep_seed{cfg.seed}")
    results = []
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        point_cfg = cfg.replace(output_dir=None, **overrides)
        name = "_".join(f"{k}{v}" for k, v in overrides.items())
        bundle = run_federated_experiment(
            point_cfg, out_dir=out / name if emit else None, emit=emit
        )
        results.append({"overrides": overrides, "bundle": bundle})
    return results


# ---------------------------------------------------------------------------
# Report emission

def emit_report(bundle: ReportBundle, out_dir, clients: list[FederatedClient] | None = None) -> dict:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)

        config_path = out_dir / "config.yaml"
        config_path.write_text(yaml.safe_dump(bundle.config, sort_keys=True))

        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "split", "client_id", "mae", "rmse", "mape_pct", "seconds"])
            for r in bundle.records:
                writer.writerow([
                    r.round, r.split, r.client_id,
                    f"{r.mae:.6f}", f"{r.rmse:.6f}",
                    "undefined" if r.mape_pct is None else f"{r.mape_pct:.4f}",
                    f"{r.seconds:.4f}",
                ])

        log_path = out_dir / "round_log.csv"
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "client_id", "train_loss", "pred_loss",
                             "mi_loss", "agg_seconds", "round_seconds"])
            for row in bundle.round_log:
                writer.writerow([row["round"], row["client_id"],
                                 f"{row['train_loss']:.6f}", f"{row['pred_loss']:.6f}",
                                 f"{row['mi_loss']:.6f}", f"{row['agg_seconds']:.6f}",
                                 f"{row['round_seconds']:.4f}"])

        plot_paths = _emit_plots(bundle, out_dir)

        ckpt_paths = []
        if clients is not None:
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            for client in clients:
                tensors, roles = {}, {}
                for name, t in client.model.state_dict().items():
                    tensors[name] = t.detach().cpu().numpy()
                    if name == GLOBAL_BANK_NAME:
                        roles[name] = "bank"
                    elif name == "personal_bank.patterns":
                        roles[name] = "bank"
                    elif is_shared_param(name):
                        roles[name] = "shared"
                    else:
                        roles[name] = "personal"
                path = ckpt_dir / f"client{client.client_id}_best.ckpt"
                save_checkpoint(path, tensors, roles)
                ckpt_paths.append(str(path))

        bundle.artifacts = {
            "config": str(config_path),
            "metrics": str(metrics_path),
            "round_log": str(log_path),
            "plots": plot_paths,
            "checkpoints": ckpt_paths,
        }
        summary = {
            "config": bundle.config,
            "best_round": bundle.best_round,
            "final_test": bundle.final_test,
            "total_seconds": bundle.total_seconds,
            "artifacts": bundle.artifacts,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        return summary
    except OSError as exc:
        raise OSError(f"report emission failed at {out_dir}: {exc}") from exc


def _emit_plots(bundle: ReportBundle, out_dir: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rounds, maes, rmses = [], [], []
    for r in bundle.records:
        if r.split == "val" and r.client_id == "macro":
            rounds.append(r.round)
            maes.append(r.mae)
            rmses.append(r.rmse)
    paths = []
    for metric, values in (("mae", maes), ("rmse", rmses)):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(rounds, values, marker="o", markersize=3)
        ax.set_xlabel("round")
        ax.set_ylabel(f"validation {metric.upper()}")
        ax.grid(alpha=0.3)
        path = out_dir / f"{metric}_vs_round.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        paths.append(str(path))
    return paths


def records_as_rows(bundle: ReportBundle) -> list[tuple]:
    """Metric rows without the timing column, for determinism comparisons."""
    return [
        (r.round, r.split, r.client_id, r.mae, r.rmse, r.mape_pct)
        for r in bundle.records
    ]
