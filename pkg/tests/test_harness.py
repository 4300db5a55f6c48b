import csv
import json

import numpy as np
import pytest

from fedst.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_from_mapping,
    load_config_file,
    resolve_output_dir,
)
from fedst.harness import (
    ABLATION_VARIANTS,
    build_clients,
    compute_metrics,
    emit_report,
    records_as_rows,
    run_ablation,
    run_federated_experiment,
    run_sweep,
)

from oracles import metrics_ref

# one tiny config reused everywhere: 2 clients, 3 nodes each, enough steps
# for a handful of windows per split
TINY = dict(
    clients=2,
    synth_nodes_per_client=3,
    synth_t_total=120,
    lookback=4,
    horizon=2,
    rounds=2,
    batch_size=16,
    hidden_dim=6,
    embed_dim=3,
    personal_patterns=3,
    global_patterns=3,
    top_k=2,
    seed=0,
)


# ---------------------------------------------------------------------------
# Config

def test_config_defaults_match_training_protocol():
    cfg = ExperimentConfig()
    assert cfg.rounds == 100
    assert cfg.local_epochs == 1
    assert cfg.lr == 0.005
    assert cfg.batch_size == 64
    assert cfg.momentum_alpha == 0.5
    assert cfg.similarity_tau == 0.3
    assert cfg.lookback == 12 and cfg.horizon == 12
    assert cfg.splits == (0.6, 0.2, pytest.approx(0.2))


def test_config_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="fedsgd")


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_mapping({"learning_rate": 0.1})


def test_config_rejects_bad_alpha_and_splits():
    with pytest.raises(ConfigError):
        ExperimentConfig(momentum_alpha=1.5)
    with pytest.raises(ConfigError):
        ExperimentConfig(train_frac=0.8, val_frac=0.2)


def test_config_file_roundtrip(tmp_path):
    import yaml

    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump({"clients": 3, "mode": "fedprox", "lr": 0.01}))
    cfg = load_config_file(path)
    assert cfg.clients == 3 and cfg.mode == "fedprox" and cfg.lr == 0.01


def test_overrides_coerce_types():
    cfg = apply_overrides(ExperimentConfig(), {"rounds": "5", "no_cd": "true", "lr": "0.1"})
    assert cfg.rounds == 5 and cfg.no_cd is True and cfg.lr == 0.1
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {"no_cd": "maybe"})


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDST_OUTPUT_ROOT", str(tmp_path / "root"))
    out = resolve_output_dir(ExperimentConfig(), "abc")
    assert str(out) == str(tmp_path / "root" / "abc")
    explicit = resolve_output_dir(ExperimentConfig(output_dir=str(tmp_path / "x")), "abc")
    assert str(explicit) == str(tmp_path / "x")


# ---------------------------------------------------------------------------
# Metrics

def test_metrics_zero_error():
    pred = np.ones((3, 2))
    m = compute_metrics(pred, pred.copy())
    assert m == {"mae": 0.0, "rmse": 0.0, "mape_pct": 0.0}


def test_metrics_hand_case():
    m = compute_metrics(np.array([2.0, 1.0]), np.array([1.0, 3.0]))
    assert m["mae"] == pytest.approx(1.5)
    assert m["rmse"] == pytest.approx(np.sqrt(2.5))
    assert m["mape_pct"] == pytest.approx(100.0 * (1.0 + 2.0 / 3.0) / 2.0)


def test_metrics_mask_excludes_small_truth():
    pred = np.array([1.0, 5.0])
    truth = np.array([0.0, 4.0])  # first entry masked
    m = compute_metrics(pred, truth, mask_threshold=0.1)
    assert m["mape_pct"] == pytest.approx(25.0)
    assert m["mae"] == pytest.approx(1.0)  # MAE unaffected by the mask


def test_metrics_all_masked_undefined():
    m = compute_metrics(np.array([0.05]), np.array([0.01]))
    assert m["mape_pct"] is None
    assert np.isfinite(m["mae"])


def test_metrics_match_reference():
    rng = np.random.default_rng(0)
    pred, truth = rng.standard_normal((2, 50)) * 5
    ours = compute_metrics(pred, truth, 0.1)
    mae, rmse, mape = metrics_ref(pred, truth, 0.1)
    assert ours["mae"] == pytest.approx(mae)
    assert ours["rmse"] == pytest.approx(rmse)
    assert ours["mape_pct"] == pytest.approx(mape)


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.ones(3), np.ones(4))


# ---------------------------------------------------------------------------
# Experiment loop

def test_zero_rounds_reports_untrained_eval_only():
    cfg = ExperimentConfig(**{**TINY, "rounds": 0})
    bundle = run_federated_experiment(cfg, emit=False)
    assert all(r.round == 0 for r in bundle.records if r.split == "val")
    assert bundle.round_log == []
    assert bundle.final_test["mae"] is not None


def test_experiment_structure():
    cfg = ExperimentConfig(**TINY)
    bundle = run_federated_experiment(cfg, emit=False)
    # val evaluated at rounds 0..R for each client and macro
    val_rounds = sorted({r.round for r in bundle.records if r.split == "val"})
    assert val_rounds == [0, 1, 2]
    macro = [r for r in bundle.records if r.client_id == "macro" and r.split == "val"]
    assert len(macro) == 3
    assert len(bundle.round_log) == cfg.rounds * cfg.clients
    assert 1 <= bundle.best_round <= cfg.rounds or bundle.best_round == 0
    assert bundle.config == cfg.to_dict()


def test_experiment_deterministic():
    cfg = ExperimentConfig(**TINY)
    a = run_federated_experiment(cfg, emit=False)
    b = run_federated_experiment(cfg, emit=False)
    assert records_as_rows(a) == records_as_rows(b)


def test_macro_is_weighted_mean():
    cfg = ExperimentConfig(**TINY)
    bundle = run_federated_experiment(cfg, emit=False)
    clients = build_clients(cfg)
    weights = np.array([c.sample_count for c in clients], dtype=float)
    weights /= weights.sum()
    for rnd in (0, 1, 2):
        per = [r for r in bundle.records
               if r.round == rnd and r.split == "val" and r.client_id != "macro"]
        macro = [r for r in bundle.records
                 if r.round == rnd and r.split == "val" and r.client_id == "macro"][0]
        assert macro.mae == pytest.approx(np.dot(weights, [r.mae for r in per]), rel=1e-9)


def test_modes_share_round_zero_losses():
    """Before any aggregation the two modes are the same computation."""
    rows = {}
    for mode in ("feddis", "fedavg"):
        cfg = ExperimentConfig(**{**TINY, "rounds": 1, "mode": mode})
        bundle = run_federated_experiment(cfg, emit=False)
        rows[mode] = [(r["client_id"], r["train_loss"]) for r in bundle.round_log]
    assert rows["feddis"] == rows["fedavg"]


def test_no_cd_client_skips_mi():
    cfg = ExperimentConfig(**{**TINY, "no_cd": True, "rounds": 1})
    bundle = run_federated_experiment(cfg, emit=False)
    assert all(row["mi_loss"] == 0.0 for row in bundle.round_log)


# ---------------------------------------------------------------------------
# Ablation

def test_ablation_runs_five_variants(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "rounds": 1})
    bundles = run_ablation(cfg, out_dir=tmp_path, emit=True)
    assert set(bundles) == set(ABLATION_VARIANTS)
    for variant in ABLATION_VARIANTS:
        assert (tmp_path / variant / "metrics.csv").exists()
        echoed = bundles[variant].config
        assert echoed["seed"] == cfg.seed
        for flag in ("no_cd", "no_gp", "no_wu", "no_cps"):
            assert echoed[flag] == (flag == variant)


def test_ablation_no_wu_banks_echoed():
    cfg = ExperimentConfig(**{**TINY, "no_wu": True, "rounds": 1})
    clients = build_clients(cfg)
    from fedst.federation import run_round_over_wire

    ups_before = [c.build_update() for c in clients]  # untrained banks
    payloads, _, _ = run_round_over_wire(clients, None, 1, "feddis", 2, 0.3, 0.5,
                                         no_wu=True)
    # echoed banks equal the uploaded (post-training) banks
    for c, p in zip(clients, payloads):
        np.testing.assert_array_equal(p.bank, c.build_update().bank)
    del ups_before


def test_ablation_no_cps_same_bank_everywhere():
    cfg = ExperimentConfig(**{**TINY, "rounds": 1})
    clients = build_clients(cfg)
    from fedst.federation import run_round_over_wire

    payloads, _, _ = run_round_over_wire(clients, None, 1, "feddis", 2, 0.3, 0.5,
                                         no_cps=True)
    np.testing.assert_array_equal(payloads[0].bank, payloads[1].bank)


# ---------------------------------------------------------------------------
# Sweep

def test_sweep_covers_grid(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "rounds": 1})
    results = run_sweep(cfg, {"global_patterns": [2, 3], "top_k": [1]},
                        out_dir=tmp_path, emit=True)
    assert len(results) == 2
    combos = {tuple(sorted(r["overrides"].items())) for r in results}
    assert combos == {(("global_patterns", 2), ("top_k", 1)),
                      (("global_patterns", 3), ("top_k", 1))}
    assert (tmp_path / "global_patterns2_top_k1" / "summary.json").exists()


# ---------------------------------------------------------------------------
# Report emission

def test_emit_report_files(tmp_path):
    cfg = ExperimentConfig(**TINY)
    bundle = run_federated_experiment(cfg, out_dir=tmp_path, emit=True)
    assert (tmp_path / "config.yaml").exists()
    assert (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "round_log.csv").exists()
    assert (tmp_path / "mae_vs_round.png").exists()
    assert (tmp_path / "rmse_vs_round.png").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["final_test"]["mae"] == pytest.approx(bundle.final_test["mae"])

    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0].keys() == {"round", "split", "client_id", "mae", "rmse",
                              "mape_pct", "seconds"}
    # (rounds+1) val evaluations + 1 test evaluation, each with M clients + macro
    assert len(rows) == (cfg.rounds + 1 + 1) * (cfg.clients + 1)

    ckpts = sorted((tmp_path / "checkpoints").iterdir())
    assert [p.name for p in ckpts] == ["client0_best.ckpt", "client1_best.ckpt"]
    from fedst.federation import load_checkpoint

    tensors, roles = load_checkpoint(ckpts[0])
    assert roles["global_bank.patterns"] == "bank"
    assert roles["personal_bank.patterns"] == "bank"
    assert roles["global_head.weight"] == "shared"
    assert roles["personal_encoder.node_embedding"] == "personal"
    assert set(roles.values()) <= {"shared", "personal", "bank"}
    del tensors


def test_config_echo_reproduces_run(tmp_path):
    cfg = ExperimentConfig(**TINY)
    bundle = run_federated_experiment(cfg, out_dir=tmp_path, emit=True)
    echoed = load_config_file(tmp_path / "config.yaml")
    rerun = run_federated_experiment(echoed, emit=False)
    assert records_as_rows(bundle) == records_as_rows(rerun)


def test_emit_report_unwritable_dir(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "rounds": 0})
    bundle = run_federated_experiment(cfg, emit=False)
    target = tmp_path / "blocked"
    target.write_text("a file, not a directory")
    with pytest.raises(OSError, match="blocked"):
        emit_report(bundle, target)
