"""Round-synchronous federation: client local training, the server-side
pattern-sharing and prototype-guided fusion steps, baseline aggregators, and
the wire/checkpoint formats the two sides exchange.
"""

from __future__ import annotations

import io
import json
import time
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

from .data import NormStats, WindowBatch, normalize
from .disentangle import (
    GLOBAL_BANK_NAME,
    ClientModel,
    club_mi_estimate,
    gaussian_log_likelihood,
    is_shared_param,
    mae_loss,
    total_loss,
)


class ProtocolError(RuntimeError):
    pass


class PrivacyViolation(ProtocolError):
    """A client upload carried something outside the shared contract."""


# ---------------------------------------------------------------------------
# Parameter partitioning

def split_params(model: ClientModel) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Partition named parameters into the shared and personal sets.

    The global pattern bank travels separately (as the bank field of the
    upload), so it belongs to neither set.
    """
    shared, personal = {}, {}
    for name, p in model.named_parameters():
        if name == GLOBAL_BANK_NAME:
            continue
        (shared if is_shared_param(name) else personal)[name] = p
    return shared, personal


def shared_param_names(model: ClientModel) -> list[str]:
    return sorted(split_params(model)[0])


def personal_param_names(model: ClientModel) -> list[str]:
    names = sorted(split_params(model)[1])
    names += [n for n, _ in model.named_buffers()]  # personalized bank state
    return sorted(names)


# ---------------------------------------------------------------------------
# Server-side operators (pure numpy; operate on pre-round snapshots)

def compute_graph_prototype(model: ClientModel) -> np.ndarray:
    with torch.no_grad():
        return model.prototype().detach().cpu().numpy().astype(np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0  # zero-norm patterns are never similar to anything
    return float(a @ b / (na * nb))


def collaborative_pattern_sharing(banks: list[np.ndarray], top_k: int, tau: float,
                                  include_self: bool = False) -> list[np.ndarray]:
    """For every pattern, average the top-K most-similar patterns from every
    other client that clear the similarity threshold; keep the pattern when
    nothing qualifies. All selections read pre-round banks. ``include_self``
    optionally adds the pattern itself to a non-empty selection set."""
    m = len(banks)
    if m < 2:
        raise ProtocolError("pattern sharing needs at least 2 clients")
    if top_k < 1:
        raise ProtocolError("top_k must be >= 1")
    if not -1.0 <= tau <= 1.0:
        raise ProtocolError("tau must lie in [-1, 1]")
    shape = banks[0].shape
    if any(b.shape != shape for b in banks):
        raise ProtocolError("all global banks must share (O, C)")

    updated = [b.copy() for b in banks]
    for mi in range(m):
        for j in range(shape[0]):
            pattern = banks[mi][j]
            selected = []
            for ni in range(m):
                if ni == mi:
                    continue
                sims = np.array([_cosine(pattern, banks[ni][k]) for k in range(shape[0])])
                order = np.argsort(-sims, kind="stable")[:top_k]
                selected.extend(banks[ni][k] for k in order if sims[k] > tau)
            if selected:
                if include_self:
                    selected.append(pattern)
                updated[mi][j] = np.mean(selected, axis=0)
    return updated


def graph_attention_fusion(
    prototypes: list[np.ndarray],
    shared_sets: list[dict[str, np.ndarray]],
    temperature: float,
) -> list[dict[str, np.ndarray]]:
    """Temperature-softmax cosine-similarity weighting of all clients' shared
    tensors (self included), one weight vector per client."""
    if temperature <= 0.0:
        raise ProtocolError("fusion temperature must be positive")
    m = len(prototypes)
    if len(shared_sets) != m:
        raise ProtocolError("one shared set per prototype required")
    sims = np.array([[_cosine(prototypes[i], prototypes[j]) for j in range(m)] for i in range(m)])
    logits = sims / temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    fused = []
    names = sorted(shared_sets[0])
    for i in range(m):
        fused.append(
            {
                name: sum(weights[i, j] * shared_sets[j][name] for j in range(m))
                for name in names
            }
        )
    return fused


def fedavg_aggregate(param_sets: list[dict[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    weights = np.asarray(weights, dtype=np.float64)
    if (weights < 0).any():
        raise ProtocolError("aggregation weights must be non-negative")
    total = weights.sum()
    if total <= 0:
        raise ProtocolError("aggregation weights sum to zero")
    weights = weights / total
    names = sorted(param_sets[0])
    return {
        name: sum(w * ps[name] for w, ps in zip(weights, param_sets))
        for name in names
    }


def fedprox_term(local: dict[str, torch.Tensor], reference: dict[str, torch.Tensor], mu: float) -> torch.Tensor:
    """(mu/2) * ||theta - theta_ref||^2 summed over the shared tensors."""
    if mu < 0:
        raise ProtocolError("proximal coefficient must be >= 0")
    terms = [(local[n] - reference[n]).pow(2).sum() for n in sorted(local)]
    return 0.5 * mu * torch.stack(terms).sum()


# ---------------------------------------------------------------------------
# Wire format

@dataclass
class ClientUpdate:
    client_id: int
    shared: dict[str, np.ndarray]
    bank: np.ndarray
    prototype: np.ndarray
    sample_count: int


@dataclass
class ServerPayload:
    client_id: int
    shared: dict[str, np.ndarray]
    bank: np.ndarray


def _pack(entries: dict[str, np.ndarray], roles: dict[str, str], meta: dict) -> bytes:
    buf = io.BytesIO()
    manifest = {
        "meta": meta,
        "tensors": [
            {"name": n, "role": roles[n], "shape": list(entries[n].shape), "dtype": str(entries[n].dtype)}
            for n in sorted(entries)
        ],
    }
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for n in sorted(entries):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(entries[n]))
            zf.writestr(f"tensors/{n}.npy", arr_buf.getvalue())
    return buf.getvalue()


def _unpack(blob: bytes) -> tuple[dict, dict[str, np.ndarray], dict[str, str]]:
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors, roles = {}, {}
        for entry in manifest["tensors"]:
            name = entry["name"]
            tensors[name] = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            roles[name] = entry["role"]
    return manifest["meta"], tensors, roles


def serialize_update(update: ClientUpdate) -> bytes:
    entries = dict(update.shared)
    roles = {n: "shared" for n in update.shared}
    entries["__bank__"] = update.bank
    entries["__prototype__"] = update.prototype
    roles["__bank__"] = "bank"
    roles["__prototype__"] = "prototype"
    meta = {"kind": "client_update", "client_id": update.client_id, "sample_count": update.sample_count}
    return _pack(entries, roles, meta)


def deserialize_update(blob: bytes) -> ClientUpdate:
    meta, tensors, roles = _unpack(blob)
    if meta.get("kind") != "client_update":
        raise ProtocolError("blob is not a client update")
    shared = {n: t for n, t in tensors.items() if roles[n] == "shared"}
    return ClientUpdate(
        client_id=int(meta["client_id"]),
        shared=shared,
        bank=tensors["__bank__"],
        prototype=tensors["__prototype__"],
        sample_count=int(meta["sample_count"]),
    )


def serialize_payload(payload: ServerPayload) -> bytes:
    entries = dict(payload.shared)
    roles = {n: "shared" for n in payload.shared}
    entries["__bank__"] = payload.bank
    roles["__bank__"] = "bank"
    return _pack(entries, roles, {"kind": "server_payload", "client_id": payload.client_id})


def deserialize_payload(blob: bytes) -> ServerPayload:
    meta, tensors, roles = _unpack(blob)
    if meta.get("kind") != "server_payload":
        raise ProtocolError("blob is not a server payload")
    shared = {n: t for n, t in tensors.items() if roles[n] == "shared"}
    return ServerPayload(client_id=int(meta["client_id"]), shared=shared, bank=tensors["__bank__"])


def assert_update_schema(blob: bytes, personal_names) -> None:
    """Reject serialized uploads that name any personal tensor or carry
    anything beyond {shared params, bank, prototype}."""
    _, tensors, roles = _unpack(blob)
    personal = set(personal_names)
    for name, role in roles.items():
        if name in personal:
            raise PrivacyViolation(f"upload contains personal tensor {name!r}")
        if role not in ("shared", "bank", "prototype"):
            raise PrivacyViolation(f"upload contains unexpected role {role!r} for {name!r}")
        if role == "shared" and not is_shared_param(name):
            raise PrivacyViolation(f"tensor {name!r} is not in the shared set")


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, named_tensors: dict[str, np.ndarray], roles: dict[str, str]) -> None:
    """One archive of named tensors plus a manifest (name, shape, role)."""
    blob = _pack(named_tensors, roles, {"kind": "checkpoint"})
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as f:
        meta, tensors, roles = _unpack(f.read())
    if meta.get("kind") != "checkpoint":
        raise ProtocolError(f"{path} is not a checkpoint archive")
    return tensors, roles


# ---------------------------------------------------------------------------
# Client trainer

@dataclass
class RoundLossRecord:
    train_loss: float
    pred_loss: float
    mi_loss: float


class FederatedClient:
    """Owns one client's model, data and optimizers across rounds."""

    def __init__(self, client_id: int, model: ClientModel, windows: dict[str, WindowBatch],
                 stats: NormStats, lr: float = 0.005, batch_size: int = 64,
                 mi_weight: float = 0.1, mode: str = "feddis", prox_mu: float = 0.01,
                 no_cd: bool = False, seed: int = 0, device: str = "cpu"):
        self.client_id = client_id
        self.model = model.to(device)
        self.windows = windows
        self.stats = stats
        self.batch_size = batch_size
        self.mi_weight = mi_weight
        self.mode = mode
        self.prox_mu = prox_mu
        self.no_cd = no_cd
        self.device = device
        self.rng = np.random.default_rng(seed)
        shared, personal = split_params(model)
        main_params = (
            list(shared.values())
            + [p for n, p in personal.items() if not n.startswith("critic.")]
            + [model.global_bank.patterns]
        )
        self.optimizer = torch.optim.Adam(main_params, lr=lr)
        self.critic_optimizer = torch.optim.Adam(model.critic.parameters(), lr=lr)

    @property
    def sample_count(self) -> int:
        return len(self.windows["train"])

    def _tensor(self, arr: np.ndarray) -> torch.Tensor:
        dtype = next(self.model.parameters()).dtype
        t = torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype, device=self.device)
        return (t - self.stats.mean) / self.stats.std

    def _batches(self, split: str, shuffle: bool):
        batch = self.windows[split]
        order = np.arange(len(batch))
        size = self.batch_size
        if shuffle:
            self.rng.shuffle(order)
        else:
            size = 4 * self.batch_size  # evaluation has no grad graph to bound
        for start in range(0, len(order), size):
            idx = order[start:start + size]
            yield self._tensor(batch.inputs[idx]), self._tensor(batch.targets[idx])

    def install(self, payload: ServerPayload) -> None:
        """Overwrite shared parameters and the global bank with server values."""
        shared, _ = split_params(self.model)
        with torch.no_grad():
            for name, param in shared.items():
                param.copy_(torch.as_tensor(payload.shared[name], dtype=param.dtype))
            self.model.global_bank.patterns.copy_(
                torch.as_tensor(payload.bank, dtype=self.model.global_bank.patterns.dtype)
            )

    def _train_batch(self, inputs: torch.Tensor, targets: torch.Tensor,
                     prox_reference: dict[str, torch.Tensor] | None):
        model = self.model
        model.train()
        outs = model(inputs, update_bank=not self.no_cd, no_cd=self.no_cd)
        if self.no_cd:
            mi = inputs.new_zeros(())
        else:
            s, d_hat = model.mi_samples(outs)
            # 1) critic ascent on the conditional likelihood, features frozen
            self.critic_optimizer.zero_grad()
            critic_loss = -gaussian_log_likelihood(s.detach(), d_hat.detach(), model.critic)
            critic_loss.backward()
            self.critic_optimizer.step()
            # 2) MI bound under the refreshed critic; only the features get gradients
            mi = club_mi_estimate(s, d_hat, model.critic)
        pred_loss = mae_loss(outs["pred"], targets)
        loss = total_loss(pred_loss, mi, self.mi_weight)
        if self.mode == "fedprox" and prox_reference is not None:
            shared, _ = split_params(model)
            loss = loss + fedprox_term(shared, prox_reference, self.prox_mu)
        if not torch.isfinite(loss):
            raise ProtocolError(
                f"client {self.client_id}: non-finite loss {loss.item()}; round aborted"
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach()), float(pred_loss.detach()), float(mi.detach())

    def local_round(self, payload: ServerPayload | None, local_epochs: int = 1) -> tuple[ClientUpdate, RoundLossRecord]:
        if payload is not None:
            self.install(payload)
        prox_reference = None
        if self.mode == "fedprox":
            shared, _ = split_params(self.model)
            prox_reference = {n: p.detach().clone() for n, p in shared.items()}
        losses, preds, mis = [], [], []
        for _ in range(local_epochs):
            for inputs, targets in self._batches("train", shuffle=True):
                lo, pr, mi = self._train_batch(inputs, targets, prox_reference)
                losses.append(lo)
                preds.append(pr)
                mis.append(mi)
        record = RoundLossRecord(
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            pred_loss=float(np.mean(preds)) if preds else float("nan"),
            mi_loss=float(np.mean(mis)) if mis else float("nan"),
        )
        return self.build_update(), record

    def build_update(self) -> ClientUpdate:
        shared, _ = split_params(self.model)
        return ClientUpdate(
            client_id=self.client_id,
            shared={n: p.detach().cpu().numpy().copy() for n, p in shared.items()},
            bank=self.model.global_bank.patterns.detach().cpu().numpy().copy(),
            prototype=compute_graph_prototype(self.model),
            sample_count=self.sample_count,
        )

    @torch.no_grad()
    def evaluate(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Denormalized predictions and targets for a whole split."""
        self.model.eval()
        preds, truths = [], []
        for inputs, targets in self._batches(split, shuffle=False):
            outs = self.model(inputs, update_bank=False, no_cd=self.no_cd)
            preds.append(outs["pred"].cpu().numpy())
            truths.append(targets.cpu().numpy())
        if not preds:
            return np.zeros((0,)), np.zeros((0,))
        pred = normalize(np.concatenate(preds), self.stats, "inverse")
        truth = normalize(np.concatenate(truths), self.stats, "inverse")
        return pred, truth

    def state_snapshot(self) -> dict:
        return {
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
            "critic_optimizer": self.critic_optimizer.state_dict(),
        }

    def load_snapshot(self, snap: dict) -> None:
        self.model.load_state_dict(snap["model"])
        self.optimizer.load_state_dict(snap["optimizer"])
        self.critic_optimizer.load_state_dict(snap["critic_optimizer"])


# ---------------------------------------------------------------------------
# Server

def server_round(updates: list[ClientUpdate], mode: str = "feddis",
                 top_k: int = 3, tau: float = 0.3, temperature: float = 0.5,
                 no_gp: bool = False, no_wu: bool = False, no_cps: bool = False) -> list[ServerPayload]:
    """Aggregate one synchronous round of uploads into per-client payloads."""
    if not updates:
        raise ProtocolError("no client updates")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in round")
    banks = [u.bank for u in updates]
    shared_sets = [u.shared for u in updates]

    if mode == "feddis":
        if no_wu:
            new_banks = [b.copy() for b in banks]  # banks stay local, echoed back
        elif no_cps:
            avg = np.mean(banks, axis=0)
            new_banks = [avg.copy() for _ in banks]
        elif len(banks) >= 2:
            new_banks = collaborative_pattern_sharing(banks, top_k, tau)
        else:
            new_banks = [b.copy() for b in banks]
        if no_gp:
            avg_shared = fedavg_aggregate(shared_sets, np.ones(len(updates)))
            fused = [avg_shared for _ in updates]
        else:
            fused = graph_attention_fusion([u.prototype for u in updates], shared_sets, temperature)
    elif mode in ("fedavg", "fedprox"):
        weights = [u.sample_count for u in updates]
        avg_shared = fedavg_aggregate(shared_sets, weights)
        fused = [avg_shared for _ in updates]
        avg_bank = np.mean(banks, axis=0)
        new_banks = [avg_bank.copy() for _ in banks]
    else:
        raise ProtocolError(f"unknown aggregation mode: {mode!r}")

    return [
        ServerPayload(client_id=u.client_id, shared={n: v.copy() for n, v in f.items()}, bank=b)
        for u, f, b in zip(updates, fused, new_banks)
    ]


def run_round_over_wire(clients: list[FederatedClient], payloads: list[ServerPayload] | None,
                        local_epochs: int, mode: str, top_k: int, tau: float,
                        temperature: float, no_gp: bool = False, no_wu: bool = False,
                        no_cps: bool = False) -> tuple[list[ServerPayload], list[RoundLossRecord], float]:
    """One full communication round with serialization and the privacy check
    on every upload. Returns the new payloads, per-client loss records, and
    the server aggregation time in seconds."""
    blobs = []
    records = []
    for i, client in enumerate(clients):
        payload = payloads[i] if payloads is not None else None
        update, record = client.local_round(payload, local_epochs)
        blob = serialize_update(update)
        assert_update_schema(blob, personal_param_names(client.model))
        blobs.append(blob)
        records.append(record)
    t0 = time.perf_counter()
    updates = [deserialize_update(b) for b in blobs]
    new_payloads = server_round(updates, mode, top_k, tau, temperature, no_gp, no_wu, no_cps)
    agg_seconds = time.perf_counter() - t0
    # payloads also cross the wire boundary
    new_payloads = [deserialize_payload(serialize_payload(p)) for p in new_payloads]
    return new_payloads, records, agg_seconds
