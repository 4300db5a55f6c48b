"""Dual-branch decoupling core: pattern banks, attention retrieval, the
variational mutual-information bound, predictors and the combined client model.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
from torch import nn

from .encoder import STEncoder

LOG_2PI = math.log(2.0 * math.pi)

# The contrastive MI bound is quadratic in the number of sample rows; training
# batches are strided down to this many rows before estimation.
MI_MAX_SAMPLES = 512

# Parameter-name prefixes that are shape-uniform across clients and therefore
# eligible for server-side fusion. Everything else stays on the client.
SHARED_PREFIXES = ("global_encoder.cells.", "global_bank.query.", "global_head.")
GLOBAL_BANK_NAME = "global_bank.patterns"


def is_shared_param(name: str) -> bool:
    return name.startswith(SHARED_PREFIXES)


# ---------------------------------------------------------------------------
# Bank initialization

def _pca_whiten(mat: np.ndarray) -> np.ndarray:
    """Zero the column means and whiten the column covariance (rank permitting)."""
    centered = mat - mat.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (mat.shape[0] - 1)
    eigval, eigvec = np.linalg.eigh(cov)
    tol = 1e-10 * max(eigval.max(), 1.0)
    inv_sqrt = np.where(eigval > tol, 1.0 / np.sqrt(np.maximum(eigval, tol)), 0.0)
    return centered @ eigvec @ np.diag(inv_sqrt) @ eigvec.T


def init_bank(rows: int, dim: int, seed: int, strategy: str = "random+pca-whiten") -> torch.Tensor:
    """Initialize a [rows x dim] pattern bank.

    The default draws a Gaussian matrix and whitens it so columns have zero
    mean and identity covariance; the plain strategies exist to reproduce the
    initialization-study axis.
    """
    if rows < 1 or dim < 1:
        raise ValueError("bank dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((rows, dim))
    if strategy == "random":
        pass
    elif strategy == "random+pca-whiten":
        if rows < 2:
            warnings.warn("pca-whiten needs >= 2 patterns; falling back to unit-normalized random")
            mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        else:
            mat = _pca_whiten(mat)
    elif strategy == "xavier":
        bound = math.sqrt(6.0 / (rows + dim))
        mat = rng.uniform(-bound, bound, size=(rows, dim))
    elif strategy == "kaiming":
        mat = rng.standard_normal((rows, dim)) * math.sqrt(2.0 / dim)
    else:
        raise ValueError(f"unknown bank init strategy: {strategy!r}")
    return torch.as_tensor(mat, dtype=torch.get_default_dtype())


# ---------------------------------------------------------------------------
# Personalized branch

class PersonalizedBank(nn.Module):
    """Momentum-updated bank of client-local patterns with scored attention retrieval."""

    def __init__(self, num_patterns: int, hidden_dim: int, num_nodes: int,
                 momentum: float = 0.5, init_strategy: str = "random+pca-whiten",
                 seed: int = 0):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.momentum = momentum
        self.register_buffer("patterns", init_bank(num_patterns, hidden_dim, seed, init_strategy))
        # learnable projection over the node axis: [V x C] -> [B x C]
        self.projector = nn.Linear(num_nodes, num_patterns, bias=False)
        self.score_net = nn.Sequential(
            nn.Linear(2 * hidden_dim, hidden_dim),
            nn.Tanh(),
            nn.Linear(hidden_dim, 1),
        )

    @property
    def num_patterns(self) -> int:
        return self.patterns.shape[0]

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        """Current patterns from branch features: [batch, V, C] -> [B, C]."""
        proj = self.projector(feats.transpose(-1, -2)).transpose(-1, -2)
        return proj.mean(dim=0) if proj.dim() == 3 else proj

    def updated(self, feats: torch.Tensor) -> torch.Tensor:
        """Convex combination of the fresh projection and the stored bank."""
        return self.momentum * self.project(feats) + (1.0 - self.momentum) * self.patterns

    def commit(self, bank: torch.Tensor) -> None:
        self.patterns = bank.detach()

    def attention(self, feats: torch.Tensor, bank: torch.Tensor | None = None) -> torch.Tensor:
        """Row-simplex weights over patterns for every node feature."""
        if bank is None:
            bank = self.patterns
        b = bank.shape[0]
        pairs = torch.cat(
            [
                feats.unsqueeze(-2).expand(*feats.shape[:-1], b, feats.shape[-1]),
                bank.expand(*feats.shape[:-1], b, bank.shape[-1]),
            ],
            dim=-1,
        )
        scores = self.score_net(pairs).squeeze(-1)
        return torch.softmax(scores, dim=-1)

    def attend(self, feats: torch.Tensor, bank: torch.Tensor | None = None) -> torch.Tensor:
        if bank is None:
            bank = self.patterns
        return self.attention(feats, bank) @ bank


# ---------------------------------------------------------------------------
# Global branch

class GlobalBank(nn.Module):
    """Server-aggregated bank queried through a learnable projection."""

    def __init__(self, num_patterns: int, hidden_dim: int,
                 init_strategy: str = "xavier", seed: int = 0):
        super().__init__()
        self.patterns = nn.Parameter(init_bank(num_patterns, hidden_dim, seed, init_strategy))
        self.query = nn.Linear(hidden_dim, hidden_dim)

    def attention(self, feats: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.query(feats) @ self.patterns.T, dim=-1)

    def attend(self, feats: torch.Tensor) -> torch.Tensor:
        return self.attention(feats) @ self.patterns


# ---------------------------------------------------------------------------
# Mutual-information upper bound

class ClubCritic(nn.Module):
    """Two-head MLP parameterizing a diagonal conditional Gaussian q(s | d)."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(2 * dim, 16)
        self.backbone = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh())
        self.mu_head = nn.Linear(hidden, dim)
        self.logvar_head = nn.Linear(hidden, dim)

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.backbone(cond)
        return self.mu_head(h), self.logvar_head(h)


def gaussian_log_likelihood(samples: torch.Tensor, cond: torch.Tensor, critic: ClubCritic) -> torch.Tensor:
    """Mean log-density of ``samples`` under the critic's conditional Gaussian."""
    if samples.shape != cond.shape[:1] + samples.shape[1:]:
        raise ValueError("samples and conditioners must be paired row-wise")
    mu, logvar = critic(cond)
    if not torch.isfinite(logvar).all():
        raise ValueError("critic produced non-finite log-variance")
    ll = -0.5 * ((samples - mu) ** 2 / logvar.exp() + logvar + LOG_2PI).sum(dim=-1)
    return ll.mean()


def club_mi_estimate(samples: torch.Tensor, cond: torch.Tensor, critic: ClubCritic,
                     block: int = 1024) -> torch.Tensor:
    """Contrastive log-ratio upper bound on MI(samples; cond).

    Positive-pair mean log-likelihood minus the all-pairs mean. The pairwise
    log-density matrix is evaluated in row blocks so no full [U x U x C]
    tensor is ever built, and the contrast is accumulated as elementwise
    differences diag[j] - log_q[i, j]: every pairwise entry is computed with
    the same broadcast arithmetic as the diagonal, so a conditioner-
    independent critic cancels exactly and the estimator is identically zero.
    """
    if samples.shape[0] != cond.shape[0]:
        raise ValueError("mismatched batch sizes")
    u = samples.shape[0]
    if u < 1:
        raise ValueError("empty batch")
    mu, logvar = critic(cond)
    if not torch.isfinite(logvar).all():
        raise ValueError("critic produced non-finite log-variance")
    c = samples.shape[1]
    # keep the [block, U, C] broadcast buffer bounded regardless of U and C
    block = max(1, min(block, 8_000_000 // max(1, u * c)))
    inv = torch.exp(-logvar)

    def block_log_q(start: int, end: int) -> torch.Tensor:
        # log_q[i, j] = log N(samples[j]; mu[start + i], var[start + i])
        diff = samples.unsqueeze(0) - mu[start:end].unsqueeze(1)
        quad = (diff**2 * inv[start:end].unsqueeze(1)
                + logvar[start:end].unsqueeze(1)).sum(dim=-1)
        return -0.5 * (quad + c * LOG_2PI)

    diag = -0.5 * (((samples - mu) ** 2 * inv + logvar).sum(dim=-1) + c * LOG_2PI)
    total = samples.new_zeros(())
    for start in range(0, u, block):
        log_q = block_log_q(start, min(start + block, u))
        total = total + (diag.unsqueeze(0) - log_q).sum()
    return total / (u * u)


# ---------------------------------------------------------------------------
# Predictors and losses

def fuse_predictions(pred_global: torch.Tensor, pred_personal: torch.Tensor) -> torch.Tensor:
    if pred_global.shape != pred_personal.shape:
        raise ValueError(
            f"branch predictions differ in shape: {tuple(pred_global.shape)} vs {tuple(pred_personal.shape)}"
        )
    return pred_global + pred_personal


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).abs().mean()


def total_loss(pred_loss: torch.Tensor, mi_loss: torch.Tensor, mi_weight: float) -> torch.Tensor:
    return pred_loss + mi_weight * mi_loss


# ---------------------------------------------------------------------------
# Graph prototype pooling (client-side half of the server fusion)

class PrototypeAttention(nn.Module):
    """Attention pooling of node embeddings into one summary vector."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, embed_dim)
        self.score_vec = nn.Parameter(torch.randn(embed_dim) * 0.1)

    def forward(self, node_embeddings: torch.Tensor) -> torch.Tensor:
        scores = torch.tanh(self.proj(node_embeddings)) @ self.score_vec
        weights = torch.softmax(scores, dim=0)
        return weights @ node_embeddings


# ---------------------------------------------------------------------------
# Full per-client model

class ClientModel(nn.Module):
    """Two structurally identical encoders with unshared parameters feeding a
    personalized and a global pattern branch; predictions are summed."""

    def __init__(self, num_nodes: int, in_dim: int = 1, hidden_dim: int = 64,
                 embed_dim: int = 10, horizon: int = 12,
                 personal_patterns: int = 64, global_patterns: int = 16,
                 momentum: float = 0.5, init_strategy: str = "default",
                 bank_seed: int = 0):
        super().__init__()
        personal_init = "random+pca-whiten" if init_strategy == "default" else init_strategy
        global_init = "xavier" if init_strategy == "default" else init_strategy
        self.horizon = horizon
        self.in_dim = in_dim
        self.global_encoder = STEncoder(num_nodes, in_dim, hidden_dim, embed_dim)
        self.personal_encoder = STEncoder(num_nodes, in_dim, hidden_dim, embed_dim)
        self.global_bank = GlobalBank(global_patterns, hidden_dim, global_init, seed=bank_seed)
        self.personal_bank = PersonalizedBank(
            personal_patterns, hidden_dim, num_nodes, momentum, personal_init, seed=bank_seed + 1
        )
        self.global_head = nn.Linear(hidden_dim, horizon * in_dim)
        self.personal_head = nn.Linear(hidden_dim, horizon * in_dim)
        self.critic = ClubCritic(hidden_dim)
        self.proto_attn = PrototypeAttention(embed_dim)

    def _head(self, head: nn.Linear, feats: torch.Tensor) -> torch.Tensor:
        out = head(feats)
        return out.reshape(*feats.shape[:-1], self.horizon, self.in_dim)

    def forward(self, window: torch.Tensor, update_bank: bool = False,
                commit_bank: bool = True, no_cd: bool = False) -> dict:
        """One dual-branch pass. Bank updates happen only when requested
        (training batches); evaluation uses the frozen bank."""
        s = self.global_encoder(window)
        d = self.personal_encoder(window)
        if no_cd:
            d_hat = torch.zeros_like(d)
        elif update_bank:
            bank = self.personal_bank.updated(d)
            if commit_bank:
                self.personal_bank.commit(bank)
            d_hat = self.personal_bank.attend(d, bank)
        else:
            d_hat = self.personal_bank.attend(d)
        s_hat = self.global_bank.attend(s)
        pred_global = self._head(self.global_head, s + s_hat)
        pred_personal = self._head(self.personal_head, d + d_hat)
        return {
            "s": s,
            "d": d,
            "s_hat": s_hat,
            "d_hat": d_hat,
            "pred_global": pred_global,
            "pred_personal": pred_personal,
            "pred": fuse_predictions(pred_global, pred_personal),
        }

    def mi_samples(self, outs: dict) -> tuple[torch.Tensor, torch.Tensor]:
        """Flatten (batch, node) pairs into MI sample rows, strided down to
        MI_MAX_SAMPLES so the pairwise term stays bounded."""
        c = outs["s"].shape[-1]
        s = outs["s"].reshape(-1, c)
        d_hat = outs["d_hat"].reshape(-1, c)
        if s.shape[0] > MI_MAX_SAMPLES:
            step = -(-s.shape[0] // MI_MAX_SAMPLES)  # ceil division
            s, d_hat = s[::step], d_hat[::step]
        return s, d_hat

    def prototype(self) -> torch.Tensor:
        """Graph prototype pooled from the global-branch node embeddings."""
        return self.proto_attn(self.global_encoder.node_embedding)

    def training_objective(self, window: torch.Tensor, target: torch.Tensor,
                           mi_weight: float, no_cd: bool = False,
                           commit_bank: bool = True) -> tuple[torch.Tensor, dict]:
        outs = self.forward(window, update_bank=not no_cd, commit_bank=commit_bank, no_cd=no_cd)
        pred_loss = mae_loss(outs["pred"], target)
        if no_cd:
            mi = window.new_zeros(())
        else:
            mi = club_mi_estimate(*self.mi_samples(outs), self.critic)
        loss = total_loss(pred_loss, mi, mi_weight)
        outs["pred_loss"] = pred_loss
        outs["mi"] = mi
        return loss, outs
