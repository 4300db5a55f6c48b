"""Adaptive-adjacency graph-recurrent encoder.

A per-branch learnable node embedding defines a row-stochastic adjacency,
which replaces the linear maps inside a GRU-style cell. Two stacked cells
process the input window recurrently; the top layer's final hidden state is
the branch representation.
"""

from __future__ import annotations

import torch
from torch import nn


def adaptive_adjacency(node_embedding: torch.Tensor) -> torch.Tensor:
    """Row-stochastic affinity matrix: softmax over rectified embedding inner products."""
    logits = torch.relu(node_embedding @ node_embedding.T)
    return torch.softmax(logits, dim=1)


def graph_conv(x: torch.Tensor, adj: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """A @ X @ W + b, broadcast over any leading batch dimensions of X."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"graph_conv: X feature dim {x.shape[-1]} != W rows {weight.shape[0]}")
    if x.shape[-2] != adj.shape[-1]:
        raise ValueError(f"graph_conv: X node dim {x.shape[-2]} != A cols {adj.shape[-1]}")
    return adj @ x @ weight + bias


class AGRCell(nn.Module):
    """GRU cell whose gate transforms are graph convolutions over a learned adjacency."""

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        cat = in_dim + hidden_dim
        self.w_z = nn.Parameter(torch.empty(cat, hidden_dim))
        self.w_r = nn.Parameter(torch.empty(cat, hidden_dim))
        self.w_h = nn.Parameter(torch.empty(cat, hidden_dim))
        self.b_z = nn.Parameter(torch.zeros(hidden_dim))
        self.b_r = nn.Parameter(torch.zeros(hidden_dim))
        self.b_h = nn.Parameter(torch.zeros(hidden_dim))
        for w in (self.w_z, self.w_r, self.w_h):
            nn.init.xavier_uniform_(w)

    def forward(self, x_t: torch.Tensor, h_prev: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """x_t: [..., V, F], h_prev: [..., V, C] -> [..., V, C].

        The two gates share one fused matmul, and A @ x_t is reused for the
        candidate input; the result is identical to evaluating the three
        graph convolutions separately.
        """
        axh = adj @ torch.cat([x_t, h_prev], dim=-1)
        zr = torch.sigmoid(
            axh @ torch.cat([self.w_z, self.w_r], dim=-1) + torch.cat([self.b_z, self.b_r])
        )
        z, r = zr.chunk(2, dim=-1)
        cand_in = torch.cat([axh[..., : self.in_dim], adj @ (r * h_prev)], dim=-1)
        h_cand = torch.tanh(cand_in @ self.w_h + self.b_h)
        return z * h_prev + (1.0 - z) * h_cand


class STEncoder(nn.Module):
    """Stacked AGR cells over one client's nodes.

    The adjacency is recomputed from the node embedding once per forward pass
    and reused at every timestep and layer.
    """

    def __init__(self, num_nodes: int, in_dim: int = 1, hidden_dim: int = 64,
                 embed_dim: int = 10, num_layers: int = 2):
        super().__init__()
        self.num_nodes = num_nodes
        self.hidden_dim = hidden_dim
        self.node_embedding = nn.Parameter(torch.randn(num_nodes, embed_dim) * 0.1)
        dims = [in_dim] + [hidden_dim] * num_layers
        self.cells = nn.ModuleList(AGRCell(dims[i], dims[i + 1]) for i in range(num_layers))

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """window: [batch, V, T, F] -> final top-layer hidden state [batch, V, C].

        Equivalent to stepping the cells one timestep at a time; the
        input-side graph convolutions of each layer are hoisted out of the
        recurrence and computed for the whole sequence in one matmul.
        """
        if window.dim() != 4:
            raise ValueError(f"expected [batch, V, T, F], got shape {tuple(window.shape)}")
        batch, v, t, _ = window.shape
        if t == 0:
            raise ValueError("empty window (T=0)")
        adj = adaptive_adjacency(self.node_embedding)
        seq = window.permute(0, 2, 1, 3)  # [batch, T, V, F]
        for cell in self.cells:
            f = cell.in_dim
            ax = adj @ seq  # input-side conv for every timestep at once
            gate_x = ax @ torch.cat([cell.w_z[:f], cell.w_r[:f]], dim=-1)
            cand_x = ax @ cell.w_h[:f]
            w_zr_h = torch.cat([cell.w_z[f:], cell.w_r[f:]], dim=-1)
            b_zr = torch.cat([cell.b_z, cell.b_r])
            h = window.new_zeros(batch, v, cell.hidden_dim)
            outputs = []
            for step in range(t):
                zr = torch.sigmoid(gate_x[:, step] + (adj @ h) @ w_zr_h + b_zr)
                z, r = zr.chunk(2, dim=-1)
                cand = torch.tanh(cand_x[:, step] + (adj @ (r * h)) @ cell.w_h[f:] + cell.b_h)
                h = z * h + (1.0 - z) * cand
                outputs.append(h)
            seq = torch.stack(outputs, dim=1)
        return h
