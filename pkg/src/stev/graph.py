"""Learnable time-aware adjacency: node embeddings joined with time-of-day and
day-of-week embeddings, a Gram product, a sigmoid gate on positive scores and
the symmetric normalized Laplacian."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, Rng


class GraphParams(nn.Module):
    def __init__(self, n_vars: int, steps_per_day: int, node_dim: int = 20,
                 time_dim: int = 10, rng: Rng | None = None, init_std: float = 0.1):
        super().__init__()
        if min(node_dim, time_dim) < 1:
            raise ValueError("embedding dimensions must be >= 1")
        rng = rng or Rng(0).stream("graph")
        self.steps_per_day = steps_per_day
        self.E = nn.Parameter(rng.normal((n_vars, node_dim), init_std))
        self.tod_table = nn.Parameter(rng.normal((steps_per_day, time_dim), init_std))
        self.dow_table = nn.Parameter(rng.normal((7, time_dim), init_std))

    def time_embedding(self, ref_time: int) -> torch.Tensor:
        tod = ref_time % self.steps_per_day
        dow = (ref_time // self.steps_per_day) % 7
        return torch.cat([self.tod_table[tod], self.dow_table[dow]])

    def build_adjacency(self, variable_ids, ref_time: int) -> torch.Tensor:
        ids = torch.as_tensor(np.asarray(variable_ids), dtype=torch.long)
        e_t = self.time_embedding(ref_time)
        emb = torch.cat([self.E[ids], e_t.expand(len(ids), -1)], dim=1)
        return emb @ emb.T

    def adjacency(self, variable_ids, ref_time: int) -> torch.Tensor:
        """Sparsified weights for one subgraph; usable as an adjacency provider."""
        return sparsify(self.build_adjacency(variable_ids, ref_time))


def sparsify(raw: torch.Tensor) -> torch.Tensor:
    """sigmoid(raw) where raw > 0 off the diagonal, else exactly 0.

    The gate is hard: dropped entries pass no gradient.
    """
    keep = raw > 0
    keep.fill_diagonal_(False)
    return torch.where(keep, torch.sigmoid(raw), torch.zeros_like(raw))


def normalized_laplacian(weights: torch.Tensor, sym_tol: float = 1e-9) -> torch.Tensor:
    """I - D^{-1/2} A D^{-1/2}; isolated nodes get a zero D^{-1/2} entry.

    Accepts a single ``(n, n)`` block or a stack ``(G, n, n)``.
    """
    if (weights - weights.transpose(-1, -2)).abs().max() > sym_tol:
        raise ValueError("normalized_laplacian: adjacency is not symmetric")
    deg = weights.sum(-1)
    pos = deg > 0
    inv_sqrt = torch.where(pos, torch.where(pos, deg, torch.ones_like(deg)).rsqrt(),
                           torch.zeros_like(deg))
    norm_adj = inv_sqrt.unsqueeze(-1) * weights * inv_sqrt.unsqueeze(-2)
    eye = torch.eye(weights.shape[-1], dtype=weights.dtype)
    return eye - norm_adj
