"""Spatio-temporal feature extractor and forecasting head.

Each layer runs, in order: a tanh/sigmoid gated dilated convolution, batch
norm over the inner residual, an affine skip update of the outer path, and a
Chebyshev graph convolution applied per subgraph at every time position.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .flat import HolisticGraph
from .graph import normalized_laplacian
from .numerics import DTYPE, Rng, dilated_conv1d


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    blocks: int = 4
    layers: int = 2
    kernel: int = 2
    dilation_rate: int = 2
    cheb_order: int = 3
    node_dim: int = 20
    time_dim: int = 10
    head_channels: int = 64
    proj_dim: int = 32
    H: int = 12
    Q: int = 12
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def dilations(self) -> list[int]:
        return [self.dilation_rate ** l for l in range(self.layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * self.blocks * sum(self.dilations())

    @property
    def padding(self) -> int:
        return max(0, self.receptive_field - self.H)

    @property
    def final_length(self) -> int:
        return self.H + self.padding - (self.receptive_field - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class GatedLayer(nn.Module):
    def __init__(self, C: int, k: int, J: int, rng: Rng):
        super().__init__()
        conv_std = (C * k) ** -0.5
        self.filter = nn.Parameter(rng.normal((C, C, k), conv_std))
        self.gate = nn.Parameter(rng.normal((C, C, k), conv_std))
        self.bn_gamma = nn.Parameter(torch.ones(C, dtype=DTYPE))
        self.bn_beta = nn.Parameter(torch.zeros(C, dtype=DTYPE))
        self.register_buffer("bn_mean", torch.zeros(C, dtype=DTYPE))
        self.register_buffer("bn_var", torch.ones(C, dtype=DTYPE))
        self.skip_w = nn.Parameter(rng.normal((C, C), C ** -0.5))
        self.skip_b = nn.Parameter(torch.zeros(C, dtype=DTYPE))
        self.theta = nn.Parameter(rng.normal((J, C, C), (C * J) ** -0.5))


def batch_norm(x: torch.Tensor, layer: GatedLayer, training: bool, momentum: float,
               eps: float) -> torch.Tensor:
    """Per-channel normalization of channels-last ``x`` (B', T, C) over rows
    and time.

    Training mode normalizes with the biased batch variance and folds the
    unbiased one into the running estimate.
    """
    if training:
        mean = x.mean(dim=(0, 1))
        var = x.var(dim=(0, 1), unbiased=False)
        with torch.no_grad():
            count = x.shape[0] * x.shape[1]
            layer.bn_mean.mul_(1 - momentum).add_(mean, alpha=momentum)
            layer.bn_var.mul_(1 - momentum).add_(var * (count / max(count - 1, 1)), alpha=momentum)
    else:
        mean, var = layer.bn_mean, layer.bn_var
    scale = layer.bn_gamma / torch.sqrt(var + eps)
    return (x - mean) * scale + layer.bn_beta


class GraphOperator:
    """Laplacians of a holistic graph stacked by subgraph size.

    ``perm`` reorders flat rows so each size group is contiguous; ``inv``
    restores the original order.
    """

    def __init__(self, graph: HolisticGraph):
        offsets = graph.offsets
        self.groups = []
        order = []
        for n, members in sorted(graph.size_groups().items()):
            lap = normalized_laplacian(torch.stack([graph.blocks[b] for b in members]))
            rows = np.concatenate([np.arange(offsets[b], offsets[b + 1]) for b in members])
            self.groups.append((n, len(members), lap))
            order.append(rows)
        perm = np.concatenate(order)
        self.perm = torch.as_tensor(perm, dtype=torch.long)
        self.inv = torch.as_tensor(np.argsort(perm), dtype=torch.long)
        self.identity = bool((perm == np.arange(len(perm))).all())


def chebyshev(x: torch.Tensor, op: GraphOperator, theta: torch.Tensor) -> torch.Tensor:
    """sum_j T_j(L) x theta_j with T_1 = I, T_2 = L, T_j = 2 L T_{j-1} - T_{j-2}.

    ``x`` is channels-last (B', T, C); ``theta`` is (J, C_in, C_out). The
    Laplacian mixes rows within a subgraph at every time position.
    """
    J, C, C_out = theta.shape
    T = x.shape[1]
    rows = x if op.identity else x[op.perm]
    outs, start = [], 0
    for n, g, lap in op.groups:
        xg = rows[start:start + n * g].reshape(g, n, T * C)
        start += n * g
        terms = [xg]
        if J > 1:
            terms.append(lap @ xg)
        for _ in range(2, J):
            terms.append(2.0 * (lap @ terms[-1]) - terms[-2])
        stacked = torch.stack([t.reshape(g * n, T, C) for t in terms], dim=2)
        outs.append(stacked.reshape(g * n, T, J * C) @ theta.reshape(J * C, C_out))
    out = torch.cat(outs) if len(outs) > 1 else outs[0]
    return out if op.identity else out[op.inv]


class Stfe(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0).stream("stfe")
        self.cfg = cfg
        if cfg.final_length < 1:
            raise ValueError(f"padded input length {cfg.H + cfg.padding} shorter than "
                             f"receptive field {cfg.receptive_field}")
        self.embed = nn.Parameter(rng.normal((cfg.channels, 1), 1.0))
        for m in range(1, cfg.blocks + 1):
            self.add_module(f"block{m}", nn.ModuleDict({
                f"layer{l}": GatedLayer(cfg.channels, cfg.kernel, cfg.cheb_order,
                                        rng.stream(f"block{m}.layer{l}"))
                for l in range(1, cfg.layers + 1)
            }))

    def layers(self):
        for m in range(1, self.cfg.blocks + 1):
            block = getattr(self, f"block{m}")
            for l in range(1, self.cfg.layers + 1):
                yield m, l, block[f"layer{l}"]

    def forward(self, rows: torch.Tensor, graph: HolisticGraph | GraphOperator,
                training: bool = False) -> torch.Tensor:
        """(B', H) rows -> (B', C) features."""
        cfg = self.cfg
        op = graph if isinstance(graph, GraphOperator) else GraphOperator(graph)
        if cfg.padding:
            rows = F.pad(rows, (cfg.padding, 0))
        h_in = rows.unsqueeze(-1) * self.embed[:, 0]
        h_out = torch.zeros(rows.shape[0], cfg.channels, dtype=DTYPE)
        dils = cfg.dilations()
        for m, l, layer in self.layers():
            d = dils[l - 1]
            name = f"block{m}.layer{l}"
            fg = dilated_conv1d(h_in, torch.cat([layer.filter, layer.gate]), d, name=name,
                                channels_last=True)
            f, g = fg.split(cfg.channels, dim=-1)
            u = torch.tanh(f) * torch.sigmoid(g)
            h_in = batch_norm(h_in[:, -u.shape[1]:] + u, layer, training,
                              cfg.bn_momentum, cfg.bn_eps)
            h_out = h_out @ layer.skip_w.T + layer.skip_b + u[:, -1]
            h_in = chebyshev(h_in, op, layer.theta)
        return h_out


class OutputHead(nn.Module):
    """Two 1x1 stages, C -> C_head -> Q, with ReLU in between."""

    def __init__(self, C: int, C_head: int, Q: int, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0).stream("head")
        self.w1 = nn.Parameter(rng.normal((C_head, C), C ** -0.5))
        self.b1 = nn.Parameter(torch.zeros(C_head, dtype=DTYPE))
        self.w2 = nn.Parameter(rng.normal((Q, C_head), C_head ** -0.5))
        self.b2 = nn.Parameter(torch.zeros(Q, dtype=DTYPE))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.relu(h @ self.w1.T + self.b1) @ self.w2.T + self.b2
