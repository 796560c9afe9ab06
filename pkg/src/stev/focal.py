"""Focal contrastive learning on flat batches.

The second view comes from a time-series augmentation. Rows are contrasted
against the augmented view of every row outside their own subgraph. Rows of
expanding variables use a sharper temperature ``alpha * tau``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ConfigError
from .flat import FlatBatch
from .numerics import DTYPE, Rng

AUG_METHODS = ("jitter", "mixup", "hybrid")


@dataclass(frozen=True)
class AugmentConfig:
    method: str = "hybrid"
    jitter_std: float = 0.1
    drift_max: float = 0.1
    quant_levels: int = 20
    mixup_beta: float = 0.2

    def validate(self) -> None:
        if self.method not in AUG_METHODS:
            raise ConfigError(f"aug_method: expected one of {AUG_METHODS}, got {self.method!r}")
        if self.quant_levels < 2:
            raise ConfigError(f"quant_levels must be >= 2, got {self.quant_levels}")
        for key in ("jitter_std", "drift_max", "mixup_beta"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")


def _row_std(x: np.ndarray) -> np.ndarray:
    return x.std(axis=1, keepdims=True)


def jitter(x: np.ndarray, std: float, rng: Rng) -> np.ndarray:
    return x + rng.np.normal(size=x.shape) * (std * _row_std(x))


def drift(x: np.ndarray, max_drift: float, rng: Rng) -> np.ndarray:
    """Add a random walk rescaled so its peak magnitude is ``max_drift * row std``."""
    walk = np.cumsum(rng.np.normal(size=x.shape), axis=1)
    peak = np.abs(walk).max(axis=1, keepdims=True)
    scale = np.divide(max_drift * _row_std(x), peak, out=np.zeros_like(peak), where=peak > 0)
    return x + walk * scale


def quantize(x: np.ndarray, levels: int) -> np.ndarray:
    """Snap each value to the nearest of ``levels`` points spanning its row's range."""
    lo = x.min(axis=1, keepdims=True)
    hi = x.max(axis=1, keepdims=True)
    span = hi - lo
    step = np.divide(span, levels - 1, out=np.ones_like(span), where=span > 0)
    snapped = lo + np.floor((x - lo) / step + 0.5) * step
    snapped = np.minimum(snapped, hi)
    return np.where(span > 0, snapped, x)


def mixup_partners(flat: FlatBatch, rng: Rng) -> np.ndarray:
    """For each row, a random row index drawn from the same subgraph."""
    partner = np.empty(flat.n_rows, dtype=np.int64)
    for b in range(flat.n_subgraphs):
        lo, hi = int(flat.offsets[b]), int(flat.offsets[b + 1])
        partner[lo:hi] = rng.np.integers(lo, hi, size=hi - lo)
    return partner


def mixup(x: np.ndarray, partner: np.ndarray, beta: float, rng: Rng,
          y: np.ndarray | None = None):
    lam = rng.np.beta(beta, beta, size=(len(x), 1)) if beta > 0 else np.ones((len(x), 1))
    mixed = lam * x + (1.0 - lam) * x[partner]
    if y is None:
        return mixed
    return mixed, lam * y + (1.0 - lam) * y[partner]


def augment(flat: FlatBatch, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """Augmented copy of ``flat.rows``; metadata is shared with the source."""
    cfg.validate()
    x = flat.rows
    if cfg.method == "jitter":
        return jitter(x, cfg.jitter_std, rng)
    if cfg.method == "mixup":
        return mixup(x, mixup_partners(flat, rng), cfg.mixup_beta, rng)
    return quantize(drift(x, cfg.drift_max, rng), cfg.quant_levels)


class Projection(nn.Module):
    def __init__(self, C: int, d_z: int, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0).stream("proj")
        self.weight = nn.Parameter(rng.normal((d_z, C), C ** -0.5))
        self.bias = nn.Parameter(torch.zeros(d_z, dtype=DTYPE))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.weight.T + self.bias


def focal_temperatures(expanding, tau: float, alpha: float) -> torch.Tensor:
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    flags = torch.as_tensor(np.asarray(expanding, dtype=bool))
    return torch.where(flags, torch.tensor(alpha * tau, dtype=DTYPE),
                       torch.tensor(tau, dtype=DTYPE))


def similarity(z: torch.Tensor, z_aug: torch.Tensor, cosine: bool = False) -> torch.Tensor:
    if cosine:
        z = nn.functional.normalize(z, dim=1)
        z_aug = nn.functional.normalize(z_aug, dim=1)
    return z @ z_aug.T


def candidate_mask(subgraph_id, filter_negatives: bool = True) -> torch.Tensor:
    """``mask[i, j]`` is True when ``j`` belongs to row ``i``'s denominator:
    the positive ``j == i`` always, other rows only outside ``i``'s subgraph."""
    sub = torch.as_tensor(np.asarray(subgraph_id))
    n = len(sub)
    eye = torch.eye(n, dtype=torch.bool)
    if not filter_negatives:
        return torch.ones(n, n, dtype=torch.bool)
    return (sub[:, None] != sub[None, :]) | eye


def focal_contrastive_loss(sim: torch.Tensor, tau_vec: torch.Tensor, subgraph_id,
                           filter_negatives: bool = True) -> torch.Tensor:
    """Mean over rows of ``-log softmax_{j in D_i}(s_ij / tau_i)[i]``."""
    logits = sim / tau_vec[:, None]
    allowed = candidate_mask(subgraph_id, filter_negatives)
    neg_inf = torch.tensor(-math.inf, dtype=logits.dtype)
    row_max = torch.where(allowed, logits, neg_inf).max(dim=1, keepdim=True).values.detach()
    shifted = torch.where(allowed, logits - row_max, neg_inf)
    log_denom = torch.log(torch.exp(shifted).sum(dim=1))
    return (log_denom - torch.diagonal(shifted)).mean()


def naive_contrastive_loss(sim, tau_vec, subgraph_id, filter_negatives: bool = True) -> float:
    """Unstabilized double loop over rows and candidates, for cross-checking."""
    s = np.asarray(sim, dtype=float)
    tau = np.asarray(tau_vec, dtype=float)
    sub = np.asarray(subgraph_id)
    total = 0.0
    for i in range(len(s)):
        num = math.exp(s[i, i] / tau[i])
        den = 0.0
        for j in range(len(s)):
            if j == i or not filter_negatives or sub[j] != sub[i]:
                den += math.exp(s[i, j] / tau[i])
        total += -math.log(num / den)
    return total / len(s)


def forecast_mae(y_hat: torch.Tensor, y: torch.Tensor, row_mask=None) -> torch.Tensor:
    """Mean absolute error over rows and horizon; masked rows contribute nothing."""
    err = (y_hat - y).abs()
    if row_mask is None:
        return err.mean()
    keep = torch.as_tensor(np.asarray(row_mask, dtype=bool))
    return err[keep].sum() / (int(keep.sum()) * y.shape[1])


def joint_loss(y_hat: torch.Tensor, y: torch.Tensor, l_cl, row_mask=None) -> torch.Tensor:
    return l_cl + forecast_mae(y_hat, y, row_mask)
