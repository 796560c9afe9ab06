"""Float64 tensor substrate: seeded RNG streams, dilated convolution, Adam and
a central-difference gradient checker.

Tensors are ``torch.Tensor`` objects in ``torch.float64``; gradients come from
autograd and are validated against :func:`finite_diff_check`, which evaluates
the loss only (never autograd) so it stays an independent oracle.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    pass


class Rng:
    """Seeded generator that can be split into independent named streams.

    ``Rng(7).stream("init")`` always yields the same sequence, independent of
    how many other streams were drawn before it.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        for name in path:
            digest = hashlib.sha256(name.encode()).digest()
            words.extend(int.from_bytes(digest[i:i + 4], "little") for i in (0, 4))
        self.np = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (name,))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.np.integers(0, 2**63 - 1)))
        return g

    def normal(self, shape, std: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self.np.normal(0.0, std, size=shape)).to(DTYPE)


def dilated_conv1d(x: torch.Tensor, kernel: torch.Tensor, dilation: int = 1,
                   name: str = "conv", channels_last: bool = False) -> torch.Tensor:
    """Valid (unpadded) dilated convolution.

    ``x`` is ``(..., C_in, T)`` (or ``(..., T, C_in)`` with ``channels_last``)
    and ``kernel`` is ``(C_out, C_in, k)``;
    ``out[..., o, t] = sum_{c, j} kernel[o, c, j] * x[..., c, t + j * dilation]``.
    The taps are gathered side by side so the whole convolution is one matmul.
    """
    if dilation < 1:
        raise ValueError(f"{name}: dilation must be >= 1, got {dilation}")
    c_out, c_in, k = kernel.shape
    xl = x if channels_last else x.transpose(-1, -2)
    if xl.shape[-1] != c_in:
        raise ValueError(f"{name}: kernel expects {c_in} input channels, input has {xl.shape[-1]}")
    span = dilation * (k - 1)
    t_in = xl.shape[-2]
    if t_in <= span:
        raise ValueError(f"{name}: input length {t_in} too short for kernel span {span}")
    t_out = t_in - span
    taps = torch.cat([xl[..., j * dilation: j * dilation + t_out, :] for j in range(k)], dim=-1)
    out = taps @ kernel.permute(2, 1, 0).reshape(k * c_in, c_out)
    return out if channels_last else out.transpose(-1, -2)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to every tensor in ``params``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter group {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape "
                             f"{tuple(params[name].shape)} for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    n_checked: dict[str, int]
    rel_tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.rel_tol for e in self.max_rel_err.values())

    def group_passed(self, name: str) -> bool:
        return self.max_rel_err[name] < self.rel_tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.group_passed(k) else 'FAIL'} {k}: max rel err {e:.3e} "
                 f"({self.n_checked[k]} entries)" for k, e in self.max_rel_err.items()]
        return "\n".join(lines)


def finite_diff_check(loss_fn: Callable[[], float], params: Mapping[str, torch.Tensor],
                      analytic_grads: Mapping[str, torch.Tensor], eps: float = 1e-5,
                      rel_tol: float = 1e-4, max_entries: int = 64,
                      rng: Rng | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` is re-evaluated after each in-place perturbation of a single
    entry of ``params[name]``. Groups larger than ``max_entries`` are
    subsampled (without replacement) using ``rng``.
    """
    rng = rng or Rng(0).stream("gradcheck")
    errs, counts = {}, {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            grad = analytic_grads[name].reshape(-1)
            n = flat.numel()
            if n > max_entries:
                idx = np.sort(rng.np.choice(n, size=max_entries, replace=False))
            else:
                idx = np.arange(n)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic), floor)
                worst = max(worst, abs(numeric - analytic) / denom)
            errs[name] = worst
            counts[name] = len(idx)
    return GradCheckReport(errs, counts, rel_tol)
