"""The full forecaster (graph learner, feature extractor, projection, head),
its forward cache, gradient entry point and checkpoint format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .flat import FlatBatch, HolisticGraph, assemble_graph, rows_tensor
from .focal import Projection
from .graph import GraphParams
from .numerics import DTYPE, Rng
from .stfe import GraphOperator, ModelConfig, OutputHead, Stfe

CHECKPOINT_FORMAT = "stev-checkpoint/1"


class CheckpointError(ValueError):
    pass


class StevModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_vars: int, steps_per_day: int, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.cfg = cfg
        self.n_vars = n_vars
        self.steps_per_day = steps_per_day
        self.graph = GraphParams(n_vars, steps_per_day, cfg.node_dim, cfg.time_dim,
                                 rng.stream("graph"))
        self.stfe = Stfe(cfg, rng.stream("stfe"))
        self.proj = Projection(cfg.channels, cfg.proj_dim, rng.stream("proj"))
        self.head = OutputHead(cfg.channels, cfg.head_channels, cfg.Q, rng.stream("head"))

    def holistic_graph(self, flat: FlatBatch) -> HolisticGraph:
        return assemble_graph(flat, self.graph.adjacency)

    def features(self, flat: FlatBatch, graph: HolisticGraph | GraphOperator,
                 rows=None, training: bool = False) -> torch.Tensor:
        return self.stfe(rows_tensor(flat, rows), graph, training)

    def forecast(self, flat: FlatBatch, training: bool = False) -> torch.Tensor:
        op = GraphOperator(self.holistic_graph(flat))
        return self.head(self.features(flat, op, training=training))

    def tensors(self) -> dict[str, torch.Tensor]:
        """Parameters and running statistics under canonical dotted names."""
        return dict(self.state_dict(keep_vars=True))

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "model": self.cfg.to_dict(),
            "n_vars": self.n_vars,
            "steps_per_day": self.steps_per_day,
            "meta": meta or {},
            "tensors": {name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
                        for name, t in self.state_dict().items()},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> tuple["StevModel", dict]:
        try:
            doc = json.loads(Path(path).read_text())
            if doc.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
            model = cls(ModelConfig(**doc["model"]), doc["n_vars"], doc["steps_per_day"])
            state = model.state_dict()
            tensors = doc["tensors"]
            if set(tensors) != set(state):
                missing = sorted(set(state) ^ set(tensors))
                raise CheckpointError(f"{path}: tensor names disagree with model: {missing[:5]}")
            loaded = {}
            for name, entry in tensors.items():
                t = torch.tensor(entry["data"], dtype=DTYPE).reshape(entry["shape"])
                if t.shape != state[name].shape:
                    raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, "
                                          f"expected {tuple(state[name].shape)}")
                loaded[name] = t
            model.load_state_dict(loaded)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        return model, doc.get("meta", {})


@dataclass
class ForwardCache:
    features: torch.Tensor
    forecast: torch.Tensor
    training: bool


def stfe_forward(model: StevModel, flat: FlatBatch, graph: HolisticGraph | None = None,
                 training: bool = True) -> ForwardCache:
    graph = graph if graph is not None else model.holistic_graph(flat)
    h = model.features(flat, graph, training=training)
    return ForwardCache(features=h, forecast=model.head(h), training=training)


def stfe_backward(model: StevModel, cache: ForwardCache, d_features: torch.Tensor,
                  d_forecast: torch.Tensor) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product of (features, forecast) for every parameter.

    Parameters the outputs do not depend on receive zero gradients.
    """
    if not cache.training:
        raise RuntimeError("stfe_backward requires a training-mode forward cache")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad([cache.features, cache.forecast], params,
                                grad_outputs=[d_features, d_forecast],
                                retain_graph=True, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g
            for n, p, g in zip(names, params, grads)}
