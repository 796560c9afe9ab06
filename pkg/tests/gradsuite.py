"""Shared fixture for the full joint-loss gradient check on the tiny config."""
import numpy as np
import torch

from stev.data import WindowSample
from stev.flat import flatten
from stev.focal import AugmentConfig, augment
from stev.model import StevModel
from stev.numerics import Rng, finite_diff_check
from stev.train import TrainConfig, batch_loss

from conftest import TINY

N_VARS, SPD = 6, 24
V1 = [0, 1, 2, 3]
MARGIN = 1e-3


def _batch(rng):
    # one pre-expansion sample (3 continual rows), one post-expansion sample (all 6)
    a = WindowSample(rng.normal(size=(3, 12)), rng.normal(size=(3, 3)), np.array([0, 2, 3]), 100)
    b = WindowSample(rng.normal(size=(6, 12)), rng.normal(size=(6, 3)), np.arange(6), 731)
    return flatten([a, b], V1)


def _screen(model, flat):
    """Distance of the nearest kink (adjacency gate, head ReLU, |error|) from zero,
    and whether every subgraph keeps at least one edge."""
    gaps, edges = [], True
    with torch.no_grad():
        for b in range(flat.n_subgraphs):
            raw = model.graph.build_adjacency(flat.subgraph_vars(b), int(flat.ref_time[b]))
            off = raw[~torch.eye(len(raw), dtype=torch.bool)]
            gaps.append(off.abs().min().item())
            edges &= bool((off > 0).any())
        h = model.features(flat, model.holistic_graph(flat), training=True)
        pre = h @ model.head.w1.T + model.head.b1
        gaps.append(pre.abs().min().item())
        err = model.head(h) - torch.as_tensor(flat.targets)
        gaps.append(err.abs().min().item())
    return min(gaps), edges


def screened_setup(max_tries=200):
    for seed in range(max_tries):
        rng = Rng(seed)
        model = StevModel(TINY, N_VARS, SPD, rng.stream("model"))
        # larger embeddings so the gate keeps edges at this tiny width
        with torch.no_grad():
            for t in (model.graph.E, model.graph.tod_table, model.graph.dow_table):
                t.mul_(5.0)
        flat = _batch(rng.stream("data").np)
        gap, edges = _screen(model, flat)
        if gap > MARGIN and edges:
            aug = augment(flat, AugmentConfig(), rng.stream("aug"))
            return seed, model, flat, aug
    raise RuntimeError("no screened configuration found")


def joint_loss_gradcheck(eps=1e-5, rel_tol=1e-4):
    seed, model, flat, aug = screened_setup()
    cfg = TrainConfig(variant="focal", model=TINY)
    params = dict(model.named_parameters())
    loss, _ = batch_loss(model, flat, cfg, aug_rows=aug)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {n: torch.zeros_like(p) if g is None else g
                for (n, p), g in zip(params.items(), grads)}
    report = finite_diff_check(lambda: batch_loss(model, flat, cfg, aug_rows=aug)[0].item(),
                               params, analytic, eps=eps, rel_tol=rel_tol, max_entries=10 ** 6)
    return seed, report, analytic
