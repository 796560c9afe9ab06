"""Flat batching: variable-count windows become uniform univariate rows, tied
together by a block-diagonal ("holistic isolated") graph of per-sample
subgraphs."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import WindowSample
from .numerics import DTYPE


@dataclass(frozen=True)
class FlatBatch:
    rows: np.ndarray            # (B', H)
    targets: np.ndarray         # (B', Q)
    subgraph_id: np.ndarray     # (B',)
    variable_id: np.ndarray     # (B',)
    expanding: np.ndarray       # (B',) bool
    ref_time: np.ndarray        # (B,)
    offsets: np.ndarray         # (B + 1,)
    loss_mask: np.ndarray | None = None   # (B',) bool; False rows are padding

    @property
    def n_rows(self) -> int:
        return len(self.subgraph_id)

    @property
    def n_subgraphs(self) -> int:
        return len(self.offsets) - 1

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def subgraph_slice(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))

    def subgraph_vars(self, b: int) -> np.ndarray:
        return self.variable_id[self.subgraph_slice(b)]

    def with_rows(self, rows: np.ndarray) -> "FlatBatch":
        if rows.shape != self.rows.shape:
            raise ValueError(f"replacement rows {rows.shape} != {self.rows.shape}")
        return FlatBatch(rows, self.targets, self.subgraph_id, self.variable_id,
                         self.expanding, self.ref_time, self.offsets, self.loss_mask)

    def layout(self) -> dict:
        """JSON-friendly description of the batch structure (no values)."""
        return {
            "n_rows": self.n_rows,
            "offsets": self.offsets.tolist(),
            "ref_time": self.ref_time.tolist(),
            "subgraphs": [
                {"variable_id": self.subgraph_vars(b).tolist(),
                 "expanding": self.expanding[self.subgraph_slice(b)].tolist()}
                for b in range(self.n_subgraphs)
            ],
        }

    def dump_layout(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.layout(), fh, indent=2)


def flatten(batch: Sequence[WindowSample], v1: Sequence[int],
            pad_to: Sequence[int] | None = None) -> FlatBatch:
    """Stack the samples' variable rows into one flat batch.

    ``v1`` is the continual-variable set; any other variable is flagged as
    expanding. With ``pad_to`` (a full variable list) every sample is
    zero-padded to that variable set and the padded rows are excluded from the
    loss via ``loss_mask``.
    """
    if not batch:
        raise ValueError("flatten: empty batch")
    H, Q = batch[0].inputs.shape[1], batch[0].targets.shape[1]
    v1_set = set(int(v) for v in v1)
    rows, targets, sub, var, mask = [], [], [], [], []
    offsets = [0]
    for b, s in enumerate(batch):
        if s.inputs.shape[1] != H or s.targets.shape[1] != Q:
            raise ValueError(f"flatten: sample {b} has H={s.inputs.shape[1]}, Q={s.targets.shape[1]}; "
                             f"expected H={H}, Q={Q}")
        ids = np.asarray(s.variable_ids)
        order = np.argsort(ids, kind="stable")
        ids, x, y = ids[order], s.inputs[order], s.targets[order]
        real = np.ones(len(ids), dtype=bool)
        if pad_to is not None:
            full = np.asarray(sorted(pad_to))
            pos = np.searchsorted(full, ids)
            px = np.zeros((len(full), H))
            py = np.zeros((len(full), Q))
            px[pos], py[pos] = x, y
            real = np.zeros(len(full), dtype=bool)
            real[pos] = True
            ids, x, y = full, px, py
        rows.append(x)
        targets.append(y)
        var.append(ids)
        mask.append(real)
        sub.append(np.full(len(ids), b))
        offsets.append(offsets[-1] + len(ids))
    variable_id = np.concatenate(var).astype(np.int64)
    return FlatBatch(
        rows=np.concatenate(rows).astype(np.float64),
        targets=np.concatenate(targets).astype(np.float64),
        subgraph_id=np.concatenate(sub).astype(np.int64),
        variable_id=variable_id,
        expanding=np.array([v not in v1_set for v in variable_id], dtype=bool),
        ref_time=np.array([s.ref_time for s in batch], dtype=np.int64),
        offsets=np.asarray(offsets, dtype=np.int64),
        loss_mask=np.concatenate(mask) if pad_to is not None else None,
    )


def unflatten(flat: FlatBatch, row_values) -> list:
    """Split per-row values back into one matrix per original sample."""
    if row_values.shape[0] != flat.n_rows:
        raise ValueError(f"unflatten: got {row_values.shape[0]} rows, batch has {flat.n_rows}")
    return [row_values[flat.subgraph_slice(b)] for b in range(flat.n_subgraphs)]


def same_subgraph(flat: FlatBatch, i: int, j: int) -> bool:
    n = flat.n_rows
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"row index out of range [0, {n}): ({i}, {j})")
    return bool(flat.subgraph_id[i] == flat.subgraph_id[j])


@dataclass
class HolisticGraph:
    """Per-subgraph adjacency blocks; the implied B' x B' matrix is block
    diagonal, so no edge can cross subgraphs."""

    blocks: list[torch.Tensor]
    offsets: np.ndarray

    def dense(self) -> torch.Tensor:
        return torch.block_diag(*self.blocks)

    def size_groups(self) -> dict[int, list[int]]:
        """Subgraph indices grouped by block size, for batched matmuls."""
        groups: dict[int, list[int]] = {}
        for b, blk in enumerate(self.blocks):
            groups.setdefault(blk.shape[0], []).append(b)
        return groups


AdjacencyProvider = Callable[[np.ndarray, int], torch.Tensor]


def assemble_graph(flat: FlatBatch, provider: AdjacencyProvider) -> HolisticGraph:
    """Build one block per subgraph, memoized on (variable set, ref_time)."""
    memo: dict[tuple, torch.Tensor] = {}
    blocks = []
    for b in range(flat.n_subgraphs):
        ids = flat.subgraph_vars(b)
        key = (tuple(int(v) for v in ids), int(flat.ref_time[b]))
        if key not in memo:
            blk = provider(ids, int(flat.ref_time[b]))
            n = len(ids)
            if tuple(blk.shape) != (n, n):
                raise ValueError(f"assemble_graph: subgraph {b} block has shape "
                                 f"{tuple(blk.shape)}, expected ({n}, {n})")
            memo[key] = blk
        blocks.append(memo[key])
    return HolisticGraph(blocks=blocks, offsets=flat.offsets)


def rows_tensor(flat: FlatBatch, rows: np.ndarray | None = None) -> torch.Tensor:
    return torch.as_tensor(flat.rows if rows is None else rows, dtype=DTYPE)
