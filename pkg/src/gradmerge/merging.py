"""Applying merge plans (merge / unmerge) and content-agnostic baseline planners."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .cells import (CellPartition, MergePlan, _exact_rate, _plan_from_cells, check_rate,
                    mergeable_cell_count)
from .errors import ShapeError
from .field import FeatureGrid

BASELINES = ("stride", "random", "bipartite")


@dataclass(frozen=True, eq=False)
class MergedTokens:
    """Rows of the merged token set, ordered by ascending original index."""

    features: np.ndarray  # (|B|, C)
    kept_index: np.ndarray  # (|B|,)
    H: int
    W: int

    def to_dict(self) -> dict:
        C = self.features.shape[1]
        return {"H": self.H, "W": self.W, "C": C, "kept_index": self.kept_index.tolist(),
                "values": self.features.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MergedTokens:
        kept = np.asarray(d["kept_index"], dtype=np.int64)
        feats = np.asarray(d["values"], dtype=np.float64).reshape(len(kept), int(d["C"]))
        return cls(feats, kept, int(d["H"]), int(d["W"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def apply_merge(grid: FeatureGrid, plan: MergePlan) -> MergedTokens:
    """Each kept token becomes the plain mean of itself and every source mapped to it."""
    if (grid.H, grid.W) != (plan.H, plan.W):
        raise ShapeError(f"plan is for {plan.H}x{plan.W}, grid is {grid.H}x{grid.W}")
    x = grid.tokens()
    dest = plan.destination_index()
    sums = np.zeros_like(x)
    np.add.at(sums, dest, x)
    counts = np.bincount(dest, minlength=plan.n_tokens).astype(np.float64)
    kept = np.asarray(plan.kept, dtype=np.int64)
    return MergedTokens(sums[kept] / counts[kept, None], kept, plan.H, plan.W)


def apply_unmerge(merged: MergedTokens, plan: MergePlan) -> FeatureGrid:
    """Copy each merged row back to its destination and every source of that destination."""
    kept = np.asarray(plan.kept, dtype=np.int64)
    if (merged.H, merged.W) != (plan.H, plan.W) or not np.array_equal(merged.kept_index, kept):
        raise ShapeError("merged tokens do not belong to this plan")
    row_of = np.full(plan.n_tokens, -1, dtype=np.int64)
    row_of[kept] = np.arange(len(kept))
    out = merged.features[row_of[plan.destination_index()]]
    return FeatureGrid.from_tokens(out, plan.H, plan.W)


def _bipartite_plan(grid: FeatureGrid, partition: CellPartition, r: float) -> MergePlan:
    # even tokens are destinations, odd tokens candidate sources
    x = grid.tokens()
    norms = np.linalg.norm(x, axis=1)
    u = x / np.where(norms > 0, norms, 1.0)[:, None]
    N = grid.n_tokens
    win = partition.layout.window_ids(grid.H, grid.W)
    even = np.arange(0, N, 2)
    odd = np.arange(1, N, 2)
    sim = u[odd] @ u[even].T
    sim[win[odd][:, None] != win[even][None, :]] = -np.inf
    match = np.argmax(sim, axis=1)
    best = sim[np.arange(len(odd)), match]
    n_merge = min(math.ceil(_exact_rate(r) * N), int(np.isfinite(best).sum()))
    order = sorted(range(len(odd)), key=lambda i: (-best[i], odd[i]))[:n_merge]
    pi = {int(odd[i]): int(even[match[i]]) for i in order}
    sources = np.array(sorted(pi), dtype=np.int64)
    kept = np.setdiff1d(np.arange(N), sources)
    return MergePlan(H=grid.H, W=grid.W, s_x=1, s_y=1, rate=float(r), sources=sources,
                     kept=kept, pi=pi)


def baseline_plan(partition: CellPartition, r: float, strategy: str, seed: int | None = None,
                  grid: FeatureGrid | None = None) -> MergePlan:
    """Merge plans that ignore gradient energy.

    ``stride``: the first cells in scan order, each merged into its top-left token.
    ``random``: cells and destinations drawn from ``default_rng(seed)``.
    ``bipartite``: one round of parity-split cosine matching (needs ``grid``).
    """
    check_rate(r)
    if strategy == "bipartite":
        if grid is None:
            raise ValueError("bipartite baseline needs the token grid")
        return _bipartite_plan(grid, partition, r)
    M = mergeable_cell_count(r, partition.H, partition.W, partition.s_x, partition.s_y,
                             partition.n_cells)
    if strategy == "stride":
        cells = list(range(M))
        dsts = [int(partition.cells[c][0]) for c in cells]
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        cells = sorted(int(c) for c in rng.choice(partition.n_cells, size=M, replace=False))
        dsts = [int(partition.cells[c][rng.integers(partition.cell_size)]) for c in cells]
    else:
        raise ValueError(f"unknown baseline {strategy!r}; expected one of {BASELINES}")
    return _plan_from_cells(partition, r, zip(cells, dsts))
