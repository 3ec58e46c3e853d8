"""Window-aligned cell partitioning and gradient-guided merge plans."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import kernels
from .errors import BoxError, DivisibilityError, EmptyMaskError, RateError, ShapeError
from .field import GradientField

log = logging.getLogger(__name__)

CELL_STRATEGIES = ("max", "mean", "random")
DST_STRATEGIES = ("min_grad", "max_grad", "random")


@dataclass(frozen=True)
class WindowLayout:
    """Attention windows over the token grid. ``kind="global"`` means one window."""

    kind: str = "global"
    window_h: int | None = None
    window_w: int | None = None

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ValueError(f"window kind must be 'global' or 'local', got {self.kind!r}")
        if self.kind == "local" and (not self.window_h or not self.window_w
                                     or self.window_h < 1 or self.window_w < 1):
            raise ValueError("local windows need positive window_h and window_w")

    @classmethod
    def local(cls, size: int, size_w: int | None = None) -> WindowLayout:
        return cls("local", size, size if size_w is None else size_w)

    def dims(self, H: int, W: int) -> tuple[int, int]:
        if self.kind == "global":
            return H, W
        return self.window_h, self.window_w

    def window_ids(self, H: int, W: int) -> np.ndarray:
        """Window id of every token (row-major), windows numbered row-major."""
        wh, ww = self.dims(H, W)
        if H % wh or W % ww:
            raise DivisibilityError(f"{wh}x{ww} windows do not tile a {H}x{W} grid")
        hh, ww_ = np.divmod(np.arange(H * W), W)
        return (hh // wh) * (W // ww) + ww_ // ww


@dataclass(frozen=True, eq=False)
class CellPartition:
    """Non-overlapping s_y x s_x cells; ``cells[m]`` lists token indices row-major."""

    H: int
    W: int
    s_x: int
    s_y: int
    layout: WindowLayout
    cells: np.ndarray  # (M, s_x * s_y) int64
    window_of_cell: np.ndarray  # (M,) int64

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def cell_size(self) -> int:
        return self.s_x * self.s_y

    def cell_of_token(self) -> np.ndarray:
        out = np.empty(self.H * self.W, dtype=np.int64)
        out[self.cells.ravel()] = np.repeat(np.arange(self.n_cells), self.cell_size)
        return out


class Box(NamedTuple):
    """Inclusive pixel rectangle, corners as (row, col)."""

    top: int
    left: int
    bottom: int
    right: int


@dataclass(frozen=True, eq=False)
class MergePlan:
    """Source set A, kept set B and the unmerge map pi from each source to its destination."""

    H: int
    W: int
    s_x: int
    s_y: int
    rate: float
    sources: np.ndarray
    kept: np.ndarray
    pi: dict
    mergeable_cells: list = field(default_factory=list)
    protected_cells: list = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.H * self.W

    def destination_index(self) -> np.ndarray:
        """For every token, the token whose merged row it reads back (itself if kept)."""
        dest = np.arange(self.n_tokens)
        if self.pi:
            src = np.fromiter(self.pi.keys(), dtype=np.int64, count=len(self.pi))
            dst = np.fromiter(self.pi.values(), dtype=np.int64, count=len(self.pi))
            dest[src] = dst
        return dest

    def groups(self) -> list[list[int]]:
        """Merge groups (destination first, then its sources ascending), one per kept token."""
        members = {int(b): [int(b)] for b in self.kept}
        for src in sorted(self.pi):
            members[self.pi[src]].append(int(src))
        return [members[int(b)] for b in self.kept]

    def check(self) -> None:
        """Raise AssertionError if a structural invariant is violated."""
        A = set(int(a) for a in self.sources)
        B = set(int(b) for b in self.kept)
        assert not (A & B), "sources and kept tokens overlap"
        assert A | B == set(range(self.n_tokens)), "plan does not cover every token"
        assert set(self.pi) == A, "pi is not total on the source set"
        assert all(d in B for d in self.pi.values()), "pi maps into a source"

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "W": self.W,
            "r": self.rate,
            "s_x": self.s_x,
            "s_y": self.s_y,
            "mergeable_cells": [{"cell": int(c), "dst": int(d)} for c, d in self.mergeable_cells],
            "protected_cells": [int(c) for c in self.protected_cells],
            "pi": [{"src": int(s), "dst": int(self.pi[s])} for s in sorted(self.pi)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MergePlan:
        pi = {int(e["src"]): int(e["dst"]) for e in d["pi"]}
        N = int(d["H"]) * int(d["W"])
        sources = np.array(sorted(pi), dtype=np.int64)
        kept = np.setdiff1d(np.arange(N), sources)
        return cls(
            H=int(d["H"]), W=int(d["W"]), s_x=int(d["s_x"]), s_y=int(d["s_y"]),
            rate=float(d["r"]), sources=sources, kept=kept, pi=pi,
            mergeable_cells=[(int(e["cell"]), int(e["dst"])) for e in d.get("mergeable_cells", [])],
            protected_cells=[int(c) for c in d.get("protected_cells", [])],
        )


def partition_cells(H: int, W: int, layout: WindowLayout, s_x: int, s_y: int) -> CellPartition:
    """Tile the grid with cells that never cross a window boundary.

    Cells are numbered row-major by window, then row-major within the window.
    """
    if min(H, W, s_x, s_y) < 1:
        raise DivisibilityError("grid and cell sizes must be positive")
    wh, ww = layout.dims(H, W)
    if H % wh or W % ww:
        raise DivisibilityError(f"{wh}x{ww} windows do not tile a {H}x{W} grid")
    if wh % s_y or ww % s_x:
        raise DivisibilityError(f"{s_y}x{s_x} cells do not tile {wh}x{ww} windows")
    cells, owners = [], []
    local = (np.arange(s_y)[:, None] * W + np.arange(s_x)[None, :]).ravel()
    for win, (h0, w0) in enumerate((h, w) for h in range(0, H, wh) for w in range(0, W, ww)):
        for ch in range(h0, h0 + wh, s_y):
            for cw in range(w0, w0 + ww, s_x):
                cells.append(ch * W + cw + local)
                owners.append(win)
    return CellPartition(H, W, s_x, s_y, layout, np.array(cells, dtype=np.int64),
                         np.array(owners, dtype=np.int64))


def _check_field(partition: CellPartition, G: GradientField) -> None:
    if (G.H, G.W) != (partition.H, partition.W):
        raise ShapeError(f"gradient field {G.H}x{G.W} does not match grid {partition.H}x{partition.W}")


def cell_flatness(partition: CellPartition, G: GradientField, aggregation: str = "max") -> np.ndarray:
    """Negated max (or mean) energy per cell; higher means flatter."""
    _check_field(partition, G)
    agg = {"max": kernels.AGG_MAX, "mean": kernels.AGG_MEAN}[aggregation]
    scores, _ = kernels.cell_reduce(G.flat(), partition.cells, agg, -1)
    return scores


def _exact_rate(r: float) -> Fraction:
    # decimal reading of r, so 0.1 * 30 is exactly 3
    return Fraction(repr(float(r)))


def check_rate(r: float) -> None:
    if not (0.0 <= r < 1.0) or math.isnan(r):
        raise RateError(f"merge rate must lie in [0, 1), got {r}")


def mergeable_cell_count(r: float, H: int, W: int, s_x: int, s_y: int,
                         n_cells: int | None = None) -> int:
    """Cells needed to remove r*H*W tokens: ceil(r H W / (s_x s_y - 1)), clamped to the cell count."""
    check_rate(r)
    k = s_x * s_y - 1
    if k < 1:
        raise DivisibilityError("cells must hold at least two tokens")
    count = math.ceil(_exact_rate(r) * H * W / k)
    total = (H * W) // (s_x * s_y) if n_cells is None else n_cells
    if count > total:
        log.warning("merge rate %s needs %d cells but only %d exist; clamping", r, count, total)
        count = total
    return count


def select_mergeable_cells(scores, M_merge: int) -> tuple[list[int], list[int]]:
    """Top-M_merge cells by score (ties to the lower id); the rest are protected."""
    scores = np.asarray(scores, dtype=np.float64)
    if M_merge > len(scores):
        raise ValueError(f"cannot select {M_merge} of {len(scores)} cells")
    order = sorted(range(len(scores)), key=lambda m: (-scores[m], m))
    return sorted(order[:M_merge]), sorted(order[M_merge:])


def select_destination(cell_tokens: Sequence[int], S, sigma: int = -1) -> int:
    """argmax over the cell of sigma * S, ties to the smallest token index."""
    S = np.asarray(S, dtype=np.float64).ravel()
    return min((int(t) for t in cell_tokens), key=lambda t: (-sigma * S[t], t))


def _plan_from_cells(partition: CellPartition, rate: float, chosen: Sequence[tuple[int, int]]) -> MergePlan:
    chosen = sorted((int(c), int(d)) for c, d in chosen)
    mergeable = {c for c, _ in chosen}
    pi = {}
    for c, dst in chosen:
        for t in partition.cells[c]:
            if t != dst:
                pi[int(t)] = dst
    sources = np.array(sorted(pi), dtype=np.int64)
    kept = np.setdiff1d(np.arange(partition.H * partition.W), sources)
    return MergePlan(
        H=partition.H, W=partition.W, s_x=partition.s_x, s_y=partition.s_y, rate=float(rate),
        sources=sources, kept=kept, pi=pi, mergeable_cells=chosen,
        protected_cells=[m for m in range(partition.n_cells) if m not in mergeable],
    )


def _destinations(partition: CellPartition, G: GradientField, cells: Sequence[int],
                  dst_strategy: str, rng: np.random.Generator | None) -> list[int]:
    if dst_strategy == "random":
        return [int(partition.cells[c][rng.integers(partition.cell_size)]) for c in cells]
    sigma = {"min_grad": -1, "max_grad": 1}[dst_strategy]
    rows = partition.cells[np.asarray(cells, dtype=np.int64)]
    _, dst = kernels.cell_reduce(G.flat(), rows, kernels.AGG_MAX, sigma)
    return [int(d) for d in dst]


def build_merge_plan(partition: CellPartition, G: GradientField, r: float,
                     dst_strategy: str = "min_grad", cell_strategy: str = "max",
                     seed: int | None = None) -> MergePlan:
    """Algorithm-1 merge plan: flattest cells merge into their lowest-energy token.

    ``cell_strategy`` is ``"max"`` or ``"mean"`` flatness, or ``"random"``;
    ``dst_strategy`` is ``"min_grad"``, ``"max_grad"`` or ``"random"``. Random
    choices draw from ``numpy.random.default_rng(seed)``.
    """
    _check_field(partition, G)
    if cell_strategy not in CELL_STRATEGIES:
        raise ValueError(f"unknown cell strategy {cell_strategy!r}")
    if dst_strategy not in DST_STRATEGIES:
        raise ValueError(f"unknown destination strategy {dst_strategy!r}")
    M = mergeable_cell_count(r, partition.H, partition.W, partition.s_x, partition.s_y,
                             partition.n_cells)
    rng = np.random.default_rng(seed)
    if cell_strategy == "random":
        mergeable = sorted(int(c) for c in rng.choice(partition.n_cells, size=M, replace=False))
    else:
        mergeable, _ = select_mergeable_cells(cell_flatness(partition, G, cell_strategy), M)
    dsts = _destinations(partition, G, mergeable, dst_strategy, rng)
    return _plan_from_cells(partition, r, zip(mergeable, dsts))


def no_cell_plan(partition: CellPartition, G: GradientField, r: float) -> MergePlan:
    """Cell-free ablation: the lowest-energy tokens merge into their nearest kept token.

    Removes the same number of tokens as the cell plan. Each window keeps its
    lowest-energy token, and a source only maps to a kept token of its own window
    (nearest by squared grid distance, ties to the lower index).
    """
    _check_field(partition, G)
    M = mergeable_cell_count(r, partition.H, partition.W, partition.s_x, partition.s_y,
                             partition.n_cells)
    n_remove = M * (partition.cell_size - 1)
    g = G.flat()
    N = partition.H * partition.W
    win = partition.layout.window_ids(partition.H, partition.W)
    reserved = {int(min(np.flatnonzero(win == w), key=lambda t: (g[t], t))) for w in np.unique(win)}
    order = sorted((t for t in range(N) if t not in reserved), key=lambda t: (g[t], t))
    sources = np.array(sorted(order[:n_remove]), dtype=np.int64)
    kept = np.setdiff1d(np.arange(N), sources)
    rows, cols = np.divmod(np.arange(N), partition.W)
    pi = {}
    for t in sources:
        cand = kept[win[kept] == win[t]]
        d2 = (rows[cand] - rows[t]) ** 2 + (cols[cand] - cols[t]) ** 2
        pi[int(t)] = int(cand[np.argmin(d2)])  # cand ascending, argmin takes the first
    return MergePlan(H=partition.H, W=partition.W, s_x=partition.s_x, s_y=partition.s_y,
                     rate=float(r), sources=sources, kept=kept, pi=pi,
                     mergeable_cells=[], protected_cells=[])


def box_to_token_rect(box: Box, patch_size: int) -> tuple[int, int, int, int]:
    """Half-open token rectangle (row0, col0, row1, col1) covering an inclusive pixel box.

    Min corners are floored, max corners (as exclusive pixel bounds) ceiled.
    """
    if box.bottom < box.top or box.right < box.left:
        raise BoxError(f"degenerate box {box}")
    return (box.top // patch_size, box.left // patch_size,
            -(-(box.bottom + 1) // patch_size), -(-(box.right + 1) // patch_size))


def prompt_aware_plan(partition: CellPartition, G: GradientField, box: Box, patch_size: int,
                      r_in: float, r_out: float) -> MergePlan:
    """Merge gently inside a box prompt and aggressively outside it.

    A cell counts as inside when it intersects the token rectangle of the box.
    Each population gets its own cell budget from the Algorithm-1 formula and
    picks its flattest cells.
    """
    _check_field(partition, G)
    check_rate(r_in)
    check_rate(r_out)
    if r_in > r_out:
        raise RateError(f"inside rate {r_in} exceeds outside rate {r_out}")
    if box.top < 0 or box.left < 0 or box.bottom >= partition.H * patch_size \
            or box.right >= partition.W * patch_size:
        raise BoxError(f"box {box} exceeds the {partition.H * patch_size}x{partition.W * patch_size} image")
    r0, c0, r1, c1 = box_to_token_rect(box, patch_size)
    if r1 <= r0 or c1 <= c0:
        raise BoxError(f"box {box} covers no tokens")
    if r_in == r_out:
        return build_merge_plan(partition, G, r_in)
    rows, cols = np.divmod(partition.cells, partition.W)
    inside = np.any((rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1), axis=1)
    scores = cell_flatness(partition, G, "max")
    chosen = []
    for mask, rate in ((inside, r_in), (~inside, r_out)):
        ids = np.flatnonzero(mask)
        if len(ids) == 0:
            continue
        M = mergeable_cell_count(rate, 1, len(ids) * partition.cell_size,
                                 partition.s_x, partition.s_y, len(ids))
        picked, _ = select_mergeable_cells(scores[ids], M)
        cells = [int(ids[p]) for p in picked]
        chosen.extend(zip(cells, _destinations(partition, G, cells, "min_grad", None)))
    return _plan_from_cells(partition, r_out, chosen)


def box_from_mask(mask) -> Box:
    """Tight box around pixels strictly above 128."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    rows, cols = np.nonzero(mask > 128)
    if rows.size == 0:
        raise EmptyMaskError("no mask pixel exceeds 128")
    return Box(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def read_mask(path) -> np.ndarray:
    """Load a PGM (P5/P2) or a flat CSV integer mask."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int64)
    with open(path, newline="") as fh:
        rows = [[int(float(v)) for v in row] for row in csv.reader(fh) if row]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ShapeError(f"{path} is not a rectangular CSV mask")
    return np.array(rows, dtype=np.int64)


def save_plan(plan: MergePlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True))


def load_plan(path) -> MergePlan:
    return MergePlan.from_dict(json.loads(Path(path).read_text()))
