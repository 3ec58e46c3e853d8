"""Weighted token graphs: cosine affinity, Laplacians, coarsening and lifting."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PartitionError, ShapeError, ZeroNormError

log = logging.getLogger(__name__)

D_MIN = 1e-6
CONVENTIONS = ("block_average", "block_sum")


@dataclass(frozen=True, eq=False)
class TokenGraph:
    """Symmetric nonnegative weights, optionally with a node partition.

    ``coarsening`` records how a coarse graph was built (``None`` for graphs on
    original tokens); ``floor`` is the self-loop weight added by degree flooring.
    """

    weights: np.ndarray
    partition: tuple | None = None
    coarsening: str | None = None
    group_sizes: np.ndarray | None = None
    floor: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"weights must be square, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ShapeError("weights must be finite and nonnegative")
        if not np.allclose(w, w.T, rtol=0, atol=1e-12):
            raise ShapeError("weights must be symmetric")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.partition is not None:
            object.__setattr__(self, "partition", _validate_partition(self.partition, len(w)))

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def to_dict(self) -> dict:
        d = {"N": self.N, "weights": self.weights.ravel().tolist()}
        if self.partition is not None:
            d["partition"] = [list(g) for g in self.partition]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TokenGraph:
        N = int(d["N"])
        w = np.asarray(d["weights"], dtype=np.float64).reshape(N, N)
        return cls(w, partition=d.get("partition"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def _validate_partition(partition: Sequence[Sequence[int]], N: int) -> tuple:
    groups = tuple(tuple(int(u) for u in g) for g in partition)
    seen = [u for g in groups for u in g]
    if any(len(g) == 0 for g in groups):
        raise PartitionError("partition has an empty group")
    if len(seen) != len(set(seen)):
        raise PartitionError("partition groups overlap")
    if sorted(seen) != list(range(N)):
        raise PartitionError(f"partition does not cover nodes 0..{N - 1}")
    return groups


def membership_matrix(partition: Sequence[Sequence[int]], N: int) -> np.ndarray:
    """N x n 0/1 matrix with P[u, i] = 1 iff u is in group i."""
    groups = _validate_partition(partition, N)
    P = np.zeros((N, len(groups)))
    for i, g in enumerate(groups):
        P[list(g), i] = 1.0
    return P


def floor_degrees(weights: np.ndarray, d_min: float = D_MIN) -> tuple[np.ndarray, float]:
    """Add the smallest uniform self-loop that lifts every degree to at least d_min."""
    deficit = d_min - weights.sum(axis=1).min()
    if deficit <= 0:
        return weights, 0.0
    log.info("degree flooring engaged: adding self-loops of %.3g", deficit)
    return weights + deficit * np.eye(len(weights)), float(deficit)


def cosine_affinity_graph(tokens, self_loops: bool = False, d_min: float = D_MIN) -> TokenGraph:
    """W[i, j] = (1 + cos(v_i, v_j)) / 2 on l2-normalized tokens.

    The diagonal is zero unless ``self_loops`` is set, in which case it holds
    psi(1) = 1 and tokens with equal features have identical rows.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"tokens must be (N, C), got {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError("cosine affinity needs nonzero tokens")
    u = x / norms[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos = 0.5 * (cos + cos.T)
    w = 0.5 * (1.0 + cos)
    np.fill_diagonal(w, 1.0 if self_loops else 0.0)
    w, floor = floor_degrees(w, d_min)
    return TokenGraph(w, floor=floor)


def normalized_laplacian(weights: np.ndarray) -> np.ndarray:
    d = weights.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    lap = np.eye(len(d)) - s[:, None] * weights * s[None, :]
    return 0.5 * (lap + lap.T)


def laplacians(graph: TokenGraph) -> tuple[np.ndarray, np.ndarray]:
    """Combinatorial D - W and normalized I - D^-1/2 W D^-1/2."""
    w = graph.weights
    if np.any(graph.degrees() <= 0):
        raise ShapeError("every degree must be positive; build graphs with degree flooring")
    return np.diag(graph.degrees()) - w, normalized_laplacian(w)


def coarsen(graph: TokenGraph, partition, convention: str = "block_sum") -> TokenGraph:
    """Collapse each group to one node by block-summing or block-averaging weights.

    Diagonal blocks include the u = v terms.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; expected one of {CONVENTIONS}")
    P = membership_matrix(partition, graph.N)
    sizes = P.sum(axis=0)
    wc = P.T @ graph.weights @ P
    if convention == "block_average":
        wc = wc / np.outer(sizes, sizes)
    return TokenGraph(0.5 * (wc + wc.T), coarsening=convention, group_sizes=sizes)


def lift(coarse: TokenGraph, partition) -> TokenGraph:
    """Expand a coarse graph to constant blocks over the original nodes.

    Every node pair takes the block-averaged weight of its coarse pair, so a
    block-summed coarse graph is divided by the group sizes first. Diagonal
    blocks become self-loops.
    """
    groups = tuple(tuple(g) for g in partition)
    N = sum(len(g) for g in groups)
    P = membership_matrix(groups, N)
    if coarse.N != P.shape[1]:
        raise PartitionError(f"coarse graph has {coarse.N} nodes but partition has {P.shape[1]} groups")
    wc = coarse.weights
    if coarse.coarsening == "block_sum":
        sizes = P.sum(axis=0)
        wc = wc / np.outer(sizes, sizes)
    return TokenGraph(P @ wc @ P.T, partition=groups)
