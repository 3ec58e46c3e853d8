"""Spectral discrepancy between token graphs and their merged-then-lifted proxies."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .cells import MergePlan, WindowLayout
from .errors import AsymmetryError, LengthError, ShapeError
from .field import FeatureGrid
from .graph import TokenGraph, coarsen, cosine_affinity_graph, lift, normalized_laplacian

MAX_N = 1024
TRACE_MODES = ("contract", "rebuild")


def sym_eigenvalues(M) -> np.ndarray:
    """Ascending eigenvalues of a dense symmetric matrix (LAPACK syevd)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got {M.shape}")
    if M.shape[0] > MAX_N:
        raise ShapeError(f"dense eigensolver is capped at N={MAX_N}")
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-10:
        raise AsymmetryError("matrix is not symmetric within 1e-10")
    return np.linalg.eigvalsh(0.5 * (M + M.T))


def laplacian_spectrum(graph: TokenGraph | np.ndarray) -> np.ndarray:
    w = graph.weights if isinstance(graph, TokenGraph) else np.asarray(graph, dtype=np.float64)
    return sym_eigenvalues(normalized_laplacian(w))


def spectral_discrepancy(a, b) -> float:
    """l1 distance between the two spectra after sorting each ascending."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise LengthError(f"spectra have different lengths {a.size} and {b.size}")
    return float(np.abs(a - b).sum())


def lifted_graph(graph: TokenGraph, partition, convention: str = "block_sum") -> TokenGraph:
    return lift(coarsen(graph, partition, convention), partition)


def window_discrepancy(graph: TokenGraph, partition, convention: str = "block_sum") -> float:
    return spectral_discrepancy(laplacian_spectrum(graph),
                                laplacian_spectrum(lifted_graph(graph, partition, convention)))


def layer_discrepancy(windows: Sequence[tuple[TokenGraph, Sequence[Sequence[int]]]],
                      convention: str = "block_sum") -> float:
    """SD of one layer: sum over windows of ||lambda(orig) - lambda(lifted)||_1.

    The lifted graph is always the block-averaged one, so both conventions give
    the same value; ``convention`` only selects how the intermediate coarse graph
    is formed.
    """
    return float(sum(window_discrepancy(g, p, convention) for g, p in windows))


def encoder_distortion(layers, convention: str = "block_sum") -> float:
    """Sum of per-layer SD. Items are window lists or already computed SD values."""
    total = 0.0
    for layer in layers:
        if isinstance(layer, (int, float)):
            total += float(layer)
        else:
            total += layer_discrepancy(layer, convention)
    return total


def window_partitions(plan: MergePlan, layout: WindowLayout) -> list[tuple[np.ndarray, list[list[int]]]]:
    """Per window: its token indices and the plan's merge groups in local indices."""
    win = layout.window_ids(plan.H, plan.W)
    out = []
    groups = plan.groups()
    for w in np.unique(win):
        members = np.flatnonzero(win == w)
        local = {int(t): i for i, t in enumerate(members)}
        out.append((members, [[local[t] for t in g] for g in groups if win[g[0]] == w]))
    return out


def plan_discrepancy(grid: FeatureGrid, plan: MergePlan, layout: WindowLayout,
                     convention: str = "block_sum") -> float:
    """Layer SD of a merge plan on the self-looped cosine graph of each window."""
    tokens = grid.tokens()
    windows = [(cosine_affinity_graph(tokens[members], self_loops=True), groups)
               for members, groups in window_partitions(plan, layout)]
    return layer_discrepancy(windows, convention)


def row_drift(W, a: int, b: int) -> float:
    """||W[a,:] - W[b,:]||_1 + ||W[:,a] - W[:,b]||_1."""
    W = np.asarray(W, dtype=np.float64)
    N = W.shape[0]
    if a == b or not (0 <= a < N and 0 <= b < N):
        raise IndexError(f"need two distinct node indices in [0, {N}), got {a}, {b}")
    rows = np.abs(W[a, :] - W[b, :]).sum()
    cols = np.abs(W[:, a] - W[:, b]).sum()
    if np.array_equal(W, W.T):
        assert rows == cols
    return float(rows + cols)


class HWGap(NamedTuple):
    lhs: float  # sum (alpha_i - beta_i)^2
    rhs: float  # ||A - B||_F^2
    l1_lhs: float  # ||alpha - beta||_1
    l1_rhs: float  # sqrt(N) ||A - B||_F

    def holds(self, slack: float = 1e-12) -> bool:
        # slack only absorbs floating-point rounding of the eigensolver
        return (self.lhs <= self.rhs * (1 + slack) + slack
                and self.l1_lhs <= self.l1_rhs * (1 + slack) + slack)


def hoffman_wielandt_gap(A, B) -> HWGap:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"matrices differ in shape: {A.shape} vs {B.shape}")
    diff = sym_eigenvalues(A) - sym_eigenvalues(B)
    frob = float(np.linalg.norm(A - B, "fro"))
    return HWGap(float(diff @ diff), frob * frob, float(np.abs(diff).sum()),
                 math.sqrt(A.shape[0]) * frob)


@dataclass(frozen=True)
class InclusionReport:
    holds: bool
    max_mismatch: float
    unit_eigenvalues: int
    n_groups: int
    N: int
    convention: str


def verify_eigenvalue_inclusion(graph: TokenGraph, partition, convention: str = "block_sum",
                                tol: float = 1e-8) -> InclusionReport:
    """Compare spec(lifted) with spec(coarse) plus N - n unit eigenvalues."""
    coarse = coarsen(graph, partition, convention)
    lifted = lift(coarse, partition)
    lam_l = laplacian_spectrum(lifted)
    expected = np.sort(np.concatenate([laplacian_spectrum(coarse), np.ones(graph.N - coarse.N)]))
    mismatch = float(np.max(np.abs(lam_l - expected)))
    return InclusionReport(
        holds=mismatch <= tol, max_mismatch=mismatch,
        unit_eigenvalues=int(np.sum(np.abs(lam_l - 1.0) <= tol)),
        n_groups=coarse.N, N=graph.N, convention=convention,
    )


@dataclass(frozen=True)
class TraceStep:
    step: int
    a: int
    b: int
    delta: float
    drift: float  # ||lambda^(s) - lambda_l^(s-1)||_1, nan when spectra are skipped
    drift_sq: float
    lap_frob: float  # ||L^(s) - L_l^(s-1)||_F
    pair_distance: float  # ||v_a - v_b||_2 of the current unit-norm entity features
    constituents_a: frozenset
    constituents_b: frozenset
    within_region: bool | None


@dataclass(frozen=True)
class MergeTrace:
    steps: list = field(default_factory=list)
    N: int = 0
    mode: str = "contract"
    lambda_original: np.ndarray | None = None
    lambda_lifted: np.ndarray | None = None

    @property
    def terminal_discrepancy(self) -> float:
        if self.lambda_original is None:
            return 0.0
        return spectral_discrepancy(self.lambda_original, self.lambda_lifted)

    @property
    def telescoped_drift(self) -> float:
        return float(sum(s.drift for s in self.steps))

    @property
    def delta_sum(self) -> float:
        return float(sum(s.delta for s in self.steps))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "a", "b", "delta", "drift", "within_region"])
            for s in self.steps:
                flag = "" if s.within_region is None else int(s.within_region)
                writer.writerow([s.step, s.a, s.b, format(s.delta, ".12g"),
                                 format(s.drift, ".12g"), flag])


def merge_schedule(plan: MergePlan) -> list[tuple[int, int]]:
    """Serialized pairwise merges: per destination (ascending), sources in ascending order."""
    by_dst: dict[int, list[int]] = {}
    for src in sorted(plan.pi):
        by_dst.setdefault(plan.pi[src], []).append(src)
    return [(d, s) for d in sorted(by_dst) for s in by_dst[d]]


def _pair_average(W: np.ndarray, a: int, b: int, na: int, nb: int,
                  members_a: list, members_b: list) -> np.ndarray:
    # W is constant on the blocks of both entities, so the block average of the
    # union is a weighted mix of the two representative rows
    n = na + nb
    row = (na * W[a] + nb * W[b]) / n
    corner = (na * na * W[a, a] + 2 * na * nb * W[a, b] + nb * nb * W[b, b]) / (n * n)
    out = W.copy()
    idx = members_a + members_b
    out[idx, :] = row
    out[:, idx] = row[:, None]
    out[np.ix_(idx, idx)] = corner
    return out


def merge_trace(tokens, plan: MergePlan, ground_truth=None, mode: str = "contract",
                spectra: bool = True) -> MergeTrace:
    """Replay a plan as pairwise merges on the self-looped cosine graph of ``tokens``.

    ``contract``: the graph after each step is the pair-lifted graph of the step
    before, so the per-step drifts telescope to the terminal discrepancy.
    ``rebuild``: the graph is rebuilt from the current entity means every step.
    ``ground_truth`` is a per-token region label array.
    """
    if mode not in TRACE_MODES:
        raise ValueError(f"unknown trace mode {mode!r}")
    x = np.asarray(tokens.tokens() if isinstance(tokens, FeatureGrid) else tokens, dtype=np.float64)
    N = len(x)
    if N != plan.n_tokens:
        raise ShapeError(f"plan covers {plan.n_tokens} tokens, got {N}")
    labels = None if ground_truth is None else np.asarray(ground_truth).ravel()
    if labels is not None and len(labels) != N:
        raise ShapeError("ground truth must label every token")

    W0 = cosine_affinity_graph(x, self_loops=True).weights
    members = {u: [u] for u in range(N)}
    owner = np.arange(N)
    sums = x.copy()
    W = W0
    lam = laplacian_spectrum(W) if spectra else None
    lam0 = lam if spectra else laplacian_spectrum(W0)
    steps = []
    for k, (d, s) in enumerate(merge_schedule(plan), start=1):
        a, b = int(owner[d]), int(owner[s])
        ma, mb = members[a], members[b]
        va = sums[a] / len(ma)
        vb = sums[b] / len(mb)
        dist = float(np.linalg.norm(va / np.linalg.norm(va) - vb / np.linalg.norm(vb)))
        delta = row_drift(W, a, b)
        W_lift = _pair_average(W, a, b, len(ma), len(mb), ma, mb)
        drift = drift_sq = frob = math.nan
        if spectra:
            lam_lift = laplacian_spectrum(W_lift)
            diff = lam - lam_lift
            drift = float(np.abs(diff).sum())
            drift_sq = float(diff @ diff)
            frob = float(np.linalg.norm(normalized_laplacian(W) - normalized_laplacian(W_lift), "fro"))
        within = None if labels is None else bool(len(set(labels[ma + mb])) == 1)
        steps.append(TraceStep(k, a, b, delta, drift, drift_sq, frob, dist,
                               frozenset(ma), frozenset(mb), within))

        merged = ma + mb
        sums[a] = sums[a] + sums[b]
        members[a] = merged
        del members[b]
        owner[mb] = a
        if mode == "contract":
            W = W_lift
            lam = lam_lift if spectra else None
        else:
            feats = sums[owner] / np.array([len(members[o]) for o in owner])[:, None]
            W = cosine_affinity_graph(feats, self_loops=True).weights
            lam = laplacian_spectrum(W) if spectra else None

    groups = plan.groups()
    lifted = lifted_graph(TokenGraph(W0), groups, "block_sum")
    return MergeTrace(steps, N, mode, lam0, laplacian_spectrum(lifted))
