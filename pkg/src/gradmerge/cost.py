"""Toy merge-compute-unmerge attention pipeline and an arithmetic (MAC) cost model."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cells import MergePlan, _exact_rate, check_rate
from .errors import ShapeError
from .field import FeatureGrid
from .merging import apply_merge, apply_unmerge, MergedTokens

ENERGY_METHODS = ("pairwise", "central", "sobel")
COST_MODES = ("attention", "block")
TERMS = ("qkv_proj", "attention", "mlp", "energy", "bookkeeping")


# ---------------------------------------------------------------- attention

@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Query/key/value/output projections, each (C, C), applied as ``x @ W``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @property
    def C(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def seeded(cls, C: int, seed: int = 0) -> AttentionWeights:
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, C, C)) / math.sqrt(C)
        return cls(*w)


def _attend(x: np.ndarray, weights: AttentionWeights, heads: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weights.C:
        raise ShapeError(f"tokens must be (N, {weights.C}), got {x.shape}")
    N, C = x.shape
    if heads < 1 or C % heads:
        raise ShapeError(f"{heads} heads do not divide C={C}")
    dh = C // heads
    q = (x @ weights.wq).reshape(N, heads, dh).transpose(1, 0, 2)
    k = (x @ weights.wk).reshape(N, heads, dh).transpose(1, 0, 2)
    v = (x @ weights.wv).reshape(N, heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    logits -= logits.max(axis=2, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=2, keepdims=True)
    out = (p @ v).transpose(1, 0, 2).reshape(N, C)
    return out @ weights.wo


def global_attention(tokens, weights: AttentionWeights, heads: int = 1) -> np.ndarray:
    """Multi-head scaled dot-product attention over every token."""
    return _attend(tokens, weights, heads)


def windowed_attention(tokens, weights: AttentionWeights, heads: int = 1) -> np.ndarray:
    """Attention restricted to one window's tokens (same maths as the global case)."""
    return _attend(tokens, weights, heads)


def token_windows(H: int, W: int, window: int | None) -> np.ndarray:
    """Window id per token; edge windows may be partial (the padded area holds no tokens)."""
    if window is None:
        return np.zeros(H * W, dtype=np.int64)
    h, w = np.divmod(np.arange(H * W), W)
    return (h // window) * (-(-W // window)) + w // window


def merge_compute_unmerge_block(grid: FeatureGrid, plan: MergePlan, kind: str = "global",
                                window: int = 14, weights: AttentionWeights | None = None,
                                heads: int = 1,
                                attention: Callable[[np.ndarray], np.ndarray] | None = None) -> FeatureGrid:
    """Merge, run attention on the kept tokens, duplicate the outputs back.

    For ``kind="local"`` each merged token attends only within the window of its
    kept (destination) token. ``attention`` overrides the seeded attention, e.g.
    with the identity for recovery checks.
    """
    if kind not in ("global", "local"):
        raise ValueError(f"layer kind must be 'global' or 'local', got {kind!r}")
    merged = apply_merge(grid, plan)
    if attention is None:
        weights = weights or AttentionWeights.seeded(grid.C)
        attention = lambda x: _attend(x, weights, heads)  # noqa: E731
    feats = merged.features
    if kind == "global":
        out = attention(feats)
    else:
        win = token_windows(plan.H, plan.W, window)[merged.kept_index]
        out = np.empty_like(feats)
        for w in np.unique(win):
            rows = np.flatnonzero(win == w)
            out[rows] = attention(feats[rows])
    out = np.asarray(out, dtype=np.float64)
    if out.shape != feats.shape:
        raise ShapeError("attention must preserve the token shape")
    return apply_unmerge(MergedTokens(out, merged.kept_index, plan.H, plan.W), plan)


# ---------------------------------------------------------------- cost model

def energy_cost(N: int, C: int, method: str = "sobel", d_sim: int = 64) -> int:
    """MACs to score N tokens of width C.

    pairwise: N^2 d_sim. central: N (4C + 1). sobel: N (22C + 2C + 1).
    """
    if N < 1 or C < 1 or d_sim < 1:
        raise ValueError("energy cost needs positive dimensions")
    if method == "pairwise":
        return N * N * d_sim
    if method == "central":
        return N * (4 * C + 1)
    if method == "sobel":
        return N * (2 * 11 * C + 2 * C + 1)
    raise ValueError(f"unknown energy method {method!r}")


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "local"
    rate: float = 0.0
    s: int = 2

    def __post_init__(self):
        if self.kind not in ("global", "local"):
            raise ValueError(f"layer kind must be 'global' or 'local', got {self.kind!r}")
        check_rate(self.rate)
        if self.s < 1 or self.s * self.s < 2:
            raise ValueError("cell side must be at least 2")


@dataclass(frozen=True)
class LayerSchedule:
    layers: tuple = ()
    H: int = 64
    W: int = 64
    C: int = 768
    window: int = 14
    patch: int = 16
    d_sim: int = 64
    mlp_ratio: int = 4
    energy: str = "sobel"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if min(self.H, self.W, self.C, self.window, self.patch, self.d_sim, self.mlp_ratio) < 1:
            raise ValueError("schedule dimensions must be positive")
        if self.energy not in ENERGY_METHODS:
            raise ValueError(f"unknown energy method {self.energy!r}")

    def with_rate(self, rate: float) -> LayerSchedule:
        return LayerSchedule(tuple(LayerSpec(l.kind, rate, l.s) for l in self.layers),
                             self.H, self.W, self.C, self.window, self.patch, self.d_sim,
                             self.mlp_ratio, self.energy)

    def padded(self) -> tuple[int, int]:
        return (-(-self.H // self.window) * self.window, -(-self.W // self.window) * self.window)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LayerSchedule:
        return cls(**d)


def preset(name: str, rate: float = 0.0, s: int = 2) -> LayerSchedule:
    """ViT-B / ViT-L image-encoder shapes; global attention closes each quarter of the depth."""
    dims = {"vitb": (12, 768), "vitl": (24, 1024)}
    if name not in dims:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(dims)}")
    depth, C = dims[name]
    step = depth // 4
    layers = tuple(LayerSpec("global" if (i + 1) % step == 0 else "local", rate, s) for i in range(depth))
    return LayerSchedule(layers, C=C)


def _merged_count(n: int, cell_tokens: int, rate: float) -> int:
    """Tokens removed from a population of n real tokens by whole-cell merges."""
    if rate == 0:
        return 0
    k = cell_tokens - 1
    cells = min(math.ceil(_exact_rate(rate) * n / k), n // cell_tokens)
    return cells * k


def _window_populations(sched: LayerSchedule) -> list[int]:
    # real tokens inside each (padded) window
    wn = sched.window
    rows = [min(wn, sched.H - h) for h in range(0, sched.H, wn)]
    cols = [min(wn, sched.W - w) for w in range(0, sched.W, wn)]
    return [r * c for r in rows for c in cols]


def layer_cost(sched: LayerSchedule, layer: LayerSpec, mode: str = "attention") -> dict[str, int]:
    """MAC terms of one block.

    Local layers run attention and projections on padded windows. The MLP acts
    on real tokens. In ``attention`` mode merging shrinks projections and the
    attention matrix; ``block`` mode also runs the MLP on merged tokens.
    """
    if mode not in COST_MODES:
        raise ValueError(f"unknown cost mode {mode!r}")
    C = sched.C
    N = sched.H * sched.W
    cell = layer.s * layer.s
    if layer.kind == "global":
        removed = _merged_count(N, cell, layer.rate)
        pops = [N - removed]
    else:
        full = sched.window * sched.window
        removed = 0
        pops = []
        for real in _window_populations(sched):
            m = _merged_count(real, cell, layer.rate)
            removed += m
            pops.append(full - m)
    n_proj = sum(pops)
    n_mlp = N - removed if mode == "block" else N
    terms = {
        "qkv_proj": 4 * n_proj * C * C,
        "attention": 2 * sum(p * p for p in pops) * C,
        "mlp": 2 * sched.mlp_ratio * n_mlp * C * C,
        "energy": 0,
        "bookkeeping": 0,
    }
    if layer.rate > 0:
        if sched.energy == "pairwise":
            terms["energy"] = (energy_cost(N, C, "pairwise", sched.d_sim) if layer.kind == "global"
                               else len(pops) * energy_cost(sched.window ** 2, C, "pairwise", sched.d_sim))
        else:
            terms["energy"] = energy_cost(N, C, sched.energy)
        terms["bookkeeping"] = 2 * N * C  # group sums on merge, row copies on unmerge
    return terms


@dataclass
class CostReport:
    schedule: dict
    mode: str
    patch_embed: int
    baseline: list = field(default_factory=list)  # per-layer term dicts at r = 0
    merged: list = field(default_factory=list)

    @property
    def baseline_total(self) -> int:
        return self.patch_embed + sum(sum(t.values()) for t in self.baseline)

    @property
    def merged_total(self) -> int:
        return self.patch_embed + sum(sum(t.values()) for t in self.merged)

    @property
    def reduction(self) -> float:
        return 1.0 - self.merged_total / self.baseline_total

    def to_dict(self) -> dict:
        return {"schedule": self.schedule, "mode": self.mode, "patch_embed": self.patch_embed,
                "baseline": self.baseline, "merged": self.merged,
                "baseline_total": self.baseline_total, "merged_total": self.merged_total,
                "reduction": self.reduction}

    def rows(self, energy_rows: bool = True) -> list[dict]:
        """Flat (layer, kind, term, macs) records for CSV output."""
        kinds = [l["kind"] for l in self.schedule["layers"]]
        out = [{"layer": "embed", "kind": "patch", "term": "patch_embed", "macs": self.patch_embed}]
        for run, per_layer in (("baseline", self.baseline), ("merged", self.merged)):
            for i, terms in enumerate(per_layer):
                for term in TERMS:
                    out.append({"layer": f"{run}:{i}", "kind": kinds[i], "term": term, "macs": terms[term]})
        out.append({"layer": "total", "kind": "baseline", "term": "all", "macs": self.baseline_total})
        out.append({"layer": "total", "kind": "merged", "term": "all", "macs": self.merged_total})
        if energy_rows:
            sched = LayerSchedule.from_dict(self.schedule)
            N = sched.H * sched.W
            wins = _window_populations(sched)
            full = sched.window * sched.window
            for method in ENERGY_METHODS:
                g = energy_cost(N, sched.C, method, sched.d_sim)
                w = sum(energy_cost(full if method == "pairwise" else p, sched.C, method, sched.d_sim)
                        for p in wins)
                out.append({"layer": "energy", "kind": "global", "term": method, "macs": g})
                out.append({"layer": "energy", "kind": "local", "term": method, "macs": w})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer", "kind", "term", "macs"])
            writer.writeheader()
            writer.writerows(self.rows())

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


def encoder_cost(sched: LayerSchedule, mode: str = "attention") -> CostReport:
    """Baseline (r = 0) and merged MAC counts for every block plus patch embedding."""
    patch_embed = sched.H * sched.W * sched.C * sched.patch * sched.patch * 3
    base = [layer_cost(sched, LayerSpec(l.kind, 0.0, l.s), mode) for l in sched.layers]
    merged = [layer_cost(sched, l, mode) for l in sched.layers]
    return CostReport(sched.to_dict(), mode, patch_embed, base, merged)


def pairwise_window_cost(windows: Sequence[int], d_sim: int = 64) -> int:
    return sum(energy_cost(n, 1, "pairwise", d_sim) for n in windows)
