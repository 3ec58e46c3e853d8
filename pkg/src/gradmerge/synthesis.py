"""Synthetic separable token windows and the score-guided vs baseline trials run on them."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cells import (CellPartition, MergePlan, WindowLayout, build_merge_plan, no_cell_plan,
                    partition_cells)
from .errors import SeparabilityError, ShapeError
from .field import FeatureGrid, gradient_energy
from .merging import baseline_plan
from .spectral import MergeTrace, merge_trace

MARGIN_GAP = 0.2
MAX_ATTEMPTS = 100
STRATEGIES = ("score_guided", "stride", "random_dst", "bipartite")
ABLATIONS = ("full", "central_diff", "mean_flatness", "no_cell", "rand_cell", "max_dst", "rand_dst")


@dataclass(frozen=True, eq=False)
class RegionWindow:
    tokens: np.ndarray  # (N, C), unit rows
    labels: np.ndarray  # (H, W) region id per token
    means: np.ndarray  # (k, C) unit region directions
    margin: float
    noise: float
    seed: int | None
    rejections: int

    @property
    def H(self) -> int:
        return self.labels.shape[0]

    @property
    def W(self) -> int:
        return self.labels.shape[1]

    def grid(self) -> FeatureGrid:
        return FeatureGrid.from_tokens(self.tokens, self.H, self.W)

    def within_region_cosine(self) -> float:
        """Mean cosine over distinct token pairs sharing a region."""
        lab = self.labels.ravel()
        cos = self.tokens @ self.tokens.T
        same = (lab[:, None] == lab[None, :]) & ~np.eye(len(lab), dtype=bool)
        return float(cos[same].mean()) if same.any() else 1.0


def two_region_labels(H: int, W: int, straddle: bool = False) -> np.ndarray:
    """Left/right halves. ``straddle`` zig-zags the boundary by one token per row
    (left of W/2 - 1 on even rows, W/2 + 1 on odd rows) so cells of even width
    cut across it while the halves stay equal in size."""
    if W % 2 or (straddle and H % 2):
        raise ShapeError("two-region layouts need an even width (and even height when straddling)")
    cols = np.arange(W)[None, :]
    if not straddle:
        return np.broadcast_to(cols >= W // 2, (H, W)).astype(np.int64)
    bound = np.where(np.arange(H) % 2 == 0, W // 2 - 1, W // 2 + 1)[:, None]
    return (cols >= bound).astype(np.int64)


def labels_from_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    stack = np.asarray([np.asarray(m, dtype=bool) for m in masks])
    if not np.all(stack.sum(axis=0) == 1):
        raise ShapeError("region masks must partition the grid")
    return np.argmax(stack, axis=0).astype(np.int64)


def _region_means(k: int, C: int, cap: float, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((C, C)))
    basis = q[:, :k].T
    if k == 1 or cap >= 0.0:
        if k > C:
            raise SeparabilityError(f"{k} orthogonal region means need C >= {k}")
        return basis
    if -1.0 / (k - 1) > cap:
        raise SeparabilityError(f"{k} regions cannot have pairwise cosine <= {cap}")
    simplex = basis - basis.mean(axis=0)
    return simplex / np.linalg.norm(simplex, axis=1, keepdims=True)


def _separated(tokens: np.ndarray, lab: np.ndarray) -> bool:
    cos = tokens @ tokens.T
    same = lab[:, None] == lab[None, :]
    cross = ~same
    if not cross.any():
        return True
    return cos[same].min() >= cos[cross].max()


def synth_window(labels, margin: float, noise: float, C: int, seed: int | None = None) -> RegionWindow:
    """Unit tokens ``normalize(mean[region] + noise * g)`` with resampling until the
    smallest within-region cosine is at least the largest cross-region cosine."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2:
        raise ShapeError("labels must be an (H, W) array")
    if C < 2 or not 0.0 < margin < 1.0 or noise < 0:
        raise ValueError("need C >= 2, 0 < margin < 1 and noise >= 0")
    lab = labels.ravel()
    regions, lab = np.unique(lab, return_inverse=True)
    rng = np.random.default_rng(seed)
    means = _region_means(len(regions), C, max(margin - MARGIN_GAP, -1.0), rng)
    for attempt in range(MAX_ATTEMPTS):
        raw = means[lab] + noise * rng.standard_normal((len(lab), C))
        tokens = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        if _separated(tokens, lab):
            return RegionWindow(tokens, labels, means, margin, noise, seed, attempt)
    raise SeparabilityError(f"no separable sample in {MAX_ATTEMPTS} draws (noise={noise}, margin={margin})")


@dataclass(frozen=True)
class Correctness:
    flags: tuple
    delta_hat: float


def merge_correctness(trace: MergeTrace, ground_truth) -> Correctness:
    """A step is within-region iff every original constituent of both sides shares one region."""
    lab = np.asarray(ground_truth).ravel()
    flags = tuple(len(set(lab[list(s.constituents_a | s.constituents_b)])) == 1 for s in trace.steps)
    if not flags:
        return Correctness((), 0.0)
    return Correctness(flags, flags.count(False) / len(flags))


def make_plan(strategy: str, grid: FeatureGrid, partition: CellPartition, r: float,
              seed: int | None = None, gradient: str = "sobel") -> MergePlan:
    """Plans for the theorem strategies and the ablation variants by name."""
    if strategy in ("score_guided", "full"):
        return build_merge_plan(partition, gradient_energy(grid, gradient), r)
    if strategy == "central_diff":
        return build_merge_plan(partition, gradient_energy(grid, "central"), r)
    if strategy == "mean_flatness":
        return build_merge_plan(partition, gradient_energy(grid, gradient), r, cell_strategy="mean")
    if strategy == "no_cell":
        return no_cell_plan(partition, gradient_energy(grid, gradient), r)
    if strategy == "rand_cell":
        return build_merge_plan(partition, gradient_energy(grid, gradient), r,
                                cell_strategy="random", seed=seed)
    if strategy == "max_dst":
        return build_merge_plan(partition, gradient_energy(grid, gradient), r, dst_strategy="max_grad")
    if strategy == "rand_dst":
        return build_merge_plan(partition, gradient_energy(grid, gradient), r,
                                dst_strategy="random", seed=seed)
    if strategy == "stride":
        return baseline_plan(partition, r, "stride")
    if strategy == "random_dst":
        return baseline_plan(partition, r, "random", seed=seed)
    if strategy == "bipartite":
        return baseline_plan(partition, r, "bipartite", grid=grid)
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class TrialConfig:
    noise: Sequence[float] = (0.0, 0.02, 0.05, 0.1)
    margin: float = 0.5
    H: int = 16
    W: int = 16
    C: int = 16
    s: int = 2
    rate: float = 0.5
    strategies: Sequence[str] = STRATEGIES
    trials: int = 50
    seed: int = 0
    layout: str = "aligned"  # or "straddle": zig-zag boundary cutting through cells
    gradient: str = "sobel"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> TrialConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        """Everything that determines the results; ``workers`` is left out."""
        d = asdict(self)
        del d["workers"]
        d["noise"] = list(self.noise)
        d["strategies"] = list(self.strategies)
        return d


@dataclass
class TrialRow:
    noise: float
    strategy: str
    mean_sd: float
    delta_hat: float
    mean_cos: float
    trials: int
    mean_delta_sum: float
    sd_per_delta: float  # terminal SD / sum of row drifts, the c_sp surrogate
    max_row_ratio: float  # max within-region delta / ||v_a - v_b||, the c_row surrogate
    flags: list = field(default_factory=list)  # per-trial "1"/"0" strings, 1 = within-region


@dataclass
class TrialReport:
    config: dict
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    CSV_COLUMNS = ("noise", "strategy", "mean_sd", "delta_hat", "mean_cos", "trials")

    def row(self, noise: float, strategy: str) -> TrialRow:
        for r in self.rows:
            if r.noise == noise and r.strategy == strategy:
                return r
        raise KeyError((noise, strategy))

    def to_dict(self) -> dict:
        return {"config": self.config, "rows": [asdict(r) for r in self.rows], "skipped": self.skipped}

    def csv_rows(self) -> list[dict]:
        return [{k: getattr(r, k) for k in self.CSV_COLUMNS} for r in self.rows]


def trial_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _one_trial(cfg: TrialConfig, labels: np.ndarray, noise: float, level: int, t: int,
               partition: CellPartition, strategies: Sequence[str]):
    win = synth_window(labels, cfg.margin, noise, cfg.C, seed=trial_seed(cfg.seed, level, t))
    grid = win.grid()
    out = {}
    for j, strategy in enumerate(strategies):
        plan = make_plan(strategy, grid, partition, cfg.rate, seed=trial_seed(cfg.seed, level, t, j + 1),
                         gradient=cfg.gradient)
        trace = merge_trace(win.tokens, plan, ground_truth=labels, spectra=False)
        corr = merge_correctness(trace, labels)
        within = [s.delta / s.pair_distance for s in trace.steps
                  if s.within_region and s.pair_distance > 1e-12]
        out[strategy] = (trace.terminal_discrepancy, corr, trace.delta_sum, max(within, default=0.0))
    return win.within_region_cosine(), out


def _run(cfg: TrialConfig, strategies: Sequence[str]) -> TrialReport:
    report = TrialReport(cfg.to_dict())
    if cfg.trials <= 0:
        return report
    labels = two_region_labels(cfg.H, cfg.W, straddle=(cfg.layout == "straddle"))
    partition = partition_cells(cfg.H, cfg.W, WindowLayout(), cfg.s, cfg.s)
    for level, noise in enumerate(cfg.noise):
        jobs = [(cfg, labels, noise, level, t, partition, strategies) for t in range(cfg.trials)]
        try:
            if cfg.workers > 1:
                with ThreadPoolExecutor(cfg.workers) as pool:
                    results = list(pool.map(lambda a: _one_trial(*a), jobs))
            else:
                results = [_one_trial(*a) for a in jobs]
        except SeparabilityError as exc:
            report.skipped.append({"noise": noise, "reason": str(exc)})
            continue
        mean_cos = float(np.mean([c for c, _ in results]))
        for strategy in strategies:
            per = [r[strategy] for _, r in results]
            sds = np.array([p[0] for p in per])
            dsum = np.array([p[2] for p in per])
            live = dsum > 1e-9  # below this both terms are rounding noise
            ratio = np.where(live, sds / np.where(live, dsum, 1.0), 0.0)
            report.rows.append(TrialRow(
                noise=float(noise), strategy=strategy, mean_sd=float(sds.mean()),
                delta_hat=float(np.mean([p[1].delta_hat for p in per])), mean_cos=mean_cos,
                trials=len(per), mean_delta_sum=float(dsum.mean()), sd_per_delta=float(ratio.max()),
                max_row_ratio=float(max(p[3] for p in per)),
                flags=["".join("1" if f else "0" for f in p[1].flags) for p in per],
            ))
    return report


def theorem_trial(cfg: TrialConfig) -> TrialReport:
    """Mean SD, cross-region merge rate and drift ratios per noise level and strategy."""
    return _run(cfg, cfg.strategies)


def ablation_matrix(rates: Sequence[float] = (0.35, 0.55), noise: float = 0.05, trials: int = 20,
                    seed: int = 0, H: int = 16, W: int = 16, C: int = 16, s: int = 2,
                    margin: float = 0.5, layout: str = "straddle",
                    variants: Sequence[str] = ABLATIONS) -> list[dict]:
    """Mean SD and cross-region rate for every ablation variant at every rate."""
    rows = []
    for rate in rates:
        cfg = TrialConfig(noise=(noise,), margin=margin, H=H, W=W, C=C, s=s, rate=rate,
                          strategies=tuple(variants), trials=trials, seed=seed, layout=layout)
        rep = _run(cfg, variants)
        for r in rep.rows:
            rows.append({"variant": r.strategy, "rate": rate, "mean_sd": r.mean_sd,
                         "delta_hat": r.delta_hat, "trials": r.trials})
    return rows


def write_trial_report(report: TrialReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TrialReport.CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(report.csv_rows())
