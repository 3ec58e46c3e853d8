"""gradmerge command line: planning, verification suites and cost reports.

Exit codes: 0 success, 1 a verification found a violation, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .cells import (Box, WindowLayout, box_from_mask, build_merge_plan, load_plan,
                    partition_cells, prompt_aware_plan, read_mask, save_plan)
from .cost import LayerSchedule, encoder_cost, merge_compute_unmerge_block, preset
from .errors import GradMergeError
from .field import FeatureGrid, gradient_energy
from .graph import TokenGraph, cosine_affinity_graph
from .merging import apply_merge, baseline_plan
from .report import emit_report, write_manifest
from .spectral import (encoder_distortion, hoffman_wielandt_gap, merge_trace, plan_discrepancy,
                       verify_eigenvalue_inclusion)
from .synthesis import (STRATEGIES, TrialConfig, TrialReport, ablation_matrix, synth_window,
                        theorem_trial, two_region_labels)

log = logging.getLogger("gradmerge")
OUT_ENV = "GRADMERGE_OUT"


class CheckFailed(Exception):
    """A verification subcommand observed a violation after writing ``files``."""

    def __init__(self, message: str, files: Sequence[str] = ()):
        super().__init__(message)
        self.files = list(files)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _layout(window: int) -> WindowLayout:
    return WindowLayout() if window <= 0 else WindowLayout.local(window)


def _grid(args) -> FeatureGrid:
    if args.grid:
        return FeatureGrid.load(args.grid)
    H, W, C = args.shape
    return FeatureGrid(np.random.default_rng(args.seed).standard_normal((H, W, C)))


# ---------------------------------------------------------------- subcommands

def cmd_plan(args, out: Path) -> tuple[dict, list[str]]:
    grid = _grid(args)
    part = partition_cells(grid.H, grid.W, _layout(args.window), args.cell, args.cell)
    G = gradient_energy(grid, args.gradient)
    if args.box:
        r_in = args.rate if args.rate_in is None else args.rate_in
        plan = prompt_aware_plan(part, G, Box(*args.box), args.patch, r_in, args.rate)
    else:
        plan = build_merge_plan(part, G, args.rate, dst_strategy=args.dst,
                                cell_strategy=args.cells, seed=args.seed)
    plan.check()
    save_plan(plan, out / "plan.json")
    return {"tokens": plan.n_tokens, "kept": len(plan.kept), "sources": len(plan.sources)}, ["plan.json"]


def cmd_merge_roundtrip(args, out: Path) -> tuple[dict, list[str]]:
    rng = np.random.default_rng(args.seed)
    failures = []
    for t in range(args.trials):
        s = int(rng.choice([2, 4]))
        H, W = (int(x) * s * 2 for x in rng.integers(1, 4, size=2))
        C = int(rng.integers(1, 9))
        window = int(rng.choice([0, 2 * s]))
        grid = FeatureGrid(rng.standard_normal((H, W, C)))
        part = partition_cells(H, W, _layout(window), s, s)
        r = float(rng.uniform(0.0, 0.75))
        plan = build_merge_plan(part, gradient_energy(grid), r)
        kind = "global" if window == 0 else "local"
        ident = merge_compute_unmerge_block(grid, plan, kind, window=window or None,
                                            attention=lambda x: x)
        seeded = merge_compute_unmerge_block(grid, plan, kind, window=window or None)
        x, y = grid.tokens(), ident.tokens()
        ok = seeded.values.shape == grid.values.shape == ident.values.shape
        protected = np.setdiff1d(plan.kept, [d for _, d in plan.mergeable_cells])
        ok &= bool(np.array_equal(y[protected], x[protected]))
        for c, _ in plan.mergeable_cells:
            cell = part.cells[c]
            ok &= bool(np.max(np.abs(y[cell] - x[cell].mean(axis=0))) <= 1e-12)
        if not ok:
            failures.append(t)
    result = {"trials": args.trials, "failures": failures, "passed": args.trials - len(failures)}
    emit_report(result, "json", out / "merge_roundtrip.json")
    if failures:
        raise CheckFailed(f"{len(failures)} round trips failed", ["merge_roundtrip.json"])
    return result, ["merge_roundtrip.json"]


def cmd_spectral(args, out: Path) -> tuple[dict, list[str]]:
    grid = _grid(args)
    layout = _layout(args.window)
    if args.plan:
        plans = [load_plan(p) for p in args.plan]
    else:
        part = partition_cells(grid.H, grid.W, layout, args.cell, args.cell)
        plans = [build_merge_plan(part, gradient_energy(grid), args.rate)]
    sd = [plan_discrepancy(grid, p, layout, args.convention) for p in plans]
    result = {"layers": sd, "encoder_distortion": encoder_distortion(sd), "convention": args.convention}
    emit_report(result, "json", out / "spectral.json")
    return result, ["spectral.json"]


def random_partition(N: int, rng: np.random.Generator, equal: bool = False) -> list[list[int]]:
    if equal:
        sizes = [d for d in range(1, N + 1) if N % d == 0]
        size = int(rng.choice(sizes))
        perm = rng.permutation(N)
        return [sorted(int(u) for u in perm[i:i + size]) for i in range(0, N, size)]
    n = int(rng.integers(1, N + 1))
    labels = np.concatenate([np.arange(n), rng.integers(0, n, size=N - n)])
    rng.shuffle(labels)
    return [np.flatnonzero(labels == g).tolist() for g in range(n)]


def random_graph(N: int, rng: np.random.Generator) -> TokenGraph:
    """Random symmetric weights with some zero entries and self-loops, degrees floored."""
    w = rng.uniform(0.0, 1.0, size=(N, N))
    w *= rng.uniform(size=(N, N)) < 0.7
    w = np.triu(w) + np.triu(w, 1).T
    if w.sum(axis=1).min() < 1e-6:
        w = w + np.eye(N)
    return TokenGraph(w)


def cmd_verify_lemma(args, out: Path) -> tuple[dict, list[str]]:
    rng = np.random.default_rng(args.seed)
    equal = args.convention == "block_average"
    rows = []
    for g in range(args.graphs):
        N = int(rng.integers(2, args.max_n + 1))
        graph = random_graph(N, rng)
        rep = verify_eigenvalue_inclusion(graph, random_partition(N, rng, equal), args.convention)
        rows.append({"graph": g, "N": N, "groups": rep.n_groups, "holds": rep.holds,
                     "max_mismatch": rep.max_mismatch})
    holds = sum(r["holds"] for r in rows)
    result = {"convention": args.convention, "graphs": args.graphs, "holds": holds}
    emit_report(rows, "csv", out / "verify_lemma.csv", ["graph", "N", "groups", "holds", "max_mismatch"])
    emit_report(result, "json", out / "verify_lemma.json")
    if holds != args.graphs:
        raise CheckFailed(f"inclusion failed on {args.graphs - holds} graphs",
                          ["verify_lemma.csv", "verify_lemma.json"])
    return result, ["verify_lemma.csv", "verify_lemma.json"]


def cmd_verify_hw(args, out: Path) -> tuple[dict, list[str]]:
    rng = np.random.default_rng(args.seed)
    pair_violations = 0
    for _ in range(args.pairs):
        N = int(rng.integers(1, args.max_n + 1))
        A = rng.standard_normal((N, N))
        B = A + rng.uniform(0, 2) * rng.standard_normal((N, N))
        if not hoffman_wielandt_gap(A + A.T, B + B.T).holds():
            pair_violations += 1
    step_violations = steps = 0
    for t in range(args.traces):
        side = int(rng.choice([4, 8]))
        labels = two_region_labels(side, side, straddle=bool(t % 2))
        win = synth_window(labels, 0.5, float(rng.uniform(0, 0.1)), 8, seed=int(rng.integers(2**31)))
        part = partition_cells(side, side, WindowLayout(), 2, 2)
        strategy = ("random", "stride")[t % 2]
        plan = baseline_plan(part, float(rng.uniform(0.1, 0.7)), strategy, seed=int(rng.integers(2**31)))
        for s in merge_trace(win.tokens, plan).steps:
            steps += 1
            n = win.tokens.shape[0]
            ok = (s.drift_sq <= s.lap_frob ** 2 * (1 + 1e-12) + 1e-12
                  and s.drift <= np.sqrt(n) * s.lap_frob * (1 + 1e-12) + 1e-12)
            step_violations += not ok
    result = {"pairs": args.pairs, "pair_violations": pair_violations, "traces": args.traces,
              "trace_steps": steps, "step_violations": step_violations}
    emit_report(result, "json", out / "verify_hw.json")
    if pair_violations or step_violations:
        raise CheckFailed("Hoffman-Wielandt bound violated", ["verify_hw.json"])
    return result, ["verify_hw.json"]


def theorem_checks(report: TrialReport, slack: float = 1e-3) -> dict:
    """Monotone score-guided SD with near-zero SD at the lowest noise; random baseline clearly worse."""
    noise = sorted({r.noise for r in report.rows})
    checks = {}
    if not noise:
        return checks
    strategies = {r.strategy for r in report.rows}
    if "score_guided" in strategies:
        sd = [report.row(n, "score_guided").mean_sd for n in noise]
        checks["score_guided_monotone"] = all(b >= a - slack for a, b in zip(sd, sd[1:]))
        checks["score_guided_lowest_noise_sd"] = sd[0] <= 1e-6
    if {"score_guided", "random_dst"} <= strategies:
        base = report.row(noise[0], "score_guided").mean_sd
        rows = [report.row(n, "random_dst") for n in noise]
        checks["random_dst_delta_hat"] = all(r.delta_hat >= 0.05 for r in rows)
        checks["random_dst_sd_ratio"] = all(r.mean_sd >= 10 * base for r in rows)
    return checks


def cmd_theorem(args, out: Path) -> tuple[dict, list[str]]:
    cfg = TrialConfig(noise=tuple(args.noise), margin=args.margin, H=args.size, W=args.size, C=args.channels,
                      s=args.cell, rate=args.rate, strategies=tuple(args.strategies), trials=args.trials,
                      seed=args.seed, layout=args.layout, workers=args.workers)
    report = theorem_trial(cfg)
    checks = theorem_checks(report)
    emit_report({**report.to_dict(), "checks": checks}, "json", out / "theorem.json")
    emit_report(report.csv_rows(), "csv", out / "theorem.csv", TrialReport.CSV_COLUMNS)
    if not all(checks.values()):
        raise CheckFailed(f"theorem checks failed: {sorted(k for k, v in checks.items() if not v)}",
                          ["theorem.json", "theorem.csv"])
    return {"checks": checks, "skipped": report.skipped}, ["theorem.json", "theorem.csv"]


def cmd_flops(args, out: Path) -> tuple[dict, list[str]]:
    if args.schedule:
        sched = LayerSchedule.from_dict(json.loads(Path(args.schedule).read_text()))
    else:
        sched = preset(args.preset, args.rate, args.cell)
    report = encoder_cost(sched, args.mode)
    emit_report(report.rows(), "csv", out / "flops.csv", ["layer", "kind", "term", "macs"])
    emit_report(report.to_dict(), "json", out / "flops.json")
    result = {"baseline_total": report.baseline_total, "merged_total": report.merged_total,
              "reduction": report.reduction, "mode": args.mode}
    return result, ["flops.csv", "flops.json"]


def cmd_ablate(args, out: Path) -> tuple[dict, list[str]]:
    rows = ablation_matrix(rates=tuple(args.rates), noise=args.noise, trials=args.trials, seed=args.seed)
    emit_report(rows, "csv", out / "ablation.csv", ["variant", "rate", "mean_sd", "delta_hat", "trials"])
    full = {r["rate"]: r["mean_sd"] for r in rows if r["variant"] == "full"}
    worse = all(r["mean_sd"] >= full[r["rate"]] - 1e-12 for r in rows
                if r["variant"] in ("max_dst", "rand_dst"))
    result = {"rows": len(rows), "destination_ordering": worse}
    if not worse:
        raise CheckFailed("a non-min-gradient destination variant beat min_grad", ["ablation.csv"])
    return result, ["ablation.csv"]


def cmd_box(args, out: Path) -> tuple[dict, list[str]]:
    box = box_from_mask(read_mask(args.mask))
    result = box._asdict()
    emit_report(result, "json", out / "box.json")
    return result, ["box.json"]


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradmerge", description=__doc__.splitlines()[0])
    p.add_argument("--out", default=os.environ.get(OUT_ENV, "gradmerge_out"),
                   help=f"output directory (default ${OUT_ENV} or ./gradmerge_out)")
    p.add_argument("--config", help="JSON file of option defaults for the subcommand")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(fn=fn)
        return sp

    def grid_opts(sp):
        sp.add_argument("--grid", help="feature grid (.json or binary)")
        sp.add_argument("--shape", type=int, nargs=3, default=(16, 16, 8), metavar=("H", "W", "C"),
                        help="random grid shape when --grid is absent")
        sp.add_argument("--window", type=int, default=0, help="local window side; 0 = global")
        sp.add_argument("--cell", type=int, default=2)
        sp.add_argument("--rate", type=float, default=0.5)

    sp = add("plan", cmd_plan, "build a merge plan")
    grid_opts(sp)
    sp.add_argument("--gradient", choices=("sobel", "central"), default="sobel")
    sp.add_argument("--dst", choices=("min_grad", "max_grad", "random"), default="min_grad")
    sp.add_argument("--cells", choices=("max", "mean", "random"), default="max")
    sp.add_argument("--box", type=int, nargs=4, metavar=("TOP", "LEFT", "BOTTOM", "RIGHT"))
    sp.add_argument("--patch", type=int, default=16)
    sp.add_argument("--rate-in", type=float)

    sp = add("merge-roundtrip", cmd_merge_roundtrip, "randomized merge/attention/unmerge checks")
    sp.add_argument("--trials", type=int, default=500)

    sp = add("spectral", cmd_spectral, "spectral discrepancy of plans")
    grid_opts(sp)
    sp.add_argument("--plan", action="append", help="plan JSON; repeat for several layers")
    sp.add_argument("--convention", choices=("block_sum", "block_average"), default="block_sum")

    sp = add("verify-lemma", cmd_verify_lemma, "eigenvalue inclusion over random graphs")
    sp.add_argument("--convention", choices=("block_sum", "block_average"), default="block_sum")
    sp.add_argument("--graphs", type=int, default=200)
    sp.add_argument("--max-n", type=int, default=32)

    sp = add("verify-hw", cmd_verify_hw, "Hoffman-Wielandt sweeps")
    sp.add_argument("--pairs", type=int, default=1000)
    sp.add_argument("--traces", type=int, default=100)
    sp.add_argument("--max-n", type=int, default=32)

    sp = add("theorem", cmd_theorem, "score-guided vs baseline trials on synthetic regions")
    sp.add_argument("--noise", type=_floats, default=[0.0, 0.02, 0.05, 0.1])
    sp.add_argument("--margin", type=float, default=0.5)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--channels", type=int, default=16)
    sp.add_argument("--cell", type=int, default=2)
    sp.add_argument("--rate", type=float, default=0.5)
    sp.add_argument("--strategies", type=lambda s: s.split(","), default=list(STRATEGIES))
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--layout", choices=("straddle", "aligned"), default="straddle")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("flops", cmd_flops, "encoder MAC counts")
    sp.add_argument("--preset", choices=("vitb", "vitl"), default="vitb")
    sp.add_argument("--schedule", help="LayerSchedule JSON instead of a preset")
    sp.add_argument("--rate", type=float, default=0.55)
    sp.add_argument("--cell", type=int, default=2)
    sp.add_argument("--mode", choices=("attention", "block"), default="attention")

    sp = add("ablate", cmd_ablate, "ablation variants on synthetic regions")
    sp.add_argument("--rates", type=_floats, default=[0.35, 0.55])
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--trials", type=int, default=20)

    sp = add("box", cmd_box, "bounding box of a PGM/CSV mask")
    sp.add_argument("--mask", required=True)
    return p


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = sorted(set(overrides) - set(vars(args)))
        if unknown:
            raise GradMergeError(f"unknown config keys: {unknown}")
        for k, v in overrides.items():
            setattr(args, k, v)
    return args


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    except (GradMergeError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    out = Path(args.out)
    config = {k: v for k, v in vars(args).items() if k not in ("fn", "out", "verbose")}
    code = 0
    try:
        out.mkdir(parents=True, exist_ok=True)
        result, files = args.fn(args, out)
    except CheckFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        result, files, code = {"error": str(exc)}, exc.files, 1
    except (GradMergeError, ValueError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    write_manifest(out, args.command, argv, config, getattr(args, "seed", None), files)
    print(json.dumps(result, sort_keys=True, default=str))
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
