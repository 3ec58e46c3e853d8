"""Acceptance suite: one PASS/FAIL line per criterion, tolerances and runtime limits pinned."""
import math
import time

import numpy as np
import pytest

from gradmerge.cells import WindowLayout, build_merge_plan, mergeable_cell_count, partition_cells
from gradmerge.cost import (AttentionWeights, encoder_cost, energy_cost, global_attention,
                            merge_compute_unmerge_block, preset, windowed_attention)
from gradmerge.field import (FeatureGrid, GradientField, central_diff_gradients, gradient_magnitude,
                             sobel_gradients)
from gradmerge.graph import TokenGraph
from gradmerge.merging import baseline_plan
from gradmerge.spectral import hoffman_wielandt_gap, merge_trace, verify_eigenvalue_inclusion
from gradmerge.synthesis import TrialConfig, ablation_matrix, synth_window, theorem_trial, two_region_labels
from oracles import loop_attention, path_graph


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.3f}s, limit {limit}s)")
        assert ok, f"{name}: {detail} in {elapsed:.3f}s"
    return emit


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


def test_pairwise_energy_cost(verdict):
    def run():
        return energy_cost(4096, 768, "pairwise", 64), 25 * energy_cost(196, 768, "pairwise", 64)
    (glob, win), dt = timed(run)
    ok = glob == 1_073_741_824 and win == 61_465_600 and round(glob / 1e9, 4) == 1.0737 \
        and round(win / 1e9, 4) == 0.0615
    verdict("pairwise energy cost", ok, f"global={glob}, window={win}", dt, 0.001)


def test_encoder_cost(verdict):
    def run():
        return encoder_cost(preset("vitb", 0.0)), encoder_cost(preset("vitb", 0.55))
    (base, merged), dt = timed(run)
    total = base.baseline_total / 1e9
    target = 1 - 347.8 / 486.4
    ok = abs(total - 486.4) <= 0.10 * 486.4 and abs(merged.reduction - target) <= 0.10
    verdict("encoder cost ViT-B", ok,
            f"r=0 total={total:.1f} GMAC (486.4 +/- 10%), r=0.55 reduction={merged.reduction:.3f} "
            f"(target {target:.3f} +/- 0.10)", dt, 1.0)


def _groups(N, rng, equal):
    if equal:
        size = int(rng.choice([d for d in range(1, N + 1) if N % d == 0]))
        perm = rng.permutation(N)
        return [perm[i:i + size].tolist() for i in range(0, N, size)]
    n = int(rng.integers(1, N + 1))
    labels = np.concatenate([np.arange(n), rng.integers(0, n, N - n)])
    rng.shuffle(labels)
    return [np.flatnonzero(labels == g).tolist() for g in range(n)]


def _graph(N, rng):
    w = rng.uniform(size=(N, N)) * (rng.uniform(size=(N, N)) < 0.7)
    w = np.triu(w) + np.triu(w, 1).T
    return TokenGraph(w + np.eye(N) * (w.sum(axis=1).min() < 1e-6))


def test_eigenvalue_inclusion(verdict):
    def run():
        rng = np.random.default_rng(7)
        summed = sum(verify_eigenvalue_inclusion(_graph(N, rng), _groups(N, rng, False), "block_sum", 1e-8).holds
                     for N in rng.integers(2, 33, 200))
        equal = sum(verify_eigenvalue_inclusion(_graph(N, rng), _groups(N, rng, True), "block_average",
                                                1e-8).holds for N in rng.integers(2, 33, 200))
        p3 = verify_eigenvalue_inclusion(TokenGraph(path_graph(3)), [[0, 1], [2]], "block_average")
        return summed, equal, p3.holds
    (summed, equal, p3), dt = timed(run)
    verdict("eigenvalue inclusion", summed == 200 and equal == 200 and not p3,
            f"block_sum {summed}/200, equal-size block_average {equal}/200, P3 {{2,1}} flagged={not p3}",
            dt, 10.0)


def test_hoffman_wielandt(verdict):
    def run():
        rng = np.random.default_rng(11)
        pair_bad = 0
        for _ in range(1000):
            N = int(rng.integers(1, 33))
            A = rng.standard_normal((N, N))
            B = A + rng.uniform(0, 2) * rng.standard_normal((N, N))
            pair_bad += not hoffman_wielandt_gap(A + A.T, B + B.T).holds()
        step_bad = steps = 0
        part = partition_cells(8, 8, WindowLayout(), 2, 2)
        for t in range(100):
            labels = two_region_labels(8, 8, straddle=bool(t % 2))
            win = synth_window(labels, 0.5, 0.1 * (t % 5) / 4, 8, seed=t)
            plan = baseline_plan(part, 0.3 + 0.4 * (t % 3) / 2, ("random", "stride")[t % 2], seed=t)
            for s in merge_trace(win.tokens, plan).steps:
                steps += 1
                step_bad += not (s.drift_sq <= s.lap_frob ** 2 * (1 + 1e-12) + 1e-12
                                 and s.drift <= math.sqrt(64) * s.lap_frob * (1 + 1e-12) + 1e-12)
        return pair_bad, step_bad, steps
    (pair_bad, step_bad, steps), dt = timed(run)
    verdict("Hoffman-Wielandt", pair_bad == 0 and step_bad == 0 and steps > 0,
            f"{pair_bad} violations over 1000 pairs, {step_bad} over {steps} trace steps", dt, 30.0)


NOISE = (0.0, 0.02, 0.05, 0.1)


def _trial(layout, strategies):
    return theorem_trial(TrialConfig(noise=NOISE, margin=0.5, H=16, W=16, C=16, s=2, rate=0.5, trials=50,
                                     seed=0, layout=layout, strategies=strategies))


def test_score_guided_vanishing_distortion(verdict):
    def run():
        return {layout: [_trial(layout, ("score_guided",)).row(n, "score_guided").mean_sd for n in NOISE]
                for layout in ("aligned", "straddle")}
    sds, dt = timed(run)
    ok = all(all(b >= a - 1e-3 for a, b in zip(v, v[1:])) and v[0] <= 1e-6 for v in sds.values())
    detail = "; ".join(f"{k} mean SD " + ", ".join(f"{x:.3g}" for x in v) for k, v in sds.items())
    verdict("score-guided SD monotone, zero at noise 0", ok, detail, dt, 120.0)


def test_random_destination_drift(verdict):
    def run():
        rep = _trial("straddle", ("score_guided", "random_dst"))
        floor = rep.row(NOISE[0], "score_guided").mean_sd
        return floor, [rep.row(n, "random_dst") for n in NOISE]
    (floor, rows), dt = timed(run)
    ok = all(r.delta_hat >= 0.05 and r.mean_sd >= 10 * floor for r in rows) and all(r.mean_sd > 0 for r in rows)
    detail = ", ".join(f"noise {r.noise}: delta_hat={r.delta_hat:.3f} SD={r.mean_sd:.3g}" for r in rows)
    verdict("random-destination baseline drift", ok, f"{detail}; score-guided floor {floor:.3g}", dt, 120.0)


def test_algorithm_accounting(verdict):
    def run():
        rng = np.random.default_rng(3)
        bad = cases = 0
        for H, W in ((8, 8), (16, 16), (12, 20), (32, 32), (64, 64)):
            for s in (2, 4):
                if H % s or W % s:
                    continue
                part = partition_cells(H, W, WindowLayout(), s, s)
                g = rng.uniform(size=(H, W))
                for r in np.round(np.arange(0.1, 0.76, 0.05), 2):
                    cases += 1
                    plan = build_merge_plan(part, GradientField(g), float(r))
                    M = min(math.ceil(round(r * H * W * 1e6) / 1e6 / (s * s - 1) - 1e-12), part.n_cells)
                    M_exact = mergeable_cell_count(float(r), H, W, s, s)
                    flat = g.ravel()
                    ok = (M == M_exact and len(plan.mergeable_cells) == M
                          and len(plan.kept) == H * W - M * (s * s - 1)
                          and all(flat[d] <= flat[part.cells[c]].min() for c, d in plan.mergeable_cells))
                    bad += not ok
        return bad, cases
    (bad, cases), dt = timed(run)
    verdict("merge-plan accounting", bad == 0, f"{cases - bad}/{cases} (H, W, s, r) cases exact", dt, 5.0)


def test_resolution_recovery(verdict):
    def run():
        rng = np.random.default_rng(5)
        bad = 0
        for _ in range(500):
            s = int(rng.choice([2, 4]))
            H, W = (int(x) * 2 * s for x in rng.integers(1, 4, 2))
            C = int(rng.integers(1, 9))
            window = int(rng.choice([0, 2 * s]))
            layout = WindowLayout.local(window) if window else WindowLayout()
            grid = FeatureGrid(rng.standard_normal((H, W, C)))
            part = partition_cells(H, W, layout, s, s)
            plan = build_merge_plan(part, GradientField(rng.uniform(size=(H, W))), float(rng.uniform(0, 0.75)))
            kind = "local" if window else "global"
            ident = merge_compute_unmerge_block(grid, plan, kind, window=window or None, attention=lambda x: x)
            real = merge_compute_unmerge_block(grid, plan, kind, window=window or None)
            x, y = grid.tokens(), ident.tokens()
            dsts = {d for _, d in plan.mergeable_cells}
            prot = [t for t in plan.kept if t not in dsts]
            ok = ident.values.shape == real.values.shape == (H, W, C) and np.array_equal(y[prot], x[prot])
            for c, _ in plan.mergeable_cells:
                ok = ok and np.max(np.abs(y[part.cells[c]] - x[part.cells[c]].mean(axis=0))) <= 1e-12
            bad += not ok
        return bad
    bad, dt = timed(run)
    verdict("resolution recovery", bad == 0, f"{500 - bad}/500 round trips", dt, 30.0)


def test_attention_oracle(verdict):
    def run():
        rng = np.random.default_rng(9)
        worst = 0.0
        for i in range(100):
            N = int(rng.integers(1, 33))
            heads = int(rng.choice([1, 2, 4]))
            C = heads * int(rng.integers(1, 5))
            w = AttentionWeights.seeded(C, i)
            x = rng.standard_normal((N, C))
            op = windowed_attention if i % 2 else global_attention
            worst = max(worst, float(np.max(np.abs(op(x, w, heads) - loop_attention(x, w.wq, w.wk, w.wv, w.wo,
                                                                                     heads)))))
        return worst
    worst, dt = timed(run)
    verdict("attention oracle", worst <= 1e-10, f"max abs deviation {worst:.2e} over 100 fixtures", dt, 5.0)


def test_gradient_operators(verdict):
    def run():
        rng = np.random.default_rng(1)
        checks = {}
        A, B = FeatureGrid(rng.standard_normal((5, 6, 3))), FeatureGrid(rng.standard_normal((5, 6, 3)))
        lin = True
        for op in (central_diff_gradients, sobel_gradients):
            for got, ga, gb in zip(op(A * 2.5 + B * -1.5), op(A), op(B)):
                lin &= bool(np.allclose(got, 2.5 * ga - 1.5 * gb, rtol=1e-12, atol=1e-12))
        checks["linearity"] = lin
        const = FeatureGrid(np.full((4, 5, 2), 3.0))
        checks["constant"] = all(not g.any() for op in (central_diff_gradients, sobel_gradients) for g in op(const))
        ramp = FeatureGrid(np.arange(4.0).reshape(1, 4, 1))
        gx, gy = central_diff_gradients(ramp)
        checks["ramp"] = gx.ravel().tolist() == [1, 2, 2, 1] and not gy.any() and \
            gradient_magnitude(gx, gy).magnitudes.ravel().tolist() == [1, 2, 2, 1]
        imp = np.zeros((3, 3, 1))
        imp[1, 1] = 1.0
        sx, _ = sobel_gradients(FeatureGrid(imp))
        wramp = FeatureGrid(np.tile(np.arange(5.0), (5, 1))[:, :, None])
        rx, ry = sobel_gradients(wramp)
        checks["sobel"] = sx[1, 0, 0] == 2.0 and sx[1, 2, 0] == -2.0 and np.all(rx[1:-1, 1:-1] == 8) and not ry.any()
        checks["pythagoras"] = gradient_magnitude(np.array([3.0, 0]).reshape(1, 1, 2),
                                                  np.array([0, 4.0]).reshape(1, 1, 2)).magnitudes[0, 0] == 5.0
        return checks
    checks, dt = timed(run)
    verdict("gradient operators", all(checks.values()), ", ".join(f"{k}={v}" for k, v in checks.items()), dt, 1.0)


def test_ablation_harness(verdict):
    rates = (0.35, 0.55)
    rows, dt = timed(lambda: ablation_matrix(rates=rates, noise=0.05, trials=20, seed=0))
    variants = {"central_diff", "mean_flatness", "no_cell", "rand_cell", "max_dst", "rand_dst"}
    complete = {(r["variant"], r["rate"]) for r in rows} >= {(v, r) for v in variants | {"full"} for r in rates}
    sd = {(r["variant"], r["rate"]): r["mean_sd"] for r in rows}
    ordered = all(sd[(v, r)] >= sd[("full", r)] - 1e-12 for v in ("max_dst", "rand_dst") for r in rates)
    detail = ", ".join(f"{v}@{r}={sd[(v, r)]:.4g}" for r in rates for v in ("full", "max_dst", "rand_dst"))
    verdict("ablation harness", complete and ordered, f"matrix complete={complete}; {detail}", dt, 120.0)
