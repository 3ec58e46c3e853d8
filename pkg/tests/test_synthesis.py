import numpy as np
import pytest

from gradmerge.cells import WindowLayout, build_merge_plan, partition_cells
from gradmerge.errors import SeparabilityError, ShapeError
from gradmerge.field import gradient_energy
from gradmerge.merging import baseline_plan
from gradmerge.spectral import MergeTrace, TraceStep, merge_trace
from gradmerge.synthesis import (TrialConfig, TrialReport, labels_from_masks, make_plan,
                                 merge_correctness, synth_window, theorem_trial, two_region_labels)


def test_layouts():
    a = two_region_labels(4, 8)
    assert a[:, :4].sum() == 0 and a[:, 4:].min() == 1
    s = two_region_labels(4, 8, straddle=True)
    assert s.sum() == 16
    assert s[0].tolist() == [0, 0, 0, 1, 1, 1, 1, 1] and s[1].tolist() == [0, 0, 0, 0, 0, 1, 1, 1]
    with pytest.raises(ShapeError):
        two_region_labels(4, 7)
    masks = [a == 0, a == 1]
    assert np.array_equal(labels_from_masks(masks), a)
    with pytest.raises(ShapeError):
        labels_from_masks([a == 0, a == 0])


def test_zero_noise_tokens_equal_means():
    labels = two_region_labels(4, 4)
    w = synth_window(labels, 0.5, 0.0, 8, seed=1)
    np.testing.assert_allclose(w.tokens, w.means[labels.ravel()], atol=1e-15)
    assert w.within_region_cosine() == pytest.approx(1.0)
    np.testing.assert_allclose(np.linalg.norm(w.tokens, axis=1), 1.0, atol=1e-12)
    assert w.means[0] @ w.means[1] <= 0.3 + 1e-12


def test_single_region_accepts_any_noise():
    w = synth_window(np.zeros((4, 4), dtype=int), 0.5, 50.0, 4, seed=0)
    assert w.rejections == 0


def test_determinism_and_separation():
    labels = two_region_labels(8, 8)
    a = synth_window(labels, 0.5, 0.05, 16, seed=7)
    b = synth_window(labels, 0.5, 0.05, 16, seed=7)
    assert np.array_equal(a.tokens, b.tokens)
    cos = a.tokens @ a.tokens.T
    same = labels.ravel()[:, None] == labels.ravel()[None, :]
    assert cos[same].min() >= cos[~same].max()


def test_negative_cap_uses_simplex():
    w = synth_window(two_region_labels(2, 4), 0.1, 0.0, 4, seed=0)
    assert w.means[0] @ w.means[1] == pytest.approx(-1.0)
    with pytest.raises(SeparabilityError):
        # seven regions cannot all sit at cosine <= -0.19 (the simplex gives -1/6)
        synth_window(np.arange(14).reshape(2, 7), 0.01, 0.0, 8, seed=0)


def test_separability_error():
    with pytest.raises(SeparabilityError):
        synth_window(two_region_labels(8, 8), 0.5, 5.0, 2, seed=0)


def test_correctness_counts():
    labels = two_region_labels(4, 4)
    w = synth_window(labels, 0.5, 0.03, 8, seed=2)
    part = partition_cells(4, 4, WindowLayout(), 2, 2)
    plan = build_merge_plan(part, gradient_energy(w.grid()), 0.7)
    tr = merge_trace(w.tokens, plan, labels, spectra=False)
    assert merge_correctness(tr, labels).delta_hat == 0
    single = np.zeros((4, 4), dtype=int)
    assert merge_correctness(merge_trace(w.tokens, baseline_plan(part, 0.7, "random", seed=1), single),
                             single).delta_hat == 0
    steps = [TraceStep(i, 0, 1, 0.0, 0.0, 0.0, 0.0, 0.0, frozenset({0}), frozenset({1 if i else 3}), None)
             for i in range(9)]
    lab = np.array([0, 0, 0, 1])
    corr = merge_correctness(MergeTrace(steps, 4), lab)
    assert corr.delta_hat == pytest.approx(1 / 9) and corr.flags.count(False) == 1
    assert merge_correctness(MergeTrace([], 4), lab).delta_hat == 0


def test_flags_recompute_exactly():
    labels = two_region_labels(8, 8, straddle=True)
    w = synth_window(labels, 0.5, 0.05, 8, seed=4)
    plan = baseline_plan(partition_cells(8, 8, WindowLayout(), 2, 2), 0.5, "random", seed=4)
    tr = merge_trace(w.tokens, plan, labels, spectra=False)
    corr = merge_correctness(tr, labels)
    assert corr.flags == tuple(s.within_region for s in tr.steps)
    assert corr.delta_hat == [s.within_region for s in tr.steps].count(False) / len(tr.steps)


def test_make_plan_names():
    labels = two_region_labels(8, 8)
    grid = synth_window(labels, 0.5, 0.05, 8, seed=0).grid()
    part = partition_cells(8, 8, WindowLayout(), 2, 2)
    for name in ("score_guided", "stride", "random_dst", "bipartite", "central_diff", "mean_flatness",
                 "no_cell", "rand_cell", "max_dst", "rand_dst"):
        make_plan(name, grid, part, 0.5, seed=1).check()
    with pytest.raises(ValueError):
        make_plan("oracle", grid, part, 0.5)


def test_trial_report_small():
    rep = theorem_trial(TrialConfig(noise=(0.0, 0.1), H=8, W=8, C=8, trials=3))
    assert len(rep.rows) == 2 * 4
    for r in rep.rows:
        assert 0 <= r.delta_hat <= 1 and r.trials == 3 and len(r.flags) == 3
    assert rep.row(0.0, "score_guided").mean_sd <= 1e-6
    assert rep.row(0.0, "score_guided").delta_hat == 0
    straddle = theorem_trial(TrialConfig(noise=(0.0,), H=8, W=8, C=8, trials=3, layout="straddle"))
    assert straddle.row(0.0, "random_dst").delta_hat > 0
    assert list(rep.csv_rows()[0]) == list(TrialReport.CSV_COLUMNS)
    assert theorem_trial(TrialConfig(trials=0)).rows == []


def test_trials_parallel_matches_sequential():
    base = dict(noise=(0.05,), H=8, W=8, C=8, trials=4, layout="straddle")
    a = theorem_trial(TrialConfig(**base)).to_dict()["rows"]
    b = theorem_trial(TrialConfig(**base, workers=3)).to_dict()["rows"]
    assert a == b


def test_skipped_level():
    rep = theorem_trial(TrialConfig(noise=(0.0, 10.0), H=4, W=4, C=2, trials=2))
    assert [s["noise"] for s in rep.skipped] == [10.0]
    assert {r.noise for r in rep.rows} == {0.0}


def test_concentration_monotone_in_noise():
    rep = theorem_trial(TrialConfig(noise=(0.0, 0.05, 0.1, 0.2), H=8, W=8, C=16, trials=10,
                                    strategies=("stride",)))
    cos = [r.mean_cos for r in rep.rows]
    assert all(b <= a + 1e-3 for a, b in zip(cos, cos[1:]))
