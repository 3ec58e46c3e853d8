import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradmerge.errors import ShapeError, ZeroNormError
from gradmerge.field import (FeatureGrid, GradientField, central_diff_gradients, gradient_energy,
                             gradient_magnitude, pairwise_energy, sobel_gradients)
from oracles import loop_central, loop_sobel

grids = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3)),
               elements=st.floats(-10, 10))


def test_constant_grid_has_zero_gradients():
    g = FeatureGrid(np.full((3, 5, 2), 3.0))
    for gx, gy in (central_diff_gradients(g), sobel_gradients(g)):
        assert not gx.any() and not gy.any()


def test_central_ramp_row():
    g = FeatureGrid(np.array([0.0, 1, 2, 3]).reshape(1, 4, 1))
    gx, gy = central_diff_gradients(g)
    assert gx.ravel().tolist() == [1, 2, 2, 1]
    assert gy.ravel().tolist() == [0, 0, 0, 0]
    assert gradient_magnitude(gx, gy).magnitudes.ravel().tolist() == [1, 2, 2, 1]


def test_central_matches_loop():
    v = np.random.default_rng(0).standard_normal((2, 2, 2))
    gx, gy = central_diff_gradients(FeatureGrid(v))
    ox, oy = loop_central(v)
    np.testing.assert_array_equal(gx, ox)
    np.testing.assert_array_equal(gy, oy)


def test_sobel_center_impulse():
    v = np.zeros((3, 3, 1))
    v[1, 1, 0] = 1.0
    gx, _ = sobel_gradients(FeatureGrid(v))
    assert gx[1, 0, 0] == 2.0
    assert gx[1, 2, 0] == -2.0


def test_sobel_ramp_interior():
    v = np.tile(np.arange(6.0), (6, 1))[:, :, None]
    gx, gy = sobel_gradients(FeatureGrid(v))
    assert np.all(gx[1:-1, 1:-1] == 8.0)
    assert not gy.any()


def test_sobel_matches_loop():
    v = np.random.default_rng(1).standard_normal((4, 5, 3))
    gx, gy = sobel_gradients(FeatureGrid(v))
    ox, oy = loop_sobel(v)
    np.testing.assert_allclose(gx, ox, atol=1e-12)
    np.testing.assert_allclose(gy, oy, atol=1e-12)


def test_magnitude_pythagoras():
    gx = np.array([3.0, 0.0]).reshape(1, 1, 2)
    gy = np.array([0.0, 4.0]).reshape(1, 1, 2)
    assert gradient_magnitude(gx, gy).magnitudes[0, 0] == 5.0
    assert not gradient_magnitude(np.zeros((2, 2, 1)), np.zeros((2, 2, 1))).magnitudes.any()


def test_magnitude_shape_mismatch():
    with pytest.raises(ShapeError):
        gradient_magnitude(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


@settings(max_examples=50, deadline=None)
@given(grids, grids, st.floats(-3, 3), st.floats(-3, 3))
def test_gradients_are_linear(a, b, alpha, beta):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    A, B = FeatureGrid(a), FeatureGrid(b)
    mix = A * alpha + B * beta
    for op in (central_diff_gradients, sobel_gradients):
        for got, ga, gb in zip(op(mix), op(A), op(B)):
            want = alpha * ga + beta * gb
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * (1 + np.abs(want).max()))


@settings(max_examples=30, deadline=None)
@given(grids)
def test_sign_flip_and_axis_constancy(v):
    g = FeatureGrid(v)
    gx, gy = sobel_gradients(g)
    assert np.array_equal(gradient_magnitude(gx, gy).magnitudes, gradient_magnitude(-gx, -gy).magnitudes)
    const_rows = FeatureGrid(np.broadcast_to(v[:1], v.shape))
    for op in (central_diff_gradients, sobel_gradients):
        assert not op(const_rows)[1].any()


def test_energy_matches_explicit_operators(backend):
    v = np.random.default_rng(2).standard_normal((6, 7, 4))
    g = FeatureGrid(v)
    for method, op in (("central", central_diff_gradients), ("sobel", sobel_gradients)):
        want = gradient_magnitude(*op(g)).magnitudes
        np.testing.assert_allclose(gradient_energy(g, method).magnitudes, want, rtol=1e-13)
    with pytest.raises(ValueError):
        gradient_energy(g, "laplace")


def test_pairwise_energy():
    same = FeatureGrid(np.ones((2, 3, 4)))
    np.testing.assert_allclose(pairwise_energy(same).magnitudes, 1.0)
    ortho = FeatureGrid(np.eye(2).reshape(1, 2, 2))
    np.testing.assert_allclose(pairwise_energy(ortho).magnitudes, 0.5)
    x = np.random.default_rng(3).standard_normal((4, 5)) + 2.0
    g = FeatureGrid.from_tokens(x, 2, 2)
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    want = [sum(float(u[i] @ u[j]) for j in range(4)) / 4 for i in range(4)]
    np.testing.assert_allclose(pairwise_energy(g).flat(), want, atol=1e-12)
    with pytest.raises(ZeroNormError):
        pairwise_energy(FeatureGrid(np.zeros((1, 2, 2))))


def test_grid_validation():
    with pytest.raises(ShapeError):
        FeatureGrid(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        FeatureGrid(np.array([[[np.nan]]]))
    with pytest.raises(ShapeError):
        GradientField(-np.ones((2, 2)))


def test_grid_serialization(tmp_path):
    v = np.random.default_rng(4).standard_normal((3, 2, 5))
    g = FeatureGrid(v)
    assert np.array_equal(FeatureGrid.from_dict(json.loads(json.dumps(g.to_dict()))).values, v)
    assert np.array_equal(FeatureGrid.from_bytes(g.to_bytes()).values, v)
    for name in ("g.json", "g.bin"):
        g.save(tmp_path / name)
        assert np.array_equal(FeatureGrid.load(tmp_path / name).values, v)
    assert g.to_dict()["values"] == v.ravel().tolist()


def test_gradient_csv(tmp_path):
    G = GradientField(np.array([[1.0, 2.5], [0.1, 3.0]]))
    G.to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines() == ["1,2.5", "0.1,3"]
