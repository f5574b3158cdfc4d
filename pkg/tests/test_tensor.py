from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import assert_close, conv_loops, fc_loops, maxpool_loops
from teecnn.errors import ShapeError
from teecnn.tensor import (Activation, Conv, ConvLayerSpec, Fc, FcLayerSpec, MaxPool, Model,
                           apply_activation, conv2d_direct, fc_direct, maxpool_direct,
                           maxpool_output_hw, model_infer_reference, random_input)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


# -- conv2d_direct ----------------------------------------------------------

def test_conv_scalar_product():
    spec = ConvLayerSpec(1, 1, 1)
    out = conv2d_direct(np.full((1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0), [0.0], spec)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 6.0


def test_conv_six_channel_window_geometry():
    spec = ConvLayerSpec(6, 1, 3)
    x, w = rand((6, 5, 5), 1), rand((1, 6, 3, 3), 2)
    out = conv2d_direct(x, w, None, spec)
    assert out.shape == (1, 3, 3)
    # each output reads exactly one 3x3x6 window
    for oy in range(3):
        for ox in range(3):
            window = x[:, oy:oy + 3, ox:ox + 3].astype(np.float64)
            assert out[0, oy, ox] == pytest.approx(float((window * w[0]).sum()), rel=1e-5)


def test_conv_matches_quadruple_loop_stride2_pad1():
    spec = ConvLayerSpec(3, 4, 3, stride=2, padding=1)
    x, w, b = rand((3, 8, 8), 3), rand(spec.weight_shape, 4), rand(4, 5)
    out = conv2d_direct(x, w, b, spec)
    assert_close(out, conv_loops(x, w, b, 2, 1), rtol=1e-6)


def test_conv_shape_mismatch_names_both_shapes():
    spec = ConvLayerSpec(3, 2, 3)
    with pytest.raises(ShapeError, match=r"\(2, 6, 6\)"):
        conv2d_direct(np.zeros((2, 6, 6)), np.zeros(spec.weight_shape), None, spec)
    with pytest.raises(ShapeError, match=r"\(2, 2, 3, 3\).*\(2, 3, 3, 3\)"):
        conv2d_direct(np.zeros((3, 6, 6)), np.zeros((2, 2, 3, 3)), None, spec)


def test_conv_spec_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        ConvLayerSpec(1, 1, 0)
    with pytest.raises(ShapeError):
        ConvLayerSpec(1, 1, 3, stride=0)
    with pytest.raises(ShapeError):
        ConvLayerSpec(1, 1, 3, padding=-1)
    with pytest.raises(ShapeError):
        ConvLayerSpec(1, 1, 5).output_hw(3, 3)


conv_cases = st.tuples(
    st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 3, 5]),
    st.integers(1, 2), st.integers(0, 2), st.integers(5, 9), st.integers(5, 9),
    st.integers(0, 2**16))


@given(conv_cases)
def test_conv_output_shape_law(case):
    c, n, k, s, p, h, w, seed = case
    spec = ConvLayerSpec(c, n, k, s, p)
    out = conv2d_direct(rand((c, h, w), seed), rand(spec.weight_shape, seed + 1), None, spec)
    assert out.shape == (n, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


@given(conv_cases, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_without_bias(case, a, b):
    c, n, k, s, p, h, w, seed = case
    spec = ConvLayerSpec(c, n, k, s, p, has_bias=False)
    x, y, wt = rand((c, h, w), seed), rand((c, h, w), seed + 1), rand(spec.weight_shape, seed + 2)
    lhs = conv2d_direct(np.float32(a) * x + np.float32(b) * y, wt, None, spec)
    rhs = (np.float32(a) * conv2d_direct(x, wt, None, spec)
           + np.float32(b) * conv2d_direct(y, wt, None, spec))
    scale = max(1.0, float(np.abs(x).max() + np.abs(y).max()) * max(abs(a), abs(b), 1))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * scale * spec.patch_size)


@given(conv_cases)
def test_conv_is_deterministic(case):
    c, n, k, s, p, h, w, seed = case
    spec = ConvLayerSpec(c, n, k, s, p)
    x, wt, b = rand((c, h, w), seed), rand(spec.weight_shape, seed + 1), rand(n, seed + 2)
    assert np.array_equal(conv2d_direct(x, wt, b, spec), conv2d_direct(x, wt, b, spec))


# -- fc_direct ----------------------------------------------------------------

def test_fc_identity():
    assert fc_direct([5, -1], np.eye(2), [0, 0]).tolist() == [5, -1]


def test_fc_by_hand():
    assert fc_direct([1, 1], [[1, 2], [3, 4]], [0, 0]).tolist() == [3, 7]


def test_fc_matches_nested_loops():
    w, x, b = rand((100, 50), 1), rand(50, 2), rand(100, 3)
    assert_close(fc_direct(x, w, b), fc_loops(x, w, b), rtol=1e-6)


def test_fc_length_mismatch():
    with pytest.raises(ShapeError):
        fc_direct(np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        FcLayerSpec(0, 3)


# -- maxpool ------------------------------------------------------------------

def test_maxpool_max_of_all():
    out = maxpool_direct(np.array([[[1, 2], [3, 4]]]), 2, 2)
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4


def test_maxpool_constant_stays_constant():
    out = maxpool_direct(np.full((2, 6, 6), 1.5), 3, 2)
    assert out.shape == (2, 2, 2) and np.all(out == 1.5)


def test_maxpool_matches_loops_exactly():
    x = rand((3, 6, 6), 7)
    assert np.array_equal(maxpool_direct(x, 2, 2), maxpool_loops(x, 2, 2))


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool_direct(np.zeros((1, 2, 2)), 3, 1)


def test_maxpool_padding_ignores_outside_cells():
    x = -np.ones((1, 3, 3), dtype=np.float32) - np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    assert maxpool_output_hw(3, 3, 2, 2, 1) == (2, 2)
    out = maxpool_direct(x, 2, 2, pad=1)
    # pad 1 adds a virtual trailing row/column; the padded cells never win
    assert out[0].tolist() == [[-1, -3], [-7, -9]]
    # pad 2 also shifts the windows one cell up and left
    assert maxpool_direct(x, 2, 2, pad=2)[0].tolist() == [[-1, -2], [-4, -5]]


# -- model --------------------------------------------------------------------

def toy_model(seed=0):
    conv = Conv(ConvLayerSpec(2, 3, 3, 1, 1), rand((3, 2, 3, 3), seed), rand(3, seed + 1), "relu")
    fc = Fc(FcLayerSpec(3 * 3 * 3, 4), rand((4, 27), seed + 2), rand(4, seed + 3))
    return Model((2, 6, 6), [conv, MaxPool(2, 2), fc])


def test_single_conv_model_equals_conv():
    m = toy_model()
    single = Model((2, 6, 6), [Conv(m.layers[0].spec, m.layers[0].weights, m.layers[0].bias)])
    x = rand((2, 6, 6), 9)
    expect = conv2d_direct(x, m.layers[0].weights, m.layers[0].bias, m.layers[0].spec)
    assert np.array_equal(model_infer_reference(single, x), expect.reshape(-1))


def test_conv_pool_fc_composition():
    m = toy_model()
    x = rand((2, 6, 6), 9)
    h = np.maximum(conv2d_direct(x, m.layers[0].weights, m.layers[0].bias, m.layers[0].spec), 0)
    h = maxpool_direct(h, 2, 2)
    expect = fc_direct(h, m.layers[2].weights, m.layers[2].bias)
    assert np.array_equal(model_infer_reference(m, x), expect)


def test_shape_errors_carry_layer_index():
    m = toy_model()
    m.layers.append(Fc(FcLayerSpec(5, 2), np.zeros((2, 5)), None))
    with pytest.raises(ShapeError, match="layer 4") as info:
        m.shapes()
    assert info.value.layer_index == 4
    with pytest.raises(ShapeError, match="layer 1"):
        model_infer_reference(toy_model(), np.zeros((3, 6, 6)))
    with pytest.raises(ShapeError):
        model_infer_reference(Model((1, 1, 1), []), np.zeros((1, 1, 1)))


def test_softmax_is_stable_and_normalised():
    y = apply_activation(np.array([1000.0, 1000.0, -1000.0], dtype=np.float32), "softmax")
    assert np.isfinite(y).all()
    assert y.sum() == pytest.approx(1.0)
    assert y[0] == pytest.approx(0.5)


def test_activation_layer_passes_shape():
    m = Model((1, 2, 2), [Activation("relu")])
    assert model_infer_reference(m, -np.ones((1, 2, 2))).tolist() == [0, 0, 0, 0]


def test_random_input_is_seeded():
    assert np.array_equal(random_input((2, 3, 3), 5), random_input((2, 3, 3), 5))
    assert random_input((2, 3, 3), 5).dtype == np.float32
