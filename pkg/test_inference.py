from dataclasses import replace

import numpy as np
import pytest

from expansion import expand_model, reconstruct
from inference import (
    AccumulatorOverflowError,
    CalibrationError,
    EngineConfig,
    ShapeMismatchError,
    UnsupportedActivationError,
    apply_linear,
    calibrate,
    calibrate_expanded,
    check_accumulators,
    divide_half_even,
    fixed_point_multiplier,
    forward_expanded,
    forward_float,
    forward_integer,
    output_step,
    pruned_pairs,
    rounding_shift,
    run_engine,
    split_orders,
    term_pairs,
    unit_norm_inputs,
)
from model_io import LayerSpec, Model, generate_synthetic_model, parse_layer_specs
from quantizer import QuantConfig


def _dense(weight, bias=None, activation="none"):
    weight = np.asarray(weight, dtype=np.float64)
    layer = LayerSpec("layer0", "dense", weight.shape[1], weight.shape[0], weight,
                      bias=bias, activation=activation)
    return Model(layers=(layer,))


# ---------------------------------------------------------------------------
# Float engine
# ---------------------------------------------------------------------------
def test_dense_forward():
    model = _dense([[1, 2], [3, 4]])
    assert forward_float(model, np.array([1.0, 1.0])).tolist() == [3.0, 7.0]
    relu = _dense([[1, -2]], activation="relu")
    assert forward_float(relu, np.array([[1.0, 1.0]])).tolist() == [[0.0]]


def test_identity_layer():
    x = np.array([[0.3, -0.2, 0.7]])
    assert np.array_equal(forward_float(_dense(np.eye(3)), x), x)


def test_conv_matches_naive_loop(convnet, rng):
    layer = convnet.layers[0]
    shape = layer.shape
    maps = rng.standard_normal((2, shape.in_channels, shape.spatial, shape.spatial))
    got = apply_linear(shape, maps.reshape(2, -1), layer.weight_matrix().astype(np.float64))

    side = shape.out_spatial
    want = np.zeros((2, shape.out_channels, side, side))
    w = layer.weight.astype(np.float64)
    for n in range(2):
        for o in range(shape.out_channels):
            for i in range(side):
                for j in range(side):
                    r, c = i * shape.stride, j * shape.stride
                    patch = maps[n, :, r:r + shape.kernel, c:c + shape.kernel]
                    want[n, o, i, j] = np.sum(patch * w[o])
    assert np.allclose(got, want.reshape(2, -1), atol=1e-12)


def test_input_shapes(convnet):
    maps = np.ones((2, 6, 6))
    single = forward_float(convnet, maps)
    assert single.shape == (5,)
    assert np.allclose(forward_float(convnet, maps[None]), single[None])
    assert np.allclose(forward_float(convnet, maps.reshape(1, -1)), single[None])
    with pytest.raises(ShapeMismatchError):
        forward_float(convnet, np.ones(5))
    with pytest.raises(ShapeMismatchError):
        forward_float(convnet, np.ones((2, 3, 3, 3)))


def test_bounded_activations_run_in_float():
    model = generate_synthetic_model(parse_layer_specs("dense:4:4:tanh:bias,dense:4:2:sigmoid"), seed=2)
    y = forward_float(model, np.full(4, 10.0))
    assert np.all((y > 0) & (y < 1))


# ---------------------------------------------------------------------------
# Float-simulated expanded engine
# ---------------------------------------------------------------------------
def test_weights_only_uses_reconstructed_weights(mlp, weights_only, rng):
    x = unit_norm_inputs(rng, 32, mlp.in_features)
    want = x
    for layer, expanded_layer in zip(mlp.layers, weights_only.layers):
        weight = reconstruct(expanded_layer.residues).reshape(layer.out_channels, -1)
        want = want @ weight.T + layer.bias
        if layer.activation == "relu":
            want = np.maximum(want, 0)
    assert np.allclose(forward_expanded(weights_only, x), want, atol=1e-12)


def test_high_order_weights_match_float(mlp, rng):
    expanded = expand_model(mlp, QuantConfig(bits=8), order=6)
    x = unit_norm_inputs(rng, 64, mlp.in_features)
    assert np.abs(forward_expanded(expanded, x) - forward_float(mlp, x)).max() < 1e-9


def test_term_pairs(weights_only):
    layer = weights_only.layers[0]
    assert term_pairs(layer, 2, 3) == [(1, 0), (2, 0), (1, 1)]
    assert pruned_pairs(layer, 2, 3) == [(2, 1)]
    assert len(term_pairs(layer, 2, 4)) == 4


def test_missing_calibration(weights_only):
    with pytest.raises(CalibrationError):
        forward_expanded(replace(weights_only, act_bits=8), np.ones(16))
    with pytest.raises(CalibrationError):
        forward_integer(weights_only, np.ones(16))
    with pytest.raises(CalibrationError):
        output_step(weights_only)


def test_calibrate(mlp):
    scales = calibrate(mlp, 8, n_samples=128, seed=1)
    assert len(scales) == 4
    assert scales == calibrate(mlp, 8, n_samples=128, seed=1)
    assert all(s > 0 and s == float(np.float32(s)) for s in scales)
    envelope = calibrate(mlp, 8, method="envelope")
    assert all(e >= s for e, s in zip(envelope, scales))
    with pytest.raises(CalibrationError):
        calibrate(mlp, 8, method="guess")


def test_calibrate_expanded(mlp, weights_only):
    expanded = calibrate_expanded(weights_only, mlp, 6, n_samples=64)
    assert expanded.calibrated and expanded.act_bits == 6
    assert output_step(expanded) == expanded.act_scales[-1]


# ---------------------------------------------------------------------------
# Fixed-point helpers
# ---------------------------------------------------------------------------
@pytest.mark.parametrize(
    "scale, expected",
    [(0.5, (1 << 30, 31)), (1.0, (1 << 30, 30)), (3.0517578125e-4, (1342177280, 42))],
)
def test_fixed_point_multiplier(scale, expected):
    m = fixed_point_multiplier(scale)
    assert tuple(m) == expected
    assert m.multiplier * 2.0 ** -m.shift == scale


def test_fixed_point_multiplier_range():
    for scale in (1e-9, 0.1234, 0.999999, 7.5):
        m = fixed_point_multiplier(scale)
        assert 1 << 30 <= m.multiplier < 1 << 31
        assert m.multiplier * 2.0 ** -m.shift == pytest.approx(scale, rel=2 ** -30)
    with pytest.raises(ValueError):
        fixed_point_multiplier(0.0)


def test_half_even_integer_rounding():
    assert divide_half_even(np.array([5, -5, 7, -7, 6]), 2).tolist() == [2, -2, 4, -4, 3]
    assert rounding_shift(np.array([5, 6, 7, -5]), 1).tolist() == [2, 3, 4, -2]
    big = np.array([3 << 40], dtype=object)
    assert rounding_shift(big, 41).tolist() == [2]


def test_split_orders():
    c1, c2 = split_orders(np.array([1000, -1000, 0]), 2, 8)
    assert c1.tolist() == [8, -8, 0]
    assert c2.tolist() == [-16, 16, 0]
    assert (c1 * 127 + c2).tolist() == [1000, -1000, 0]
    (only,) = split_orders(np.array([300, -300]), 1, 8)
    assert only.tolist() == [127, -128]


# ---------------------------------------------------------------------------
# Integer engine
# ---------------------------------------------------------------------------
def test_integer_engine_is_exact_on_dyadic_scales(rng):
    codes = rng.integers(-7, 8, size=(3, 4))
    codes[:, 0] = 7
    model = _dense(codes / 8.0)
    expanded = expand_model(model, QuantConfig(bits=4), order=1).with_calibration(8, [0.25, 0.03125])
    x = rng.integers(-100, 100, size=(10, 4)) * 0.25
    got = forward_integer(expanded, x)
    assert np.array_equal(got, forward_expanded(expanded, x))
    assert np.array_equal(got, forward_float(model, x))


@pytest.mark.parametrize("fixture", ["mlp", "convnet"])
def test_integer_engine_tracks_float_sim(request, fixture):
    model = request.getfixturevalue(fixture)
    expanded = expand_model(model, QuantConfig(bits=4), order=2)
    expanded = calibrate_expanded(expanded, model, 8, n_samples=512, seed=3)
    x = unit_norm_inputs(np.random.default_rng(99), 500, model.in_features)
    sim = forward_expanded(expanded, x)
    exact = forward_integer(expanded, x)
    assert np.abs(sim - exact).max() <= output_step(expanded)
    assert np.mean(sim.argmax(axis=1) == exact.argmax(axis=1)) >= 0.99


@pytest.mark.parametrize("fixture", ["mlp", "convnet"])
@pytest.mark.parametrize("bits,order,act_bits", [
    (2, 1, 8), (8, 1, 8), (2, 1, 4), (8, 1, 4), (4, 1, 8), (2, 2, 8), (2, 3, 4),
])
def test_integer_engine_stays_within_one_step(request, fixture, bits, order, act_bits):
    model = request.getfixturevalue(fixture)
    expanded = expand_model(model, QuantConfig(bits=bits), order=order)
    expanded = calibrate_expanded(expanded, model, act_bits, n_samples=512, seed=1)
    x = unit_norm_inputs(np.random.default_rng(17), 500, model.in_features)
    diff = np.abs(forward_expanded(expanded, x) - forward_integer(expanded, x)).max()
    assert diff <= output_step(expanded)


@pytest.mark.parametrize("seed", range(5))
def test_large_biases_stay_within_one_step(seed):
    shapes = parse_layer_specs("dense:12:20:relu:bias,dense:20:20:relu:bias,dense:20:6:bias")
    model = generate_synthetic_model(shapes, seed=seed, bias_scale=0.5)
    expanded = calibrate_expanded(expand_model(model, QuantConfig(bits=4), order=1), model, 8, seed=seed)
    x = unit_norm_inputs(np.random.default_rng(seed), 500, model.in_features)
    diff = np.abs(forward_expanded(expanded, x) - forward_integer(expanded, x)).max()
    assert diff <= output_step(expanded)


def test_integer_engine_on_sparse_expansion(mlp):
    expanded = expand_model(mlp, QuantConfig(bits=4), order=3, budget=0.5)
    expanded = calibrate_expanded(expanded, mlp, 8, n_samples=256)
    x = unit_norm_inputs(np.random.default_rng(5), 200, mlp.in_features)
    diff = np.abs(forward_expanded(expanded, x) - forward_integer(expanded, x)).max()
    assert diff <= output_step(expanded)


def test_undersized_accumulator(calibrated):
    with pytest.raises(AccumulatorOverflowError) as info:
        forward_integer(calibrated, np.ones(16), EngineConfig(engine="integer", acc_bits=8))
    assert info.value.layer == "layer0"
    assert "layer0" in str(info.value)
    check_accumulators(calibrated, 32)


def test_integer_engine_rejects_bounded_activations():
    model = generate_synthetic_model(parse_layer_specs("dense:4:4:tanh,dense:4:2"), seed=2)
    expanded = calibrate_expanded(expand_model(model, QuantConfig(bits=4), order=2), model, 8)
    forward_expanded(expanded, np.ones(4))
    with pytest.raises(UnsupportedActivationError):
        forward_integer(expanded, np.ones(4))


def test_run_engine(mlp, calibrated):
    x = np.ones((2, 16)) / 4
    assert np.array_equal(run_engine(EngineConfig(engine="float"), x, model=mlp), forward_float(mlp, x))
    assert np.array_equal(run_engine(EngineConfig(), x, expanded=calibrated), forward_expanded(calibrated, x))
    assert np.array_equal(
        run_engine(EngineConfig(engine="integer"), x, expanded=calibrated), forward_integer(calibrated, x)
    )
    with pytest.raises(ValueError):
        run_engine(EngineConfig(engine="float"), x)
    with pytest.raises(ValueError):
        EngineConfig(acc_bits=4)
