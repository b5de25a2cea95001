import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quantizer import (
    BINARY_GRID,
    OutlierSplitOperator,
    QuantConfig,
    QuantizationError,
    QuantizedTensor,
    UniformOperator,
    UnknownOperatorError,
    available_operators,
    compute_scale,
    dequantize,
    get_operator,
    outlier_split,
    qmax,
    qmin,
    quantize,
    quantize_op,
)


def test_code_range():
    assert (qmin(4), qmax(4)) == (-8, 7)
    assert (qmin(8), qmax(8)) == (-128, 127)
    assert (qmin(1), qmax(1)) == (-1, 0)


def test_three_bit_example():
    w = np.array([[0.9, -0.45, 0.3]], dtype=np.float32)
    cfg = QuantConfig(bits=3)
    scales = compute_scale(w, cfg)
    assert scales[0] == pytest.approx(0.3, rel=1e-6)
    q = quantize(w, scales, cfg)
    assert q.codes.tolist() == [[3, -2, 1]]
    assert dequantize(q)[0] == pytest.approx([0.9, -0.6, 0.3], rel=1e-6)


def test_zero_channel_gets_unit_scale():
    w = np.zeros((2, 5))
    w[1] = [1, -2, 3, 0, 0.5]
    cfg = QuantConfig(bits=4)
    scales = compute_scale(w, cfg)
    assert scales[0] == 1.0
    q = quantize(w, scales, cfg)
    assert not q.codes[0].any()
    assert np.array_equal(dequantize(q)[0], np.zeros(5))


def test_per_tensor_granularity_uses_one_scale(rng):
    w = rng.standard_normal((6, 10))
    cfg = QuantConfig(bits=4, granularity="per-tensor")
    scales = compute_scale(w, cfg)
    assert scales.shape == (1,)
    assert scales[0] == pytest.approx(np.abs(w).max() / 7, rel=1e-6)
    assert quantize(w, scales, cfg).n_channels == 6


def test_rounding_is_half_to_even():
    w = np.array([[2.5, 1.5, -0.5, 7.0]])
    q = quantize(w, np.array([1.0], dtype=np.float32), QuantConfig(bits=4))
    assert q.codes.tolist() == [[2, 2, 0, 7]]


def test_codes_are_clamped():
    q = quantize(np.array([[100.0, -100.0]]), np.array([1.0], dtype=np.float32), QuantConfig(bits=4))
    assert q.codes.tolist() == [[7, -8]]


def test_one_bit_grid():
    w = np.array([[0.7, -0.2, 0.0]])
    cfg = QuantConfig(bits=1)
    q = quantize(w, compute_scale(w, cfg), cfg)
    assert q.codes.min() >= -1 and q.codes.max() <= 0


def test_rejects_bad_inputs():
    cfg = QuantConfig(bits=4)
    with pytest.raises(QuantizationError):
        quantize(np.array([[np.nan, 1.0]]), np.array([1.0]), cfg)
    with pytest.raises(QuantizationError):
        quantize(np.ones((2, 2)), np.array([0.0, 1.0]), cfg)
    with pytest.raises(QuantizationError):
        quantize(np.ones((3, 2)), np.array([1.0, 1.0]), cfg)
    with pytest.raises(ValueError):
        QuantConfig(bits=9)
    with pytest.raises(ValueError):
        QuantConfig(symmetric=False)


def test_quantized_tensor_validates_codes():
    with pytest.raises(QuantizationError):
        QuantizedTensor(np.array([[9]]), np.array([1.0]), bits=4)
    with pytest.raises(QuantizationError):
        QuantizedTensor(np.array([[2]]), np.array([1.0]), bits=1, grid=BINARY_GRID)
    with pytest.raises(QuantizationError):
        QuantizedTensor(np.array([[0.5]]), np.array([1.0]), bits=4)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 12)), elements=st.integers(-4000, 4000)),
    st.integers(2, 8),
)
def test_error_within_half_step(raw, bits):
    w = raw / 1000.0
    cfg = QuantConfig(bits=bits)
    q = quantize(w, compute_scale(w, cfg), cfg)
    err = np.abs(w - dequantize(q)).reshape(w.shape[0], -1)
    s = q.channel_scales()[:, None]
    assert np.all(err <= s / 2 * (1 + 1e-9) + 1e-15)


def test_registry():
    assert {"uniform", "outlier-split"} <= set(available_operators())
    assert isinstance(get_operator("uniform"), UniformOperator)
    op = get_operator("outlier-split", outlier_fraction=0.01)
    assert isinstance(op, OutlierSplitOperator) and op.outlier_fraction == 0.01
    with pytest.raises(UnknownOperatorError):
        get_operator("nonexistent")


def test_quantize_op_matches_plain_quantization(rng):
    w = rng.standard_normal((4, 9))
    cfg = QuantConfig(bits=4)
    a = quantize_op(w, cfg)
    b = quantize(w, compute_scale(w, cfg), cfg)
    assert np.array_equal(a.codes, b.codes)


# ---------------------------------------------------------------------------
# Outlier split
# ---------------------------------------------------------------------------
def _heavy_tailed(rng, rows=512, cols=1000):
    w = rng.standard_normal((rows, cols))
    peak = np.abs(w).max(axis=1)
    for i in range(rows):
        idx = rng.choice(cols, size=2, replace=False)
        w[i, idx] = np.array([1.0, -1.0]) * 10 * peak[i]
    return w


def test_outlier_split_beats_plain_quantization(rng):
    w = _heavy_tailed(rng)
    cfg = QuantConfig(bits=4)
    split = outlier_split(w, cfg, 0.002)
    plain = dequantize(quantize(w, compute_scale(w, cfg), cfg))
    rmse_plain = np.sqrt(np.mean((w - plain) ** 2))
    rmse_split = np.sqrt(np.mean((w - split.reconstruct()) ** 2))
    assert rmse_split * 2 <= rmse_plain
    assert split.density <= 0.0025
    assert np.abs(w - split.reconstruct()).max() < np.abs(w - plain).max()


def test_outlier_codes_are_signs():
    w = np.array([[0.1, -0.2, 0.15, 5.0, -0.05, 0.12, 0.0, 0.3, -0.1, 0.2]])
    split = outlier_split(w, QuantConfig(bits=4), 0.1)
    assert split.indices.tolist() == [3]
    assert split.outlier_codes[0, 3] == 1
    assert split.clip[0] == pytest.approx(0.3)
    assert split.outlier_scale[0] == pytest.approx(4.7, rel=1e-6)


def test_outlier_split_without_candidates(rng):
    w = rng.standard_normal((3, 50))
    split = outlier_split(w, QuantConfig(bits=4), 0.002)
    assert split.indices.size == 0
    cfg = QuantConfig(bits=4)
    assert np.allclose(split.reconstruct(), dequantize(quantize(w, compute_scale(w, cfg), cfg)))
    assert len(OutlierSplitOperator(0.002).lead_residues(w, cfg, 2)) == 1


def test_outlier_singleton_channel_is_the_outlier():
    split = outlier_split(np.array([[5.0]]), QuantConfig(bits=4), 0.5)
    assert split.indices.tolist() == [0]
    assert split.clip[0] == 0.0
    assert split.outlier_scale[0] == pytest.approx(5.0)
    assert split.reconstruct()[0, 0] == pytest.approx(5.0)


@pytest.mark.parametrize("n,p,expected", [(50, 0.002, 0), (500, 0.002, 1), (1000, 0.002, 2), (16, 0.05, 1), (10, 0.25, 3)])
def test_outlier_count_is_nearest_rank(n, p, expected):
    w = np.arange(1, n + 1, dtype=np.float64)[None, :]
    split = outlier_split(w, QuantConfig(bits=4), p)
    assert split.indices.size == expected
    assert split.density <= p + 1 / n


def test_outlier_fraction_range():
    with pytest.raises(QuantizationError):
        outlier_split(np.ones((2, 2)), QuantConfig(bits=4), 0.0)
    with pytest.raises(QuantizationError):
        OutlierSplitOperator(outlier_fraction=1.5)


def test_outlier_operator_with_one_residue_is_plain(rng):
    w = _heavy_tailed(rng, rows=4, cols=1000)
    cfg = QuantConfig(bits=4)
    (only,) = OutlierSplitOperator().lead_residues(w, cfg, 1)
    assert np.array_equal(only.codes, quantize(w, compute_scale(w, cfg), cfg).codes)
