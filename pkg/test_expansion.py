import numpy as np
import pytest

from expansion import (
    ExpansionError,
    allocate_budget,
    budget_for_target_bits,
    channel_quota,
    expand_input,
    expand_model,
    expand_weights,
    expand_weights_sparse,
    input_scales,
    reconstruct,
    sparse_mask,
)
from quantizer import BINARY_GRID, QuantConfig, compute_scale, dequantize, quantize


def _channel_error(w, residues):
    diff = np.abs(np.asarray(w, dtype=np.float64) - reconstruct(residues))
    return diff.reshape(diff.shape[0], -1).max(axis=1)


# ---------------------------------------------------------------------------
# Dense expansion
# ---------------------------------------------------------------------------
def test_two_order_example_is_exact():
    w = np.array([[0.9, -0.45, 0.3]], dtype=np.float32)
    first, second = expand_weights(w, QuantConfig(bits=3), 2)
    assert first.q.codes.tolist() == [[3, -2, 1]]
    assert first.q.scales[0] == pytest.approx(0.3, rel=1e-6)
    assert second.q.codes.tolist() == [[0, 3, 0]]
    assert second.q.scales[0] == pytest.approx(0.05, rel=1e-5)
    assert reconstruct([first, second])[0] == pytest.approx([0.9, -0.45, 0.3], abs=1e-6)


def test_single_order_is_plain_quantization(rng):
    w = rng.standard_normal((5, 7))
    cfg = QuantConfig(bits=4)
    (only,) = expand_weights(w, cfg, 1)
    plain = quantize(w, compute_scale(w, cfg), cfg)
    assert np.array_equal(only.q.codes, plain.codes)
    assert np.array_equal(reconstruct([only]), dequantize(plain))


def test_zero_weights_stay_zero():
    residues = expand_weights(np.zeros((3, 4)), QuantConfig(bits=4), 3)
    assert len(residues) == 3
    for r in residues:
        assert not r.q.codes.any()
        assert np.all(r.q.scales == 1.0)


def test_error_decays_geometrically(rng):
    w = rng.standard_normal((6, 20))
    cfg = QuantConfig(bits=8)
    residues = expand_weights(w, cfg, 4)
    s1 = residues[0].q.channel_scales()
    assert np.all(_channel_error(w, residues) <= (1 / 127) ** 3 * s1 / 2)


def test_error_never_grows_with_order(rng):
    w = rng.standard_normal((4, 4, 3, 3))
    cfg = QuantConfig(bits=4)
    residues = expand_weights(w, cfg, 5)
    errors = [_channel_error(w, residues[:k]).max() for k in range(1, 6)]
    assert all(b <= a for a, b in zip(errors, errors[1:]))
    assert errors[-1] < errors[0] / 1000


def test_outlier_operator_leads_with_a_binary_residue(rng):
    w = rng.standard_normal((8, 1000))
    w[:, 0] = 25.0
    residues = expand_weights(w, QuantConfig(bits=4), 3, "outlier-split", outlier_fraction=0.002)
    assert [r.order for r in residues] == [1, 2, 3]
    assert residues[1].q.grid == BINARY_GRID
    plain = expand_weights(w, QuantConfig(bits=4), 1)
    assert _channel_error(w, residues).max() < _channel_error(w, plain).max()


def test_bad_order_and_empty_reconstruction():
    with pytest.raises(ExpansionError):
        expand_weights(np.ones((2, 2)), QuantConfig(bits=4), 0)
    with pytest.raises(ExpansionError):
        reconstruct([])


# ---------------------------------------------------------------------------
# Sparse expansion
# ---------------------------------------------------------------------------
def test_mask_keeps_highest_norm_channel():
    residual = np.array([[0.4], [0.9]])
    mask = sparse_mask(residual, 0.5, 2, 2)
    assert mask.kept.tolist() == [1]
    assert mask.threshold == pytest.approx(0.9)
    assert mask.norms.tolist() == pytest.approx([0.4, 0.9])


def test_mask_extremes():
    residual = np.array([[0.4, 0.1], [0.9, 0.0], [0.2, 0.2]])
    empty = sparse_mask(residual, 0.0, 2, 2)
    assert empty.kept.size == 0 and empty.threshold == np.inf
    full = sparse_mask(residual, 1.0, 2, 2)
    assert full.dense and full.kept.tolist() == [0, 1, 2]


def test_mask_ties_go_to_lower_index():
    mask = sparse_mask(np.array([[1.0], [2.0], [2.0], [1.0]]), 0.25, 2, 2)
    assert mask.kept.tolist() == [1]


def test_mask_arguments_are_checked():
    with pytest.raises(ExpansionError):
        sparse_mask(np.ones((2, 2)), 0.5, 1, 3)
    with pytest.raises(ExpansionError):
        sparse_mask(np.ones((2, 2)), -0.1, 2, 3)
    with pytest.raises(ExpansionError):
        sparse_mask(np.ones((2, 2)), float("nan"), 2, 3)


def test_channel_quota():
    assert channel_quota(0.5, 2, 2) == 1
    assert channel_quota(1.0, 10, 3) == 5
    assert channel_quota(5.0, 10, 3) == 10
    assert channel_quota(1.0, 10, 1) == 0
    assert channel_quota(1.0, 10, 3, first_sparse=3) == 10
    assert channel_quota(1.0, 10, 2, first_sparse=3) == 0


def test_sparse_orders_follow_the_residual():
    w = np.array([[1.0, 0.4], [1.0, 0.3]])
    residues = expand_weights_sparse(w, QuantConfig(bits=2), 3, gamma=1.0)
    assert residues[0].mask is None
    assert residues[1].mask.tolist() == [0]
    assert residues[2].mask.tolist() == [1]


def test_untouched_channel_keeps_its_first_order_error():
    w = np.array([[1.0, -0.3, 0.77], [0.01, 0.002, -0.007]])
    cfg = QuantConfig(bits=4)
    residues = expand_weights_sparse(w, cfg, 3, gamma=1.0)
    assert all(r.mask.tolist() == [0] for r in residues[1:])
    first = dequantize(residues[0].q)
    assert np.array_equal(reconstruct(residues)[1], first[1])


def test_saturated_budget_is_dense(rng):
    w = rng.standard_normal((6, 3, 2, 2))
    cfg = QuantConfig(bits=4)
    dense = expand_weights(w, cfg, 3)
    sparse = expand_weights_sparse(w, cfg, 3, gamma=2.0)
    for a, b in zip(dense, sparse):
        assert b.mask is None
        assert np.array_equal(a.q.codes, b.q.codes)
        assert np.array_equal(a.q.scales, b.q.scales)


def test_zero_budget_keeps_empty_residues(rng):
    w = rng.standard_normal((4, 5))
    residues = expand_weights_sparse(w, QuantConfig(bits=4), 3, gamma=0.0)
    assert len(residues) == 3
    assert all(r.mask.size == 0 for r in residues[1:])
    assert np.array_equal(reconstruct(residues), dequantize(residues[0].q))


# ---------------------------------------------------------------------------
# Budgets
# ---------------------------------------------------------------------------
def test_linear_allocation():
    assert allocate_budget(0.3, 3, 4) == pytest.approx([0.15, 0.3, 0.45])
    assert allocate_budget(0.7, 1, 3) == pytest.approx([0.7])
    assert allocate_budget(0.5, 0, 3) == []


def test_allocation_redistributes_capped_surplus():
    budgets = allocate_budget(0.9, 3, 2)
    assert budgets == pytest.approx([0.7, 1.0, 1.0])
    assert sum(budgets) == pytest.approx(2.7)
    assert allocate_budget(1.5, 2, 2) == pytest.approx([1.0, 1.0])


def test_allocation_rejects_negative_budget():
    with pytest.raises(ExpansionError):
        allocate_budget(-0.1, 3, 2)


def test_budget_for_target_bits():
    assert budget_for_target_bits(1, 8) == 7.0
    assert budget_for_target_bits(4, 8) == 1.0
    assert budget_for_target_bits(8, 8) == 0.0


# ---------------------------------------------------------------------------
# Input expansion
# ---------------------------------------------------------------------------
def test_input_scales():
    scales = input_scales(0.5, 8, 3)
    assert scales == pytest.approx([0.5, 0.5 / 127, 0.5 / 127 ** 2], rel=1e-6)
    assert all(s == float(np.float32(s)) for s in scales)


def test_grid_input_needs_one_order():
    x = np.array([[0.25, -0.5, 1.75]])
    expansion = expand_input(x, QuantConfig(bits=4), 3, 0.25)
    assert expansion.orders[0].codes.tolist() == [[1, -2, 7]]
    assert all(not q.codes.any() for q in expansion.orders[1:])
    assert np.array_equal(expansion.dequantized(), x)


def test_input_error_within_last_half_step(rng):
    x = rng.standard_normal((16, 10))
    scale = float(np.abs(x).max()) / 7
    for K in range(1, 5):
        expansion = expand_input(x, QuantConfig(bits=4), K, scale)
        err = np.abs(x - expansion.dequantized()).max()
        assert err <= expansion.scales[-1] / 2 * (1 + 1e-6)


def test_input_expansion_is_per_tensor(rng):
    x = rng.standard_normal((4, 6))
    expansion = expand_input(x, QuantConfig(bits=8), 2, 0.05)
    assert all(q.scales.shape == (1,) for q in expansion.orders)
    zero = expand_input(np.zeros((2, 3)), QuantConfig(bits=8), 3, 0.05)
    assert all(not q.codes.any() for q in zero.orders)


def test_input_expansion_needs_calibration():
    with pytest.raises(ExpansionError):
        expand_input(np.ones(3), QuantConfig(bits=8), 2, None)
    with pytest.raises(ExpansionError):
        expand_input(np.ones(3), QuantConfig(bits=8), 2, 0.0)


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------
def test_expand_model_dense(mlp):
    expanded = expand_model(mlp, QuantConfig(bits=4), order=3)
    assert expanded.budgets == (None, None, None)
    assert all(len(layer.residues) == 3 for layer in expanded.layers)
    assert expanded.operator == "uniform"
    assert expanded.metadata["granularity"] == "per-channel"
    assert expanded.metadata["source"]["seed"] == 7
    assert np.array_equal(expanded.layers[0].bias, mlp.layers[0].bias)


def test_expand_model_sparse(mlp):
    expanded = expand_model(mlp, QuantConfig(bits=4), order=3, budget=0.3)
    assert expanded.budgets == pytest.approx((0.15, 0.3, 0.45))
    assert expanded.metadata["budget_total"] == 0.3
    for layer in expanded.layers:
        assert all(r.mask is None or r.mask.size for r in layer.residues)
    none = expand_model(mlp, QuantConfig(bits=4), order=3, budget=0.0)
    assert all(len(layer.residues) == 1 for layer in none.layers)


def test_expand_model_ignores_thread_count(convnet):
    cfg = QuantConfig(bits=4)
    one = expand_model(convnet, cfg, order=3, budget=0.5, threads=1)
    many = expand_model(convnet, cfg, order=3, budget=0.5, threads=4)
    for a, b in zip(one.layers, many.layers):
        assert len(a.residues) == len(b.residues)
        for ra, rb in zip(a.residues, b.residues):
            assert np.array_equal(ra.q.codes, rb.q.codes)
            assert np.array_equal(ra.q.scales, rb.q.scales)


def test_expand_model_records_outlier_fraction(mlp):
    expanded = expand_model(mlp, QuantConfig(bits=4), order=2, operator="outlier-split",
                            outlier_fraction=0.01)
    assert expanded.operator == "outlier-split"
    assert expanded.metadata["outlier_fraction"] == 0.01


def test_outlier_budget_covers_the_remaining_orders(rng):
    w = rng.standard_normal((8, 1000))
    w[:, 0] = 25.0
    residues = expand_weights_sparse(w, QuantConfig(bits=4), 4, 1.0, "outlier-split", outlier_fraction=0.002)
    assert residues[1].q.grid == BINARY_GRID
    assert [r.mask.size for r in residues[2:]] == [4, 4]


def test_registered_operator_quantizes_every_order(mlp, pow2_operator):
    for budget in (None, 0.5):
        expanded = expand_model(mlp, QuantConfig(bits=4), order=3, budget=budget, operator=pow2_operator)
        assert expanded.operator == pow2_operator
        for layer in expanded.layers:
            assert len(layer.residues) == 3
            for residue in layer.residues:
                scales = residue.q.scales
                assert np.array_equal(scales, np.exp2(np.round(np.log2(scales))))
    first = expand_model(mlp, QuantConfig(bits=4), order=1, operator=pow2_operator)
    third = expand_model(mlp, QuantConfig(bits=4), order=3, operator=pow2_operator)
    for spec, a, b in zip(mlp.layers, first.layers, third.layers):
        w = spec.weight.astype(np.float64)
        assert np.abs(w - reconstruct(b.residues)).max() < np.abs(w - reconstruct(a.residues)).max()
