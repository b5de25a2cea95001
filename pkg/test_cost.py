import numpy as np
import pandas as pd
import pytest

from cost import (
    SWEEP_COLUMNS,
    CostConfig,
    EvalConfig,
    LayerCostParams,
    SweepGrid,
    effective_bits,
    equal_bops_gap,
    layer_bops,
    model_bops,
    multiply_cost,
    tradeoff_sweep,
    write_sweep_csv,
)
from expansion import budget_for_target_bits, expand_model
from model_io import LayerShape, LayerSpec, Model, generate_synthetic_model, parse_layer_specs
from quantizer import BINARY_GRID, QuantConfig


def test_multiply_cost():
    assert multiply_cost(32) == 160.0
    assert multiply_cost(4) == 8.0
    assert multiply_cost(1) == 1.0
    assert multiply_cost(6, "linear") == 6.0
    with pytest.raises(ValueError):
        multiply_cost(0)


def test_fully_connected_layer_costs():
    fc = dict(n_i=128, n_o=128, b=4)
    one = layer_bops(LayerCostParams(**fc))
    assert one.bops_original == 2_621_440
    assert one.bops_float == 40_960
    assert one.bops_int == 131_072
    assert one.bops_total == 172_032

    two = layer_bops(LayerCostParams(k=2, **fc))
    assert two.bops_total == 303_104

    half = layer_bops(LayerCostParams(k=2, kept=[0.5], **fc))
    assert half.k_eff == 1.5
    assert half.bops_int == 196_608


def test_conv_layer_cost():
    shape = LayerShape(kind="conv2d", in_channels=2, out_channels=4, kernel=3, stride=1, spatial=6)
    cost = layer_bops(LayerCostParams.from_shape(shape, 4))
    assert cost.bops_original == 36 * 9 * 2 * 4 * 160
    assert cost.bops_float == 36 * (2 + 4) * 160


def test_binary_residues_cost_one_bit():
    params = LayerCostParams(n_i=8, n_o=8, b=4, k=2, residue_bits=[4, 1])
    assert layer_bops(params).bops_int == 64 * 8 + 64 * 1


def test_outlier_residue_is_costed_by_density(rng):
    weight = rng.standard_normal((4, 500))
    weight[:, 7] = 40.0
    model = Model(layers=(LayerSpec("layer0", "dense", 500, 4, weight),))
    expanded = expand_model(model, QuantConfig(bits=4), order=2, operator="outlier-split", outlier_fraction=0.002)
    assert expanded.layers[0].residues[1].q.grid == BINARY_GRID
    report = model_bops(expanded)
    assert report.layers[0].k_eff == pytest.approx(1 + 1 / 500)
    assert report.bops_int == pytest.approx(2000 * (8 + 1 / 500))


def test_cost_params_are_validated():
    with pytest.raises(ValueError):
        LayerCostParams(n_i=4, n_o=4, b=4, k=2, kept=[1.5])
    with pytest.raises(ValueError):
        LayerCostParams(n_i=4, n_o=4, b=4, k=3, kept=[0.5])
    with pytest.raises(ValueError):
        LayerCostParams(n_i=4, n_o=4, b=4, k=2, residue_bits=[4])


def test_model_cost_is_layer_sum(weights_only):
    report = model_bops(weights_only)
    assert len(report.layers) == 3
    expected = sum(
        layer_bops(LayerCostParams.from_shape(layer.shape, 4, 2, [1.0])).bops_total
        for layer in weights_only.layers
    )
    assert report.bops_total == pytest.approx(expected)
    assert report.rel_cost == pytest.approx(report.bops_total / report.bops_original)


def test_single_layer_model_cost():
    model = generate_synthetic_model(parse_layer_specs("dense:128:128"), seed=1)
    report = model_bops(model, CostConfig(bits=4, order=2))
    assert report.bops_total == 303_104


def test_planned_cost_matches_expansion(mlp):
    planned = model_bops(mlp, CostConfig(bits=4, order=3, budget=0.5))
    expanded = model_bops(expand_model(mlp, QuantConfig(bits=4), order=3, budget=0.5))
    assert planned.bops_total == pytest.approx(expanded.bops_total)


def test_input_orders_multiply_integer_cost(calibrated):
    plain = model_bops(calibrated)
    counted = model_bops(calibrated, CostConfig(count_input_orders=True))
    assert counted.bops_int == pytest.approx(3 * plain.bops_int / 2)
    assert counted.bops_float == plain.bops_float


def test_equal_bops_construction():
    assert effective_bits(4, 1.5) == 6.0
    assert equal_bops_gap(4, 1.5, 6) == 0.0
    assert equal_bops_gap(4, 1.5, 6, "nlogn") < 0
    assert budget_for_target_bits(1, 8) == 7.0


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------
def test_sweep_grid_validation(tmp_path):
    assert len(SweepGrid(bits=[2, 4], orders=[1, 2, 3, 4], budgets=[0, 25, 50]).points()) == 24
    with pytest.raises(ValueError):
        SweepGrid(bits=[9])
    with pytest.raises(ValueError):
        SweepGrid(orders=[])
    with pytest.raises(ValueError):
        SweepGrid(operators=["nosuch"])

    path = tmp_path / "grid.yaml"
    path.write_text("bits: [2, 4]\norders: [1, 2]\nbudgets: [dense, 25]\n", encoding="utf-8")
    grid = SweepGrid.from_yaml(str(path))
    assert grid.budgets == [None, 25.0]
    assert grid.operators == ["uniform"]


@pytest.fixture
def small_sweep(mlp):
    grid = SweepGrid(bits=[2, 4], orders=[1, 2, 3], budgets=[None, 50])
    return tradeoff_sweep(mlp, grid, EvalConfig(samples=100, seed=1))


def test_sweep_rows_and_order(small_sweep):
    assert len(small_sweep) == 12
    assert list(small_sweep.columns) == SWEEP_COLUMNS
    assert small_sweep["bops_total"].is_monotonic_increasing
    assert (small_sweep["emp_max_err"] <= small_sweep["bound_U"]).all()


def test_sweep_error_falls_with_order(small_sweep):
    dense = small_sweep[small_sweep["gamma_total"].isna() & (small_sweep["b"] == 4)].sort_values("K")
    assert dense["K"].tolist() == [1, 2, 3]
    assert dense["emp_max_err"].is_monotonic_decreasing
    assert dense["weight_rmse"].is_monotonic_decreasing


def test_sweep_ignores_thread_count(mlp):
    grid = SweepGrid(bits=[4], orders=[1, 2], budgets=[None, 25], operators=["uniform", "outlier-split"])
    cfg = EvalConfig(samples=50)
    pd.testing.assert_frame_equal(tradeoff_sweep(mlp, grid, cfg, threads=1), tradeoff_sweep(mlp, grid, cfg, threads=3))


def test_sweep_csv_is_deterministic(mlp, tmp_path):
    grid = SweepGrid(bits=[2, 4], orders=[1, 2], budgets=[0, 50])
    cfg = EvalConfig(samples=50, seed=3)
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_sweep_csv(tradeoff_sweep(mlp, grid, cfg), str(first))
    write_sweep_csv(tradeoff_sweep(mlp, grid, cfg), str(second))
    assert first.read_bytes() == second.read_bytes()
    header = first.read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(SWEEP_COLUMNS)
    assert not np.isnan(pd.read_csv(first)["gamma_total"]).any()


def test_calibrated_sweep(mlp):
    grid = SweepGrid(bits=[4], orders=[2])
    frame = tradeoff_sweep(mlp, grid, EvalConfig(samples=100, act_bits=8, calib_samples=256))
    assert frame.loc[0, "emp_max_err"] <= frame.loc[0, "bound_U"]
