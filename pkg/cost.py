"""
Bit-operation (BOPs) cost model and the accuracy/cost trade-off sweep.

For a layer with input side D, kernel d, stride s, n_i inputs and n_o outputs
(dense layers have D = d = s = 1), and a b-bit multiply costing c(b):

    original   D^2 d^2 n_i n_o / s^2 * c(32)
    expanded   D^2 (n_i + n_o / s^2) * c(32)                  float (de)quantization
             + k_eff * D^2 d^2 n_i n_o / s^2 * c(b)           integer products

where k_eff = 1 + sum of the kept fractions of the orders >= 2 (for a binary
outlier residue, its nonzero density). c(b) is
b log2 b (c(1) = 1) by default, or b with ``multiply_cost="linear"``.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from bounds import error_statistics, network_bound, weight_rmse
from expansion import allocate_budget, channel_quota, expand_model
from inference import calibrate
from model_io import ExpandedModel, LayerShape, Model, Residue
from quantizer import BINARY_GRID, QuantConfig, available_operators

logger = logging.getLogger(__name__)

MultiplyCost = Literal["nlogn", "linear"]

FLOAT_BITS = 32

SWEEP_COLUMNS = [
    "operator", "b", "K", "gamma_total", "bops_int", "bops_float", "bops_total",
    "rel_cost", "weight_rmse", "bound_U", "emp_max_err", "argmax_agree",
]
SWEEP_SORT = ["bops_total", "operator", "b", "K", "gamma_total"]


def multiply_cost(bits: int, model: MultiplyCost = "nlogn") -> float:
    """Cost of one b-bit multiply, in bit operations."""
    if bits < 1:
        raise ValueError(f"bit-width must be >= 1, got {bits}")
    if model == "linear":
        return float(bits)
    if model != "nlogn":
        raise ValueError(f"unknown multiply cost model '{model}'")
    return 1.0 if bits == 1 else bits * math.log2(bits)


# ---------------------------------------------------------------------------
# Per-layer cost
# ---------------------------------------------------------------------------
class LayerCostParams(BaseModel):
    """Geometry and expansion of one layer, as the cost model sees it.

    ``kept`` gives the kept fraction of each order >= 2 (length k - 1);
    ``residue_bits`` optionally overrides b per order (binary residues cost
    1 bit); ``input_orders`` optionally counts, per order, how many input
    orders it is multiplied with.
    """

    model_config = ConfigDict(frozen=True)

    name: str = ""
    D: int = Field(1, ge=1)
    d: int = Field(1, ge=1)
    s: int = Field(1, ge=1)
    n_i: int = Field(ge=1)
    n_o: int = Field(ge=1)
    b: int = Field(ge=1, le=FLOAT_BITS)
    k: int = Field(1, ge=1)
    kept: Optional[List[float]] = None
    residue_bits: Optional[List[int]] = None
    input_orders: Optional[List[int]] = None

    @field_validator("kept")
    @classmethod
    def _fractions(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and any(not 0.0 <= f <= 1.0 for f in value):
            raise ValueError("kept fractions must be in [0, 1]")
        return value

    @model_validator(mode="after")
    def _lengths(self) -> "LayerCostParams":
        if self.kept is not None and len(self.kept) != self.k - 1:
            raise ValueError(f"{len(self.kept)} kept fractions for order {self.k}")
        for what, values in (("residue_bits", self.residue_bits), ("input_orders", self.input_orders)):
            if values is not None and len(values) != self.k:
                raise ValueError(f"{len(values)} {what} entries for order {self.k}")
        return self

    def fractions(self) -> List[float]:
        """Kept fraction of every order, order 1 included."""
        return [1.0] + (list(self.kept) if self.kept is not None else [1.0] * (self.k - 1))

    @property
    def k_eff(self) -> float:
        return math.fsum(self.fractions())

    @classmethod
    def from_shape(cls, shape: LayerShape, bits: int, order: int = 1,
                   kept: Optional[Sequence[float]] = None, **extra: Any) -> "LayerCostParams":
        return cls(
            name=shape.name, D=shape.spatial, d=shape.kernel, s=shape.stride,
            n_i=shape.in_channels, n_o=shape.out_channels, b=bits, k=order,
            kept=None if kept is None else list(kept), **extra,
        )


class LayerCost(BaseModel):
    name: str = ""
    k_eff: float
    bops_original: float
    bops_int: float
    bops_float: float

    @property
    def bops_total(self) -> float:
        return self.bops_int + self.bops_float


def layer_bops(params: LayerCostParams, cost_model: MultiplyCost = "nlogn") -> LayerCost:
    p = params
    c32 = multiply_cost(FLOAT_BITS, cost_model)
    macs = p.D ** 2 * p.d ** 2 * p.n_i * p.n_o / p.s ** 2
    bops_float = p.D ** 2 * (p.n_i + p.n_o / p.s ** 2) * c32
    bits = p.residue_bits or [p.b] * p.k
    pairs = p.input_orders or [1] * p.k
    bops_int = math.fsum(
        fraction * n_pairs * macs * multiply_cost(b, cost_model)
        for fraction, b, n_pairs in zip(p.fractions(), bits, pairs)
    )
    return LayerCost(name=p.name, k_eff=p.k_eff, bops_original=macs * c32,
                     bops_int=bops_int, bops_float=bops_float)


# ---------------------------------------------------------------------------
# Whole-model cost
# ---------------------------------------------------------------------------
class CostConfig(BaseModel):
    """How to cost a model that has not been expanded yet (or how to count an expanded one)."""

    model_config = ConfigDict(frozen=True)

    bits: int = Field(4, ge=1, le=FLOAT_BITS)
    order: int = Field(1, ge=1)
    budget: Optional[float] = Field(None, ge=0)
    multiply_cost: MultiplyCost = "nlogn"
    count_input_orders: bool = False


class CostReport(BaseModel):
    layers: List[LayerCost]
    bops_original: float
    bops_int: float
    bops_float: float
    bops_total: float
    rel_cost: float


def _planned_params(model: Model, config: CostConfig) -> List[LayerCostParams]:
    budgets: List[Optional[float]] = [None] * len(model.layers)
    if config.budget is not None:
        budgets = list(allocate_budget(config.budget, len(model.layers), config.order))
    params = []
    for layer, gamma in zip(model.layers, budgets):
        kept = None
        if gamma is not None:
            quota = channel_quota(gamma, layer.out_channels, config.order)
            kept = [quota / layer.out_channels] * (config.order - 1)
        params.append(LayerCostParams.from_shape(layer.shape, config.bits, config.order, kept))
    return params


def _residue_fraction(residue: Residue) -> float:
    # a binary outlier residue only multiplies where it is nonzero
    if residue.q.grid == BINARY_GRID:
        codes = residue.q.codes
        return float(np.count_nonzero(codes)) / codes.size if codes.size else 0.0
    return residue.kept_fraction


def _expanded_params(expanded: ExpandedModel, config: CostConfig) -> List[LayerCostParams]:
    params = []
    for layer in expanded.layers:
        residues = layer.residues
        extra: Dict[str, Any] = {
            "residue_bits": [1 if r.q.grid == BINARY_GRID else r.q.bits for r in residues],
        }
        if config.count_input_orders and expanded.act_bits is not None:
            cutoff = expanded.order + 1
            extra["input_orders"] = [
                max(0, min(expanded.order, cutoff - r.order)) for r in residues
            ]
        params.append(
            LayerCostParams.from_shape(
                layer.shape, expanded.bits, len(residues),
                [_residue_fraction(r) for r in residues[1:]], **extra,
            )
        )
    return params


def model_bops(target: Union[Model, ExpandedModel], config: Optional[CostConfig] = None) -> CostReport:
    """BOPs of an expanded model, or of a plain model under a planned expansion."""
    config = config or CostConfig()
    if isinstance(target, ExpandedModel):
        params = _expanded_params(target, config)
    else:
        params = _planned_params(target, config)
    layers = [layer_bops(p, config.multiply_cost) for p in params]
    original = math.fsum(c.bops_original for c in layers)
    bops_int = math.fsum(c.bops_int for c in layers)
    bops_float = math.fsum(c.bops_float for c in layers)
    total = bops_int + bops_float
    return CostReport(
        layers=layers, bops_original=original, bops_int=bops_int, bops_float=bops_float,
        bops_total=total, rel_cost=total / original if original else 0.0,
    )


def effective_bits(bits: int, k_eff: float) -> float:
    """Plain bit-width with the same storage as a b-bit expansion of k_eff orders."""
    return bits * k_eff


def equal_bops_gap(
    bits: int, k_eff: float, target_bits: int, cost_model: MultiplyCost = "linear",
    shape: Optional[LayerShape] = None,
) -> float:
    """Relative BOPs difference between a b-bit expansion and a plain target-bit layer."""
    shape = shape or LayerShape(kind="dense", in_channels=128, out_channels=128)
    order = max(1, math.ceil(k_eff))
    kept = None
    if order > 1:
        extra = k_eff - 1.0
        kept = [min(1.0, max(0.0, extra - i)) for i in range(order - 1)]
    expanded = layer_bops(LayerCostParams.from_shape(shape, bits, order, kept), cost_model)
    plain = layer_bops(LayerCostParams.from_shape(shape, target_bits), cost_model)
    return (expanded.bops_int - plain.bops_int) / plain.bops_int


# ---------------------------------------------------------------------------
# Trade-off sweep
# ---------------------------------------------------------------------------
class SweepGrid(BaseModel):
    """Cartesian grid of configurations; budgets are percentages, None = dense."""

    bits: List[int] = Field(default_factory=lambda: [4])
    orders: List[int] = Field(default_factory=lambda: [1, 2])
    budgets: List[Optional[float]] = Field(default_factory=lambda: [None])
    operators: List[str] = Field(default_factory=lambda: ["uniform"])

    @field_validator("bits", "orders", "budgets", "operators")
    @classmethod
    def _non_empty(cls, value: List[Any]) -> List[Any]:
        if not value:
            raise ValueError("sweep axes must not be empty")
        return value

    @model_validator(mode="after")
    def _ranges(self) -> "SweepGrid":
        if any(not 1 <= b <= 8 for b in self.bits):
            raise ValueError("bit-widths must be in [1, 8]")
        if any(k < 1 for k in self.orders):
            raise ValueError("orders must be >= 1")
        if any(g is not None and g < 0 for g in self.budgets):
            raise ValueError("budgets must be non-negative percentages")
        unknown = set(self.operators) - set(available_operators())
        if unknown:
            raise ValueError(f"unknown operators: {', '.join(sorted(unknown))}")
        return self

    def points(self) -> List[Tuple[str, int, int, Optional[float]]]:
        return list(itertools.product(self.operators, self.bits, self.orders, self.budgets))

    @classmethod
    def from_yaml(cls, path: str) -> "SweepGrid":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: sweep grid must be a mapping")
        budgets = raw.get("budgets")
        if budgets is not None:
            raw["budgets"] = [None if str(g).lower() == "dense" else g for g in budgets]
        return cls(**raw)


class EvalConfig(BaseModel):
    """Shared settings for every sweep point."""

    model_config = ConfigDict(frozen=True)

    samples: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    granularity: str = "per-channel"
    act_bits: Optional[int] = Field(None, ge=2, le=8)
    calibration: Literal["sample", "envelope"] = "sample"
    calib_samples: int = Field(1024, ge=1)
    outlier_fraction: float = Field(0.002, gt=0, lt=1)
    bound_mode: Literal["spectral", "analytic"] = "spectral"
    multiply_cost: MultiplyCost = "nlogn"


def _evaluate_point(
    model: Model, point: Tuple[str, int, int, Optional[float]], cfg: EvalConfig
) -> Dict[str, Any]:
    operator, bits, order, budget = point
    expanded = expand_model(
        model, QuantConfig(bits=bits, granularity=cfg.granularity), order,
        budget=None if budget is None else budget / 100.0,
        operator=operator, outlier_fraction=cfg.outlier_fraction,
    )
    if cfg.act_bits is not None:
        expanded = expanded.with_calibration(
            cfg.act_bits,
            calibrate(model, cfg.act_bits, cfg.calibration, cfg.calib_samples, cfg.seed),
        )
    cost = model_bops(expanded, CostConfig(bits=bits, order=order, multiply_cost=cfg.multiply_cost))
    stats = error_statistics(model, expanded, cfg.samples, cfg.seed)
    row = {
        "operator": operator,
        "b": bits,
        "K": order,
        "gamma_total": np.nan if budget is None else float(budget),
        "bops_int": cost.bops_int,
        "bops_float": cost.bops_float,
        "bops_total": cost.bops_total,
        "rel_cost": cost.rel_cost,
        "weight_rmse": weight_rmse(model, expanded),
        "bound_U": network_bound(model, expanded, cfg.bound_mode),
        "emp_max_err": stats.max_error,
        "argmax_agree": stats.argmax_agreement,
    }
    logger.info("sweep %s b=%d K=%d budget=%s: U=%.4g", operator, bits, order, budget, row["bound_U"])
    return row


def tradeoff_sweep(
    model: Model, grid: SweepGrid, eval_config: Optional[EvalConfig] = None, threads: int = 1
) -> pd.DataFrame:
    """One row per grid point, sorted by total BOPs then by configuration."""
    cfg = eval_config or EvalConfig()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda point: _evaluate_point(model, point, cfg), grid.points()))
    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    return frame.sort_values(SWEEP_SORT, kind="mergesort", na_position="first").reset_index(drop=True)


def write_sweep_csv(frame: pd.DataFrame, path: Any) -> None:
    """CSV with a fixed column order and 9 significant digits."""
    frame.to_csv(path, columns=SWEEP_COLUMNS, index=False, float_format="%.9g", lineterminator="\n")
