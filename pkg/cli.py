"""
rex-quant command line.

    python cli.py generate --layers dense:16:16:relu,dense:16:4 --seed 7 -o m/
    python cli.py quantize m/ --bits 4 --order 2 --budget 50 -o q/
    python cli.py bound m/ q/ --samples 10000
    python cli.py eval m/ q/ --inputs random:1000:seed=3 --engine integer
    python cli.py infer q/ x.bin --engine integer -o y.bin
    python cli.py cost q/
    python cli.py tradeoff m/ --bits 2,4 --orders 1..4 --budgets 0,25,50 -o sweep.csv

Defaults come from the REX_* environment variables (see config.py), which a
``.env`` file in the working directory can set. Exit codes: 0 ok, 2 usage,
3 I/O or file format, 4 computation, 5 a measured error above its certified
bound.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from bounds import (
    SoundnessViolation,
    bound_report,
    check_soundness,
    layer_error_curve,
    output_error,
    sample_inputs,
    weight_rmse,
)
from config import RexError, Settings, configure_logging, get_settings
from cost import CostConfig, EvalConfig, SweepGrid, model_bops, tradeoff_sweep, write_sweep_csv
from expansion import expand_model
from inference import (
    EngineConfig,
    ShapeMismatchError,
    calibrate,
    forward_expanded,
    forward_float,
    forward_integer,
    output_step,
    run_engine,
)
from model_io import (
    EXPANSION_MANIFEST,
    MODEL_MANIFEST,
    ExpandedModel,
    LayerSpecError,
    ModelFormatError,
    generate_synthetic_model,
    load_expanded,
    load_model,
    parse_layer_specs,
    read_tensor_file,
    save_expanded,
    save_model,
    write_tensor_file,
)
from quantizer import QuantConfig, UnknownOperatorError, available_operators

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_COMPUTE = 4
EXIT_UNSOUND = 5


class UsageError(RexError):
    """Raised for flag values the parser cannot reject on its own."""


class CommandConfig(BaseModel):
    """Validated flags of one invocation; every range is checked before any work starts."""

    model_config = ConfigDict(frozen=True)

    command: str
    bits: int = Field(4, ge=1, le=8)
    order: int = Field(2, ge=1)
    budget: Optional[float] = Field(None, ge=0)
    operator: str = "uniform"
    outlier_fraction: float = Field(0.002, gt=0, lt=1)
    granularity: str = "per-channel"
    act_bits: Optional[int] = Field(8, ge=2, le=8)
    acc_bits: int = Field(32, ge=8, le=62)
    engine: str = "float-sim"
    samples: int = Field(10_000, ge=1)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    format: str = "text"

    @field_validator("operator")
    @classmethod
    def _known_operator(cls, value: str) -> str:
        if value not in available_operators():
            raise ValueError(f"unknown operator '{value}' (available: {', '.join(available_operators())})")
        return value


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------
def parse_int_list(text: str) -> List[int]:
    """``"2,4"``, ``"1..4"`` or a mix such as ``"1..3,6"``."""
    values: List[int] = []
    for token in (t.strip() for t in text.split(",") if t.strip()):
        try:
            if ".." in token:
                lo, hi = (int(v) for v in token.split("..", 1))
                values.extend(range(lo, hi + 1))
            else:
                values.append(int(token))
        except ValueError:
            raise argparse.ArgumentTypeError(f"not an integer list: '{text}'") from None
    return values


def parse_budget(text: str) -> Optional[float]:
    """Percent overhead (``50`` = 50%) or ``dense``."""
    if text.strip().lower() == "dense":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"budget must be a percentage or 'dense', got '{text}'") from None


def parse_budget_list(text: str) -> List[Optional[float]]:
    return [parse_budget(t) for t in text.split(",") if t.strip()]


def parse_name_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _command_config(args: argparse.Namespace, settings: Settings, **fields: Any) -> CommandConfig:
    def pick(name: str, default: Any) -> Any:
        value = getattr(args, name, None)
        return default if value is None else value

    act_bits = pick("act_bits", settings.act_bits)
    values: Dict[str, Any] = dict(
        command=args.command,
        bits=pick("bits", settings.bits),
        order=pick("order", settings.order),
        budget=pick("budget", settings.budget),
        operator=pick("operator", settings.operator),
        outlier_fraction=pick("outlier_frac", settings.outlier_fraction),
        granularity=pick("granularity", "per-channel"),
        act_bits=act_bits or None,
        acc_bits=pick("acc_bits", settings.acc_bits),
        engine=pick("engine", "float-sim"),
        samples=pick("samples", settings.samples),
        seed=pick("seed", settings.seed),
        threads=pick("threads", settings.threads),
        format=pick("format", "text"),
    )
    values.update(fields)
    return CommandConfig(**values)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------
def _dump_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(f"wrote {out}", file=sys.stderr)
    else:
        sys.stdout.write(text)


def _render(payload: Dict[str, Any], table: Optional[pd.DataFrame], fmt: str) -> str:
    if fmt == "json":
        return _dump_json(payload)
    if fmt == "csv":
        frame = table if table is not None else pd.DataFrame([payload])
        return frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    lines = [f"{key}: {value}" for key, value in payload.items() if not isinstance(value, (list, dict))]
    if table is not None:
        lines.append(table.to_string(index=False))
    return "\n".join(lines) + "\n"


def _load_any(path: str) -> Any:
    """A model directory or an expanded-model directory, whichever ``path`` holds."""
    if os.path.isfile(os.path.join(path, EXPANSION_MANIFEST)):
        return load_expanded(path)
    if os.path.isfile(os.path.join(path, MODEL_MANIFEST)):
        return load_model(path)
    raise ModelFormatError(f"{path}: neither {MODEL_MANIFEST} nor {EXPANSION_MANIFEST} found")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_generate(args: argparse.Namespace) -> int:
    settings = get_settings()
    cfg = _command_config(args, settings)
    try:
        shapes = parse_layer_specs(args.layers)
        if not shapes:
            raise LayerSpecError("--layers must name at least one layer")
        model = generate_synthetic_model(shapes, cfg.seed, bias_scale=args.bias_scale)
    except LayerSpecError as exc:
        raise UsageError(str(exc)) from None
    save_model(model, args.out)
    print(f"generated {len(model.layers)} layers (seed {cfg.seed}) -> {args.out}")
    return EXIT_OK


def cmd_quantize(args: argparse.Namespace) -> int:
    settings = get_settings()
    cfg = _command_config(args, settings)
    model = load_model(args.model)
    expanded = expand_model(
        model,
        QuantConfig(bits=cfg.bits, granularity=cfg.granularity),
        cfg.order,
        budget=None if cfg.budget is None else cfg.budget / 100.0,
        operator=cfg.operator,
        threads=cfg.threads,
        outlier_fraction=cfg.outlier_fraction,
    )
    if cfg.act_bits is not None:
        scales = calibrate(
            model, cfg.act_bits, args.calibration or settings.calibration,
            args.calib_samples or settings.calib_samples, cfg.seed,
            args.calib_percentile or settings.calib_percentile,
        )
        expanded = expanded.with_calibration(cfg.act_bits, scales)
    save_expanded(expanded, args.out)

    rows = []
    for layer in expanded.layers:
        first = layer.residues[0].q.scales
        rows.append({
            "layer": layer.name,
            "residues": len(layer.residues),
            "gamma": "dense" if layer.gamma is None else f"{layer.gamma:.4f}",
            "kept": ",".join(f"{r.kept_fraction:.3f}" for r in layer.residues),
            "scale_min": float(first.min()),
            "scale_max": float(first.max()),
        })
    summary = {
        "bits": cfg.bits, "order": cfg.order, "operator": cfg.operator,
        "budget": "dense" if cfg.budget is None else cfg.budget,
        "act_bits": cfg.act_bits, "seed": cfg.seed, "out": args.out,
    }
    sys.stdout.write(_render({**summary, "layers": rows}, pd.DataFrame(rows), cfg.format))
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    cfg = _command_config(args, get_settings())
    model = load_model(args.model)
    expanded = load_expanded(args.expanded)
    report = bound_report(
        model, expanded, n_samples=cfg.samples, seed=cfg.seed, mode=args.mode,
        cutoff=args.cutoff, threads=cfg.threads,
    )
    payload = report.model_dump()
    payload["sound"] = report.sound
    table = pd.DataFrame([layer.model_dump() for layer in report.layers])
    if args.curve is not None:
        if args.curve < 1:
            raise UsageError("--curve needs at least one order")
        quant = QuantConfig(bits=expanded.bits, granularity=expanded.metadata.get("granularity", "per-channel"))
        curves = [
            layer_error_curve(spec.weight, quant, args.curve).assign(layer=spec.name)
            for spec in model.layers
        ]
        curve = pd.concat(curves, ignore_index=True)[["layer", "order", "measured", "certified", "literal"]]
        payload["curve"] = json.loads(curve.to_json(orient="records", double_precision=15))
        table = curve
    fmt = "json" if cfg.format == "text" and args.out else cfg.format
    _emit(_render(payload, table, fmt), args.out)
    check_soundness(report)
    return EXIT_OK


def _eval_inputs(spec: str, dim: int, default_seed: int) -> tuple:
    """``random:N[:seed=S]`` or a tensor file; returns (inputs, seed or None)."""
    if spec.startswith("random:"):
        parts = spec.split(":")[1:]
        try:
            count = int(parts[0])
            seed = default_seed
            for part in parts[1:]:
                key, _, value = part.partition("=")
                if key != "seed":
                    raise ValueError(part)
                seed = int(value)
        except (ValueError, IndexError):
            raise UsageError(f"--inputs expects random:N[:seed=S], got '{spec}'") from None
        if count < 1:
            raise UsageError("--inputs needs at least one sample")
        return sample_inputs(count, dim, seed), seed
    return read_tensor_file(spec), None


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _command_config(args, get_settings())
    model = load_model(args.model)
    expanded = load_expanded(args.expanded)
    inputs, seed = _eval_inputs(args.inputs or f"random:{cfg.samples}", model.in_features or 0, cfg.seed)

    reference = np.atleast_2d(forward_float(model, inputs))
    simulated = np.atleast_2d(forward_expanded(expanded, inputs))
    engine_out = simulated
    if cfg.engine == "integer":
        engine_out = np.atleast_2d(forward_integer(expanded, inputs, EngineConfig(engine="integer", acc_bits=cfg.acc_bits)))
    errors = output_error(reference, engine_out)
    l2_errors = np.linalg.norm(reference - engine_out, axis=1)
    payload: Dict[str, Any] = {
        "engine": cfg.engine,
        "samples": int(reference.shape[0]),
        "seed": seed,
        "max_error": float(errors.max(initial=0.0)),
        "mean_error": float(errors.mean()) if errors.size else 0.0,
        "max_l2_error": float(l2_errors.max(initial=0.0)),
        "argmax_agreement": float(np.mean(np.argmax(reference, axis=1) == np.argmax(engine_out, axis=1))),
        "weight_rmse": weight_rmse(model, expanded),
    }
    if cfg.engine == "integer":
        payload["float_sim_agreement"] = float(
            np.mean(np.argmax(simulated, axis=1) == np.argmax(engine_out, axis=1))
        )
        payload["max_deviation_steps"] = float(np.abs(simulated - engine_out).max(initial=0.0) / output_step(expanded))
    fmt = "json" if cfg.format == "text" else cfg.format
    _emit(_render(payload, None, fmt), args.out)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _command_config(args, get_settings())
    target = _load_any(args.path)
    inputs = read_tensor_file(args.input)
    engine = EngineConfig(engine=cfg.engine, acc_bits=cfg.acc_bits, cutoff=args.cutoff)
    if isinstance(target, ExpandedModel):
        if cfg.engine == "float":
            raise UsageError("the float engine runs on a model directory, not an expanded one")
        outputs = run_engine(engine, inputs, expanded=target)
    else:
        if cfg.engine != "float":
            raise UsageError(f"the {cfg.engine} engine needs an expanded model directory")
        outputs = run_engine(engine, inputs, model=target)
    write_tensor_file(args.out, outputs)
    print(f"{cfg.engine}: {inputs.shape} -> {np.shape(outputs)} written to {args.out}")
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    cfg = _command_config(args, get_settings())
    target = _load_any(args.path)
    config = CostConfig(
        bits=cfg.bits, order=cfg.order,
        budget=None if cfg.budget is None else cfg.budget / 100.0,
        multiply_cost=args.multiply_cost, count_input_orders=args.input_orders,
    )
    report = model_bops(target, config)
    table = pd.DataFrame([{**c.model_dump(), "bops_total": c.bops_total} for c in report.layers])
    payload = report.model_dump()
    payload["multiply_cost"] = args.multiply_cost
    _emit(_render(payload, table, cfg.format), args.out)
    return EXIT_OK


def cmd_tradeoff(args: argparse.Namespace) -> int:
    settings = get_settings()
    cfg = _command_config(args, settings, samples=args.samples or 1000)
    if args.grid:
        grid = SweepGrid.from_yaml(args.grid)
    else:
        grid = SweepGrid(
            bits=args.bits_list if args.bits_list is not None else [settings.bits],
            orders=args.orders if args.orders is not None else [settings.order],
            budgets=args.budgets if args.budgets is not None else [settings.budget],
            operators=args.operators if args.operators is not None else [settings.operator],
        )
    eval_config = EvalConfig(
        samples=cfg.samples, seed=cfg.seed, granularity=cfg.granularity, act_bits=cfg.act_bits,
        calibration=args.calibration or settings.calibration,
        calib_samples=settings.calib_samples, outlier_fraction=cfg.outlier_fraction,
        bound_mode=args.mode, multiply_cost=args.multiply_cost,
    )
    print(f"sweeping {len(grid.points())} points on {cfg.samples} inputs (seed {cfg.seed})", file=sys.stderr)
    frame = tradeoff_sweep(load_model(args.model), grid, eval_config, cfg.threads)
    if cfg.format == "json":
        records = json.loads(frame.to_json(orient="records", double_precision=15))
        _emit(_dump_json(records), args.out)
    elif args.out:
        write_sweep_csv(frame, args.out)
        print(f"wrote {len(frame)} rows to {args.out}", file=sys.stderr)
    else:
        write_sweep_csv(frame, sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default REX_SEED or 0)")
    common.add_argument("--format", choices=["text", "json", "csv"], help="report format")
    common.add_argument("--threads", type=int, help="worker threads (results never depend on it)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    return common


def _expansion_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--bits", type=int, help="weight bit-width b in [1, 8]")
    parser.add_argument("--order", type=int, help="expansion order K >= 1")
    parser.add_argument("--budget", type=parse_budget, help="sparse overhead in percent, or 'dense'")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="rex", description="Residual-expansion quantization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a seeded synthetic model")
    p.add_argument("--layers", required=True, help="e.g. dense:16:16:relu,dense:16:4")
    p.add_argument("--bias-scale", type=float, default=0.1)
    p.add_argument("-o", "--out", required=True, help="model directory")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("quantize", parents=[common], help="expand a model")
    p.add_argument("model")
    _expansion_flags(p)
    p.add_argument("--operator", help=f"one of {', '.join(available_operators())}")
    p.add_argument("--outlier-frac", type=float, help="outlier fraction for outlier-split")
    p.add_argument("--granularity", choices=["per-channel", "per-tensor"])
    p.add_argument("--act-bits", type=int, help="activation bit-width, 0 for weights only")
    p.add_argument("--calibration", choices=["sample", "envelope"])
    p.add_argument("--calib-samples", type=int)
    p.add_argument("--calib-percentile", type=float)
    p.add_argument("-o", "--out", required=True, help="expanded model directory")
    p.set_defaults(handler=cmd_quantize)

    p = sub.add_parser("bound", parents=[common], help="certified bound plus empirical check")
    p.add_argument("model")
    p.add_argument("expanded")
    p.add_argument("--samples", type=int, help="inputs for the empirical estimate")
    p.add_argument("--mode", choices=["spectral", "analytic"], default="spectral")
    p.add_argument("--cutoff", type=int, help="keep input/residue pairs with k1 + k2 <= cutoff")
    p.add_argument("--curve", type=int, metavar="K_MAX", help="also report per-layer weight error for orders 1..K_MAX")
    p.add_argument("-o", "--out", help="report file (default stdout)")
    p.set_defaults(handler=cmd_bound)

    p = sub.add_parser("eval", parents=[common], help="error metrics of an expanded model")
    p.add_argument("model")
    p.add_argument("expanded")
    p.add_argument("--inputs", help="random:N[:seed=S] or a tensor file")
    p.add_argument("--samples", type=int)
    p.add_argument("--engine", choices=["float-sim", "integer"])
    p.add_argument("--acc-bits", type=int)
    p.add_argument("-o", "--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="run one tensor file through an engine")
    p.add_argument("path", help="model or expanded model directory")
    p.add_argument("input", help="tensor file")
    p.add_argument("--engine", choices=["float", "float-sim", "integer"])
    p.add_argument("--acc-bits", type=int)
    p.add_argument("--cutoff", type=int)
    p.add_argument("-o", "--out", default="y.bin")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("cost", parents=[common], help="BOPs of a model or expansion")
    p.add_argument("path", help="model or expanded model directory")
    _expansion_flags(p)
    p.add_argument("--multiply-cost", choices=["nlogn", "linear"], default="nlogn")
    p.add_argument("--input-orders", action="store_true", help="count one product per input order")
    p.add_argument("-o", "--out")
    p.set_defaults(handler=cmd_cost)

    p = sub.add_parser("tradeoff", parents=[common], help="sweep bit-width, order and budget")
    p.add_argument("model")
    p.add_argument("--grid", help="YAML file with bits/orders/budgets/operators lists")
    p.add_argument("--bits", dest="bits_list", type=parse_int_list)
    p.add_argument("--orders", type=parse_int_list)
    p.add_argument("--budgets", type=parse_budget_list, help="percentages and/or 'dense'")
    p.add_argument("--operators", type=parse_name_list)
    p.add_argument("--outlier-frac", type=float)
    p.add_argument("--granularity", choices=["per-channel", "per-tensor"])
    p.add_argument("--act-bits", type=int, help="0 for weights only")
    p.add_argument("--calibration", choices=["sample", "envelope"])
    p.add_argument("--samples", type=int, help="inputs per configuration (default 1000)")
    p.add_argument("--mode", choices=["spectral", "analytic"], default="spectral")
    p.add_argument("--multiply-cost", choices=["nlogn", "linear"], default="nlogn")
    p.add_argument("-o", "--out", help="CSV file (default stdout)")
    p.set_defaults(handler=cmd_tradeoff)
    return parser


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ValidationError, UnknownOperatorError, ShapeMismatchError)):
        return EXIT_USAGE
    if isinstance(exc, (ModelFormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, SoundnessViolation):
        return EXIT_UNSOUND
    return EXIT_COMPUTE


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(find_dotenv(usecwd=True), override=True)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    configure_logging({0: None, 1: "INFO"}.get(args.verbose, "DEBUG"))
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (RexError, ValidationError, OSError, ValueError, ArithmeticError) as exc:
        code = _exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        logger.debug("command %s failed", args.command, exc_info=True)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
