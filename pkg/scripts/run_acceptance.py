"""
Run the full-scale acceptance checks against the toolkit.

The unit tests exercise the same properties on reduced corpora; this runner
uses the full sizes (1,000 weight tensors, 100 MLPs with 10,000 inputs each,
20 models for engine equivalence, ...) and prints one line per check.

Usage:
    python scripts/run_acceptance.py
    python scripts/run_acceptance.py --only lemma1,soundness --scale 0.1

``--scale`` shrinks every corpus proportionally (useful on a laptop); the
pass/fail thresholds stay the same. Exit status is 0 when every selected
check passes and 1 otherwise.
"""
import argparse
import logging
import os
import sys
import tempfile
import time
from typing import Callable, Dict, List, Tuple

import numpy as np

# Allow importing the toolkit modules from the parent directory.
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import cli  # noqa: E402
from bounds import (  # noqa: E402
    AttentionBoundInputs,
    attention_bound,
    bound_report,
    equal_budget_comparison,
    lemma1_bound,
    measured_channel_error,
    softmax_bound,
)
from config import configure_logging  # noqa: E402
from cost import LayerCostParams, equal_bops_gap, layer_bops  # noqa: E402
from expansion import budget_for_target_bits, expand_model, expand_weights, reconstruct  # noqa: E402
from inference import (  # noqa: E402
    calibrate_expanded,
    fixed_point_multiplier,
    forward_expanded,
    forward_integer,
    output_step,
    unit_norm_inputs,
)
from model_io import generate_synthetic_model, parse_layer_specs, write_tensor_file  # noqa: E402
from quantizer import QuantConfig, qmax  # noqa: E402

from dotenv import load_dotenv  # noqa: E402

logger = logging.getLogger("acceptance")

CheckResult = Tuple[bool, str]

ULP = 2.0 ** -23


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def _tensor_corpus(n: int, seed: int):
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        rows, cols = (int(v) for v in rng.integers(1, 65, size=2))
        yield rng.standard_normal((rows, cols)) * rng.uniform(0.01, 10.0)


def _mlp(seed: int, index: int, depth: int = 3, max_width: int = 32):
    rng = np.random.default_rng([seed, index])
    widths = [int(v) for v in rng.integers(4, max_width + 1, size=depth + 1)]
    specs = []
    for i in range(depth):
        act = ":relu" if i < depth - 1 else ""
        specs.append(f"dense:{widths[i]}:{widths[i + 1]}{act}:bias")
    return generate_synthetic_model(parse_layer_specs(",".join(specs)), seed=seed * 1000 + index)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------
def check_lemma1(scale: float, seed: int) -> CheckResult:
    n = _scaled(1000, scale)
    violations = 0
    for w in _tensor_corpus(n, seed):
        slack = 4 * np.spacing(np.abs(w).max())
        for bits in (2, 3, 4, 8):
            residues = expand_weights(w, QuantConfig(bits=bits), 5)
            scales = [r.q.channel_scales() for r in residues]
            for K in range(1, 6):
                bound = lemma1_bound(scales, bits, K)
                err = measured_channel_error(w, residues[:K])
                violations += int(np.sum(err > bound * (1 + 4 * ULP) + slack))
    return violations == 0, f"{n} tensors, {violations} violations"


def check_decay(scale: float, seed: int) -> CheckResult:
    n = _scaled(1000, scale)
    decay_bad = monotone_bad = 0
    for w in _tensor_corpus(n, seed):
        slack = 4 * np.spacing(np.abs(w).max())
        for bits in (2, 3, 4, 8):
            q = qmax(bits)
            residues = expand_weights(w, QuantConfig(bits=bits), 5)
            previous = np.abs(w)
            for k in range(1, 6):
                error = np.abs(w - reconstruct(residues[:k]))
                monotone_bad += int(np.sum(error > previous + slack))
                previous = error
                if k < 5:
                    live = residues[k].q.codes.reshape(residues[k].q.codes.shape[0], -1).any(axis=1)
                    s_k = residues[k - 1].q.channel_scales()[live]
                    s_next = residues[k].q.channel_scales()[live]
                    decay_bad += int(np.sum(s_next > s_k / (2 * q) * (1 + 4 * ULP)))
    return decay_bad == monotone_bad == 0, (
        f"{n} tensors, {decay_bad} scale-decay and {monotone_bad} monotone-error violations"
    )


def check_exact_limit(scale: float, seed: int) -> CheckResult:
    n = _scaled(1000, scale)
    worst = 0.0
    for w in _tensor_corpus(n, seed):
        residues = expand_weights(w, QuantConfig(bits=8), 4)
        s1 = residues[0].q.channel_scales()
        ratio = measured_channel_error(w, residues) / ((1 / 127) ** 3 * s1 / 2)
        worst = max(worst, float(ratio.max(initial=0.0)))
    return worst <= 1 + 4 * ULP, f"{n} tensors, worst error / limit = {worst:.4f}"


def check_soundness(scale: float, seed: int) -> CheckResult:
    n_models = _scaled(100, scale)
    n_samples = _scaled(10_000, scale)
    cases = sound = 0
    worst_ratio = 0.0
    for index in range(n_models):
        model = _mlp(seed, index)
        u_by_order: Dict[int, float] = {}
        for bits in (4, 8):
            for K in (1, 2, 4):
                for budget in (None, 0.5):
                    if budget is not None and K == 1:
                        continue
                    expanded = expand_model(model, QuantConfig(bits=bits), K, budget=budget)
                    report = bound_report(model, expanded, n_samples=n_samples, seed=seed + index)
                    cases += 1
                    sound += int(report.sound)
                    if bits == 8 and budget is None:
                        u_by_order[K] = report.U
        if u_by_order[1] > 0:
            worst_ratio = max(worst_ratio, u_by_order[4] / u_by_order[1])
    ok = sound == cases and worst_ratio <= 1e-4
    return ok, (
        f"{n_models} models x {n_samples} inputs: {sound}/{cases} sound, "
        f"max U(K=4)/U(K=1) at b=8 = {worst_ratio:.2e}"
    )


def check_lemma3(scale: float, seed: int) -> CheckResult:
    n = _scaled(1000, scale)
    wins = 0
    for index in range(n):
        rng = np.random.default_rng([seed, 7, index])
        rows, cols = (int(v) for v in rng.integers(4, 65, size=2))
        w = rng.standard_normal((rows, cols))
        bits = int(rng.choice([2, 3, 4]))
        dense, sparse = equal_budget_comparison(w, QuantConfig(bits=bits), dense_order=2)
        if sparse <= dense * (1 + 1e-12):
            wins += 1
        else:
            logger.warning("layer %d (%dx%d, b=%d): sparse rmse %.6g > dense rmse %.6g",
                           index, rows, cols, bits, sparse, dense)
    rate = wins / n
    return rate >= 0.99, f"{n} layers, sparse <= dense in {rate:.2%}"


# (weight bits, order, activation bits) for the engine comparison
ENGINE_CONFIGS = ((4, 2, 8), (2, 1, 8), (8, 1, 8), (2, 1, 4), (8, 1, 4), (2, 3, 4))


def check_engines(scale: float, seed: int) -> CheckResult:
    n_models = _scaled(20, scale)
    n_inputs = _scaled(1000, scale)
    agree = total = 0
    worst_steps = 0.0
    for index in range(n_models):
        model = _mlp(seed + 1, index)
        bits, order, act_bits = ENGINE_CONFIGS[index % len(ENGINE_CONFIGS)]
        expanded = expand_model(model, QuantConfig(bits=bits), order)
        expanded = calibrate_expanded(expanded, model, act_bits, n_samples=1024, seed=seed + index)
        x = unit_norm_inputs(np.random.default_rng([seed, 11, index]), n_inputs, model.in_features)
        sim = forward_expanded(expanded, x)
        exact = forward_integer(expanded, x)
        worst_steps = max(worst_steps, float(np.abs(sim - exact).max() / output_step(expanded)))
        if act_bits == 8 and order > 1:
            agree += int(np.sum(sim.argmax(axis=1) == exact.argmax(axis=1)))
            total += n_inputs
    dyadic_bad = 0
    for exponent in range(-40, 11):
        m = fixed_point_multiplier(2.0 ** exponent)
        dyadic_bad += int(m.multiplier * 2.0 ** -m.shift != 2.0 ** exponent)
    rate = agree / total if total else 1.0
    ok = worst_steps <= 1.0 and rate >= 0.999 and dyadic_bad == 0
    return ok, (
        f"{n_models} models x {n_inputs} inputs: max deviation {worst_steps:.3f} steps, "
        f"argmax agreement at a=8, K>1 {rate:.4%}, {dyadic_bad} inexact dyadic multipliers"
    )


def check_bops(scale: float, seed: int) -> CheckResult:
    fc = dict(n_i=128, n_o=128, b=4)
    observed = (
        layer_bops(LayerCostParams(**fc)).bops_total,
        layer_bops(LayerCostParams(k=2, **fc)).bops_total,
        layer_bops(LayerCostParams(k=2, kept=[0.5], **fc)).bops_int,
    )
    expected = (172_032, 303_104, 196_608)
    gap = equal_bops_gap(4, 1.5, 6, "linear")
    budget = budget_for_target_bits(1, 8)
    ok = observed == expected and abs(gap) <= 0.02 and budget == 7.0
    return ok, f"FC examples {observed}, equal-BOPs gap {gap:+.2%}, 700% example gamma = {budget}"


def check_outliers(scale: float, seed: int) -> CheckResult:
    rng = np.random.default_rng([seed, 3])
    rows = _scaled(256, scale)
    w = rng.standard_normal((rows, 500))
    # one outlier per 500-wide channel: 0.2% of the entries at ten times the bulk range
    cols = rng.integers(0, 500, size=rows)
    bulk = np.abs(w).max(axis=1)
    w[np.arange(rows), cols] = rng.choice([-1.0, 1.0], size=rows) * 10 * bulk * rng.uniform(0.9, 1.1, size=rows)

    cfg = QuantConfig(bits=4)
    plain = reconstruct(expand_weights(w, cfg, 1))
    residues = expand_weights(w, cfg, 2, "outlier-split", outlier_fraction=0.002)
    split = reconstruct(residues)
    rmse_plain = float(np.sqrt(np.mean((w - plain) ** 2)))
    rmse_split = float(np.sqrt(np.mean((w - split) ** 2)))
    density = np.count_nonzero(residues[1].q.codes) / residues[1].q.codes.size
    ok = rmse_plain >= 2 * rmse_split and density <= 0.0025
    return ok, (
        f"rmse {rmse_plain:.4f} -> {rmse_split:.4f} ({rmse_plain / rmse_split:.1f}x), "
        f"outlier density {density:.3%}"
    )


def check_attention(scale: float, seed: int) -> CheckResult:
    eps = attention_bound(AttentionBoundInputs(sigma_q=0.2, sigma_k=0.1, alpha_q=1.0, alpha_k=1.0))
    examples_ok = abs(eps - 0.32) <= 1e-12 and abs(softmax_bound(eps) - (1 - np.exp(-0.64))) <= 1e-12

    n = _scaled(100_000, scale)
    rng = np.random.default_rng([seed, 9])
    values = rng.uniform(0, 10, size=(n, 4))
    bumps = rng.uniform(0, 1, size=n)
    which = rng.integers(0, 4, size=n)
    broken = 0
    for row, bump, index in zip(values, bumps, which):
        bumped = row.copy()
        bumped[index] += bump
        low = attention_bound(AttentionBoundInputs(sigma_q=row[0], sigma_k=row[1], alpha_q=row[2], alpha_k=row[3]))
        high = attention_bound(
            AttentionBoundInputs(sigma_q=bumped[0], sigma_k=bumped[1], alpha_q=bumped[2], alpha_k=bumped[3])
        )
        broken += int(high < low or softmax_bound(high) < softmax_bound(low))
    return examples_ok and broken == 0, f"examples {'ok' if examples_ok else 'MISMATCH'}, {n} quadruples, {broken} non-monotone"


def _cli_run(workdir: str, seed: int) -> Dict[str, bytes]:
    m, q = os.path.join(workdir, "m"), os.path.join(workdir, "q")
    x = os.path.join(workdir, "x.bin")
    commands = [
        ["generate", "--layers", "dense:16:24:relu:bias,dense:24:8", "--seed", str(seed), "-o", m],
        ["quantize", m, "--bits", "4", "--order", "3", "--budget", "50", "--seed", str(seed), "-o", q],
        ["bound", m, q, "--samples", "500", "--seed", str(seed), "-o", os.path.join(workdir, "bound.json")],
        ["eval", m, q, "--inputs", f"random:500:seed={seed}", "--engine", "integer",
         "-o", os.path.join(workdir, "eval.json")],
        ["cost", q, "--format", "json", "-o", os.path.join(workdir, "cost.json")],
        ["tradeoff", m, "--bits", "2,4", "--orders", "1..3", "--budgets", "0,50", "--samples", "200",
         "--seed", str(seed), "-o", os.path.join(workdir, "sweep.csv")],
    ]
    for argv in commands:
        if cli.main(argv) != cli.EXIT_OK:
            raise RuntimeError(f"command failed: {' '.join(argv[:1])}")
    rng = np.random.default_rng(seed)
    write_tensor_file(x, unit_norm_inputs(rng, 32, 16).astype(np.float32))
    if cli.main(["infer", q, x, "--engine", "integer", "-o", os.path.join(workdir, "y.bin")]) != cli.EXIT_OK:
        raise RuntimeError("command failed: infer")

    outputs = {}
    for root, _, files in os.walk(workdir):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                outputs[os.path.relpath(path, workdir)] = fh.read()
    return outputs


def check_determinism(scale: float, seed: int) -> CheckResult:
    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        a = _cli_run(first, seed)
        b = _cli_run(second, seed)
    differing = sorted(name for name in a.keys() | b.keys() if a.get(name) != b.get(name))
    return not differing, f"{len(a)} files compared, differing: {', '.join(differing) or 'none'}"


CHECKS: Dict[str, Callable[[float, int], CheckResult]] = {
    "lemma1": check_lemma1,
    "decay": check_decay,
    "exact": check_exact_limit,
    "soundness": check_soundness,
    "lemma3": check_lemma3,
    "engines": check_engines,
    "bops": check_bops,
    "outliers": check_outliers,
    "attention": check_attention,
    "determinism": check_determinism,
}


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the full-scale acceptance checks.")
    parser.add_argument("--only", help=f"comma-separated subset of: {', '.join(CHECKS)}")
    parser.add_argument("--scale", type=float, default=1.0, help="corpus size multiplier (default 1.0)")
    parser.add_argument("--seed", type=int, default=int(os.environ.get("REX_SEED", "0")))
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()

    load_dotenv(override=True)
    configure_logging("INFO" if args.verbose else None)

    selected: List[str] = [c.strip() for c in args.only.split(",")] if args.only else list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        parser.error(f"unknown check(s): {', '.join(unknown)}")

    print(f"Acceptance run (scale {args.scale}, seed {args.seed})\n")
    failed = []
    for name in selected:
        print(f"  - {name:<12}", end="", flush=True)
        started = time.perf_counter()
        ok, detail = CHECKS[name](args.scale, args.seed)
        elapsed = time.perf_counter() - started
        print(f"{'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s]")
        if not ok:
            failed.append(name)

    print(f"\nDone. {len(selected) - len(failed)}/{len(selected)} checks passed")
    if failed:
        print(f"Failed: {', '.join(failed)}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
