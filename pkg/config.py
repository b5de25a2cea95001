"""
Runtime configuration for the rex-quant toolkit.

Every knob has a built-in default, can be overridden from the environment (or a
``.env`` file loaded by the entry points), and finally by command-line flags.
Values are read at call time so tests and long-running sessions that change
``os.environ`` see the new values without re-importing anything.

    REX_BITS             weight bit-width b (1..8)                     default 4
    REX_ORDER            expansion order K                             default 2
    REX_BUDGET           sparse budget in percent ("" = dense)         default ""
    REX_OPERATOR         quantization operator id                      default uniform
    REX_OUTLIER_FRAC     outlier fraction for outlier-split            default 0.002
    REX_ACT_BITS         activation bit-width (0 = weights only)       default 8
    REX_ACC_BITS         integer accumulator width                     default 32
    REX_CALIBRATION      sample | envelope                             default sample
    REX_CALIB_SAMPLES    calibration batch size                        default 1024
    REX_CALIB_PERCENTILE clip percentile for sample calibration        default 100
    REX_SAMPLES          samples for empirical error estimates         default 10000
    REX_SEED             default seed                                  default 0
    REX_THREADS          worker threads                                default 1
    REX_LOG_LEVEL        logging level                                 default WARNING
"""
import logging
import os
import sys
from typing import Optional

from pydantic import BaseModel, Field


class RexError(Exception):
    """Base class for every error raised by the toolkit."""


# ---------------------------------------------------------------------------
# Environment readers
# ---------------------------------------------------------------------------
def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name, "").strip()
    return int(raw) if raw else default


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name, "").strip()
    return float(raw) if raw else default


def _env_str(name: str, default: str) -> str:
    return os.environ.get(name, default).strip() or default


def _env_budget() -> Optional[float]:
    raw = os.environ.get("REX_BUDGET", "").strip().lower()
    if not raw or raw == "dense":
        return None
    return float(raw)


class Settings(BaseModel):
    """Snapshot of the environment-level defaults."""

    bits: int = Field(4, ge=1, le=8)
    order: int = Field(2, ge=1)
    budget: Optional[float] = Field(None, ge=0)
    operator: str = "uniform"
    outlier_fraction: float = Field(0.002, gt=0, lt=1)
    act_bits: Optional[int] = Field(8, ge=2, le=8)
    acc_bits: int = Field(32, ge=8, le=64)
    calibration: str = "sample"
    calib_samples: int = Field(1024, ge=1)
    calib_percentile: float = Field(100.0, gt=0, le=100)
    samples: int = Field(10_000, ge=1)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    log_level: str = "WARNING"


def get_settings() -> Settings:
    """Build a Settings object from the current environment."""
    act_bits = _env_int("REX_ACT_BITS", 8)
    return Settings(
        bits=_env_int("REX_BITS", 4),
        order=_env_int("REX_ORDER", 2),
        budget=_env_budget(),
        operator=_env_str("REX_OPERATOR", "uniform"),
        outlier_fraction=_env_float("REX_OUTLIER_FRAC", 0.002),
        act_bits=act_bits or None,
        acc_bits=_env_int("REX_ACC_BITS", 32),
        calibration=_env_str("REX_CALIBRATION", "sample"),
        calib_samples=_env_int("REX_CALIB_SAMPLES", 1024),
        calib_percentile=_env_float("REX_CALIB_PERCENTILE", 100.0),
        samples=_env_int("REX_SAMPLES", 10_000),
        seed=_env_int("REX_SEED", 0),
        threads=_env_int("REX_THREADS", 1),
        log_level=_env_str("REX_LOG_LEVEL", "WARNING"),
    )


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install a single stderr handler on the root logger.

    Calling it again only changes the level; handlers are never duplicated.
    """
    level_name = (level or _env_str("REX_LOG_LEVEL", "WARNING")).upper()
    root = logging.getLogger()
    if not any(getattr(h, "_rex_handler", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._rex_handler = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.WARNING))
