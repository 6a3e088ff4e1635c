"""Model and input recovery from timing traces.

:func:`recover_model` picks the right model-extraction attack for the
precision the oracle reports.
"""

from __future__ import annotations

from ..oracle import TimingOracle
from .binarymodel import recover_binary_model
from .common import AttackError, AttackResult, ModelComparison, compare_models
from .fixedmodel import recover_fixed_model
from .floatmodel import recover_float_model

__all__ = ["AttackError", "AttackResult", "ModelComparison", "compare_models", "recover_model"]


def recover_model(oracle: TimingOracle, precision: str | None = None) -> AttackResult:
    precision = precision or oracle.precision
    attacks = {"float32": recover_float_model, "fixed": recover_fixed_model, "binary": recover_binary_model}
    if precision not in attacks:
        raise ValueError(f"unknown precision {precision!r}")
    if precision != oracle.precision:
        raise AttackError(f"oracle runs a {oracle.precision} model, not {precision}")
    return attacks[precision](oracle)
