"""Cycle-cost profiles for the emulated micro-controllers.

A profile is a flat bag of cycle constants consumed by the leaky kernels in
:mod:`nnleak.arith` and the constant-time kernels in :mod:`nnleak.hardened`.
Three platforms are built in; others can be loaded from ``key = value`` text
files.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

PROFILE_DIR_ENV = "NNLEAK_PROFILE_DIR"
PROFILE_SUFFIX = ".profile"


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class CostProfile:
    name: str
    # float multiply: shift-and-add over 8-bit significands
    fmul_base: int
    fmul_add: int
    fmul_carry: int
    fmul_shift: int
    fmul_norm: int
    fmul_round: int
    fmul_sticky: int
    fmul_zero: int
    # float add: exponent alignment loop
    fadd_base: int
    fadd_shift: int
    # float ReLU classes
    frelu_pos: int
    frelu_zero: int
    frelu_neg: int
    # integer-to-float conversion
    i2f_base: int
    i2f_iter: int
    i2f_zero: int
    i2f_constant_time: bool
    # fixed point
    fixed_mac: int
    fixed_relu_nonneg: int
    fixed_relu_neg: int
    # restoring division by 255
    div_base: int
    div_long: int
    div_short: int
    div_constant_time: bool
    # binary MAC
    bnn_base: int
    bnn_negate: int
    # zero-skipping
    skip_cost: int
    # argmax comparison loop
    cmp_keep: int
    cmp_update: int
    # constant-time kernels
    ct_mul: int
    ct_add: int
    ct_relu_float: int
    ct_relu_fixed: int
    ct_bnn: int
    ct_cmp: int

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ProfileError(f"{f.name} must be an integer, got {value!r}")
                if value <= 0:
                    raise ProfileError(f"{f.name} must be strictly positive, got {value}")
        if len({self.frelu_pos, self.frelu_zero, self.frelu_neg}) != 3:
            raise ProfileError("float ReLU classes must be pairwise distinct")
        if self.fixed_relu_nonneg == self.fixed_relu_neg:
            raise ProfileError("fixed ReLU classes must differ")
        if self.div_long == self.div_short and not self.div_constant_time:
            raise ProfileError("div_long == div_short requires div_constant_time")
        if not self.i2f_constant_time:
            nonzero = {self.i2f_base + self.i2f_iter * k for k in range(8)}
            if self.i2f_zero in nonzero:
                raise ProfileError("i2f_zero collides with a nonzero conversion class")

    def replace(self, **changes) -> "CostProfile":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


ATMEGA = CostProfile(
    name="atmega-like",
    fmul_base=92, fmul_add=6, fmul_carry=3, fmul_shift=2, fmul_norm=4,
    fmul_round=3, fmul_sticky=2, fmul_zero=24,
    fadd_base=61, fadd_shift=3,
    frelu_pos=68, frelu_zero=56, frelu_neg=61,
    i2f_base=49, i2f_iter=7, i2f_zero=31, i2f_constant_time=False,
    fixed_mac=4, fixed_relu_nonneg=10, fixed_relu_neg=7,
    div_base=12, div_long=14, div_short=9, div_constant_time=False,
    bnn_base=6, bnn_negate=3,
    skip_cost=3,
    cmp_keep=44, cmp_update=52,
    ct_mul=300, ct_add=42, ct_relu_float=36, ct_relu_fixed=19, ct_bnn=11, ct_cmp=60,
)

CORTEX_M0 = CostProfile(
    name="cortex-m0-like",
    fmul_base=179, fmul_add=2, fmul_carry=1, fmul_shift=1, fmul_norm=3,
    fmul_round=1, fmul_sticky=1, fmul_zero=30,
    fadd_base=78, fadd_shift=1,
    frelu_pos=90, frelu_zero=88, frelu_neg=87,
    i2f_base=40, i2f_iter=1, i2f_zero=18, i2f_constant_time=True,
    fixed_mac=3, fixed_relu_nonneg=2, fixed_relu_neg=1,
    div_base=20, div_long=6, div_short=4, div_constant_time=False,
    bnn_base=3, bnn_negate=1,
    skip_cost=2,
    cmp_keep=12, cmp_update=15,
    ct_mul=59, ct_add=31, ct_relu_float=10, ct_relu_fixed=9, ct_bnn=5, ct_cmp=16,
)

RISCV = CostProfile(
    name="riscv-like",
    fmul_base=93, fmul_add=6, fmul_carry=2, fmul_shift=2, fmul_norm=5,
    fmul_round=2, fmul_sticky=3, fmul_zero=21,
    fadd_base=55, fadd_shift=2,
    frelu_pos=56, frelu_zero=77, frelu_neg=57,
    i2f_base=35, i2f_iter=3, i2f_zero=14, i2f_constant_time=True,
    fixed_mac=2, fixed_relu_nonneg=3, fixed_relu_neg=2,
    div_base=4, div_long=2, div_short=2, div_constant_time=True,
    bnn_base=2, bnn_negate=1,
    skip_cost=1,
    cmp_keep=5, cmp_update=7,
    ct_mul=8, ct_add=1, ct_relu_float=6, ct_relu_fixed=6, ct_bnn=3, ct_cmp=8,
)

BUILTIN_PROFILES: dict[str, CostProfile] = {p.name: p for p in (ATMEGA, CORTEX_M0, RISCV)}


def _parse_value(key: str, raw: str, kind) -> object:
    if kind in ("bool", bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ProfileError(f"{key}: expected a boolean, got {raw!r}")
    if kind in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ProfileError(f"{key}: expected an integer, got {raw!r}") from None
    return raw


def parse_profile(text: str, source: str = "<profile>") -> CostProfile:
    """Parse ``key = value`` lines.

    An optional ``base = <builtin name>`` line seeds every unspecified key;
    without it all keys must be present.
    """
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ProfileError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ProfileError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw

    kinds = {f.name: f.type for f in fields(CostProfile)}
    base_name = values.pop("base", None)
    parsed: dict[str, object] = {}
    if base_name is not None:
        if base_name not in BUILTIN_PROFILES:
            raise ProfileError(f"{source}: unknown base profile {base_name!r}")
        parsed.update(dataclasses.asdict(BUILTIN_PROFILES[base_name]))
    for key, raw in values.items():
        if key not in kinds:
            raise ProfileError(f"{source}: unknown key {key!r}")
        parsed[key] = _parse_value(key, raw, kinds[key])
    missing = sorted(set(kinds) - set(parsed))
    if missing:
        raise ProfileError(f"{source}: missing keys {', '.join(missing)}")
    return CostProfile(**parsed)


def load_profile(name_or_path: str | os.PathLike | None = None) -> CostProfile:
    """Resolve a profile by builtin name, by file path, or via the profile dir.

    ``None`` means the atmega-like profile.
    """
    if name_or_path is None:
        return ATMEGA
    name = str(name_or_path)
    if name in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[name]
    candidates = [Path(name)]
    profile_dir = os.environ.get(PROFILE_DIR_ENV)
    if profile_dir:
        candidates += [Path(profile_dir) / name, Path(profile_dir) / f"{name}{PROFILE_SUFFIX}"]
    for path in candidates:
        if path.is_file():
            return parse_profile(path.read_text(), str(path))
    raise ProfileError(f"unknown profile {name!r}")
