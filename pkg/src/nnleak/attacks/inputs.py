"""Recovering a device's private input from one inference trace.

Three channels are decoded:

* float path: the int-to-float conversion loop runs once per leading zero,
  which gives each input's exponent, and the multiply timings of that input
  against the first-layer weights give its 7-bit mantissa (a row lookup in
  the mantissa timing table restricted to the weight mantissas in use);
* division path: the input normalisation ``ip / 255`` is a restoring
  division whose steps take longer for quotient bits equal to one, so the
  quotient can be read off bit by bit and inverted;
* sparsity path: zero-skipping MACs are visibly shorter, which reveals
  which inputs are zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .. import arith
from ..network import div255_raw
from ..oracle import INPUT_STAGE, TimingTrace
from ..profiles import CostProfile
from .common import AttackError

INPUT_VALUES = np.arange(256)
ALL_VALUES = tuple(range(256))
NONZERO_VALUES = tuple(range(1, 256))
CLUSTER_SEPARATION = 4.0


@dataclass
class InputEstimate:
    """Per-position recovered inputs.

    ``candidates[k]`` always holds every value still possible for position
    ``k``; ``value(k)`` is the value when exactly one remains.
    """

    candidates: list[tuple[int, ...]]
    method: str
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.candidates)

    def value(self, k: int) -> int | None:
        c = self.candidates[k]
        return c[0] if len(c) == 1 else None

    @property
    def values(self) -> list[int | None]:
        return [self.value(k) for k in range(len(self))]

    @property
    def exact(self) -> bool:
        return all(len(c) == 1 for c in self.candidates)

    def zero_mask(self) -> np.ndarray:
        """True where the position is known to be zero."""
        return np.array([c == (0,) for c in self.candidates])

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["position", "value", "method"])
        for k, c in enumerate(self.candidates):
            if len(c) == 1:
                text = str(c[0])
            elif c == NONZERO_VALUES:
                text = "nonzero"
            else:
                text = "|".join(map(str, c))
            writer.writerow([k, text, self.method])
        return out.getvalue()

    def to_pgm(self, width: int) -> str:
        """Plain (P2) greyscale image; unresolved positions show their candidate mean."""
        if width <= 0 or len(self) % width:
            raise ValueError(f"{len(self)} positions do not tile rows of width {width}")
        pixels = [int(round(float(np.mean(c)))) for c in self.candidates]
        rows = [" ".join(map(str, pixels[i:i + width])) for i in range(0, len(pixels), width)]
        return f"P2\n{width} {len(self) // width}\n255\n" + "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# trace parsing


def _input_events(trace: TimingTrace, kind: str) -> dict[int, list]:
    out: dict[int, list] = {}
    for e in trace.events:
        if e.layer == INPUT_STAGE and e.kind == kind:
            out.setdefault(e.neuron, []).append(e)
    return out


def first_layer_macs(trace: TimingTrace) -> tuple[np.ndarray, np.ndarray]:
    """(n_out, n_in) multiply durations and skip flags of layer 0, from event order."""
    rows, skips = [], []
    for (layer, _), events in sorted(trace.segment().items()):
        if layer != 0:
            continue
        macs = [e for e in events if e.kind in ("mac", "skip")]
        rows.append([e.sub_durations[0] if e.kind == "mac" and e.sub_durations else e.cycles for e in macs])
        skips.append([e.kind == "skip" for e in macs])
    if not rows:
        raise AttackError("trace has no first-layer MAC events")
    return np.array(rows, dtype=float), np.array(skips, dtype=bool)


def _integral(mantissas, exponent: int) -> list[int]:
    """Integers ``(128 + m) * 2**e / 128`` for the given 7-bit mantissas."""
    out = []
    for m in mantissas:
        scaled = (128 + int(m)) << exponent
        if scaled % 128 == 0 and scaled // 128 <= 255:
            out.append(scaled // 128)
    return out


# --------------------------------------------------------------------------
# float path


def int2float_classes(profile: CostProfile) -> dict[int | None, int]:
    """Conversion cycle count per exponent 0..7, plus the zero fast path under key None."""
    classes = {e: arith.int2float_cycles(1 << e, profile) for e in range(8)}
    classes[None] = arith.int2float_cycles(0, profile)
    return classes


def decode_exponent(cycles: float, profile: CostProfile) -> int | None | tuple:
    """Exponent 0..7, None for a zero input, or the tuple of all exponents when flat."""
    classes = int2float_classes(profile)
    if len(set(classes.values())) == 1:
        return tuple(range(8))
    keys = list(classes)
    values = np.array([classes[k] for k in keys], dtype=float)
    return keys[int(np.argmin(np.abs(values - cycles)))]


def match_input_mantissa(observed: np.ndarray, weight_mantissas: np.ndarray, profile: CostProfile,
                         tol: float = 0.5) -> list[int]:
    """Input mantissas whose table row fits the observed multiply durations.

    Rows that reproduce every duration within ``tol`` win; without any such
    row the Pearson best match (and anything tied with it) is returned.
    """
    table = np.asarray(arith.mul_cycle_table(profile), dtype=float)
    rows = table[:, weight_mantissas]
    err = np.abs(rows - observed[None, :]).max(axis=1)
    exact = np.flatnonzero(err <= tol)
    if len(exact):
        return exact.tolist()
    if len(observed) < 2 or np.ptp(observed) == 0:
        return list(range(128))
    r = np.array([np.corrcoef(observed, row)[0, 1] if np.ptp(row) else -1.0 for row in rows])
    return np.flatnonzero(r >= np.nanmax(r) - 1e-12).tolist()


def restricted_row_collisions(weight_mantissas, profile: CostProfile) -> int:
    """Number of input mantissas whose restricted table row is shared with another."""
    table = np.asarray(arith.mul_cycle_table(profile))
    rows = table[:, sorted(set(int(m) for m in weight_mantissas))]
    _, inverse, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return int((counts[inverse.ravel()] > 1).sum())


def weight_mantissa_matrix(weights) -> np.ndarray:
    """7-bit fraction mantissas of a weight matrix, -1 where a weight is zero."""
    w = np.asarray(weights, dtype=np.float32)
    frac7 = ((w.view(np.uint32) >> 16) & 0x7F).astype(np.int64)
    return np.where(w == 0, -1, frac7)


def recover_input_float(trace: TimingTrace, weight_mantissas: np.ndarray, profile: CostProfile) -> InputEstimate:
    """Inputs of a float model without normalisation.

    ``weight_mantissas`` is the (n_out, n_in) matrix of first-layer weight
    mantissas as 7-bit integers, with -1 marking zero weights.
    """
    conv = _input_events(trace, "int2float")
    mul, skipped = first_layer_macs(trace)
    weight_mantissas = np.asarray(weight_mantissas, dtype=np.int64)
    if weight_mantissas.shape != mul.shape:
        raise AttackError(f"weight mantissas {weight_mantissas.shape} do not match trace {mul.shape}")
    cands, notes = [], []
    for k in range(mul.shape[1]):
        if skipped[:, k].any():
            cands.append((0,))
            continue
        exponent = decode_exponent(conv[k][0].cycles, profile) if k in conv else tuple(range(8))
        if exponent is None:
            cands.append((0,))
            continue
        used = weight_mantissas[:, k] >= 0
        observed = mul[used, k]
        if used.any() and np.all(np.abs(observed - profile.fmul_zero) < 0.5):
            cands.append((0,))
            continue
        mantissas = match_input_mantissa(observed, weight_mantissas[used, k], profile) if used.any() \
            else list(range(128))
        exps = exponent if isinstance(exponent, tuple) else (exponent,)
        values = sorted({v for e in exps for v in _integral(mantissas, e)})
        if not values:
            raise AttackError(f"input {k}: no integer matches mantissas {mantissas[:4]} at exponent {exponent}")
        cands.append(tuple(values))
    if isinstance(decode_exponent(0, profile), tuple):
        notes.append("exponent channel is flat on this profile; values are mantissa-only candidate sets")
    return InputEstimate(cands, "float", notes)


# --------------------------------------------------------------------------
# division path


def two_means(values: np.ndarray) -> tuple[float, float] | None:
    """Centres of two 1-D clusters, or None when the data do not split into two."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return None
    for _ in range(100):
        cut = 0.5 * (lo + hi)
        a, b = values[values <= cut], values[values > cut]
        if not len(a) or not len(b):
            return None
        new = (float(a.mean()), float(b.mean()))
        if new == (lo, hi):
            break
        lo, hi = new
    a, b = values[values <= 0.5 * (lo + hi)], values[values > 0.5 * (lo + hi)]
    spread = np.sqrt((a.var() * len(a) + b.var() * len(b)) / len(values))
    if spread > 0 and hi - lo < CLUSTER_SEPARATION * spread:
        return None
    return lo, hi


def recover_input_div255(trace: TimingTrace) -> InputEstimate:
    """Inputs from the quotient-bit timing of the divide-by-255 normalisation."""
    steps = _input_events(trace, "div_bit")
    if not steps:
        raise AttackError("trace has no division events")
    positions = sorted(steps)
    durations = np.array([[e.sub_durations[0] if e.sub_durations else e.cycles for e in steps[k]]
                          for k in positions], dtype=float)
    if durations.shape[1] != 16:
        raise AttackError("expected 16 quotient-bit steps per input")
    centres = two_means(durations.ravel())
    lookup = {int(r): ip for ip, r in enumerate(div255_raw(INPUT_VALUES))}
    if centres is None:
        note = "division steps show a single duration class; quotient bits are unreadable"
        # With every step equal, the only readable fact is that nothing differs.
        return InputEstimate([ALL_VALUES for _ in positions], "div255", [note])
    cut = 0.5 * (centres[0] + centres[1])
    cands = []
    for row in durations:
        bits = (row > cut).astype(np.int64)
        raw = int(bits @ (1 << np.arange(15, -1, -1)))
        if raw in lookup:
            cands.append((lookup[raw],))
        else:
            near = np.argsort(np.abs(div255_raw(INPUT_VALUES) - raw), kind="stable")[:2]
            cands.append(tuple(sorted(int(v) for v in near)))
    return InputEstimate(cands, "div255")


# --------------------------------------------------------------------------
# sparsity path


def recover_sparsity_mask(trace: TimingTrace) -> InputEstimate:
    """Zero versus nonzero per input from skipped first-layer MACs."""
    _, skipped = first_layer_macs(trace)
    zero = skipped.any(axis=0)
    return InputEstimate([(0,) if z else NONZERO_VALUES for z in zero], "sparsity")
