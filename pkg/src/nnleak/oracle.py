"""Leaky inference executor and the attacker-facing timing oracle.

The executor runs a whole batch of inputs at once with numpy and returns,
per layer, arrays of per-operation cycle counts. A :class:`TimingTrace` is the
flat, ordered event list for one inference, which is what an attacker with a
trigger-synchronized probe would see.

Event order inside one inference:

1. input stage (``layer = -1``, ``neuron`` = input position): one
   ``int2float`` event per input for float models, sixteen ``div_bit``
   events per input when div255 normalization is enabled, or one ``mul``
   event per input for the hardened executor's reciprocal multiply;
2. for every layer, for every neuron: one ``mac`` (or ``skip``) event per
   input in index order, followed by the ``relu`` event;
3. for an ``argmax`` layer, one ``cmp`` event per neuron after the first.

Float ``mac`` events carry ``(mul, add)`` sub-durations and ``div_bit``
events carry their single step duration.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, field

import numpy as np

from . import arith
from .network import (ACT_MAX, DIV255_FRAC_BITS, ModelError, NetworkModel, activate,
                      check_inputs, first_layer_operands, flush_denormals, trunc7)
from .profiles import CostProfile

INPUT_STAGE = -1
TRACE_HEADER = ("index", "kind", "layer", "neuron", "cycles", "sub_durations")
EVENT_KINDS = ("mul", "add", "relu", "int2float", "div_bit", "mac", "skip", "cmp")


@dataclass(frozen=True)
class JitterConfig:
    sigma: float = 0.0
    repeats: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @property
    def active(self) -> bool:
        return self.sigma > 0


@dataclass(frozen=True)
class OpEvent:
    index: int
    kind: str
    layer: int
    neuron: int
    cycles: float
    sub_durations: tuple = ()


def _fmt(value) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else f"{value:.4f}"


@dataclass(frozen=True)
class TimingTrace:
    events: tuple[OpEvent, ...]

    @property
    def total_cycles(self) -> float:
        return float(sum(e.cycles for e in self.events))

    def of_kind(self, *kinds: str) -> list[OpEvent]:
        return [e for e in self.events if e.kind in kinds]

    def segment(self) -> dict[tuple[int, int], list[OpEvent]]:
        """Group events by (layer, neuron), keeping execution order."""
        groups: dict[tuple[int, int], list[OpEvent]] = {}
        for event in self.events:
            if event.kind == "cmp":
                continue
            groups.setdefault((event.layer, event.neuron), []).append(event)
        return groups

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for e in self.events:
            writer.writerow([e.index, e.kind, e.layer, e.neuron, _fmt(e.cycles),
                             "|".join(_fmt(d) for d in e.sub_durations)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TimingTrace":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != TRACE_HEADER:
            raise ValueError(f"trace header must be {','.join(TRACE_HEADER)}")
        events = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(TRACE_HEADER):
                raise ValueError(f"trace line {lineno}: expected {len(TRACE_HEADER)} fields")
            if row[1] not in EVENT_KINDS:
                raise ValueError(f"trace line {lineno}: unknown event kind {row[1]!r}")
            subs = tuple(float(v) for v in row[5].split("|")) if row[5] else ()
            events.append(OpEvent(int(row[0]), row[1], int(row[2]), int(row[3]), float(row[4]), subs))
        return cls(tuple(events))


# --------------------------------------------------------------------------
# batched executor


@dataclass
class LayerTiming:
    """Cycle arrays of one layer for a batch of B inferences.

    ``mac`` is (B, out, in); for float layers ``mul`` and ``add`` hold its two
    parts. ``skipped`` marks zero-skipped MACs. ``conv`` is (B, in) for the
    int2float input stage and ``div`` is (B, in, 16) for div255 bit steps.
    """

    layer: int
    precision: str
    mac: np.ndarray
    skipped: np.ndarray
    act: np.ndarray | None
    mul: np.ndarray | None = None
    add: np.ndarray | None = None
    conv: np.ndarray | None = None
    div: np.ndarray | None = None
    cmp: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.mac.shape[0]

    def arrays(self) -> list[str]:
        return [name for name in ("conv", "div", "scale", "mul", "add", "mac", "act", "cmp")
                if getattr(self, name) is not None]


def _float_parts(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bits = np.asarray(values, dtype=np.float32).view(np.uint32)
    exponent = ((bits >> 23) & 0xFF).astype(np.int64)
    frac7 = ((bits >> 16) & 0x7F).astype(np.int64)
    return exponent == 0, exponent, frac7


def _conversion_timing(model: NetworkModel, x: np.ndarray, profile: CostProfile):
    if model.normalization == "div255":
        raw = (x << DIV255_FRAC_BITS) // 255
        bits = (raw[..., None] >> np.arange(15, -1, -1)) & 1
        if profile.div_constant_time:
            div = np.full(bits.shape, profile.div_long, dtype=np.float64)
        else:
            div = np.where(bits == 1, profile.div_long, profile.div_short).astype(np.float64)
        return None, div
    if model.precision != "float32":
        return None, None
    if profile.i2f_constant_time:
        conv = np.full(x.shape, arith.int2float_cycles(1, profile), dtype=np.float64)
    else:
        e = np.zeros_like(x)
        nz = x > 0
        e[nz] = np.floor(np.log2(x[nz])).astype(np.int64)
        conv = np.where(nz, profile.i2f_base + profile.i2f_iter * (7 - e), profile.i2f_zero)
        conv = conv.astype(np.float64)
    return conv, None


def _float_layer(model, index, a, profile):
    layer = model.layers[index]
    batch = a.shape[0]
    w = trunc7(layer.weights)
    a = trunc7(np.asarray(a, dtype=np.float32))
    table = np.asarray(arith.mul_cycle_table(profile), dtype=np.float64)
    a_zero, _, a_frac = _float_parts(a)
    w_zero, _, w_frac = _float_parts(w)
    mul = table[a_frac[:, None, :], w_frac[None, :, :]]
    mul = np.where(a_zero[:, None, :] | w_zero[None, :, :], profile.fmul_zero, mul)
    skipped = np.broadcast_to(a_zero[:, None, :] & model.zero_skipping, mul.shape).copy()

    acc = np.broadcast_to(layer.bias, (batch, layer.n_out)).astype(np.float32)
    add = np.empty_like(mul)
    for k in range(layer.n_in):
        product = flush_denormals(a[:, k:k + 1] * w[None, :, k])
        acc_zero, acc_exp, _ = _float_parts(acc)
        p_zero, p_exp, _ = _float_parts(product)
        gap = np.minimum(np.abs(acc_exp - p_exp), 25)
        add[:, :, k] = np.where(acc_zero | p_zero, profile.fadd_base,
                                profile.fadd_base + profile.fadd_shift * gap)
        acc = flush_denormals(acc + product)
    acc = acc + np.float32(0.0)

    mul = np.where(skipped, 0.0, mul)
    add = np.where(skipped, 0.0, add)
    mac = np.where(skipped, profile.skip_cost, mul + add)
    if layer.activation == "none":
        act = None
    else:
        acc_zero, _, _ = _float_parts(acc)
        act = np.where(acc_zero, profile.frelu_zero,
                       np.where(acc < 0, profile.frelu_neg, profile.frelu_pos)).astype(np.float64)
    return acc, LayerTiming(index, "float32", mac, skipped, act, mul=mul, add=add)


def _integer_layer(model, index, a, frac_bits, profile):
    layer = model.layers[index]
    a = np.asarray(a, dtype=np.int64)
    pa = a @ layer.weights.T + (layer.bias << frac_bits)[None, :]
    shape = (a.shape[0], layer.n_out, layer.n_in)
    if model.precision == "fixed":
        mac = np.full(shape, float(profile.fixed_mac))
    else:
        negate = np.broadcast_to(layer.weights == -1, shape)
        mac = np.where(negate, profile.bnn_base + profile.bnn_negate, profile.bnn_base).astype(np.float64)
    skipped = np.broadcast_to((a == 0)[:, None, :] & model.zero_skipping, shape).copy()
    mac = np.where(skipped, profile.skip_cost, mac)
    act = None
    if layer.activation != "none":
        act = np.where(pa >= 0, profile.fixed_relu_nonneg, profile.fixed_relu_neg).astype(np.float64)
    return pa, LayerTiming(index, model.precision, mac, skipped, act)


def _argmax_timing(out: np.ndarray, profile: CostProfile) -> np.ndarray:
    best = out[:, 0].copy()
    cmp = np.empty((out.shape[0], out.shape[1] - 1))
    for j in range(1, out.shape[1]):
        greater = out[:, j] > best
        cmp[:, j - 1] = np.where(greater, profile.cmp_update, profile.cmp_keep)
        best = np.where(greater, out[:, j], best)
    return cmp


def execute_layer(model: NetworkModel, index: int, a: np.ndarray, profile: CostProfile,
                  frac_bits: int = 0) -> tuple[np.ndarray, LayerTiming]:
    """Run one layer on a batch of its inputs; returns (activations, timing)."""
    if model.precision == "float32":
        pa, timing = _float_layer(model, index, a, profile)
    else:
        pa, timing = _integer_layer(model, index, a, frac_bits, profile)
    out = activate(model, index, pa, frac_bits)
    if model.layers[index].activation == "argmax" and out.shape[1] > 1:
        timing.cmp = _argmax_timing(out, profile)
    return out, timing


def execute(model: NetworkModel, x, profile: CostProfile) -> tuple[np.ndarray, list[LayerTiming]]:
    """Noise-free leaky inference of a batch of 8-bit input vectors."""
    x = check_inputs(model, x)
    a, frac = first_layer_operands(model, x)
    conv, div = _conversion_timing(model, x, profile)
    timings = []
    for index in range(len(model.layers)):
        a, timing = execute_layer(model, index, a, profile, frac)
        if index == 0:
            timing.conv, timing.div = conv, div
        timings.append(timing)
        frac = 0
    return a, timings


def check_layer_inputs(model: NetworkModel, index: int, a) -> np.ndarray:
    if not 0 <= index < len(model.layers):
        raise IndexError(f"layer index {index} out of range")
    if index == 0:
        return check_inputs(model, a)
    layer = model.layers[index]
    a = np.atleast_2d(np.asarray(a))
    if a.ndim != 2 or a.shape[1] != layer.n_in:
        raise ModelError(f"layer {index} expects {layer.n_in} activations, got shape {a.shape}")
    if model.precision == "float32":
        a32 = a.astype(np.float32)
        if not np.all(np.isfinite(a32)) or np.any(a32 < 0) or np.any(a32 != a):
            raise ModelError("float activations must be finite, non-negative float32 values")
        return a32
    if a.dtype.kind == "f" and not np.all(a == np.round(a)):
        raise ModelError("integer activations must be whole numbers")
    ai = a.astype(np.int64)
    if ai.min() < 0 or ai.max() > ACT_MAX:
        raise ModelError(f"activations must lie in 0..{ACT_MAX}")
    return ai


# --------------------------------------------------------------------------
# noise and trace materialization


def _apply_jitter(timing: LayerTiming, jitter: JitterConfig, ordinals: np.ndarray) -> LayerTiming:
    if not jitter.active:
        return timing
    names = timing.arrays()
    noisy = {name: np.array(getattr(timing, name), dtype=np.float64) for name in names}
    is_float = timing.mul is not None
    for b, ordinal in enumerate(ordinals):
        rng = np.random.default_rng([jitter.seed, int(ordinal), timing.layer])
        for name in names:
            if is_float and name == "mac":
                continue
            clean = noisy[name][b]
            draws = np.rint(rng.normal(0.0, jitter.sigma, size=(jitter.repeats,) + clean.shape))
            samples = np.maximum(clean[None, ...] + draws, 1.0)
            noisy[name][b] = np.where(clean > 0, samples.mean(axis=0), clean)
    if is_float:
        skip_noise = noisy["mac"]
        noisy["mac"] = np.where(timing.skipped, skip_noise, noisy["mul"] + noisy["add"])
        for b, ordinal in enumerate(ordinals):
            if timing.skipped[b].any():
                rng = np.random.default_rng([jitter.seed, int(ordinal), timing.layer, 1])
                clean = timing.mac[b]
                draws = np.rint(rng.normal(0.0, jitter.sigma, size=(jitter.repeats,) + clean.shape))
                skip = np.maximum(clean + draws, 1.0).mean(axis=0)
                noisy["mac"][b] = np.where(timing.skipped[b], skip, noisy["mac"][b])
    result = LayerTiming(timing.layer, timing.precision, timing.mac, timing.skipped, timing.act,
                         timing.mul, timing.add, timing.conv, timing.div, timing.cmp, timing.scale)
    for name, value in noisy.items():
        setattr(result, name, value)
    return result


def trace_from_timings(timings: list[LayerTiming], row: int, div_base: int = 0) -> TimingTrace:
    """Flatten row ``row`` of a batch of layer timings into an event list."""
    events: list[OpEvent] = []

    def emit(kind, layer, neuron, cycles, subs=()):
        events.append(OpEvent(len(events), kind, layer, neuron, float(cycles),
                              tuple(float(s) for s in subs)))

    first = timings[0]
    if first.div is not None:
        for pos, steps in enumerate(first.div[row]):
            for j, step in enumerate(steps):
                emit("div_bit", INPUT_STAGE, pos, step + (div_base if j == 0 else 0), (step,))
    elif first.conv is not None:
        for pos, cycles in enumerate(first.conv[row]):
            emit("int2float", INPUT_STAGE, pos, cycles)
    elif first.scale is not None:
        for pos, cycles in enumerate(first.scale[row]):
            emit("mul", INPUT_STAGE, pos, cycles)
    for t in timings:
        for j in range(t.mac.shape[1]):
            for k in range(t.mac.shape[2]):
                if t.skipped[row, j, k]:
                    emit("skip", t.layer, j, t.mac[row, j, k])
                elif t.mul is not None:
                    emit("mac", t.layer, j, t.mac[row, j, k], (t.mul[row, j, k], t.add[row, j, k]))
                else:
                    emit("mac", t.layer, j, t.mac[row, j, k])
            if t.act is not None:
                emit("relu", t.layer, j, t.act[row, j])
        if t.cmp is not None:
            for j, cycles in enumerate(t.cmp[row], 1):
                emit("cmp", t.layer, j, cycles)
    return TimingTrace(tuple(events))


class TimingOracle:
    """Chosen-input black box: feed inputs, observe timing only.

    Every inference counts as one query regardless of ``repeats``. Queries
    are pure functions of (model, profile, jitter seed, query ordinal).
    """

    def __init__(self, model: NetworkModel, profile: CostProfile, jitter: JitterConfig | None = None):
        self._model = model
        self.profile = profile
        self.jitter = jitter or JitterConfig()
        self._count = 0
        self._lock = threading.Lock()

    @property
    def topology(self) -> tuple[int, ...]:
        return self._model.dims

    @property
    def precision(self) -> str:
        return self._model.precision

    @property
    def query_count(self) -> int:
        return self._count

    def reset_count(self) -> None:
        with self._lock:
            self._count = 0

    def _take(self, n: int) -> np.ndarray:
        with self._lock:
            start = self._count
            self._count += n
        return np.arange(start, start + n)

    def _execute(self, x) -> list[LayerTiming]:
        return execute(self._model, x, self.profile)[1]

    def _execute_layer(self, layer_index: int, a: np.ndarray) -> LayerTiming:
        return execute_layer(self._model, layer_index, a, self.profile)[1]

    def query_batch(self, x) -> list[LayerTiming]:
        timings = self._execute(x)
        ordinals = self._take(timings[0].batch)
        return [_apply_jitter(t, self.jitter, ordinals) for t in timings]

    def query(self, x) -> TimingTrace:
        x = np.asarray(x)
        if x.ndim != 1:
            raise ModelError("query takes a single input vector")
        return trace_from_timings(self.query_batch(x[None, :]), 0, self.profile.div_base)

    def injection_scales(self, layer_index: int, recovered_weights: np.ndarray) -> np.ndarray:
        """Scales that turn attacker-unit activations into true ones.

        ``recovered_weights`` are the attacker's rows for layer
        ``layer_index - 1``. Each recovered float row equals the device row up
        to a power of two; that factor is what an attacker implicitly applies
        when crafting network inputs from the recovered prefix. Integer
        precisions need no scaling. Rows the attacker could not recover get
        a factor of 1.
        """
        if not 1 <= layer_index < len(self._model.layers):
            raise IndexError(f"layer index {layer_index} has no preceding layer")
        if self._model.precision != "float32":
            return np.ones(self._model.layers[layer_index].n_in)
        truth = trunc7(self._model.layers[layer_index - 1].weights).astype(np.float64)
        rec = np.asarray(recovered_weights, dtype=np.float64)
        scales = np.ones(truth.shape[0])
        for n in range(truth.shape[0]):
            k = int(np.argmax(np.abs(rec[n])))
            if rec[n, k] != 0 and truth[n, k] != 0 and np.sign(rec[n, k]) == np.sign(truth[n, k]):
                scales[n] = 2.0 ** np.round(np.log2(truth[n, k] / rec[n, k]))
        return scales

    def probe_batch(self, layer_index: int, activations) -> LayerTiming:
        """Inject activations straight into one layer and time that layer only."""
        a = check_layer_inputs(self._model, layer_index, activations)
        if layer_index == 0:
            return self.query_batch(a)[0]
        timing = self._execute_layer(layer_index, a)
        return _apply_jitter(timing, self.jitter, self._take(timing.batch))


def run_inference(model: NetworkModel, x, profile: CostProfile,
                  jitter: JitterConfig | None = None) -> tuple[np.ndarray, TimingTrace]:
    out, timings = execute(model, np.asarray(x)[None, :], profile)
    ordinals = np.zeros(1, dtype=np.int64)
    timings = [_apply_jitter(t, jitter or JitterConfig(), ordinals) for t in timings]
    return out[0], trace_from_timings(timings, 0, profile.div_base)


def probe_layer(model: NetworkModel, layer_index: int, activation, profile: CostProfile,
                jitter: JitterConfig | None = None) -> TimingTrace:
    a = check_layer_inputs(model, layer_index, np.asarray(activation)[None, :]
                           if np.asarray(activation).ndim == 1 else activation)
    if layer_index == 0:
        return trace_from_timings(execute(model, a, profile)[1][:1], 0, profile.div_base)
    _, timing = execute_layer(model, layer_index, a, profile)
    timing = _apply_jitter(timing, jitter or JitterConfig(), np.zeros(1, dtype=np.int64))
    return trace_from_timings([timing], 0)


@dataclass
class ScalarResult:
    output: np.ndarray
    trace: TimingTrace = field(repr=False)


def scalar_inference(model: NetworkModel, x, profile: CostProfile) -> ScalarResult:
    """Event-by-event inference built directly on the scalar kernels.

    This is slow and exists as an independent check of :func:`execute`.
    """
    x = check_inputs(model, x)[0]
    events: list[OpEvent] = []

    def emit(kind, layer, neuron, cycles, subs=()):
        events.append(OpEvent(len(events), kind, layer, neuron, float(cycles),
                              tuple(float(s) for s in subs)))

    P = profile
    if model.normalization == "div255":
        acts = []
        for pos, ip in enumerate(x):
            q, steps = arith.leaky_normalize_div255(int(ip), P)
            for j, step in enumerate(steps):
                emit("div_bit", INPUT_STAGE, pos, step + (P.div_base if j == 0 else 0), (step,))
            acts.append(q)
        if model.precision == "float32":
            acts = [arith.FloatRepr.from_float(q.value) for q in acts]
        else:
            acts = [q.raw for q in acts]
        frac = DIV255_FRAC_BITS if model.precision != "float32" else 0
    elif model.precision == "float32":
        acts = []
        for pos, ip in enumerate(x):
            value, cycles = arith.leaky_int2float(int(ip), P)
            emit("int2float", INPUT_STAGE, pos, cycles)
            acts.append(value)
        frac = 0
    else:
        acts, frac = [int(v) for v in x], 0

    for index, layer in enumerate(model.layers):
        outs = []
        for j in range(layer.n_out):
            if model.precision == "float32":
                acc = arith.FloatRepr.from_float(float(layer.bias[j]))
                for k in range(layer.n_in):
                    wt = arith.FloatRepr.from_float(float(layer.weights[j, k]))
                    if model.zero_skipping and acts[k].is_zero:
                        emit("skip", index, j, P.skip_cost)
                        continue
                    product, mul_c = arith.leaky_float_mul(acts[k], wt, P)
                    acc, add_c = arith.leaky_float_add(acc, product, P)
                    emit("mac", index, j, mul_c + add_c, (mul_c, add_c))
                if layer.activation == "none":
                    outs.append(acc)
                else:
                    out, cycles = arith.leaky_float_relu(acc, P)
                    emit("relu", index, j, cycles)
                    outs.append(out)
            else:
                acc = int(layer.bias[j]) << frac
                for k in range(layer.n_in):
                    wt = int(layer.weights[j, k])
                    if model.zero_skipping and acts[k] == 0:
                        emit("skip", index, j, P.skip_cost)
                        continue
                    if model.precision == "fixed":
                        result, cycles = arith.fixed_mac(arith.FixedQ(acc, frac), arith.FixedQ(acts[k], frac),
                                                         arith.FixedQ(wt), P)
                        acc = result.raw
                    else:
                        acc, cycles = arith.bnn_mac(acc, acts[k], wt, P)
                    emit("mac", index, j, cycles)
                if layer.activation == "none":
                    outs.append(acc)
                else:
                    out, cycles = arith.fixed_relu(arith.FixedQ(acc, frac), P)
                    emit("relu", index, j, cycles)
                    value = out.raw
                    if index < len(model.layers) - 1:
                        value = min(value >> frac, ACT_MAX)
                    outs.append(value)
        if layer.activation == "argmax":
            values = [float(o) if isinstance(o, arith.FloatRepr) else o for o in outs]
            best = values[0]
            for j in range(1, len(values)):
                if values[j] > best:
                    emit("cmp", index, j, P.cmp_update)
                    best = values[j]
                else:
                    emit("cmp", index, j, P.cmp_keep)
        acts, frac = outs, 0
    if model.precision == "float32":
        output = np.array([float(o) for o in acts], dtype=np.float32)
    else:
        output = np.array(acts, dtype=np.int64)
    return ScalarResult(output, TimingTrace(tuple(events)))
