"""Constant-time countermeasures and the tools that check them.

Float layers are compiled into a fixed-point form. Each layer's weights
share one exponent ``e_max`` (the largest weight exponent) and are stored as
24-bit two's-complement words ``q`` with ``w ~= q * 2**(e_max - 22)``, i.e.
``1.m * 2**(e_wt - e_max)`` with 22 fraction bits. Activations are unsigned
words ``a`` with ``x ~= a * 2**(e_act - 23)``, where ``e_act`` is fixed per
layer from a static bound on its inputs. A MAC is then one integer multiply,
a constant right shift by 16 and a signed add into a 48-bit accumulator, and
none of those steps depends on operand values.

Other leaks are closed the same way:

* ReLU is ``~(pa >> (W - 1)) & pa`` on a W-bit word;
* the argmax loop uses a masked select, so every comparison costs the same;
* binary MACs negate with ``(ip ^ m) - m`` instead of a branch;
* the ``ip / 255`` input normalisation disappears. Float models fold it into
  the first-layer weights, and integer models replace the restoring division
  with an exact multiply-and-shift by a reciprocal;
* zero-skipping is disabled.

Every kernel reports its cycle count from the profile's ``ct_*`` constants.
The leakage verifier checks this empirically over whole operand
domains (see :mod:`nnleak.leakage`, which also reruns the attacks against
the hardened executor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import arith
from .network import (DIV255_FRAC_BITS, Layer, ModelError, NetworkModel, check_inputs, div255_raw,
                      random_inputs, reference_forward)
from .oracle import JitterConfig, LayerTiming, TimingOracle, trace_from_timings
from .profiles import ATMEGA, CostProfile

WEIGHT_BITS = 24
WEIGHT_FRAC = WEIGHT_BITS - 2
ACT_FRAC = 23
PRODUCT_SHIFT = 16
ACC_BITS = 48
WIDE_ACC_BITS = 64
FIXED_WORD_BITS = 32
INPUT_EXP = 8   # raw inputs are below 2**8


# --------------------------------------------------------------------------
# normalized weights


@dataclass(frozen=True)
class NormalizedLayerWeights:
    """One layer's weights on a shared exponent.

    ``words`` are 24-bit two's-complement integers; the stored number of a
    weight is ``words / 2**22`` and its value is that times ``2**e_max``.
    """

    e_max: int
    words: np.ndarray

    def __post_init__(self) -> None:
        words = np.asarray(self.words, dtype=np.int64)
        limit = 1 << (WEIGHT_BITS - 1)
        if words.size and (words.min() < -limit or words.max() >= limit):
            raise ValueError("weight words exceed 24 bits")
        words = words.copy()
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.words.shape

    @property
    def stored(self) -> np.ndarray:
        """The normalized numbers ``(-1)**s * 1.m * 2**(e_wt - e_max)``."""
        return self.words / float(1 << WEIGHT_FRAC)

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.words.astype(np.float64), self.e_max - WEIGHT_FRAC)

    @property
    def storage_bytes(self) -> int:
        return 3 * self.words.size

    def pack(self) -> bytes:
        """Little-endian 3-byte words in row-major order."""
        raw = (self.words.ravel() & 0xFFFFFF).astype("<u4").tobytes()
        return b"".join(raw[i:i + 3] for i in range(0, len(raw), 4))

    @classmethod
    def unpack(cls, data: bytes, shape: tuple[int, ...], e_max: int) -> "NormalizedLayerWeights":
        if len(data) != 3 * math.prod(shape):
            raise ValueError(f"{len(data)} bytes do not hold {shape} 3-byte words")
        padded = b"".join(data[i:i + 3] + b"\0" for i in range(0, len(data), 3))
        words = np.frombuffer(padded, dtype="<u4").astype(np.int64)
        words = np.where(words >= 1 << 23, words - (1 << 24), words)
        return cls(e_max, words.reshape(shape))


def normalize_weights(weights) -> NormalizedLayerWeights:
    """Quantize a float weight matrix onto its largest exponent.

    The rounding error of every weight is at most ``2**(e_max - 23)``. When
    rounding would carry a weight out of the 24-bit range, ``e_max`` moves
    up by one. An all-zero layer gets ``e_max = 0``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ModelError("weights must be finite")
    peak = float(np.abs(w).max()) if w.size else 0.0
    e_max = math.frexp(peak)[1] - 1 if peak > 0 else 0
    for _ in range(2):
        words = np.rint(np.ldexp(w, WEIGHT_FRAC - e_max)).astype(np.int64)
        if not words.size or np.abs(words).max() < 1 << (WEIGHT_BITS - 1):
            return NormalizedLayerWeights(e_max, words)
        e_max += 1
    raise AssertionError("normalization did not converge")


# --------------------------------------------------------------------------
# constant-time kernels


def _check_width(value: int, width: int) -> int:
    if not -(1 << (width - 1)) <= value < 1 << (width - 1):
        raise arith.FixedOverflowError(f"{width}-bit accumulator overflow")
    return value


def ct_mac(acc: int, ip: int, wt: int, profile: CostProfile, width: int = ACC_BITS) -> tuple[int, int]:
    """``acc + ((ip * wt) >> 16)`` on normalized words.

    Wider accumulators take one extra add per MAC for the carry word, so the
    cost depends on the width chosen when the layer is compiled, never on
    the operands.
    """
    acc = _check_width(int(acc) + ((int(ip) * int(wt)) >> PRODUCT_SHIFT), width)
    return acc, profile.ct_mul + profile.ct_add * (1 if width <= ACC_BITS else 2)


def ct_multiply(ip: int, wt: int, profile: CostProfile) -> tuple[int, int]:
    """The multiply half of :func:`ct_mac`, scaled the same way."""
    return (int(ip) * int(wt)) >> PRODUCT_SHIFT, profile.ct_mul


def ct_relu(pa: int, profile: CostProfile, width: int = FIXED_WORD_BITS) -> tuple[int, int]:
    """Branch-free ReLU of a two's-complement ``width``-bit word."""
    pa = _check_width(int(pa), width)
    mask = ~(pa >> (width - 1))
    return mask & pa, profile.ct_relu_fixed


def ct_relu_float(bits: int, profile: CostProfile) -> tuple[int, int]:
    """The same mask trick on the raw bits of an IEEE-754 single.

    Negative values come out as +0.0; no float comparison runs.
    """
    bits = int(bits) & 0xFFFFFFFF
    signed = bits - (1 << 32) if bits >> 31 else bits
    return (~(signed >> 31) & bits) & 0xFFFFFFFF, profile.ct_relu_float


def ct_bnn_mac(acc: int, ip: int, wt: int, profile: CostProfile) -> tuple[int, int]:
    """``acc + wt * ip`` for ``wt`` in {+1, -1} via a conditional-negate mask."""
    if wt not in (1, -1):
        raise ValueError(f"binary weight must be +1 or -1, got {wt}")
    m = int(wt) >> 1
    return acc + ((int(ip) ^ m) - m), profile.ct_bnn


def ct_select_max(best: int, best_index: int, value: int, index: int,
                  profile: CostProfile) -> tuple[int, int, int]:
    """One argmax step: keep the larger value with a mask instead of a branch."""
    take = -int(value > best)  # all ones when the candidate wins
    return (value & take) | (best & ~take), (index & take) | (best_index & ~take), profile.ct_cmp


def _reciprocal_255() -> tuple[int, int]:
    ips = np.arange(256, dtype=np.int64)
    want = div255_raw(ips)
    for shift in range(16, 40):
        mult = -(-(1 << (DIV255_FRAC_BITS + shift)) // 255)
        if np.array_equal((ips * mult) >> shift, want):
            return mult, shift
    raise AssertionError("no reciprocal found")


RECIPROCAL_MULT, RECIPROCAL_SHIFT = _reciprocal_255()


def ct_normalize_div255(ip: int, profile: CostProfile) -> tuple[int, int]:
    """``(ip << 15) // 255`` as one multiply and one shift; exact for 0..255."""
    if not 0 <= ip <= 255:
        raise ValueError(f"input must be in 0..255, got {ip}")
    return (ip * RECIPROCAL_MULT) >> RECIPROCAL_SHIFT, profile.ct_mul


def ct_load_input(ip: int, profile: CostProfile) -> tuple[int, int]:
    """An 8-bit input as a normalized activation word: a constant shift."""
    if not 0 <= ip <= 255:
        raise ValueError(f"input must be in 0..255, got {ip}")
    return ip << (ACT_FRAC - INPUT_EXP), profile.ct_add


# --------------------------------------------------------------------------
# hardened model


@dataclass(frozen=True)
class HardenedFloatLayer:
    """A compiled float layer.

    Inputs are words on exponent ``in_exp``; the accumulator unit is
    ``2**acc_exp``; ReLU outputs are re-scaled onto ``out_exp`` for the
    next layer.
    """

    weights: NormalizedLayerWeights
    bias: np.ndarray
    in_exp: int
    out_exp: int
    acc_bits: int
    activation: str

    @property
    def acc_exp(self) -> int:
        return self.in_exp + self.weights.e_max - WEIGHT_FRAC - ACT_FRAC + PRODUCT_SHIFT

    @property
    def requant_shift(self) -> int:
        return self.out_exp - ACT_FRAC - self.acc_exp

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class HardenedModel:
    """A network ready for the constant-time executor.

    Float sources carry compiled layers; integer sources keep their own
    weights (their arithmetic is already exact) and only swap kernels.
    """

    source: NetworkModel
    float_layers: tuple[HardenedFloatLayer, ...] | None = None

    @property
    def precision(self) -> str:
        return self.source.precision

    @property
    def dims(self) -> tuple[int, ...]:
        return self.source.dims

    @property
    def reciprocal_inputs(self) -> bool:
        """True when integer inputs pass through the reciprocal multiply."""
        return self.precision != "float32" and self.source.normalization == "div255"

    def weight_storage(self) -> tuple[int, int]:
        """(default bytes, hardened bytes) for the float weights."""
        if self.float_layers is None:
            raise ModelError("storage comparison applies to float models")
        n = sum(layer.weights.words.size for layer in self.float_layers)
        return 4 * n, sum(layer.weights.storage_bytes for layer in self.float_layers)


def eliminate_normalization(model: NetworkModel) -> NetworkModel:
    """The same float network taking raw 0..255 inputs.

    The ``1/255`` scale moves into the first-layer weights, so no division
    runs at inference time. Integer weights cannot absorb it; for those
    :func:`harden` swaps the division for an exact reciprocal multiply.
    """
    if model.normalization != "div255":
        return model
    if model.precision != "float32":
        raise ModelError("integer weights cannot absorb 1/255; harden() uses a reciprocal multiply instead")
    first = model.layers[0]
    folded = (first.weights.astype(np.float64) / 255.0).astype(np.float32)
    layers = (Layer(folded, first.bias, first.activation, first.allow_zero),) + model.layers[1:]
    return NetworkModel(model.precision, layers, "none", model.zero_skipping)


def _exponent_above(bound: float) -> int:
    """Smallest e with bound < 2**e."""
    if bound <= 0:
        return 0
    return math.frexp(bound)[1]


def harden(model: NetworkModel) -> HardenedModel:
    """Compile ``model`` for the constant-time executor."""
    if model.precision != "float32":
        return HardenedModel(NetworkModel(model.precision, model.layers, model.normalization, False))
    layers = []
    in_exp = INPUT_EXP
    for index, layer in enumerate(model.layers):
        w = layer.weights.astype(np.float64)
        if index == 0 and model.normalization == "div255":
            w = w / 255.0
        nw = normalize_weights(w)
        acc_exp = in_exp + nw.e_max - WEIGHT_FRAC - ACT_FRAC + PRODUCT_SHIFT
        bias = np.rint(np.ldexp(layer.bias.astype(np.float64), -acc_exp)).astype(np.int64)
        top = (1 << ACT_FRAC) - 1
        reach = (np.abs(nw.words) * top >> PRODUCT_SHIFT).sum(axis=1) + 1 + np.abs(bias)
        widest = int(reach.max()) if reach.size else 0
        if widest < 1 << (ACC_BITS - 1):
            acc_bits = ACC_BITS
        elif widest < 1 << (WIDE_ACC_BITS - 1):
            acc_bits = WIDE_ACC_BITS
        else:
            raise arith.FixedOverflowError(f"layer {index} overflows a {WIDE_ACC_BITS}-bit accumulator")
        # Largest ReLU output this layer can produce, in real units.
        peak = float(((np.abs(nw.words) * top >> PRODUCT_SHIFT).sum(axis=1) + 1 + np.maximum(bias, 0)).max())
        out_exp = _exponent_above(math.ldexp(peak, acc_exp))
        layers.append(HardenedFloatLayer(nw, bias, in_exp, out_exp, acc_bits, layer.activation))
        in_exp = out_exp
    source = NetworkModel(model.precision, model.layers, model.normalization, False)
    return HardenedModel(source, tuple(layers))


# --------------------------------------------------------------------------
# executor


def _ct_relu_words(pa: np.ndarray, width: int) -> np.ndarray:
    return ~(pa >> (width - 1)) & pa


def _float_words(layer: HardenedFloatLayer, a: np.ndarray) -> np.ndarray:
    products = (a[:, None, :] * layer.weights.words[None, :, :]) >> PRODUCT_SHIFT
    return products.sum(axis=2) + layer.bias[None, :]


def _requantize(layer: HardenedFloatLayer, out: np.ndarray) -> np.ndarray:
    s = layer.requant_shift
    return out >> s if s >= 0 else out << -s


def input_words(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.int64) << (ACT_FRAC - INPUT_EXP)


def activation_words(layer: HardenedFloatLayer, values) -> np.ndarray:
    """Real-valued activations as input words of ``layer`` (truncating)."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0) or np.any(values >= math.ldexp(1.0, layer.in_exp)):
        raise ModelError(f"activations must lie in [0, 2**{layer.in_exp}) for this layer")
    return np.floor(np.ldexp(values, ACT_FRAC - layer.in_exp)).astype(np.int64)


def _integer_inputs(hm: HardenedModel, x: np.ndarray) -> tuple[np.ndarray, int]:
    if hm.reciprocal_inputs:
        return (x * RECIPROCAL_MULT) >> RECIPROCAL_SHIFT, DIV255_FRAC_BITS
    return x, 0


def _float_timing(hm, index, batch, profile) -> LayerTiming:
    layer = hm.float_layers[index]
    shape = (batch, layer.n_out, layer.n_in)
    mul = np.full(shape, float(profile.ct_mul))
    add = np.full(shape, float(profile.ct_add * (1 if layer.acc_bits <= ACC_BITS else 2)))
    act = None if layer.activation == "none" else np.full((batch, layer.n_out), float(profile.ct_relu_float))
    return LayerTiming(index, "float32", mul + add, np.zeros(shape, dtype=bool), act, mul=mul, add=add)


def _integer_timing(hm, index, batch, profile) -> LayerTiming:
    layer = hm.source.layers[index]
    shape = (batch, layer.n_out, layer.n_in)
    cost = profile.fixed_mac if hm.precision == "fixed" else profile.ct_bnn
    act = None if layer.activation == "none" else np.full((batch, layer.n_out), float(profile.ct_relu_fixed))
    return LayerTiming(index, hm.precision, np.full(shape, float(cost)), np.zeros(shape, dtype=bool), act)


def _cmp_timing(batch: int, n_out: int, profile: CostProfile) -> np.ndarray | None:
    return np.full((batch, n_out - 1), float(profile.ct_cmp)) if n_out > 1 else None


def execute_hardened_layer(hm: HardenedModel, index: int, a: np.ndarray, profile: CostProfile,
                           frac_bits: int = 0) -> tuple[np.ndarray, LayerTiming]:
    """One layer on input words (float) or integer activations."""
    batch = a.shape[0]
    last = index == len(hm.source.layers) - 1
    if hm.float_layers is not None:
        layer = hm.float_layers[index]
        pa = _float_words(layer, a)
        out = pa if layer.activation == "none" else _ct_relu_words(pa, layer.acc_bits)
        timing = _float_timing(hm, index, batch, profile)
        if not last:
            out = _requantize(layer, out)
    else:
        layer = hm.source.layers[index]
        pa = a @ layer.weights.T + (layer.bias << frac_bits)[None, :]
        out = pa if layer.activation == "none" else _ct_relu_words(pa, FIXED_WORD_BITS + frac_bits)
        if not last:
            out = np.minimum(out >> frac_bits, 255)
        timing = _integer_timing(hm, index, batch, profile)
    if hm.source.layers[index].activation == "argmax":
        timing.cmp = _cmp_timing(batch, out.shape[1], profile)
    return out, timing


def execute_hardened(hm: HardenedModel, x, profile: CostProfile) -> tuple[np.ndarray, list[LayerTiming]]:
    """Constant-time inference of a batch; returns final words and per-layer timing.

    Final float words are in units of ``2**float_layers[-1].acc_exp``; use
    :func:`hardened_outputs` for real values.
    """
    x = check_inputs(hm.source, x)
    if hm.float_layers is not None:
        a, frac, scale = input_words(x), 0, None
    else:
        a, frac = _integer_inputs(hm, x)
        scale = np.full(x.shape, float(profile.ct_mul)) if hm.reciprocal_inputs else None
    timings = []
    for index in range(len(hm.source.layers)):
        a, timing = execute_hardened_layer(hm, index, a, profile, frac)
        if index == 0:
            timing.scale = scale
        timings.append(timing)
        frac = 0
    return a, timings


def hardened_outputs(hm: HardenedModel, words: np.ndarray) -> np.ndarray:
    if hm.float_layers is None:
        return np.asarray(words)
    return np.ldexp(np.asarray(words, dtype=np.float64), hm.float_layers[-1].acc_exp)


def hardened_forward(hm: HardenedModel, x) -> np.ndarray:
    """Real-valued outputs of the hardened network."""
    words, _ = execute_hardened(hm, x, ATMEGA)
    return hardened_outputs(hm, words)


def hardened_predict(hm: HardenedModel, x) -> np.ndarray:
    words, _ = execute_hardened(hm, x, ATMEGA)
    return np.argmax(words, axis=1)


def scalar_hardened_inference(hm: HardenedModel, x, profile: CostProfile) -> tuple[list[int], list[int]]:
    """Event-by-event hardened inference on the scalar kernels.

    Slow, and kept as an independent check of :func:`execute_hardened`.
    Returns (final words, cycle count of every operation in order).
    """
    x = [int(v) for v in check_inputs(hm.source, x)[0]]
    cycles: list[int] = []
    if hm.float_layers is not None:
        acts = []
        for ip in x:
            word, _ = ct_load_input(ip, profile)
            acts.append(word)
        for index, layer in enumerate(hm.float_layers):
            outs = []
            for j in range(layer.n_out):
                acc = int(layer.bias[j])
                for k in range(layer.n_in):
                    acc, c = ct_mac(acc, acts[k], int(layer.weights.words[j, k]), profile, layer.acc_bits)
                    cycles.append(c)
                if layer.activation != "none":
                    acc, _ = ct_relu(acc, profile, layer.acc_bits)
                    cycles.append(profile.ct_relu_float)
                outs.append(acc)
            if index < len(hm.float_layers) - 1:
                s = layer.requant_shift
                outs = [o >> s if s >= 0 else o << -s for o in outs]
            acts = outs
    else:
        frac = 0
        acts = []
        for ip in x:
            if hm.reciprocal_inputs:
                raw, c = ct_normalize_div255(ip, profile)
                cycles.append(c)
                acts.append(raw)
                frac = DIV255_FRAC_BITS
            else:
                acts.append(ip)
        for index, layer in enumerate(hm.source.layers):
            outs = []
            for j in range(layer.n_out):
                acc = int(layer.bias[j]) << frac
                for k in range(layer.n_in):
                    if hm.precision == "binary":
                        acc, c = ct_bnn_mac(acc, acts[k], int(layer.weights[j, k]), profile)
                    else:
                        acc += acts[k] * int(layer.weights[j, k])
                        c = profile.fixed_mac
                    cycles.append(c)
                if layer.activation != "none":
                    acc, c = ct_relu(acc, profile, FIXED_WORD_BITS + frac)
                    cycles.append(c)
                outs.append(acc)
            if index < len(hm.source.layers) - 1:
                outs = [min(o >> frac, 255) for o in outs]
            acts, frac = outs, 0
    if hm.source.layers[-1].activation == "argmax":
        best, best_index = acts[0], 0
        for j in range(1, len(acts)):
            best, best_index, c = ct_select_max(best, best_index, acts[j], j, profile)
            cycles.append(c)
    return acts, cycles


class HardenedOracle(TimingOracle):
    """The chosen-input oracle in front of the constant-time executor."""

    def __init__(self, hardened: HardenedModel, profile: CostProfile, jitter: JitterConfig | None = None):
        super().__init__(hardened.source, profile, jitter)
        self.hardened = hardened

    def _execute(self, x) -> list[LayerTiming]:
        return execute_hardened(self.hardened, x, self.profile)[1]

    def _execute_layer(self, layer_index: int, a: np.ndarray) -> LayerTiming:
        if self.hardened.float_layers is not None:
            a = activation_words(self.hardened.float_layers[layer_index], a)
        return execute_hardened_layer(self.hardened, layer_index, a, self.profile)[1]


def hardened_trace(hm: HardenedModel, x, profile: CostProfile):
    _, timings = execute_hardened(hm, np.asarray(x)[None, :], profile)
    return trace_from_timings(timings, 0)


def ideal_forward(model: NetworkModel, x) -> np.ndarray:
    """Float64 evaluation with full-precision weights and exact ``ip / 255``."""
    a = check_inputs(model, x).astype(np.float64)
    if model.normalization == "div255":
        a = a / 255.0
    for index, layer in enumerate(model.layers):
        a = a @ layer.weights.astype(np.float64).T + layer.bias.astype(np.float64)
        if layer.activation != "none":
            a = np.maximum(a, 0.0)
    return a


def argmax_agreement(hm: HardenedModel, trials: int = 1000, seed: int = 0, against: str = "default") -> float:
    """Share of random inputs where the hardened argmax matches another evaluator.

    ``against="default"`` compares with the leaky device (8-bit significand
    multiplies); ``"ideal"`` compares with :func:`ideal_forward`.
    """
    x = random_inputs(hm.source.input_width, trials, seed)
    if against == "default":
        other = reference_forward(hm.source, x)
    elif against == "ideal":
        other = ideal_forward(hm.source, x)
    else:
        raise ValueError(f"unknown comparison {against!r}")
    return float(np.mean(hardened_predict(hm, x) == np.argmax(other, axis=1)))

