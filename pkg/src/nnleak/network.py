"""Layered network container, reference evaluator and model file format.

A :class:`NetworkModel` holds fully connected layers that all share one
precision:

``float32``
    weights and biases are float32; multiplications see 8-bit significands.
``fixed``
    4-bit signed weights in [-8, 7], 8-bit signed biases, 8-bit unsigned
    activations between layers.
``binary``
    weights in {-1, +1}, integer biases, 8-bit unsigned activations.

Convolutions are expected to be lowered to matrix form before they get here.

Model file grammar (one record per line, ``#`` starts a comment)::

    net <precision> <n_layers> [norm=div255] [skip=1]
    layer <out> <in> <relu|argmax|none> [zeros=1]
    <in> weights           # repeated <out> times
    bias <out values>

Float values are written as 8-digit hex float32 bit patterns so that a save
followed by a load is bit-exact; integer precisions use decimal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRECISIONS = ("float32", "fixed", "binary")
ACTIVATIONS = ("relu", "argmax", "none")
NORMALIZATIONS = ("none", "div255")

FIXED_WT_RANGE = (-8, 7)
FIXED_BIAS_RANGE = (-128, 127)
BINARY_BIAS_RANGE = (-(1 << 15), (1 << 15) - 1)
ACT_MAX = 255
DIV255_FRAC_BITS = 15
TRUNC7_MASK = np.uint32(0xFFFF0000)
FLT_MIN = np.float32(2.0 ** -126)


class ModelError(ValueError):
    """Structural problem with a model (dimensions, ranges, topology)."""


class ModelParseError(ModelError):
    def __init__(self, source: str, lineno: int, message: str):
        super().__init__(f"{source}:{lineno}: {message}")
        self.lineno = lineno


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    allow_zero: bool = False

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights)
        bias = np.asarray(self.bias)
        if weights.ndim != 2 or weights.shape[0] == 0 or weights.shape[1] == 0:
            raise ModelError(f"weights must be a non-empty matrix, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ModelError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "bias", _frozen(bias))

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


def _check_float(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise ModelError(f"{what} must be finite")
    if np.any((values != 0) & (np.abs(values) < FLT_MIN)):
        raise ModelError(f"{what} contains denormals")
    # canonical zero: drop the sign of -0.0
    return values + np.float32(0.0)


def _check_int(values: np.ndarray, lo: int, hi: int, what: str) -> np.ndarray:
    raw = np.asarray(values)
    if raw.dtype.kind == "f":
        if not np.all(raw == np.round(raw)):
            raise ModelError(f"{what} must be integers")
    ints = raw.astype(np.int64)
    if ints.size and (ints.min() < lo or ints.max() > hi):
        raise ModelError(f"{what} must lie in [{lo}, {hi}]")
    return ints


@dataclass(frozen=True, eq=False)
class NetworkModel:
    precision: str
    layers: tuple[Layer, ...]
    normalization: str = "none"
    zero_skipping: bool = False

    def __post_init__(self) -> None:
        if self.precision not in PRECISIONS:
            raise ModelError(f"unknown precision {self.precision!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ModelError(f"unknown normalization {self.normalization!r}")
        layers = tuple(self.layers)
        if not layers:
            raise ModelError("a network needs at least one layer")
        checked = []
        for i, layer in enumerate(layers):
            if i and layer.n_in != layers[i - 1].n_out:
                raise ModelError(
                    f"layer {i} expects {layer.n_in} inputs but layer {i - 1} has {layers[i - 1].n_out} outputs")
            if i < len(layers) - 1 and layer.activation == "argmax":
                raise ModelError("argmax is only allowed on the final layer")
            if i < len(layers) - 1 and self.precision != "float32" and layer.activation != "relu":
                raise ModelError("hidden integer layers must use relu")
            checked.append(self._checked_layer(layer, i))
        object.__setattr__(self, "layers", tuple(checked))

    def _checked_layer(self, layer: Layer, index: int) -> Layer:
        what = f"layer {index}"
        if self.precision == "float32":
            weights = _check_float(layer.weights, f"{what} weights")
            bias = _check_float(layer.bias, f"{what} bias")
        elif self.precision == "fixed":
            weights = _check_int(layer.weights, *FIXED_WT_RANGE, f"{what} weights")
            if not layer.allow_zero and np.any(weights == 0):
                raise ModelError(f"{what} has zero weights; set allow_zero to permit them")
            bias = _check_int(layer.bias, *FIXED_BIAS_RANGE, f"{what} bias")
        else:
            weights = _check_int(layer.weights, -1, 1, f"{what} weights")
            if np.any(weights == 0):
                raise ModelError(f"{what}: binary weights must be +1 or -1")
            bias = _check_int(layer.bias, *BINARY_BIAS_RANGE, f"{what} bias")
        return Layer(weights, bias, layer.activation, layer.allow_zero)

    @property
    def input_width(self) -> int:
        return self.layers[0].n_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_out

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_width,) + tuple(layer.n_out for layer in self.layers)

    def replace_layers(self, layers) -> "NetworkModel":
        return NetworkModel(self.precision, tuple(layers), self.normalization, self.zero_skipping)

    def same_topology(self, other: "NetworkModel") -> bool:
        return self.precision == other.precision and self.dims == other.dims


# --------------------------------------------------------------------------
# reference evaluation


def trunc7(values: np.ndarray) -> np.ndarray:
    """Keep sign, exponent and the top 7 fraction bits of each float32."""
    bits = np.asarray(values, dtype=np.float32).view(np.uint32) & TRUNC7_MASK
    return bits.view(np.float32)


def flush_denormals(values: np.ndarray) -> np.ndarray:
    return np.where(np.abs(values) < FLT_MIN, np.float32(0.0), values).astype(np.float32)


def div255_raw(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.int64) << DIV255_FRAC_BITS) // 255


def check_inputs(model: NetworkModel, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise ModelError(f"expected inputs of width {model.input_width}, got shape {x.shape}")
    if x.dtype.kind == "f" and not np.all(x == np.round(x)):
        raise ModelError("inputs must be integers")
    xi = x.astype(np.int64)
    if xi.size and (xi.min() < 0 or xi.max() > 255):
        raise ModelError("inputs must lie in 0..255")
    return xi


def first_layer_operands(model: NetworkModel, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Values entering the first layer and their binary fraction bits."""
    if model.normalization == "div255":
        raw = div255_raw(x)
        if model.precision == "float32":
            return (raw.astype(np.float64) / (1 << DIV255_FRAC_BITS)).astype(np.float32), 0
        return raw, DIV255_FRAC_BITS
    if model.precision == "float32":
        return x.astype(np.float32), 0
    return x, 0


def layer_reference(model: NetworkModel, index: int, a: np.ndarray, frac_bits: int = 0) -> np.ndarray:
    """Pre-activations of layer ``index`` for a batch of layer inputs."""
    layer = model.layers[index]
    if model.precision == "float32":
        w = trunc7(layer.weights)
        a = trunc7(np.asarray(a, dtype=np.float32))
        acc = np.broadcast_to(layer.bias, (a.shape[0], layer.n_out)).astype(np.float32)
        for k in range(layer.n_in):
            products = flush_denormals(a[:, k:k + 1] * w[None, :, k])
            acc = flush_denormals(acc + products)
        return acc + np.float32(0.0)
    a = np.asarray(a, dtype=np.int64)
    return a @ layer.weights.T + (layer.bias << frac_bits)[None, :]


def activate(model: NetworkModel, index: int, pa: np.ndarray, frac_bits: int = 0) -> np.ndarray:
    layer = model.layers[index]
    if layer.activation == "none":
        return pa
    out = np.maximum(pa, 0) if model.precision != "float32" else np.where(pa > 0, pa, np.float32(0.0))
    if model.precision != "float32" and index < len(model.layers) - 1:
        out = np.minimum(out >> frac_bits, ACT_MAX)
    return out


def reference_forward(model: NetworkModel, x, start_layer: int = 0) -> np.ndarray:
    """Straight evaluation without timing; returns final-layer activations.

    With ``start_layer > 0`` the rows of ``x`` are that layer's inputs.
    """
    if start_layer == 0:
        a, frac = first_layer_operands(model, check_inputs(model, x))
    else:
        a = np.atleast_2d(np.asarray(x, dtype=np.float32 if model.precision == "float32" else np.int64))
        frac = 0
    for index in range(start_layer, len(model.layers)):
        pa = layer_reference(model, index, a, frac)
        a = activate(model, index, pa, frac)
        frac = 0
    return a


def predict(model: NetworkModel, x) -> np.ndarray:
    """Final argmax (first index among ties) for a batch of inputs."""
    return np.argmax(reference_forward(model, x), axis=1)


def random_inputs(width: int, count: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(count, width))


def equivalent_argmax(a: NetworkModel, b: NetworkModel, trials: int = 1000, seed: int = 0) -> float:
    """Fraction of random inputs on which the two models pick the same class."""
    if a.dims != b.dims:
        raise ModelError(f"topology mismatch: {a.dims} vs {b.dims}")
    x = random_inputs(a.input_width, trials, seed)
    return float(np.mean(predict(a, x) == predict(b, x)))


# --------------------------------------------------------------------------
# construction


def random_model(dims, precision: str = "float32", seed: int = 0, *,
                 bias_scale: float = 64.0, normalization: str = "none",
                 zero_skipping: bool = False, final_activation: str = "argmax") -> NetworkModel:
    """Seeded random network with ``dims = (inputs, hidden..., outputs)``.

    Float weights are uniform on (-1, 1) and float biases uniform on
    (-bias_scale, bias_scale). Fixed weights are nonzero integers in [-8, 7]
    and biases 8-bit signed; binary biases also lie in [-128, 127].
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ModelError(f"invalid dims {dims}")
    if precision not in PRECISIONS:
        raise ModelError(f"unknown precision {precision!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        if precision == "float32":
            weights = rng.uniform(-1.0, 1.0, size=(n_out, n_in)).astype(np.float32)
            bias = rng.uniform(-bias_scale, bias_scale, size=n_out).astype(np.float32)
        elif precision == "fixed":
            choices = np.array([v for v in range(-8, 8) if v != 0])
            weights = rng.choice(choices, size=(n_out, n_in))
            bias = rng.integers(-128, 128, size=n_out)
        else:
            weights = rng.choice(np.array([-1, 1]), size=(n_out, n_in))
            bias = rng.integers(-128, 128, size=n_out)
        activation = final_activation if i == len(dims) - 2 else "relu"
        layers.append(Layer(weights, bias, activation))
    return NetworkModel(precision, tuple(layers), normalization, zero_skipping)


def single_neuron(weights, bias, precision: str = "float32", activation: str = "relu",
                  allow_zero: bool = False) -> NetworkModel:
    weights = np.asarray(weights, dtype=np.float32 if precision == "float32" else np.int64)
    bias = np.asarray([bias], dtype=weights.dtype)
    return NetworkModel(precision, (Layer(weights[None, :], bias, activation, allow_zero),))


def example_float_neuron() -> NetworkModel:
    """Five-input float neuron used by the walkthrough tests and docs.

    Its weights have mantissas 1.0391, 1.6641, 1.0859, 1.1797, 1.1250 after
    7-bit truncation and the bias is -1.5906 * 2**5.
    """
    weights = [1.0390625 * 2 ** -2, -1.6702 * 2 ** -3, -1.0860 * 2 ** -6,
               1.1803 * 2 ** -2, 1.1255 * 2 ** -7]
    return single_neuron(weights, -1.5906 * 2 ** 5)


def example_fixed_neuron() -> NetworkModel:
    """Nine-input fixed-point neuron with one zero weight and bias 108."""
    return single_neuron([-1, -3, 4, -7, -8, 2, -6, 5, 0], 108, "fixed", allow_zero=True)


def example_binary_neuron() -> NetworkModel:
    """Two-input binary neuron, weights (+1, -1) and bias -33."""
    return single_neuron([1, -1], -33, "binary")


def scale_model(model: NetworkModel, factors) -> NetworkModel:
    """Multiply every float layer (weights and bias) by a positive factor."""
    if model.precision != "float32":
        raise ModelError("only float models can be rescaled")
    factors = list(factors)
    if len(factors) != len(model.layers) or any(f <= 0 for f in factors):
        raise ModelError("need one positive factor per layer")
    layers = [Layer(layer.weights * np.float32(f), layer.bias * np.float32(f), layer.activation,
                    layer.allow_zero) for layer, f in zip(model.layers, factors)]
    return model.replace_layers(layers)


# --------------------------------------------------------------------------
# serialization


def _format_value(value, precision: str) -> str:
    if precision == "float32":
        return f"{int(np.float32(value).view(np.uint32)):08x}"
    return str(int(value))


def dumps_model(model: NetworkModel) -> str:
    header = f"net {model.precision} {len(model.layers)}"
    if model.normalization != "none":
        header += f" norm={model.normalization}"
    if model.zero_skipping:
        header += " skip=1"
    lines = [header]
    for layer in model.layers:
        record = f"layer {layer.n_out} {layer.n_in} {layer.activation}"
        if layer.allow_zero:
            record += " zeros=1"
        lines.append(record)
        for row in layer.weights:
            lines.append(" ".join(_format_value(v, model.precision) for v in row))
        lines.append("bias " + " ".join(_format_value(v, model.precision) for v in layer.bias))
    return "\n".join(lines) + "\n"


def save_model(model: NetworkModel, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps_model(model))


@dataclass
class _Cursor:
    lines: list[tuple[int, str]]
    source: str
    pos: int = 0
    last: int = field(default=0)

    def next(self, what: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.lines):
            raise ModelParseError(self.source, self.last + 1, f"unexpected end of file, expected {what}")
        lineno, text = self.lines[self.pos]
        self.pos += 1
        self.last = lineno
        return lineno, text.split()


def _parse_options(tokens: list[str], allowed: dict[str, tuple[str, ...]], source: str,
                   lineno: int) -> dict[str, str]:
    options = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep or key not in allowed or value not in allowed[key]:
            raise ModelParseError(source, lineno, f"unknown option {token!r}")
        options[key] = value
    return options


def _parse_values(tokens: list[str], precision: str, source: str, lineno: int) -> list:
    try:
        if precision == "float32":
            bits = np.array([int(t, 16) for t in tokens], dtype=np.uint64)
            if np.any(bits > 0xFFFFFFFF) or any(len(t) != 8 for t in tokens):
                raise ValueError
            return list(bits.astype(np.uint32).view(np.float32))
        return [int(t) for t in tokens]
    except ValueError:
        raise ModelParseError(source, lineno, f"bad {precision} value in {' '.join(tokens)!r}") from None


def loads_model(text: str, source: str = "<model>") -> NetworkModel:
    lines = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    cursor = _Cursor(lines, source)
    lineno, tokens = cursor.next("net header")
    if len(tokens) < 3 or tokens[0] != "net":
        raise ModelParseError(source, lineno, "expected 'net <precision> <n_layers>'")
    precision = tokens[1]
    if precision not in PRECISIONS:
        raise ModelParseError(source, lineno, f"unknown precision {precision!r}")
    try:
        n_layers = int(tokens[2])
    except ValueError:
        raise ModelParseError(source, lineno, "layer count must be an integer") from None
    options = _parse_options(tokens[3:], {"norm": NORMALIZATIONS, "skip": ("0", "1")}, source, lineno)
    if n_layers < 1:
        raise ModelError(f"{source}:{lineno}: a network needs at least one layer")

    layers = []
    for _ in range(n_layers):
        lineno, tokens = cursor.next("layer record")
        if len(tokens) < 4 or tokens[0] != "layer":
            raise ModelParseError(source, lineno, "expected 'layer <out> <in> <activation>'")
        try:
            n_out, n_in = int(tokens[1]), int(tokens[2])
        except ValueError:
            raise ModelParseError(source, lineno, "layer sizes must be integers") from None
        if n_out < 1 or n_in < 1:
            raise ModelParseError(source, lineno, "layer sizes must be positive")
        activation = tokens[3]
        if activation not in ACTIVATIONS:
            raise ModelParseError(source, lineno, f"unknown activation {activation!r}")
        layer_opts = _parse_options(tokens[4:], {"zeros": ("0", "1")}, source, lineno)
        rows = []
        for _ in range(n_out):
            lineno, tokens = cursor.next("weight row")
            if len(tokens) != n_in:
                raise ModelParseError(source, lineno, f"expected {n_in} weights, got {len(tokens)}")
            rows.append(_parse_values(tokens, precision, source, lineno))
        lineno, tokens = cursor.next("bias row")
        if not tokens or tokens[0] != "bias" or len(tokens) != n_out + 1:
            raise ModelParseError(source, lineno, f"expected 'bias' followed by {n_out} values")
        bias = _parse_values(tokens[1:], precision, source, lineno)
        dtype = np.float32 if precision == "float32" else np.int64
        layers.append(Layer(np.array(rows, dtype=dtype), np.array(bias, dtype=dtype), activation,
                            layer_opts.get("zeros") == "1"))
    if cursor.pos != len(lines):
        raise ModelParseError(source, lines[cursor.pos][0], "trailing content after last layer")
    return NetworkModel(precision, tuple(layers), options.get("norm", "none"), options.get("skip") == "1")


def load_model(path: str | os.PathLike) -> NetworkModel:
    return loads_model(Path(path).read_text(), str(path))
