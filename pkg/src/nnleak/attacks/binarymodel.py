"""Binary-weight model recovery.

A +1 weight is an add and a -1 weight an add plus a negation, so one trace
with every input nonzero shows all the weights of a layer at once. The bias
then follows from the ReLU class along a monotone path: start from the
input that minimises the pre-activation, then raise it one input quantum at
a time (first lowering the inputs behind -1 weights, in index order, then
raising the inputs behind +1 weights). Every step adds exactly one operand
quantum, so the first non-negative step fixes the bias exactly. Bisection
finds that step in about a dozen queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import Layer, NetworkModel
from ..oracle import TimingOracle
from ..profiles import CostProfile
from .common import AttackError, AttackResult, LayerProbe, WeightRecord, relu_classes
from .fixedmodel import layer_operands


def binary_weight_classes(mac: np.ndarray, profile: CostProfile) -> np.ndarray:
    """+1 / -1 from MAC durations by the nearer of the two cost classes."""
    plain = profile.bnn_base
    negate = profile.bnn_base + profile.bnn_negate
    mac = np.asarray(mac, dtype=float)
    return np.where(np.abs(mac - negate) < np.abs(mac - plain), -1, 1)


def recover_binary_weights(probe: LayerProbe, n_in: int) -> np.ndarray:
    """(n_out, n_in) weights from a single all-ones query."""
    timing = probe(np.ones((1, n_in), dtype=np.int64))
    if timing.skipped.any():
        raise AttackError("MACs were skipped on an all-nonzero input")
    return binary_weight_classes(timing.mac[0], probe.oracle.profile)


def path_inputs(weights: np.ndarray, steps: np.ndarray, top: int = 255) -> np.ndarray:
    """Input vectors at positions ``steps`` along the monotone path for one neuron."""
    steps = np.asarray(steps, dtype=np.int64)
    neg = np.flatnonzero(weights < 0)
    pos = np.flatnonzero(weights > 0)
    x = np.zeros((len(steps), len(weights)), dtype=np.int64)
    for i, k in enumerate(neg):
        x[:, k] = top - np.clip(steps - top * i, 0, top)
    rest = steps - top * len(neg)
    for i, k in enumerate(pos):
        x[:, k] = np.clip(rest - top * i, 0, top)
    return x


@dataclass
class BiasEstimate:
    value: int
    step: int | None
    kind: str = "exact"   # or "lower-bound" / "upper-bound"


def recover_binary_bias(probe: LayerProbe, neuron: int, weights: np.ndarray,
                        ops: np.ndarray, frac: int) -> BiasEstimate:
    """Bias of one neuron from the first non-negative step of the path."""
    n_in = len(weights)
    last = 255 * n_in
    profile = probe.oracle.profile

    def nonneg(step: int) -> bool:
        timing = probe(path_inputs(weights, [step]))
        return bool(relu_classes(timing, profile)[0, neuron])

    def partial(step: int) -> int:
        x = path_inputs(weights, [step])[0]
        return int(ops[x] @ weights)

    scale = 1 << frac
    if nonneg(0):
        # Even the smallest reachable pre-activation is non-negative.
        return BiasEstimate(-(partial(0) // scale), None, "lower-bound")
    if not nonneg(last):
        return BiasEstimate(-(partial(last) // scale) - 1, None, "upper-bound")
    lo, hi = 0, last
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if nonneg(mid):
            hi = mid
        else:
            lo = mid
    value = -(partial(hi) // scale)
    if not -partial(hi) <= value * scale < -partial(lo):
        raise AttackError(f"no integer bias fits the flip of neuron {neuron}")
    return BiasEstimate(value, hi)


def recover_binary_layer(probe: LayerProbe, n_in: int, n_out: int):
    """Weights, bias estimates and operand fraction bits of one layer."""
    weights = recover_binary_weights(probe, n_in)
    ops, frac = layer_operands(probe, n_in)
    biases = [recover_binary_bias(probe, j, weights[j], ops, frac) for j in range(n_out)]
    return weights, biases, frac


def recover_binary_model(oracle: TimingOracle, topology: tuple[int, ...] | None = None) -> AttackResult:
    """Layer-by-layer recovery of a binary network behind ``oracle``."""
    dims = tuple(topology or oracle.topology)
    start = oracle.query_count
    layers, records, notes = [], [], []
    normalization = "none"
    n_layers = len(dims) - 1
    for index in range(n_layers):
        n_in, n_out = dims[index], dims[index + 1]
        probe = LayerProbe(oracle, index)
        weights, biases, frac = recover_binary_layer(probe, n_in, n_out)
        if index == 0 and frac:
            normalization = "div255"
        for j in range(n_out):
            for k in range(n_in):
                records.append(WeightRecord(index, j, k, int(weights[j, k]), "mac"))
            est = biases[j]
            flags = "" if est.kind == "exact" else est.kind
            if flags:
                notes.append(f"layer {index} neuron {j}: bias is only a {est.kind} ({est.value})")
            records.append(WeightRecord(index, j, -1, est.value, "path", est.step, flags=flags))
        bias = np.clip([b.value for b in biases], -128, 127).astype(np.int64)
        activation = probe.final_activation if index == n_layers - 1 else "relu"
        layers.append(Layer(weights.astype(np.int64), bias, activation))
    model = NetworkModel("binary", tuple(layers), normalization)
    return AttackResult(model, records, oracle.query_count - start, notes)
