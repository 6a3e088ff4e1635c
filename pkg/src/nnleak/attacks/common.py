"""Shared pieces of the model-extraction attacks: class decoding, sweeps,
layer injection and result records."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..network import NetworkModel, equivalent_argmax
from ..oracle import LayerTiming, TimingOracle
from ..profiles import CostProfile

SWEEP = np.arange(256)


class AttackError(RuntimeError):
    """The oracle answered in a way no parameter hypothesis explains."""


def float_relu_class(cycles: np.ndarray, profile: CostProfile) -> np.ndarray:
    """Map ReLU timings to +1 / 0 / -1 by the nearest class center."""
    centers = np.array([profile.frelu_pos, profile.frelu_zero, profile.frelu_neg], dtype=float)
    labels = np.array([1, 0, -1])
    idx = np.argmin(np.abs(np.asarray(cycles, dtype=float)[..., None] - centers), axis=-1)
    return labels[idx]


def fixed_relu_class(cycles: np.ndarray, profile: CostProfile) -> np.ndarray:
    """1 where the pre-activation was non-negative, 0 otherwise."""
    cycles = np.asarray(cycles, dtype=float)
    nonneg = np.abs(cycles - profile.fixed_relu_nonneg) <= np.abs(cycles - profile.fixed_relu_neg)
    return nonneg.astype(int)


def relu_classes(timing: LayerTiming, profile: CostProfile) -> np.ndarray:
    if timing.act is None:
        raise AttackError(f"layer {timing.layer} has no activation timing to observe")
    if timing.precision == "float32":
        return float_relu_class(timing.act, profile)
    return fixed_relu_class(timing.act, profile)


def first_change(classes: np.ndarray) -> np.ndarray:
    """Index of the first entry that differs from entry 0, per column; -1 if none.

    ``classes`` has the sweep along axis 0.
    """
    changed = classes != classes[0:1]
    hit = changed.any(axis=0)
    return np.where(hit, changed.argmax(axis=0), -1)


class LayerProbe:
    """Chosen activations for one layer, expressed in attacker units.

    For the first layer these are the raw 8-bit inputs. For deeper layers an
    attacker who holds the recovered prefix can craft network inputs that
    produce any wanted activation pattern; we stand in for that crafting by
    injecting the activations directly. Recovered hidden neurons are only
    known up to a power-of-two scale each, so attacker unit ``u`` on input
    ``n`` corresponds to a true activation ``u * scales[n]``.
    """

    def __init__(self, oracle: TimingOracle, layer: int, scales: np.ndarray | None = None):
        self.oracle = oracle
        self.layer = layer
        self.scales = scales
        self.last: LayerTiming | None = None

    def __call__(self, units) -> LayerTiming:
        units = np.atleast_2d(np.asarray(units))
        if self.scales is not None:
            units = units.astype(np.float64) * self.scales[None, :]
        self.last = self.oracle.probe_batch(self.layer, units)
        return self.last

    @property
    def final_activation(self) -> str:
        """"argmax" when the probed layer ran a comparison loop, else "relu".

        An argmax over a single output has no comparisons and behaves exactly
        like a ReLU, so the two cannot be told apart and need not be.
        """
        return "argmax" if self.last is not None and self.last.cmp is not None else "relu"

    def sweep(self, n_in: int, index: int, base: dict[int, int] | None = None) -> LayerTiming:
        """Sweep input ``index`` over 0..255 with ``base`` held and others 0."""
        units = np.zeros((256, n_in), dtype=np.int64)
        for pos, value in (base or {}).items():
            units[:, pos] = value
        units[:, index] = SWEEP
        return self(units)


class CrossoverSearch:
    """ReLU-class sweeps over one layer, cached by probe configuration.

    A sweep varies one input over 0..255 with a few others held fixed. The
    whole layer answers each query at once, so sweeps are shared by all
    neurons that need them.
    """

    def __init__(self, probe: LayerProbe, n_in: int, profile: CostProfile):
        self.probe = probe
        self.n_in = n_in
        self.profile = profile
        self._cache: dict[tuple, np.ndarray] = {}

    def classes(self, index: int, base: dict[int, int] | None = None) -> np.ndarray:
        """(256, n_out) ReLU classes of the sweep."""
        key = (index, tuple(sorted((base or {}).items())))
        if key not in self._cache:
            timing = self.probe.sweep(self.n_in, index, base)
            self._cache[key] = relu_classes(timing, self.profile)
        return self._cache[key]

    def point(self, units: np.ndarray) -> np.ndarray:
        timing = self.probe(units)
        return relu_classes(timing, self.profile)

    def reading(self, neuron: int, index: int, base: dict[int, int] | None = None) -> int | None:
        r = int(first_change(self.classes(index, base)[:, neuron]))
        return None if r < 0 else r

    def bias_classes(self) -> np.ndarray:
        return self.point(np.zeros((1, self.n_in), dtype=np.int64))[0]


@dataclass
class WeightRecord:
    layer: int
    neuron: int
    index: int
    value: float
    round: str = ""
    reading: int | None = None
    score: float | None = None
    flags: str = ""


@dataclass
class AttackResult:
    """Recovered model plus per-parameter bookkeeping."""

    model: NetworkModel
    records: list[WeightRecord] = field(default_factory=list)
    queries: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def ambiguous(self) -> list[WeightRecord]:
        return [r for r in self.records if r.flags]

    def report_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["layer", "neuron", "index", "value", "round", "reading", "score", "flags"])
        for r in self.records:
            index = "bias" if r.index < 0 else r.index
            score = "" if r.score is None else f"{r.score:.6f}"
            reading = "" if r.reading is None else r.reading
            writer.writerow([r.layer, r.neuron, index, repr(float(r.value)), r.round, reading, score, r.flags])
        return out.getvalue()


@dataclass(frozen=True)
class ModelComparison:
    exact: bool
    argmax_agreement: float
    max_rel_error: tuple[float, ...]   # per layer


def _row_error(truth: np.ndarray, rec: np.ndarray) -> float:
    """Max |error| of a row relative to its largest weight, after the best power-of-two rescale."""
    peak = np.abs(truth).max()
    if peak == 0:
        return float(np.abs(rec).max() > 0)
    k = int(np.argmax(np.abs(truth)))
    scale = 2.0 ** np.round(np.log2(abs(truth[k] / rec[k]))) if rec[k] != 0 else 1.0
    return float(np.max(np.abs(truth - rec * scale)) / peak)


def compare_models(truth: NetworkModel, recovered: NetworkModel, trials: int = 1000,
                   seed: int = 0) -> ModelComparison:
    """Exactness, argmax agreement and per-layer weight error of a recovered model.

    Float rows are compared up to the power of two that timing cannot see.
    """
    exact = truth.dims == recovered.dims and all(
        np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
        for a, b in zip(truth.layers, recovered.layers))
    errors = []
    for a, b in zip(truth.layers, recovered.layers):
        A, B = a.weights.astype(np.float64), b.weights.astype(np.float64)
        errors.append(max(_row_error(A[i], B[i]) for i in range(A.shape[0])))
    return ModelComparison(exact, equivalent_argmax(truth, recovered, trials, seed), tuple(errors))
