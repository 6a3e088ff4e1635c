"""Fixed-point model recovery from the ReLU sign-class channel.

The device computes ``pa = b * 2**f + sum(op(ip_k) * w_k)`` with 4-bit
signed weights and an 8-bit signed bias, and its ReLU takes one path for
``pa >= 0`` and another for ``pa < 0``. Sweeping one input while the others
stay fixed yields the first input value at which the class flips, which is a
ceiling ``ceil(B / |w|)`` over a small integer grid (the crossover LUT).

Recovery per neuron:

1. round one: sweep each input alone; weights of opposite sign to the bias
   flip, and the set of flip points pins down the bias column of the LUT;
2. round two: hold a recovered reference input so the offset bias changes
   sign, then sweep again, which makes the remaining weights flip;
3. disambiguation: every sweep and probe is kept as an exact constraint over
   (bias, w_k, w_ref) and checked by simulation. Two-input probes chosen to
   split the surviving hypotheses most evenly resolve LUT collisions, and
   anything still unresolved is reported as a candidate set.
"""

from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from ..network import DIV255_FRAC_BITS, Layer, NetworkModel, div255_raw
from ..oracle import TimingOracle
from .common import AttackError, AttackResult, CrossoverSearch, LayerProbe, WeightRecord

WEIGHT_VALUES = tuple(range(-8, 8))
BIAS_VALUES = tuple(range(-128, 128))
ROUND2_COLUMNS = (56, 128)
PROBE_GRID_CELLS = 1 << 21
MAX_PROBE_PAIRS = 24
STALL_LIMIT = 6
JOINT_LIMIT = 1 << 18
JOINT_CANDIDATES = 4096
JOINT_CELLS = 1 << 24   # hypotheses x candidate probes evaluated at once


def build_crossover_lut() -> np.ndarray:
    """``I[b][w] = ceil(b / w)`` for ``b`` in 0..128 and ``w`` in 1..8.

    Row 0 and column 0 are unused and hold zeros.
    """
    b = np.arange(129)[:, None]
    w = np.arange(1, 9)[None, :]
    lut = np.zeros((129, 9), dtype=np.int64)
    lut[:, 1:] = -(-b // w)
    return lut


def effective_column(b: int) -> int:
    """LUT column read by a single-input sweep against bias ``b``.

    Zero counts as non-negative, so a non-negative bias needs one extra
    quantum before the sign flips.
    """
    return b + 1 if b >= 0 else -b


def recover_bias_fixed(readings: Iterable[int], nonneg: bool, lut: np.ndarray | None = None) -> list[int]:
    """Biases whose LUT column contains every round-one reading.

    ``nonneg`` is the ReLU class of the all-zero input. A single candidate is
    the common case; several are returned when the readings do not single
    out one column.
    """
    lut = build_crossover_lut() if lut is None else lut
    wanted = set(int(r) for r in readings)
    pool = range(0, 128) if nonneg else range(-128, 0)
    return [b for b in pool if wanted <= set(lut[effective_column(b), 1:].tolist())]


def bias_magnitudes(readings: Iterable[int], lut: np.ndarray | None = None) -> list[int]:
    """Values of ``|b|`` in 1..128 whose LUT column holds every canonical reading.

    Canonical readings are ``ceil(|b| / |w|)`` (see
    :meth:`RecoveredNeuronQ.canonical_readings`). No readings leave all 128
    magnitudes open.
    """
    lut = build_crossover_lut() if lut is None else lut
    wanted = set(int(r) for r in readings)
    return [b for b in range(1, 129) if wanted <= set(lut[b, 1:].tolist())]


def weights_from_readings(readings: dict[int, int], b: int) -> dict[int, list[int]]:
    """Weight candidates that flip a single-input sweep against bias ``b`` at each reading.

    Readings from a sweep on top of an offset bias ``b' = b + ip_ref * w_ref``
    decode the same way with ``b'`` in place of ``b``.
    """
    column = effective_column(b)
    sign = -1 if b >= 0 else 1
    out = {}
    for k, r in readings.items():
        cands = [sign * m for m in range(1, 9) if -(-column // m) == r and sign * m in WEIGHT_VALUES]
        if not cands:
            raise AttackError(f"reading {r} on input {k} is not in LUT column {column}")
        out[k] = cands
    return out


def recover_weights_fixed_round1(readings: dict[int, int], b: int) -> dict[int, list[int]]:
    return weights_from_readings(readings, b)


def recover_weights_fixed_round2(readings: dict[int, int], b: int, w_ref: int, ip_ref: int) -> dict[int, list[int]]:
    return weights_from_readings(readings, b + ip_ref * w_ref)


# --------------------------------------------------------------------------
# exact constraint solver


def first_flip(C: np.ndarray, w: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """First sweep index where ``[C + w * ops[ip] >= 0]`` differs from ip = 0; -1 if none.

    ``ops`` is the nondecreasing operand sequence for ip = 0..255 with
    ``ops[0] == 0``; ``C`` and ``w`` broadcast together.
    """
    C, w = np.broadcast_arrays(np.asarray(C, dtype=np.int64), np.asarray(w, dtype=np.int64))
    out = np.full(C.shape, -1, dtype=np.int64)
    start = C >= 0
    last = len(ops) - 1
    for wv in np.unique(w):
        if wv == 0:
            continue
        sel = w == wv
        if wv < 0:
            idx = np.searchsorted(ops * -wv, C[sel], side="right")
            ok = start[sel]
        else:
            idx = np.searchsorted(ops * wv, -C[sel], side="left")
            ok = ~start[sel]
        out[sel] = np.where(ok & (idx <= last), idx, -1)
    return out


@dataclass(frozen=True)
class _Sweep:
    index: int
    base: tuple[tuple[int, int], ...]
    reading: int

    @property
    def scope(self) -> tuple[int, ...]:
        return tuple(sorted({self.index, *(m for m, _ in self.base)}))


@dataclass(frozen=True)
class _Point:
    inputs: tuple[tuple[int, int], ...]
    nonneg: bool

    @property
    def scope(self) -> tuple[int, ...]:
        return tuple(sorted({m for m, x in self.inputs if x}))


class FixedSolver:
    """Domains of the bias and every weight, narrowed by exact simulation.

    Sweeps touch the bias and at most two weights, so checking one against
    the product of the involved domains is cheap. Propagation keeps only
    values with a supporting assignment under every observation. When the
    joint space of the still-ambiguous weights is small it is enumerated
    outright, which catches hypotheses that survive every pairwise check.
    """

    def __init__(self, n_in: int, ops: np.ndarray, frac: int, nonneg_at_zero: bool, seed: int = 0):
        self.n_in = n_in
        self.ops = np.asarray(ops, dtype=np.int64)
        self.frac = frac
        self.bias = np.array([b for b in BIAS_VALUES if (b >= 0) == nonneg_at_zero])
        self.w = [np.array(WEIGHT_VALUES) for _ in range(n_in)]
        self.observations: list[_Sweep | _Point] = []
        self.rng = np.random.default_rng(seed)

    # simulation ------------------------------------------------------------

    def _settled(self) -> set[int]:
        return {i for i in range(self.n_in) if len(self.w[i]) == 1}

    def _size(self, scope) -> int:
        return len(self.bias) * math.prod(len(self.w[i]) for i in scope)

    def _grid(self, scope: tuple[int, ...]):
        doms = [self.bias] + [self.w[i] for i in scope]
        grids = np.meshgrid(*doms, indexing="ij")
        return [g.ravel() for g in grids]

    def _vals(self, scope, grids) -> dict[int, np.ndarray]:
        vals = {i: np.int64(self.w[i][0]) for i in self._settled()}
        vals.update(zip(scope, grids[1:]))
        return vals

    def _offset(self, b: np.ndarray, pairs, vals) -> np.ndarray:
        C = b.astype(np.int64) << self.frac
        for m, x in pairs:
            if x:
                C = C + self.ops[x] * vals[m]
        return C

    def _predict(self, obs, grids, scope) -> np.ndarray:
        vals = self._vals(scope, grids)
        if isinstance(obs, _Sweep):
            C = self._offset(grids[0], obs.base, vals)
            return first_flip(C, np.broadcast_to(vals[obs.index], C.shape), self.ops) == obs.reading
        return (self._offset(grids[0], obs.inputs, vals) >= 0) == obs.nonneg

    def consistent(self, scope: tuple[int, ...]):
        """Joint hypotheses over (bias, scope weights) that explain every observation inside scope.

        Settled weights take part with their single value.
        """
        grids = self._grid(scope)
        ok = np.ones(len(grids[0]), dtype=bool)
        inside = set(scope) | self._settled()
        for obs in self.observations:
            if set(obs.scope) <= inside:
                ok &= self._predict(obs, grids, scope)
        return [g[ok] for g in grids]

    # bookkeeping -----------------------------------------------------------

    def add_sweep(self, index: int, base: dict[int, int], reading: int | None) -> None:
        base_t = tuple(sorted((m, x) for m, x in base.items() if x))
        self.observations.append(_Sweep(index, base_t, -1 if reading is None else reading))

    def add_point(self, inputs: dict[int, int], nonneg: bool) -> None:
        inputs_t = tuple(sorted((m, x) for m, x in inputs.items() if x))
        self.observations.append(_Point(inputs_t, bool(nonneg)))

    def _narrow(self, scope, grids) -> bool:
        changed = False
        if not len(grids[0]):
            raise AttackError("no parameter assignment explains the observed classes")
        new_b = np.unique(grids[0])
        if len(new_b) < len(self.bias):
            self.bias, changed = new_b, True
        for i, g in zip(scope, grids[1:]):
            new = np.unique(g)
            if len(new) < len(self.w[i]):
                self.w[i], changed = new, True
        return changed

    def propagate(self) -> None:
        changed = True
        while changed:
            changed = False
            for obs in self.observations:
                scope = tuple(i for i in obs.scope if len(self.w[i]) > 1)
                if self._size(scope) > JOINT_LIMIT:
                    continue
                grids = self._grid(scope)
                ok = self._predict(obs, grids, scope)
                changed |= self._narrow(scope, [g[ok] for g in grids])
            if not changed and self._size(self.ambiguous()) <= JOINT_LIMIT:
                scope = tuple(self.ambiguous())
                changed = self._narrow(scope, self.consistent(scope))

    def domain_sizes(self) -> tuple[int, ...]:
        return (len(self.bias), *(len(d) for d in self.w))

    def ambiguous(self) -> list[int]:
        return [k for k in range(self.n_in) if len(self.w[k]) > 1]

    def solved(self) -> bool:
        return len(self.bias) == 1 and not self.ambiguous()

    # probe design ----------------------------------------------------------

    def best_probe(self) -> dict[int, int] | None:
        """Two-input probe whose class splits the surviving hypotheses most evenly.

        Returns None when no probe can tell any two hypotheses apart.
        """
        amb = self.ambiguous()
        loose = amb or (list(range(self.n_in)) if len(self.bias) > 1 else [])
        pairs = {(k,) if self.n_in == 1 else tuple(sorted((k, m)))
                 for k in loose for m in range(self.n_in) if m != k or self.n_in == 1}
        pairs = sorted(pairs, key=self._size)[:MAX_PROBE_PAIRS]
        best, best_score = None, None
        for scope in pairs:
            if best_score is not None and 2 * best_score[0] <= best_score[1] + 1:
                break
            k, m = scope[0], (scope[1] if len(scope) > 1 else None)
            grids = self.consistent(scope)
            n_h = len(grids[0])
            if n_h < 2:
                continue
            n_y = 1 if m is None else len(self.ops)
            step = max(1, int(np.ceil(np.sqrt(n_h * n_y * len(self.ops) / PROBE_GRID_CELLS))))
            xs = np.arange(0, len(self.ops), step)
            ys = np.arange(0, n_y, step)
            vals = dict(zip(scope, grids[1:]))
            C = (grids[0].astype(np.int64) << self.frac)[:, None, None]
            pa = C + self.ops[xs][None, :, None] * vals[k][:, None, None]
            if m is not None:
                pa = pa + self.ops[ys][None, None, :] * vals[m][:, None, None]
            pos = (pa >= 0).sum(axis=0)
            worst = np.maximum(pos, n_h - pos)
            i, j = np.unravel_index(int(np.argmin(worst)), worst.shape)
            score = (int(worst[i, j]), n_h)
            if worst[i, j] == n_h:
                continue
            if best_score is None or score[0] * best_score[1] < best_score[0] * score[1]:
                probe = {k: int(xs[i])}
                if m is not None and ys[j]:
                    probe[m] = int(ys[j])
                best, best_score = probe, score
        return best

    def joint_probe(self) -> dict[int, int] | None:
        """Multi-input probe that splits the enumerated joint hypotheses.

        Candidates are random sparse input vectors at several magnitudes;
        the one whose outcome leaves the fewest hypotheses in the worst case
        wins.
        """
        scope = tuple(self.ambiguous())
        if self._size(scope) > JOINT_LIMIT:
            return None
        grids = self.consistent(scope)
        n_h = len(grids[0])
        if n_h < 2:
            return None
        W = np.empty((n_h, self.n_in), dtype=np.int64)
        for i in range(self.n_in):
            W[:, i] = self.w[i][0]
        for i, g in zip(scope, grids[1:]):
            W[:, i] = g
        n = max(16, min(JOINT_CANDIDATES, JOINT_CELLS // n_h))
        top = self.rng.choice([2, 4, 8, 16, 32, 64, 128, 256], size=(n, 1))
        X = np.minimum(self.rng.integers(0, 256, size=(n, self.n_in)) % top, len(self.ops) - 1)
        X *= self.rng.random((n, self.n_in)) < self.rng.random((n, 1))
        pa = (grids[0].astype(np.int64) << self.frac)[:, None] + W @ self.ops[X].T
        pos = (pa >= 0).sum(axis=0)
        worst = np.maximum(pos, n_h - pos)
        best = int(np.argmin(worst))
        if worst[best] == n_h:
            return None
        return {i: int(v) for i, v in enumerate(X[best]) if v}


# --------------------------------------------------------------------------
# neuron and layer recovery


@dataclass
class RecoveredNeuronQ:
    weights: list[int]
    bias: int
    candidates: list[list[int]]
    bias_candidates: list[int]
    round1: dict[int, int]
    round2: dict[int, int] = field(default_factory=dict)
    ref: int | None = None
    ip_ref: int | None = None
    log: list[str] = field(default_factory=list)

    @property
    def ambiguous(self) -> bool:
        return len(self.bias_candidates) > 1 or any(len(c) > 1 for c in self.candidates)

    def canonical_readings(self) -> list[int | None]:
        """Per-input crossover as the magnitude-only LUT entry ``ceil(|b| / |w|)``.

        Round-two weights use the offset bias. Inputs that never flipped get
        None.
        """
        out: list[int | None] = []
        b2 = None if self.ref is None else self.bias + self.ip_ref * self.weights[self.ref]
        for k, w in enumerate(self.weights):
            if k in self.round1 and w:
                out.append(-(-abs(self.bias) // abs(w)))
            elif k in self.round2 and w and b2 is not None:
                out.append(-(-abs(b2) // abs(w)))
            else:
                out.append(None)
        return out


def layer_operands(probe: LayerProbe, n_in: int) -> tuple[np.ndarray, int]:
    """Operand sequence and fraction bits, read off whether the trace has division events."""
    timing = probe(np.zeros((1, n_in), dtype=np.int64))
    if probe.layer == 0 and timing.div is not None:
        return div255_raw(np.arange(256)), DIV255_FRAC_BITS
    return np.arange(256, dtype=np.int64), 0


def _choose_ip_ref(solver: FixedSolver, ref: int) -> int | None:
    """Reference input that flips the offset bias into the middle of the LUT range."""
    b = int(np.median(solver.bias))
    w = int(solver.w[ref][np.argmax(np.abs(solver.w[ref]))])
    target = solver.ops[sum(ROUND2_COLUMNS) // 2]
    pa = (b << solver.frac) + solver.ops * w
    flipped = (pa >= 0) != (b >= 0)
    if not flipped.any():
        return None
    cost = np.where(flipped, np.abs(np.abs(pa) - target), np.inf)
    return int(np.argmin(cost))


def recover_fixed_neuron(search: CrossoverSearch, neuron: int, ops: np.ndarray, frac: int,
                         ref: int | None = None, ip_ref: int | None = None,
                         budget: int | None = None) -> RecoveredNeuronQ:
    """Recover one neuron's weights and bias.

    ``ref`` and ``ip_ref`` fix the second-round reference; by default the
    reference is a settled weight of opposite sign to the bias and ``ip_ref``
    is picked automatically. ``budget`` caps the disambiguation probes and
    defaults to ten times the cost of sweeping every input once.
    """
    n_in = search.n_in
    budget = 10 * 256 * n_in if budget is None else budget
    nonneg = bool(search.bias_classes()[neuron])
    solver = FixedSolver(n_in, ops, frac, nonneg)
    log = []

    round1 = {}
    for k in range(n_in):
        r = search.reading(neuron, k)
        solver.add_sweep(k, {}, r)
        if r is not None:
            round1[k] = r
    solver.propagate()
    log.append(f"round 1: {len(round1)} flips, bias candidates {len(solver.bias)}")

    round2 = {}
    if ref is None:
        settled = [k for k in round1 if len(solver.w[k]) == 1 and solver.w[k][0] != 0]
        pool = settled or list(round1)
        if pool:
            ref = min(pool, key=lambda k: (len(solver.w[k]), -int(np.abs(solver.w[k]).max())))
    if ref is not None:
        if ip_ref is None:
            ip_ref = _choose_ip_ref(solver, ref)
        if ip_ref is None:
            ref = None
    if ref is not None:
        for k in range(n_in):
            if k == ref or len(solver.w[k]) == 1:
                continue
            r = search.reading(neuron, k, {ref: ip_ref})
            solver.add_sweep(k, {ref: ip_ref}, r)
            if r is not None:
                round2[k] = r
        solver.propagate()
        log.append(f"round 2: ref {ref} at {ip_ref}, {len(round2)} flips")

    used = stalled = 0
    while not solver.solved() and used < budget and stalled < STALL_LIMIT:
        probe = solver.best_probe() or solver.joint_probe()
        if probe is None:
            break
        x = np.zeros((1, n_in), dtype=np.int64)
        for m, v in probe.items():
            x[0, m] = v
        before = solver.domain_sizes()
        solver.add_point(probe, bool(search.point(x)[0, neuron]))
        solver.propagate()
        used += 1
        stalled = stalled + 1 if solver.domain_sizes() == before else 0
    if used:
        log.append(f"disambiguation: {used} probes")

    bias = int(solver.bias[np.argmin(np.abs(solver.bias))])
    weights = [int(d[np.argmin(np.abs(d))]) for d in solver.w]
    return RecoveredNeuronQ(weights, bias, [d.tolist() for d in solver.w], solver.bias.tolist(),
                            round1, round2, ref, ip_ref, log)


def recover_fixed_layer(probe: LayerProbe, n_in: int, n_out: int, **kwargs) -> list[RecoveredNeuronQ]:
    search = CrossoverSearch(probe, n_in, probe.oracle.profile)
    ops, frac = layer_operands(probe, n_in)
    return [recover_fixed_neuron(search, j, ops, frac, **kwargs) for j in range(n_out)]


def _records(layer: int, j: int, neuron: RecoveredNeuronQ) -> list[WeightRecord]:
    readings = neuron.canonical_readings()
    out = []
    for k, w in enumerate(neuron.weights):
        rnd = "1" if k in neuron.round1 else "2" if k in neuron.round2 else ""
        flags = "" if len(neuron.candidates[k]) == 1 else "candidates=" + "|".join(map(str, neuron.candidates[k]))
        out.append(WeightRecord(layer, j, k, w, rnd, readings[k], flags=flags))
    flags = "" if len(neuron.bias_candidates) == 1 else "candidates=" + "|".join(map(str, neuron.bias_candidates))
    out.append(WeightRecord(layer, j, -1, neuron.bias, "1", flags=flags))
    return out


def recover_fixed_model(oracle: TimingOracle, topology: tuple[int, ...] | None = None) -> AttackResult:
    """Layer-by-layer recovery of a fixed-point network behind ``oracle``."""
    dims = tuple(topology or oracle.topology)
    start = oracle.query_count
    layers, records, notes = [], [], []
    _, frac = layer_operands(LayerProbe(oracle, 0), dims[0])
    n_layers = len(dims) - 1
    for index in range(n_layers):
        n_in, n_out = dims[index], dims[index + 1]
        probe = LayerProbe(oracle, index)
        neurons = recover_fixed_layer(probe, n_in, n_out)
        for j, neuron in enumerate(neurons):
            records += _records(index, j, neuron)
            if neuron.ambiguous:
                notes.append(f"layer {index} neuron {j}: residual ambiguity left after probing")
        weights = np.array([n.weights for n in neurons], dtype=np.int64)
        bias = np.array([n.bias for n in neurons], dtype=np.int64)
        activation = probe.final_activation if index == n_layers - 1 else "relu"
        layers.append(Layer(weights, bias, activation, allow_zero=True))
    model = NetworkModel("fixed", tuple(layers), "div255" if frac else "none")
    return AttackResult(model, records, oracle.query_count - start, notes)
