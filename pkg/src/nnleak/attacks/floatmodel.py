"""Float model recovery from multiply and ReLU timing.

Per neuron the attack runs in stages:

1. mantissas: every weight's 7-bit mantissa from the multiply timings over
   the 128 probe inputs 128..255, matched against the model-independent
   mantissa timing table by Pearson correlation;
2. zero-crossover sweeps: the bias sign from the all-zero input, then up to
   three rounds of ReLU-class sweeps that give every weight a reading;
3. point estimates of each weight's exponent relative to a reference weight,
   each sign, and the bias;
4. consistency: an exact interval check of every hypothesis against all
   sweeps, extra two-input probes where more than one exponent survives,
   and a bisection that pins the bias down far beyond the crossover
   resolution.

Everything is relative to the unknown scale ``2**e_ref`` of the reference
weight. Deeper layers are attacked through injected activations, and the
final layer's per-neuron scales are tied together through the timing of the
argmax comparison loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import arith
from ..network import Layer, NetworkModel, layer_reference
from ..oracle import TimingOracle
from ..profiles import CostProfile
from .common import (SWEEP, AttackError, AttackResult, CrossoverSearch, LayerProbe,
                     WeightRecord, first_change, float_relu_class)

PROBE_INPUTS = np.arange(128, 256)
E_RANGE = range(-64, 33)
SLACK = 1e-6
BIAS_REL_RESOLUTION = 2.0 ** -22
MAX_BIAS_PROBES = 64
MAX_EXTRA_PROBES = 24
MAX_SPLIT_TRIES = 16


@dataclass(frozen=True)
class MantissaTimingTable:
    """``cycles[i, w]``: multiply cycles for input fraction i, weight fraction w."""

    cycles: np.ndarray
    profile: str

    def __post_init__(self) -> None:
        if self.cycles.shape != (128, 128):
            raise ValueError("mantissa timing table must be 128x128")


def build_mul_lut(profile: CostProfile) -> MantissaTimingTable:
    cycles = np.array(arith.mul_cycle_table(profile), dtype=np.float64)
    cycles.setflags(write=False)
    return MantissaTimingTable(cycles, profile.name)


@dataclass(frozen=True)
class MantissaMatch:
    frac7: int
    score: float
    ambiguous: bool = False

    @property
    def value(self) -> float:
        return 1.0 + self.frac7 / 128


def _standardize(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    norm = np.sqrt((centered ** 2).sum(axis=0))
    return centered, norm


def match_columns(observed: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pearson-match each observed column against every reference column.

    Returns (best index, best score, tie flag) per observed column. Constant
    observed columns get index -1 and score nan.
    """
    obs_c, obs_n = _standardize(np.asarray(observed, dtype=np.float64))
    ref_c, ref_n = _standardize(np.asarray(reference, dtype=np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = (obs_c.T @ ref_c) / np.outer(obs_n, ref_n)
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    best = np.argmax(scores, axis=1)
    top = scores[np.arange(len(best)), best]
    with np.errstate(invalid="ignore"):
        ties = (np.abs(scores - top[:, None]) <= 1e-12).sum(axis=1) > 1
    constant = obs_n == 0
    best = np.where(constant, -1, best)
    top = np.where(constant, np.nan, top)
    return best, top, ties & ~constant


def recover_mantissa(observed, table: MantissaTimingTable) -> MantissaMatch:
    """Weight mantissa whose timing column best correlates with ``observed``.

    ``observed[i]`` is the multiply time for probe input ``128 + i``. Exact
    score ties go to the smaller mantissa and are flagged as ambiguous.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (128,):
        raise ValueError("observed timing vector must have 128 entries")
    if np.ptp(observed) == 0:
        raise ValueError("constant timing vector: correlation is undefined")
    best, score, tie = match_columns(observed[:, None], table.cycles)
    return MantissaMatch(int(best[0]), float(score[0]), bool(tie[0]))


# --------------------------------------------------------------------------
# crossover sweeps


def find_crossover_round1(search: CrossoverSearch, neuron: int, k: int) -> int | None:
    """First ip_k whose ReLU class differs from ip_k = 0, all other inputs 0."""
    return search.reading(neuron, k)


def find_crossover_round2(search: CrossoverSearch, neuron: int, k: int, ref: int) -> int | None:
    """Same sweep with the reference input held at 255."""
    return search.reading(neuron, k, {ref: 255})


def find_crossover_round3(search: CrossoverSearch, neuron: int, k: int, ref: int) -> int | None:
    """Sweep the reference input with input ``k`` held at 255."""
    return search.reading(neuron, ref, {k: 255})


@dataclass
class CrossoverReadings:
    bias_class: int
    round1: dict[int, int] = field(default_factory=dict)
    round2: dict[int, int] = field(default_factory=dict)
    round3: dict[int, int] = field(default_factory=dict)
    swept2: set[int] = field(default_factory=set)
    swept3: set[int] = field(default_factory=set)
    ref: int | None = None

    def round_of(self, k: int) -> tuple[int | None, int | None]:
        for rnd, readings in ((1, self.round1), (2, self.round2), (3, self.round3)):
            if k in readings:
                return rnd, readings[k]
        return None, None


def collect_readings(search: CrossoverSearch, neuron: int, n_in: int,
                     nonzero: list[int], bias_class: int) -> CrossoverReadings:
    readings = CrossoverReadings(bias_class)
    if bias_class == 0:
        return readings
    for k in nonzero:
        r = find_crossover_round1(search, neuron, k)
        if r is not None:
            readings.round1[k] = r
    if not readings.round1:
        return readings
    ref = readings.ref = min(readings.round1)
    for k in nonzero:
        if k in readings.round1:
            continue
        readings.swept2.add(k)
        r = find_crossover_round2(search, neuron, k, ref)
        if r is not None:
            readings.round2[k] = r
            continue
        readings.swept3.add(k)
        r = find_crossover_round3(search, neuron, k, ref)
        if r is not None:
            readings.round3[k] = r
    return readings


# --------------------------------------------------------------------------
# exponent, sign and bias point estimates


@dataclass
class RecoveredNeuronF:
    """Weights are ``sign * mantissa * 2**rel_exponent`` in units of ``2**e_ref``."""

    mantissas: list[MantissaMatch | None]
    rel_exponents: list[int | None]
    signs: list[int]
    bias_closed_form: float
    bias: float
    readings: CrossoverReadings
    flags: list[str] = field(default_factory=list)
    bias_flags: str = ""

    @property
    def ref(self) -> int | None:
        return self.readings.ref

    def weight(self, k: int) -> float:
        m = self.mantissas[k]
        e = self.rel_exponents[k]
        if m is None or e is None or self.signs[k] == 0:
            return 0.0
        return self.signs[k] * m.value * 2.0 ** e

    def weights(self) -> np.ndarray:
        return np.array([self.weight(k) for k in range(len(self.mantissas))])


def _round_log2(x: float) -> int:
    return int(math.floor(math.log2(x) + 0.5))


def solve_exponents(readings: CrossoverReadings, mantissas: list[MantissaMatch | None],
                    ref: int | None = None) -> RecoveredNeuronF:
    """Closed-form exponents, signs and bias from the crossover readings.

    Round-1 weights: ``round(log2(m_ref/m_k * ip_ref/ip_k))`` and sign
    opposite to the bias. Round-2 weights: ``(255 - ip_ref)/ip_k`` in place
    of the input ratio and the bias's sign. Round-3 weights:
    ``|ip_k - ip_ref| / 255`` with the sign from whether ``ip_k`` lies
    above ``ip_ref``. Bias: ``-w_ref * ip_ref``.
    """
    ref = readings.ref if ref is None else ref
    if ref is None or ref not in readings.round1:
        raise AttackError("no reference weight with a first-round crossover")
    if mantissas[ref] is None:
        raise AttackError("reference weight has no mantissa")
    sb = readings.bias_class
    m_ref = mantissas[ref].value
    ip_ref = readings.round1[ref]
    n = len(mantissas)
    exps: list[int | None] = [None] * n
    signs = [0] * n
    flags = [""] * n
    for k in range(n):
        m = mantissas[k]
        if m is None:
            flags[k] = "zero-weight"
            continue
        rnd, ip = readings.round_of(k)
        if rnd == 1:
            exps[k] = _round_log2(m_ref / m.value * ip_ref / ip)
            signs[k] = -sb
        elif rnd == 2:
            if ip_ref == 255:
                flags[k] = "below-resolution"
                continue
            exps[k] = _round_log2(m_ref / m.value * (255 - ip_ref) / ip)
            signs[k] = sb
        elif rnd == 3:
            if ip == ip_ref:
                flags[k] = "below-resolution"
                continue
            signs[k] = sb if ip > ip_ref else -sb
            exps[k] = _round_log2(m_ref / m.value * abs(ip - ip_ref) / 255)
        else:
            flags[k] = "no-crossover"
    bias = float(sb * m_ref * ip_ref)
    return RecoveredNeuronF(list(mantissas), exps, signs, bias, bias, readings, flags)


# --------------------------------------------------------------------------
# exact consistency check
#
# With s = sign(b) and B = |b| / 2**e_ref, the pre-activation divided by s is
# g(x) = B - sum_k x_k * v_k where v_k = tau_k * m_k * 2**E_k and tau_k is +1
# for weights whose sign is opposite to the bias. Every observation turns
# into a constraint on B under each weight hypothesis (tau_k, E_k).


def _reading_bounds(A, d, r: int):
    """B-range for which the sweep g(x) = B + A + x*d first changes class at x = r."""
    lo = -A - np.maximum((r - 1) * d, r * d)
    hi = -A - np.minimum((r - 1) * d, r * d)
    pad = SLACK * np.maximum(np.abs(lo), np.abs(hi))
    return lo - pad, hi + pad


def _change_bounds(A, d):
    """B-range for which the sweep changes class somewhere in 1..255."""
    p = np.minimum(-A, -A - 255 * d)
    q = np.maximum(-A, -A - 255 * d)
    pad = SLACK * np.maximum(np.abs(p), np.abs(q))
    return p + pad, q - pad


def _apply_reading(lo, hi, A, d, r: int | None):
    if r is not None:
        rlo, rhi = _reading_bounds(A, d, r)
        return np.maximum(lo, rlo), np.minimum(hi, rhi)
    p, q = _change_bounds(A, d)
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    covered = (p <= lo) & (q >= hi)
    left = ~covered & (p <= lo) & (q >= lo)
    right = ~covered & (q >= hi) & (p <= hi)
    lo = np.where(left, q, lo)
    hi = np.where(right, p, hi)
    lo = np.where(covered, np.inf, lo)
    return lo, hi


def _apply_point(lo, hi, T, cls: int):
    pad = SLACK * np.maximum(np.abs(T), 1e-300)
    if cls >= 0:
        lo = np.maximum(lo, T - pad) if cls > 0 else lo
    if cls <= 0:
        hi = np.minimum(hi, T + pad) if cls < 0 else hi
    if cls == 0:
        lo, hi = np.maximum(lo, T - pad), np.minimum(hi, T + pad)
    return lo, hi


class _NeuronSolver:
    def __init__(self, readings: CrossoverReadings, mantissas: list[MantissaMatch | None]):
        self.readings = readings
        self.mant = np.array([0.0 if m is None else m.value for m in mantissas])
        self.ref = readings.ref
        m_ref = self.mant[self.ref]
        lo, hi = _reading_bounds(0.0, -m_ref, readings.round1[self.ref])
        self.B: tuple[float, float] | None = (max(float(lo), 0.0), float(hi))
        exps = np.array(list(E_RANGE))
        taus = np.repeat([1, -1], len(exps))
        exps = np.tile(exps, 2)
        self.cand = {k: (taus.copy(), exps.copy()) for k, m in enumerate(mantissas)
                     if m is not None and k != self.ref}
        self.probes: list[tuple[np.ndarray, int]] = []
        self.unresolvable: set[int] = set()

    def values(self, k: int) -> np.ndarray:
        taus, exps = self.cand[k]
        return taus * self.mant[k] * np.exp2(exps.astype(float))

    def trusted(self) -> np.ndarray:
        """Per-input v_k where known exactly, 0 elsewhere."""
        v = np.zeros(len(self.mant))
        v[self.ref] = self.mant[self.ref]
        for k in self.cand:
            if len(self.cand[k][0]) == 1:
                v[k] = self.values(k)[0]
        return v

    def is_trusted(self, k: int) -> bool:
        return k == self.ref or (k in self.cand and len(self.cand[k][0]) == 1)

    def _bounds(self, k: int, trusted: np.ndarray):
        r = self.readings
        v = self.values(k)
        m_ref = self.mant[self.ref]
        lo = np.full(len(v), self.B[0])
        hi = np.full(len(v), self.B[1])
        lo, hi = _apply_reading(lo, hi, 0.0, -v, r.round1.get(k))
        if k in r.swept2:
            lo, hi = _apply_reading(lo, hi, -255 * m_ref, -v, r.round2.get(k))
        if k in r.swept3:
            lo, hi = _apply_reading(lo, hi, -255 * v, -m_ref, r.round3.get(k))
        for x, cls in self.probes:
            if x[k] == 0:
                continue
            others = np.nonzero(x)[0]
            if not all(i == k or self.is_trusted(i) for i in others):
                continue
            rest = float(x @ trusted) - x[k] * trusted[k]
            lo, hi = _apply_point(lo, hi, rest + x[k] * v, cls)
        return lo, hi

    def propagate(self) -> None:
        changed = True
        while changed:
            changed = False
            trusted = self.trusted()
            for x, cls in self.probes:
                if all(self.is_trusted(i) for i in np.nonzero(x)[0]):
                    lo, hi = _apply_point(self.B[0], self.B[1], float(x @ trusted), cls)
                    self._set_B(float(lo), float(hi))
            for k in list(self.cand):
                lo, hi = self._bounds(k, trusted)
                keep = lo <= hi
                if not keep.any():
                    raise AttackError(f"no hypothesis for weight {k} explains the observations")
                if not keep.all():
                    taus, exps = self.cand[k]
                    self.cand[k] = (taus[keep], exps[keep])
                    changed = True
                if keep.sum() == 1:
                    i = int(np.argmax(keep))
                    if float(lo[i]) > self.B[0] or float(hi[i]) < self.B[1]:
                        self._set_B(max(self.B[0], float(lo[i])), min(self.B[1], float(hi[i])))
                        changed = True
                if changed:
                    trusted = self.trusted()

    def _set_B(self, lo: float, hi: float) -> None:
        if lo > hi:
            raise AttackError("observations leave no room for the bias")
        self.B = (lo, hi)

    def ambiguous(self) -> list[int]:
        return [k for k in self.cand if len(self.cand[k][0]) > 1 and k not in self.unresolvable]


def _fill(target: float, values: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Inputs in 0..255 whose weighted sum ``x @ values`` is close to ``target``.

    Greedy from the largest weight down, then exhaustive pairwise refinement.
    """
    x = np.zeros(len(values), dtype=np.int64)
    total = 0.0
    for k in order:
        v = values[k]
        if v == 0:
            continue
        x[k] = int(np.clip(np.rint((target - total) / v), 0, 255))
        total += x[k] * v
    active = [k for k in order if values[k] != 0]
    xs = np.arange(256)
    for _ in range(4):
        improved = False
        for a, k in enumerate(active):
            for l in active[a + 1:]:
                rest = total - x[k] * values[k] - x[l] * values[l]
                xl = np.clip(np.rint((target - rest - xs * values[k]) / values[l]), 0, 255)
                err = np.abs(target - rest - xs * values[k] - xl * values[l])
                best = int(np.argmin(err))
                if err[best] < abs(target - total) * (1 - 1e-12):
                    x[k], x[l] = best, int(xl[best])
                    total = rest + best * values[k] + xl[best] * values[l]
                    improved = True
        if not improved:
            break
    return x


def _observe(search: CrossoverSearch, j: int, x: np.ndarray, sb: int) -> int:
    return int(search.point(x[None, :])[0, j]) * sb


def _bisect_B(solver: _NeuronSolver, search: CrossoverSearch, j: int, sb: int, budget: int) -> int:
    """Halve the bias interval with combinations of trusted weights."""
    used = 0
    v = solver.trusted()
    order = np.argsort(-np.abs(v), kind="stable")
    while used < budget:
        lo, hi = solver.B
        if hi - lo <= BIAS_REL_RESOLUTION * hi:
            break
        x = _fill(0.5 * (lo + hi), v, order)
        T = float(x @ v)
        if not lo < T < hi or not x.any():
            break
        cls = _observe(search, j, x, sb)
        solver.probes.append((x, cls))
        new_lo, new_hi = _apply_point(lo, hi, T, cls)
        solver._set_B(float(new_lo), float(new_hi))
        used += 1
        if new_hi - new_lo > 0.99 * (hi - lo):
            # The reachable combinations are no finer than the interval.
            break
    return used


def _split_probe(solver: _NeuronSolver, k: int) -> np.ndarray | None:
    """Probe whose outcome separates k's hypotheses into a lower and upper group.

    Input k is driven while trusted weights offset the bias, so that every
    hypothesis below the split leaves the neuron on one side of zero and
    every hypothesis above it on the other. Balanced splits are tried first;
    hypotheses too close to tell apart at the current bias resolution stay
    together.
    """
    v_all = np.unique(solver.values(k))
    n = len(v_all)
    if n < 2:
        return None
    trusted = solver.trusted()
    trusted[k] = 0.0
    order = np.argsort(-np.abs(trusted), kind="stable")
    reach_lo = 255 * trusted[trusted < 0].sum()
    reach_hi = 255 * trusted[trusted > 0].sum()
    lo, hi = solver.B
    gaps = np.diff(v_all)
    usable = [i for i in range(1, n) if 255 * gaps[i - 1] > hi - lo]
    for i in sorted(usable, key=lambda i: abs(2 * i - n))[:MAX_SPLIT_TRIES]:
        v_below, v_above = v_all[i - 1], v_all[i]
        for xk in (255, 128, 64, 32, 16, 8, 4, 2, 1):
            # g = B - T - xk * v must be positive for v <= v_below and
            # negative for v >= v_above, whatever B is within [lo, hi].
            t_lo, t_hi = hi - xk * v_above, lo - xk * v_below
            a, b = max(t_lo, reach_lo), min(t_hi, reach_hi)
            if a >= b:
                continue
            x = _fill(0.5 * (a + b), trusted, order)
            T = float(x @ trusted)
            scale = float(np.abs(x * trusted).sum()) + hi
            if t_lo + 10 * SLACK * (scale + xk * abs(v_above)) < T < t_hi - 10 * SLACK * (scale + xk * abs(v_below)):
                x[k] = xk
                return x
    return None


def _exact_neuron(neuron: RecoveredNeuronF, search: CrossoverSearch, j: int) -> None:
    """Check every exponent against all sweeps, probe ambiguities, pin the bias."""
    sb = neuron.readings.bias_class
    solver = _NeuronSolver(neuron.readings, neuron.mantissas)

    def n_trusted() -> int:
        return sum(len(taus) == 1 for taus, _ in solver.cand.values())

    def pin() -> None:
        # Newly trusted weights allow finer bias probes, which can in turn
        # settle more exponents.
        seen = -1
        while n_trusted() != seen:
            seen = n_trusted()
            _bisect_B(solver, search, j, sb, MAX_BIAS_PROBES)
            solver.propagate()

    solver.propagate()
    pin()
    extra = 0
    while extra < MAX_EXTRA_PROBES * max(1, len(solver.cand)):
        pending = solver.ambiguous()
        if not pending:
            break
        k = pending[0]
        x = _split_probe(solver, k)
        if x is None:
            solver.unresolvable.add(k)
            continue
        solver.probes.append((x, _observe(search, j, x, sb)))
        extra += 1
        before, trusted_before = len(solver.cand[k][0]), n_trusted()
        solver.propagate()
        if len(solver.cand[k][0]) == before:
            solver.unresolvable.add(k)
        if n_trusted() > trusted_before:
            pin()
            solver.unresolvable.clear()
    _bisect_B(solver, search, j, sb, MAX_BIAS_PROBES)

    for k, (taus, exps) in solver.cand.items():
        if len(taus) == 1:
            sign = -sb * int(taus[0])
            if neuron.rel_exponents[k] != int(exps[0]) or neuron.signs[k] != sign:
                neuron.flags[k] = "corrected"
            neuron.rel_exponents[k] = int(exps[0])
            neuron.signs[k] = sign
        else:
            neuron.flags[k] = "ambiguous-exponent"
    lo, hi = solver.B
    neuron.bias = float(sb * 0.5 * (lo + hi))


# --------------------------------------------------------------------------
# layer and model recovery


def recover_mantissas(search: CrossoverSearch, table: MantissaTimingTable, n_out: int):
    """(n_out x n_in) mantissa matches from 128 all-equal probe vectors."""
    units = np.repeat(PROBE_INPUTS[:, None], search.n_in, axis=1)
    timing = search.probe(units)
    observed = timing.mul.reshape(128, -1)
    best, score, ties = match_columns(observed, table.cycles)
    out = []
    for j in range(n_out):
        row = []
        for k in range(search.n_in):
            i = j * search.n_in + k
            row.append(None if best[i] < 0 else MantissaMatch(int(best[i]), float(score[i]), bool(ties[i])))
        out.append(row)
    return out


def recover_float_layer(probe: LayerProbe, n_in: int, n_out: int, profile: CostProfile,
                        table: MantissaTimingTable | None = None,
                        exact: bool = True) -> list[RecoveredNeuronF | None]:
    table = table or build_mul_lut(profile)
    search = CrossoverSearch(probe, n_in, profile)
    mantissas = recover_mantissas(search, table, n_out)
    bias_classes = search.bias_classes()
    neurons: list[RecoveredNeuronF | None] = []
    for j in range(n_out):
        nonzero = [k for k in range(n_in) if mantissas[j][k] is not None]
        readings = collect_readings(search, j, n_in, nonzero, int(bias_classes[j]))
        if readings.ref is None:
            neurons.append(None)
            continue
        neuron = solve_exponents(readings, mantissas[j])
        if exact:
            _exact_neuron(neuron, search, j)
        neurons.append(neuron)
    return neurons


def _canonical_shift(weights: np.ndarray) -> int:
    """Power of two that brings the largest |weight| into [0.5, 1)."""
    peak = np.max(np.abs(weights))
    if peak == 0:
        return 0
    return -(math.floor(math.log2(peak)) + 1)


def _neuron_records(layer: int, j: int, neuron: RecoveredNeuronF, weights, bias) -> list[WeightRecord]:
    records = []
    for k in range(len(weights)):
        rnd, ip = neuron.readings.round_of(k)
        m = neuron.mantissas[k]
        records.append(WeightRecord(layer, j, k, float(weights[k]), "" if rnd is None else f"r{rnd}", ip,
                                    None if m is None else m.score, neuron.flags[k]))
    records.append(WeightRecord(layer, j, -1, float(bias), "bisect", neuron.readings.round1.get(neuron.ref),
                                None, neuron.bias_flags))
    return records


def _relative_output_scales(probe: LayerProbe, rows: np.ndarray, bias: np.ndarray, profile: CostProfile,
                            seed: int = 0) -> tuple[np.ndarray, list[str]]:
    """log2 scale of every final neuron relative to neuron 0, from argmax timing.

    The comparison loop updates its running best when ``out[j]`` beats it,
    which costs a different number of cycles. Scales are fixed one neuron
    at a time; for neuron j we pick probe vectors whose predicted ratio
    ``log2(best_so_far / out_j)`` falls between the surviving candidates.
    """
    n_out, n_in = rows.shape
    shifts = np.zeros(n_out)
    notes = []
    rng = np.random.default_rng(seed)
    pool = rng.integers(0, 256, size=(6000, n_in))
    sparse = rng.integers(0, 256, size=(6000, n_in)) * (rng.random((6000, n_in)) < 0.3)
    pool = np.vstack([pool, sparse])
    tmp = NetworkModel("float32", (Layer(rows.astype(np.float32), bias.astype(np.float32), "none"),))
    pa = layer_reference(tmp, 0, pool.astype(np.float32)).astype(np.float64)
    out = np.maximum(pa, 0.0)
    for j in range(1, n_out):
        lo, hi = -48, 48
        best = np.max(out[:, :j] * 2.0 ** shifts[None, :j], axis=1)
        valid = (best > 0) & (out[:, j] > 0)
        theta = np.full(len(pool), np.nan)
        theta[valid] = np.log2(best[valid] / out[valid, j])
        frac = theta - np.floor(theta)
        usable = valid & (frac > 0.1) & (frac < 0.9)
        # candidates: lo < shift <= hi; an update means shift > theta
        while hi - lo > 1:
            mid = 0.5 * (lo + hi + 1)
            cand = np.nonzero(usable & (theta > lo + 1) & (theta < hi))[0]
            if cand.size == 0:
                break
            pick = cand[np.argmin(np.abs(theta[cand] - mid))]
            cycles = probe(pool[pick][None, :]).cmp[0, j - 1]
            if abs(cycles - profile.cmp_update) < abs(cycles - profile.cmp_keep):
                lo = math.floor(theta[pick])
            else:
                hi = math.floor(theta[pick])
        shifts[j] = hi
        if hi - lo > 1:
            notes.append(f"final neuron {j}: relative scale only bounded to ({lo}, {hi}]")
    return shifts, notes


def recover_float_model(oracle: TimingOracle, topology: tuple[int, ...] | None = None,
                        exact: bool = True) -> AttackResult:
    """Layer-by-layer recovery of a float network behind ``oracle``."""
    dims = tuple(topology or oracle.topology)
    profile = oracle.profile
    table = build_mul_lut(profile)
    start = oracle.query_count
    layers: list[Layer] = []
    records: list[WeightRecord] = []
    notes: list[str] = []
    n_layers = len(dims) - 1
    for index in range(n_layers):
        n_in, n_out = dims[index], dims[index + 1]
        scales = None if index == 0 else oracle.injection_scales(index, layers[-1].weights)
        probe = LayerProbe(oracle, index, scales)
        neurons = recover_float_layer(probe, n_in, n_out, profile, table, exact)
        rows = np.zeros((n_out, n_in))
        bias = np.zeros(n_out)
        for j, neuron in enumerate(neurons):
            if neuron is None:
                notes.append(f"layer {index} neuron {j}: no first-round crossover, left at zero")
                records.append(WeightRecord(index, j, -1, 0.0, flags="unrecoverable"))
                continue
            w = neuron.weights()
            shift = _canonical_shift(w)
            rows[j] = w * 2.0 ** shift
            bias[j] = neuron.bias * 2.0 ** shift
            records += _neuron_records(index, j, neuron, rows[j], bias[j])
        final = index == n_layers - 1
        activation = probe.final_activation if final else "relu"
        if final and n_out > 1:
            shifts, scale_notes = _relative_output_scales(probe, rows, bias, profile)
            notes += scale_notes
            rows *= 2.0 ** shifts[:, None]
            bias *= 2.0 ** shifts
        layers.append(Layer(rows.astype(np.float32), bias.astype(np.float32), activation))
        if final:
            for r in records:
                if r.layer == index:
                    r.value = float(rows[r.neuron, r.index] if r.index >= 0 else bias[r.neuron])
    model = NetworkModel("float32", tuple(layers))
    return AttackResult(model, records, oracle.query_count - start, notes)
