"""Timing-leakage verification for the default and hardened kernels.

Three reports live here:

* :func:`verify_constant_time` runs a kernel over its operand domain and
  collects the set of distinct cycle counts. Domains of at most 2**16
  operand combinations are enumerated exhaustively; wider ones are sampled
  with a seeded generator. A kernel is constant-time exactly when the set
  has one element.
* :func:`overhead_report` lays out default versus hardened costs in the
  usual countermeasure-overhead table. Numbers are kernel-only cycles.
  Loads and stores around them are not modelled.
* :func:`attack_resistance_suite` points the attacks at a hardened executor
  and records how far each gets compared with blind guessing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import arith, hardened as hd
from .attacks.binarymodel import recover_binary_weights
from .attacks.common import AttackError, LayerProbe, first_change, relu_classes
from .attacks.floatmodel import PROBE_INPUTS, build_mul_lut, match_columns
from .attacks.inputs import (recover_input_div255, recover_input_float, recover_sparsity_mask,
                             weight_mantissa_matrix)
from .network import NetworkModel
from .oracle import JitterConfig
from .profiles import CostProfile

SAMPLES = 1 << 14
VARIANTS = ("default", "hardened")


# --------------------------------------------------------------------------
# kernels and their operand domains


def _float(x: float) -> arith.FloatRepr:
    return arith.FloatRepr.from_float(float(x))


def _weight_pattern(p: int) -> float:
    """Sign bit and 7-bit fraction of an 8-bit weight pattern, exponent -1."""
    return (-1.0 if p >> 7 else 1.0) * (1.0 + (p & 127) / 128) / 2


def _valid_float_bits(rng: np.random.Generator, n: int) -> list[int]:
    bits = rng.integers(0, 1 << 32, size=4 * n, dtype=np.uint64)
    exponent = (bits >> 23) & 0xFF
    bits = bits[(exponent != 0) & (exponent != 255)][:n - 3]
    return [0, 0x3F800000, 0xBF800000] + [int(b) for b in bits]


def _domain(kernel: str, variant: str, seed: int) -> tuple[str, Iterable[tuple]]:
    rng = np.random.default_rng([seed, VARIANTS.index(variant), KERNELS.index(kernel)])
    if kernel == "mul":
        if variant == "default":
            return "exhaustive: 8-bit input x 8-bit weight pattern", \
                ((ip, p) for ip in range(256) for p in range(256))
        a = rng.integers(0, 1 << 23, SAMPLES)
        q = rng.integers(-(1 << 23), 1 << 23, SAMPLES)
        a[:4], q[:4] = [0, 0, (1 << 23) - 1, (1 << 23) - 1], [0, -(1 << 23), (1 << 23) - 1, -(1 << 23)]
        return f"sampled: {SAMPLES} pairs of 24-bit words", zip(a.tolist(), q.tolist())
    if kernel == "mac":
        if variant == "default":
            acc = rng.uniform(-64, 64, SAMPLES).astype(np.float32)
            ip = rng.integers(0, 256, SAMPLES)
            w = rng.uniform(-1, 1, SAMPLES).astype(np.float32)
            return f"sampled: {SAMPLES} (acc, ip, wt) float triples", zip(acc.tolist(), ip.tolist(), w.tolist())
        acc = rng.integers(-(1 << 46), 1 << 46, SAMPLES)
        a = rng.integers(0, 1 << 23, SAMPLES)
        q = rng.integers(-(1 << 23), 1 << 23, SAMPLES)
        return f"sampled: {SAMPLES} (acc, ip, wt) word triples", zip(acc.tolist(), a.tolist(), q.tolist())
    if kernel == "relu":
        return f"sampled: {SAMPLES} float32 encodings", ((b,) for b in _valid_float_bits(rng, SAMPLES))
    if kernel == "relu-fixed":
        return "exhaustive: 16-bit signed words", ((v,) for v in range(-(1 << 15), 1 << 15))
    if kernel in ("int2float", "div255"):
        return "exhaustive: inputs 0..255", ((ip,) for ip in range(256))
    if kernel == "bnn":
        return "exhaustive: weight +/-1 x input 0..255", ((w, ip) for w in (1, -1) for ip in range(256))
    if kernel == "argmax":
        return "exhaustive: 8-bit (best, candidate) pairs", ((b, c) for b in range(256) for c in range(256))
    raise ValueError(f"unknown kernel {kernel!r}")


def _div_cycles(ip: int, profile: CostProfile) -> int:
    _, steps = arith.leaky_normalize_div255(ip, profile)
    return profile.div_base + sum(steps)


CycleFn = Callable[..., int]


def _kernels(profile: CostProfile) -> dict[tuple[str, str], CycleFn]:
    P = profile
    return {
        ("mul", "default"): lambda ip, p: arith.leaky_float_mul(_float(ip), _float(_weight_pattern(p)), P)[1],
        ("mul", "hardened"): lambda a, q: hd.ct_multiply(a, q, P)[1],
        ("mac", "default"): lambda acc, ip, w: arith.float_mac(_float(acc), _float(ip), _float(w), P)[1],
        ("mac", "hardened"): lambda acc, a, q: hd.ct_mac(acc, a, q, P)[1],
        ("relu", "default"): lambda bits: arith.leaky_float_relu(arith.FloatRepr.from_bits(bits)
                                                                 if bits else arith.ZERO, P)[1],
        ("relu", "hardened"): lambda bits: hd.ct_relu_float(bits, P)[1],
        ("relu-fixed", "default"): lambda v: arith.fixed_relu(arith.FixedQ(v), P)[1],
        ("relu-fixed", "hardened"): lambda v: hd.ct_relu(v, P, width=16)[1],
        ("int2float", "default"): lambda ip: arith.leaky_int2float(ip, P)[1],
        ("int2float", "hardened"): lambda ip: hd.ct_load_input(ip, P)[1],
        ("div255", "default"): lambda ip: _div_cycles(ip, P),
        ("div255", "hardened"): lambda ip: hd.ct_normalize_div255(ip, P)[1],
        ("bnn", "default"): lambda w, ip: arith.bnn_mac(0, ip, w, P)[1],
        ("bnn", "hardened"): lambda w, ip: hd.ct_bnn_mac(0, ip, w, P)[1],
        ("argmax", "default"): lambda b, c: P.cmp_update if c > b else P.cmp_keep,
        ("argmax", "hardened"): lambda b, c: hd.ct_select_max(b, 0, c, 1, P)[2],
    }


KERNELS = ("mul", "mac", "relu", "relu-fixed", "int2float", "div255", "bnn", "argmax")


# --------------------------------------------------------------------------
# leakage report


@dataclass(frozen=True)
class KernelLeakage:
    kernel: str
    variant: str
    domain: str
    probes: int
    classes: tuple[int, ...]
    mean_cycles: float

    @property
    def constant_time(self) -> bool:
        return len(self.classes) == 1

    @property
    def verdict(self) -> str:
        return "constant-time" if self.constant_time else "leaky"


@dataclass
class LeakageReport:
    profile: str
    rows: list[KernelLeakage] = field(default_factory=list)

    def row(self, kernel: str, variant: str) -> KernelLeakage:
        for r in self.rows:
            if r.kernel == kernel and r.variant == variant:
                return r
        raise KeyError((kernel, variant))

    def overhead(self, kernel: str) -> float | None:
        """Hardened over default mean cycles, when both variants were measured."""
        try:
            return self.row(kernel, "hardened").mean_cycles / self.row(kernel, "default").mean_cycles
        except KeyError:
            return None

    def merge(self, other: "LeakageReport") -> "LeakageReport":
        return LeakageReport(self.profile, self.rows + other.rows)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["kernel", "variant", "domain", "probes", "distinct", "classes",
                         "mean_cycles", "verdict", "overhead"])
        for r in self.rows:
            ratio = self.overhead(r.kernel) if r.variant == "hardened" else None
            writer.writerow([r.kernel, r.variant, r.domain, r.probes, len(r.classes),
                             "|".join(map(str, r.classes)), f"{r.mean_cycles:.2f}", r.verdict,
                             "" if ratio is None else f"{ratio:.3f}"])
        return out.getvalue()

    def to_table(self) -> str:
        lines = [f"timing classes per kernel ({self.profile}, kernel-only cycles)",
                 f"{'kernel':<11} {'variant':<9} {'probes':>7} {'classes':>8} {'mean':>9}  verdict"]
        for r in self.rows:
            lines.append(f"{r.kernel:<11} {r.variant:<9} {r.probes:>7} {len(r.classes):>8} "
                         f"{r.mean_cycles:>9.1f}  {r.verdict}")
        lines.append("timing only: the mask in the constant-time ReLU still has data-dependent "
                     "Hamming weight, which a power probe can see")
        return "\n".join(lines) + "\n"


def verify_constant_time(kernel: str, profile: CostProfile, hardened: bool = False,
                         probes: Iterable[tuple] | None = None, seed: int = 0) -> LeakageReport:
    """Distinct cycle counts of one kernel variant over a probe set.

    Without ``probes`` the kernel's full domain is used (see module notes).
    """
    variant = "hardened" if hardened else "default"
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {', '.join(KERNELS)}")
    domain, default_probes = _domain(kernel, variant, seed)
    if probes is not None:
        domain, default_probes = "caller-supplied", probes
    fn = _kernels(profile)[(kernel, variant)]
    cycles = np.array([fn(*p) for p in default_probes], dtype=np.int64)
    if not len(cycles):
        raise ValueError("empty probe set")
    classes = tuple(int(c) for c in np.unique(cycles))
    row = KernelLeakage(kernel, variant, domain, len(cycles), classes, float(cycles.mean()))
    return LeakageReport(profile.name, [row])


def verify_all(profile: CostProfile, seed: int = 0, kernels: Iterable[str] = KERNELS) -> LeakageReport:
    report = LeakageReport(profile.name)
    for kernel in kernels:
        for hardened in (False, True):
            report = report.merge(verify_constant_time(kernel, profile, hardened, seed=seed))
    return report


# --------------------------------------------------------------------------
# overhead table


@dataclass(frozen=True)
class OverheadRow:
    metric: str
    case: str
    default: float
    solution: float

    @property
    def ratio(self) -> float:
        return self.solution / self.default


@dataclass
class OverheadReport:
    profile: str
    rows: list[OverheadRow]

    def row(self, metric: str, case: str = "") -> OverheadRow:
        for r in self.rows:
            if r.metric == metric and (not case or r.case == case):
                return r
        raise KeyError((metric, case))

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["metric", "case", "default", "solution", "ratio"])
        for r in self.rows:
            writer.writerow([r.metric, r.case, f"{r.default:g}", f"{r.solution:g}", f"{r.ratio:.4f}"])
        return out.getvalue()

    def to_table(self) -> str:
        lines = [f"countermeasure overheads ({self.profile}, kernel-only cycles)",
                 f"{'metric':<26} {'case':<10} {'default':>10} {'solution':>10}"]
        for r in self.rows:
            if r.metric == "weight storage":
                default, solution = "1x", f"{r.ratio:g}x"
            else:
                default, solution = f"{r.default:.1f}", f"{r.solution:g}"
            lines.append(f"{r.metric:<26} {r.case:<10} {default:>10} {solution:>10}")
        return "\n".join(lines) + "\n"


def overhead_report(profile: CostProfile, seed: int = 0, samples: int = 1000,
                    ensembles: int = 64, macs: int = 25) -> OverheadReport:
    """Default versus constant-time cost of the common inference operations.

    Operands follow the usual benchmark set-up: weights uniform on (-1, 1)
    and inputs uniform on (0, 1), both as float32.
    """
    P = profile
    rng = np.random.default_rng(seed)
    w = rng.uniform(-1, 1, samples).astype(np.float32)
    x = rng.uniform(0, 1, samples).astype(np.float32)
    mul = np.mean([arith.leaky_float_mul(_float(a), _float(b), P)[1] for a, b in zip(x, w)])
    hmul = np.mean([hd.ct_multiply(int(a * (1 << 23)), int(q), P)[1]
                    for a, q in zip(x, hd.normalize_weights(w).words)])
    rows = [OverheadRow("multiplication", "average", float(mul), float(hmul))]

    totals, htotals = [], []
    for _ in range(ensembles):
        w = rng.uniform(-1, 1, macs).astype(np.float32)
        x = rng.uniform(0, 1, macs).astype(np.float32)
        acc, total = arith.ZERO, 0
        for a, b in zip(x, w):
            acc, c = arith.float_mac(acc, _float(a), _float(b), P)
            total += c
        totals.append(total)
        nw = hd.normalize_weights(w)
        hacc, htotal = 0, 0
        for a, q in zip(x, nw.words):
            hacc, c = hd.ct_mac(hacc, int(a * (1 << 23)), int(q), P)
            htotal += c
        htotals.append(htotal)
    rows.append(OverheadRow(f"{macs} MAC ensemble", "total", float(np.mean(totals)), float(np.mean(htotals))))

    layer = hd.normalize_weights(rng.uniform(-1, 1, (8, 16)).astype(np.float32))
    rows.append(OverheadRow("weight storage", "bytes", 4.0 * layer.words.size, float(layer.storage_bytes)))

    for case, value in (("+ve", 1.0), ("0", 0.0), ("-ve", -1.0)):
        default = arith.leaky_float_relu(_float(value), P)[1]
        bits = _float(value).to_bits()
        rows.append(OverheadRow("ReLU (floating point)", case, default, hd.ct_relu_float(bits, P)[1]))
    for case, value in (("+ve", 1), ("0", 0), ("-ve", -1)):
        default = arith.fixed_relu(arith.FixedQ(value), P)[1]
        rows.append(OverheadRow("ReLU (16-bit fixed point)", case, default, hd.ct_relu(value, P, 16)[1]))
    return OverheadReport(P.name, rows)


# --------------------------------------------------------------------------
# attack resistance


@dataclass(frozen=True)
class ResistanceRow:
    attack: str
    metric: str
    observed: float
    baseline: float
    threshold: float
    note: str = ""

    @property
    def defeated(self) -> bool:
        return self.observed <= self.threshold


@dataclass
class ResistanceReport:
    profile: str
    rows: list[ResistanceRow]
    target: str = "hardened executor"

    @property
    def all_defeated(self) -> bool:
        return all(r.defeated for r in self.rows)

    def row(self, attack: str) -> ResistanceRow:
        for r in self.rows:
            if r.attack == attack:
                return r
        raise KeyError(attack)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["attack", "metric", "observed", "baseline", "threshold", "defeated", "note"])
        for r in self.rows:
            writer.writerow([r.attack, r.metric, f"{r.observed:.6f}", f"{r.baseline:.6f}",
                             f"{r.threshold:.6f}", "yes" if r.defeated else "no", r.note])
        return out.getvalue()

    def to_table(self) -> str:
        lines = [f"attacks against the {self.target} ({self.profile})"]
        for r in self.rows:
            state = "defeated" if r.defeated else "SUCCEEDS"
            lines.append(f"{r.attack:<22} {r.metric:<30} {r.observed:>9.4f} "
                         f"(chance {r.baseline:.4f}, limit {r.threshold:.4f})  {state}")
        return "\n".join(lines) + "\n"


def _hit_rate(truth: int, candidates) -> float:
    candidates = list(candidates)
    return 1.0 / len(candidates) if truth in candidates else 0.0


def _mantissa_row(oracle, model: NetworkModel, profile: CostProfile) -> ResistanceRow:
    layer = model.layers[0]
    truth = (np.asarray(layer.weights, dtype=np.float32).view(np.uint32) >> 16) & 0x7F
    table = build_mul_lut(profile)
    probe = LayerProbe(oracle, 0)
    hits = []
    for k in range(layer.n_in):
        units = np.zeros((len(PROBE_INPUTS), layer.n_in), dtype=np.int64)
        units[:, k] = PROBE_INPUTS
        observed = probe(units).mul[:, :, k]
        best, _, _ = match_columns(observed, table.cycles)
        for j in range(layer.n_out):
            if layer.weights[j, k] == 0:
                continue
            if best[j] < 0:
                hits.append(1 / 128)   # flat timing: every mantissa fits equally
            else:
                column = table.cycles[:, best[j]]
                tied = np.flatnonzero((table.cycles == column[:, None]).all(axis=0))
                hits.append(_hit_rate(int(truth[j, k]), tied.tolist()))
    return ResistanceRow("weight mantissa", "expected hit rate", float(np.mean(hits)), 1 / 128, 2 / 128)


def _crossover_row(oracle, model: NetworkModel, profile: CostProfile) -> ResistanceRow:
    layer = model.layers[0]
    probe = LayerProbe(oracle, 0)
    flips = 0
    for k in range(layer.n_in):
        classes = relu_classes(probe.sweep(layer.n_in, k), profile)
        flips += int((first_change(classes) >= 0).sum())
    return ResistanceRow("zero crossover", "sweeps with a class change", float(flips), 0.0, 0.0)


def _binary_row(oracle, model: NetworkModel) -> ResistanceRow:
    truth = model.layers[0].weights
    guess = recover_binary_weights(LayerProbe(oracle, 0), truth.shape[1])
    prior = max(np.mean(truth == 1), np.mean(truth == -1))
    return ResistanceRow("binary weights", "weight accuracy", float(np.mean(guess == truth)),
                         float(prior), float(prior), "blind baseline: guess the majority sign")


def attack_resistance_suite(hardened: hd.HardenedModel, profile: CostProfile, seed: int = 0,
                            trials: int = 32, jitter: JitterConfig | None = None) -> ResistanceReport:
    """Rerun every applicable attack against the hardened executor."""
    return attack_suite(hd.HardenedOracle(hardened, profile, jitter), hardened.source, profile, seed, trials)


def attack_suite(oracle, model: NetworkModel, profile: CostProfile, seed: int = 0,
                 trials: int = 32, target: str = "hardened executor") -> ResistanceReport:
    """The attack battery against any oracle that fronts ``model``.

    Pointing it at the default executor is the harness sanity check: there
    every attack should beat its baseline.
    """
    rng = np.random.default_rng(seed)
    rows = []
    if model.precision == "float32":
        rows.append(_mantissa_row(oracle, model, profile))
    rows.append(_crossover_row(oracle, model, profile))
    if model.precision == "binary":
        rows.append(_binary_row(oracle, model))

    x = rng.integers(0, 256, size=(trials, model.input_width))
    x[rng.random(x.shape) < 0.5] = 0
    traces = [oracle.query(row) for row in x]
    div_events = sum(len(t.of_kind("div_bit")) for t in traces)
    note = "no division events to decode"
    if div_events:
        try:
            recover_input_div255(traces[0])
            note = "division events present"
        except AttackError as exc:
            note = str(exc)
    rows.append(ResistanceRow("input via division", "division events per trace",
                              div_events / trials, 0.0, 0.0, note))

    if model.precision == "float32":
        mant = weight_mantissa_matrix(model.layers[0].weights)
        hits = []
        for row, trace in zip(x, traces):
            estimate = recover_input_float(trace, mant, profile)
            hits.extend(_hit_rate(int(v), c) for v, c in zip(row, estimate.candidates))
        rows.append(ResistanceRow("input via float ops", "expected hit rate", float(np.mean(hits)),
                                  1 / 256, 2 / 256))

    accuracy = []
    for row, trace in zip(x, traces):
        mask = recover_sparsity_mask(trace).zero_mask()
        accuracy.append(np.mean(mask == (row == 0)))
    prior = float(max(np.mean(x == 0), np.mean(x != 0)))
    rows.append(ResistanceRow("input sparsity", "zero-mask accuracy", float(np.mean(accuracy)), prior, prior,
                              "blind baseline: predict the majority class everywhere"))
    return ResistanceReport(profile.name, rows, target)
