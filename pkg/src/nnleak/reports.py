"""Summary tables and plot data.

Everything here is plain CSV (or fixed-width text for the tables) so that
any plotting tool can render it. Column schemas:

``mul_lut.csv``
    input_frac7, weight_frac7, cycles. The float multiply cost for every pair
    of 7-bit mantissa fractions.
``relu_float.csv`` and ``relu_fixed.csv``
    ip, pre_activation, relu_cycles, class. One input of a walkthrough
    neuron is swept over 0..255 with the others at zero.
``int2float.csv``
    ip, exponent, cycles. Exponent is empty for ip = 0.
``div255_steps.csv``
    ip, step, quotient_bit, cycles. One row per restoring-division step.
``float_neuron.csv`` and ``fixed_neuron.csv``
    Per-parameter truth and recovery for the walkthrough neurons. See
    :func:`float_neuron_report` and :func:`fixed_neuron_report`.
``overheads.csv``
    See :func:`nnleak.leakage.overhead_report`.
"""

from __future__ import annotations

import csv
import io
import math
import os
from pathlib import Path

import numpy as np

from . import arith
from .attacks.common import CrossoverSearch, LayerProbe
from .attacks.fixedmodel import recover_fixed_neuron
from .attacks.floatmodel import recover_float_layer
from .leakage import overhead_report
from .network import NetworkModel, example_fixed_neuron, example_float_neuron
from .oracle import JitterConfig, TimingOracle, execute
from .profiles import CostProfile


def _csv(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def _num(value: float, digits: int = 6) -> str:
    return f"{value:.{digits}f}".rstrip("0").rstrip(".")


# --------------------------------------------------------------------------
# figure data


def mul_lut_csv(profile: CostProfile) -> str:
    table = arith.mul_cycle_table(profile)
    return _csv(["input_frac7", "weight_frac7", "cycles"],
                ([i, w, table[i][w]] for i in range(128) for w in range(128)))


def _relu_sweep(model: NetworkModel, index: int, profile: CostProfile) -> str:
    x = np.zeros((256, model.input_width), dtype=np.int64)
    x[:, index] = np.arange(256)
    _, timings = execute(model, x, profile)
    layer = model.layers[0]
    if model.precision == "float32":
        pa = x.astype(np.float64) @ layer.weights[0].astype(np.float64) + float(layer.bias[0])
        labels = np.where(pa > 0, "positive", np.where(pa < 0, "negative", "zero"))
    else:
        pa = x @ layer.weights[0] + int(layer.bias[0])
        labels = np.where(pa >= 0, "non-negative", "negative")
    act = timings[0].act[:, 0]
    return _csv(["ip", "pre_activation", "relu_cycles", "class"],
                ([ip, _num(pa[ip]), int(act[ip]), labels[ip]] for ip in range(256)))


def relu_float_csv(profile: CostProfile, index: int = 0) -> str:
    """ReLU timing while sweeping one input of the float walkthrough neuron."""
    return _relu_sweep(example_float_neuron(), index, profile)


def relu_fixed_csv(profile: CostProfile, index: int = 1) -> str:
    """ReLU timing while sweeping one input of the fixed-point walkthrough neuron."""
    return _relu_sweep(example_fixed_neuron(), index, profile)


def int2float_csv(profile: CostProfile) -> str:
    rows = []
    for ip in range(256):
        _, cycles = arith.leaky_int2float(ip, profile)
        rows.append([ip, "" if ip == 0 else ip.bit_length() - 1, cycles])
    return _csv(["ip", "exponent", "cycles"], rows)


def div255_steps_csv(profile: CostProfile) -> str:
    rows = []
    for ip in range(256):
        _, bits = arith.div255_steps(ip)
        for step, (bit, cycles) in enumerate(zip(bits, arith.div_bit_durations(bits, profile))):
            rows.append([ip, step, bit, cycles])
    return _csv(["ip", "step", "quotient_bit", "cycles"], rows)


# --------------------------------------------------------------------------
# walkthrough tables


def _parts(x: float) -> tuple[float, int, int]:
    m, e = math.frexp(abs(x))
    return 2 * m, e - 1, (1 if x > 0 else -1 if x < 0 else 0)


def float_neuron_report(profile: CostProfile, jitter: JitterConfig | None = None) -> tuple[str, str]:
    """Recovery of the float walkthrough neuron: (csv, text table).

    Exponents, the bias included, are relative to the reference weight (the
    first one with a first-round crossover).
    """
    model = example_float_neuron()
    oracle = TimingOracle(model, profile, jitter)
    n_in = model.input_width
    neuron = recover_float_layer(LayerProbe(oracle, 0), n_in, 1, profile)[0]
    truth = model.layers[0].weights[0].astype(np.float64)
    bias = float(model.layers[0].bias[0])
    rows, lines = [], [f"float neuron recovery ({profile.name}, {oracle.query_count} queries)",
                       f"{'param':<6} {'true':>22} {'recovered':>22} {'round':>5} {'ip':>4}"]
    if neuron is None:
        raise RuntimeError("the walkthrough neuron showed no crossover")
    e_ref = _parts(truth[neuron.ref])[1]
    for k in range(n_in):
        m, e, s = _parts(truth[k])
        rm = neuron.mantissas[k]
        re = neuron.rel_exponents[k]
        rnd, ip = neuron.readings.round_of(k)
        rec_m = "" if rm is None else f"{rm.value:.4f}"
        rec_e = "" if re is None else str(re)
        rows.append([f"w{k}", f"{m:.4f}", e - e_ref, s, rec_m, rec_e, neuron.signs[k],
                     "" if rnd is None else rnd, "" if ip is None else ip])
        true_text = f"{'+' if s > 0 else '-'}{m:.4f}x2^{e - e_ref}"
        rec_text = "?" if rm is None or re is None else f"{'+' if neuron.signs[k] > 0 else '-'}{rec_m}x2^{re}"
        lines.append(f"w{k:<5} {true_text:>22} {rec_text:>22} {rnd or '':>5} {'' if ip is None else ip:>4}")
    bm, be, bs = _parts(bias * 2.0 ** -e_ref)
    rbm, rbe, rbs = _parts(neuron.bias)
    rows.append(["bias", f"{bm:.4f}", be, bs, f"{rbm:.4f}", rbe, rbs, "", ""])
    lines.append(f"{'bias':<6} {('-' if bs < 0 else '+') + f'{bm:.4f}x2^{be}':>22} "
                 f"{('-' if rbs < 0 else '+') + f'{rbm:.4f}x2^{rbe}':>22}")
    lines.append(f"all exponents are relative to w{neuron.ref}'s exponent ({e_ref}), "
                 "which timing alone does not reveal")
    header = ["param", "true_mantissa", "true_rel_exponent", "true_sign", "mantissa", "rel_exponent",
              "sign", "round", "reading"]
    return _csv(header, rows), "\n".join(lines) + "\n"


def fixed_neuron_report(profile: CostProfile, jitter: JitterConfig | None = None) -> tuple[str, str]:
    """Recovery of the fixed-point walkthrough neuron: (csv, text table)."""
    model = example_fixed_neuron()
    oracle = TimingOracle(model, profile, jitter)
    n_in = model.input_width
    search = CrossoverSearch(LayerProbe(oracle, 0), n_in, profile)
    neuron = recover_fixed_neuron(search, 0, np.arange(256), 0)
    readings = neuron.canonical_readings()
    truth = model.layers[0].weights[0]
    rows = []
    lines = [f"fixed-point neuron recovery ({profile.name}, {oracle.query_count} queries)",
             f"{'param':<6} {'true':>5} {'recovered':>9} {'round':>5} {'reading':>7}"]
    for k in range(n_in):
        rnd = 1 if k in neuron.round1 else 2 if k in neuron.round2 else ""
        reading = "" if readings[k] is None else readings[k]
        rows.append([f"w{k}", int(truth[k]), neuron.weights[k], rnd, reading])
        lines.append(f"w{k:<5} {int(truth[k]):>5} {neuron.weights[k]:>9} {rnd:>5} {reading if reading != '' else '-':>7}")
    true_bias = int(model.layers[0].bias[0])
    rows.append(["bias", true_bias, neuron.bias, 1, abs(neuron.bias)])
    lines.append(f"{'bias':<6} {true_bias:>5} {neuron.bias:>9} {1:>5} {abs(neuron.bias):>7}")
    if neuron.ref is not None:
        lines.append(f"second round holds w{neuron.ref} at ip = {neuron.ip_ref}")
    return _csv(["param", "true", "recovered", "round", "reading"], rows), "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# bundle


FIGURES = {
    "mul_lut.csv": mul_lut_csv,
    "relu_float.csv": relu_float_csv,
    "relu_fixed.csv": relu_fixed_csv,
    "int2float.csv": int2float_csv,
    "div255_steps.csv": div255_steps_csv,
}


def report_files(profile: CostProfile, seed: int = 0, jitter: JitterConfig | None = None) -> dict[str, str]:
    """Every report file name mapped to its content."""
    files = {name: fn(profile) for name, fn in FIGURES.items()}
    files["float_neuron.csv"], files["float_neuron.txt"] = float_neuron_report(profile, jitter)
    files["fixed_neuron.csv"], files["fixed_neuron.txt"] = fixed_neuron_report(profile, jitter)
    overheads = overhead_report(profile, seed)
    files["overheads.csv"], files["overheads.txt"] = overheads.to_csv(), overheads.to_table()
    return files


def write_files(out_dir: str | os.PathLike, files: dict[str, str]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in sorted(files.items()):
        path = out / name
        path.write_text(content)
        written.append(path)
    return written
