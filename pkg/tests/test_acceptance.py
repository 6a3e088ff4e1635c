"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` and the lines appear in the
terminal output even without ``-s``. Each check also asserts, so a failing
criterion fails its test.
"""

import time

import numpy as np
import pytest

from nnleak import arith
from nnleak import hardened as hd
from nnleak.arith import FloatRepr
from nnleak.attacks import compare_models
from nnleak.attacks.binarymodel import recover_binary_model
from nnleak.attacks.common import CrossoverSearch, LayerProbe
from nnleak.attacks.fixedmodel import build_crossover_lut, recover_fixed_model, recover_fixed_neuron
from nnleak.attacks.floatmodel import recover_float_layer, recover_float_model, solve_exponents
from nnleak.attacks.inputs import (decode_exponent, recover_input_div255, recover_input_float,
                                   recover_sparsity_mask, weight_mantissa_matrix)
from nnleak.leakage import KERNELS, attack_resistance_suite, verify_all
from nnleak.network import (Layer, NetworkModel, div255_raw, example_binary_neuron, example_fixed_neuron,
                            example_float_neuron, random_model)
from nnleak.oracle import TimingOracle
from nnleak.profiles import ATMEGA, CORTEX_M0, RISCV

from conftest import same_model

P = ATMEGA


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion straight to the terminal, then assert it."""
    def report(label, ok, detail, elapsed=None, limit=None):
        timed = ok and (limit is None or elapsed < limit)
        extra = "" if elapsed is None else f" [{elapsed:.2f} s" + ("" if limit is None else f" / {limit} s") + "]"
        with capsys.disabled():
            print(f"\n{'PASS' if timed else 'FAIL'}  {label}: {detail}{extra}")
        assert timed, f"{label}: {detail}{extra}"
    return report


def test_c1_float_walkthrough(verdict):
    t = time.perf_counter()
    oracle = TimingOracle(example_float_neuron(), P)
    (n,) = recover_float_layer(LayerProbe(oracle, 0), 5, 1, P)
    elapsed = time.perf_counter() - t
    mantissas = [round(m.value, 4) for m in n.mantissas]
    ok = (mantissas == [1.0391, 1.6641, 1.0859, 1.1797, 1.1250]
          and n.rel_exponents == [0, -1, -4, 0, -5]
          and n.signs == [1, -1, -1, 1, 1]
          and abs(n.bias / (-1.5911 * 2 ** 7) - 1) <= 1e-3)
    verdict("1 float walkthrough neuron", ok,
            f"mantissas {mantissas} exps {n.rel_exponents} signs {n.signs} bias {n.bias / 2 ** 7:.4f}x2^7",
            elapsed, 5)


def test_c2_fixed_walkthrough(verdict):
    t = time.perf_counter()
    oracle = TimingOracle(example_fixed_neuron(), P)
    n = recover_fixed_neuron(CrossoverSearch(LayerProbe(oracle, 0), 9, P), 0, np.arange(256), 0)
    elapsed = time.perf_counter() - t
    ok = (n.weights == [-1, -3, 4, -7, -8, 2, -6, 5, 0] and n.bias == 108
          and n.canonical_readings() == [108, 36, 23, 16, 14, 46, 18, 19, None])
    verdict("2 fixed walkthrough neuron", ok,
            f"w {n.weights} b {n.bias} readings {n.canonical_readings()}", elapsed, 5)


def test_c3_binary_walkthrough(verdict):
    result = recover_binary_model(TimingOracle(example_binary_neuron(), P))
    layer = result.model.layers[0]
    ok = layer.weights.tolist() == [[1, -1]] and layer.bias.tolist() == [-33]
    verdict("3 binary walkthrough neuron", ok, f"w {layer.weights.tolist()[0]} b {int(layer.bias[0])}")


@pytest.mark.parametrize("precision", ["float32", "fixed", "binary"])
def test_c4_scaled_networks(verdict, precision):
    model = random_model((16, 8, 4), precision, 0)
    attack = {"float32": recover_float_model, "fixed": recover_fixed_model, "binary": recover_binary_model}
    t = time.perf_counter()
    result = attack[precision](TimingOracle(model, P))
    elapsed = time.perf_counter() - t
    cmp = compare_models(model, result.model, trials=1000, seed=1)
    if precision == "float32":
        ok = max(cmp.max_rel_error) < 0.01 and cmp.argmax_agreement == 1.0
        detail = f"max rel error {max(cmp.max_rel_error):.4%}, agreement {cmp.argmax_agreement}"
    else:
        ok = same_model(model, result.model)
        detail = f"exact {ok}, agreement {cmp.argmax_agreement}"
    verdict(f"4 random 16-8-4 {precision}", ok, f"{detail}, {result.queries} queries", elapsed, 60)


def test_c5_input_recovery(verdict):
    t = time.perf_counter()
    fmodel = random_model((16, 32, 4), "float32", 3)
    mantissas = weight_mantissa_matrix(fmodel.layers[0].weights)
    distinct = min(len(set(mantissas[:, k].tolist())) for k in range(16))
    foracle = TimingOracle(fmodel, P)
    doracle = TimingOracle(random_model((16, 8, 4), "fixed", 3, normalization="div255"), P)
    float_ok = div_ok = 0
    for q in range(16):
        x = np.arange(16) + 16 * q
        float_ok += sum(a == b for a, b in zip(recover_input_float(foracle.query(x), mantissas, P).values, x))
        div_ok += sum(a == b for a, b in zip(recover_input_div255(doracle.query(x)).values, x))
    soracle = TimingOracle(random_model((64, 8, 4), "float32", 3, zero_skipping=True), P)
    rng = np.random.default_rng(0)
    masks_ok = 0
    for _ in range(20):
        x = rng.integers(1, 256, 64) * (rng.random(64) > rng.random())
        masks_ok += np.array_equal(recover_sparsity_mask(soracle.query(x)).zero_mask(), x == 0)
    elapsed = time.perf_counter() - t
    ok = distinct >= 16 and float_ok == 256 and div_ok == 256 and masks_ok == 20
    verdict("5 input recovery", ok,
            f"float {float_ok}/256 ({distinct} mantissas), div255 {div_ok}/256, sparsity masks {masks_ok}/20",
            elapsed, 30)


def test_c6_platform_gating(verdict):
    details, ok = [], True
    for profile in (CORTEX_M0, RISCV):
        flat_exp = isinstance(decode_exponent(0, profile), tuple)
        model = random_model((16, 16, 4), "float32", 3)
        est = recover_input_float(TimingOracle(model, profile).query(np.arange(16) * 16 + 3),
                                  weight_mantissa_matrix(model.layers[0].weights), profile)
        ok &= flat_exp and not est.exact
        details.append(f"{profile.name}: exponent flat {flat_exp}, candidate sets {not est.exact}")
    div_model = random_model((16, 8, 4), "fixed", 3, normalization="div255")
    est = recover_input_div255(TimingOracle(div_model, RISCV).query(np.arange(16) * 16))
    div_flat = len(set(arith.div_bit_durations([0, 1], RISCV))) == 1
    ok &= div_flat and not est.exact
    details.append(f"riscv-like division flat {div_flat}")
    verdict("6 platform gating", ok, "; ".join(details))


def test_c7_countermeasures(verdict):
    report = verify_all(P)
    hard = {k: len(report.row(k, "hardened").classes) for k in KERNELS}
    soft = {k: len(report.row(k, "default").classes) for k in KERNELS}
    defeated, mantissa_rates = [], []
    for precision in ("float32", "fixed", "binary"):
        for norm in ("none", "div255"):
            model = random_model((16, 8, 4), precision, 0, normalization=norm, zero_skipping=True)
            suite = attack_resistance_suite(hd.harden(model), P)
            defeated.append(suite.all_defeated and suite.row("zero crossover").observed == 0
                            and suite.row("input via division").observed == 0)
            if precision == "float32":
                mantissa_rates.append(suite.row("weight mantissa").observed)
    default, hardened = hd.harden(random_model((16, 8, 4), seed=0)).weight_storage()
    ok = (all(v == 1 for v in hard.values()) and all(v >= 2 for v in soft.values()) and all(defeated)
          and max(mantissa_rates) <= 2 / 128 and hardened / default == 0.75)
    verdict("7 countermeasures", ok,
            f"hardened classes {set(hard.values())}, default min classes {min(soft.values())}, "
            f"suites defeated {sum(defeated)}/{len(defeated)}, mantissa hit rate {max(mantissa_rates):.4f}, "
            f"storage ratio {hardened / default}")


def test_c8_lut_uniqueness(verdict):
    t = time.perf_counter()
    table = np.asarray(arith.mul_cycle_table(P))
    rows = len({tuple(r) for r in table.tolist()})
    cols = len({tuple(c) for c in table.T.tolist()})
    verdict("8a mantissa table rows and columns distinct", rows == cols == 128,
            f"{rows} rows, {cols} columns", time.perf_counter() - t, 60)


def test_c8_crossover_lut(verdict):
    t = time.perf_counter()
    lut = build_crossover_lut()
    bad = sum(lut[b][w] != -(-b // w) for b in range(1, 129) for w in range(1, 9))
    verdict("8b crossover table is ceil(b/w)", bad == 0, f"{bad} mismatches on 128x8",
            time.perf_counter() - t, 60)


def test_c8_div255_injective(verdict):
    t = time.perf_counter()
    distinct = len(set(div255_raw(np.arange(256)).tolist()))
    verdict("8c div255 injective", distinct == 256, f"{distinct} distinct quotients",
            time.perf_counter() - t, 60)


def test_c8_round1_crossover(verdict):
    t = time.perf_counter()
    grid = [(b, w) for b in range(-128, 128) for w in range(-8, 8) if w]
    oracle = TimingOracle(NetworkModel("fixed", (Layer(np.array([[w] for _, w in grid]),
                                                       np.array([b for b, _ in grid]), "relu"),)), P)
    search = CrossoverSearch(LayerProbe(oracle, 0), 1, P)
    bad = 0
    for j, (b, w) in enumerate(grid):
        got = search.reading(j, 0)
        if b < 0 < w:
            bad += got != -(b // w)                  # ceil(-b / w)
        elif w < 0 <= b:
            bad += got != b // -w + 1                # first negative; the zero crossing counts as >= 0
        else:
            bad += got is not None
    verdict("8d round-1 crossover exhaustive", bad == 0, f"{bad} mismatches over {len(grid)} neurons",
            time.perf_counter() - t, 60)


@pytest.fixture(scope="module")
def float_neurons():
    """1000 seeded random neurons, each with a reachable first-round crossover.

    A neuron qualifies when some weight of sign opposite to the bias can
    cancel it within the 0..255 input range. Without one the ReLU never
    changes class and timing says nothing about the neuron.
    """
    rng = np.random.default_rng(0)
    w, b = [], []
    while len(b) < 1000:
        wj = rng.uniform(-1, 1, 5).astype(np.float32)
        bj = np.float32(rng.uniform(-64, 64))
        if np.any((np.sign(wj) == -np.sign(bj)) & (255 * np.abs(wj) > abs(bj))):
            w.append(wj)
            b.append(bj)
    w, b = np.array(w), np.array(b)
    t = time.perf_counter()
    oracle = TimingOracle(NetworkModel("float32", (Layer(w, b, "relu"),)), P)
    neurons = recover_float_layer(LayerProbe(oracle, 0), w.shape[1], len(b), P)
    return w, neurons, time.perf_counter() - t


def _truth(w_row, ref):
    e = [FloatRepr.from_float(float(v)).exponent for v in w_row]
    return [x - e[ref] for x in e], np.sign(w_row).astype(int).tolist()


def test_c8_exponents_final_solver(verdict, float_neurons):
    w, neurons, elapsed = float_neurons
    ok = sum(n is not None and [n.rel_exponents, n.signs] == list(_truth(w[j], n.ref))
             for j, n in enumerate(neurons))
    verdict("8e exponents and signs, full solver", ok == len(w), f"{ok}/{len(w)} neurons exact",
            elapsed, 60)


def test_c8_exponents_closed_form(verdict, float_neurons):
    """Exponents from the rounded log-ratio formulas alone, without the final search."""
    w, neurons, elapsed = float_neurons
    t = time.perf_counter()
    ok = 0
    for j, n in enumerate(neurons):
        if n is not None:
            closed = solve_exponents(n.readings, n.mantissas)
            ok += [closed.rel_exponents, closed.signs] == list(_truth(w[j], n.ref))
    verdict("8f exponents and signs, closed form only", ok == len(w), f"{ok}/{len(w)} neurons exact",
            elapsed + time.perf_counter() - t, 60)
