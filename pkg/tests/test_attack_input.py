import numpy as np
import pytest

from nnleak import arith
from nnleak.attacks.inputs import (InputEstimate, decode_exponent, recover_input_div255,
                                   recover_input_float, recover_sparsity_mask,
                                   weight_mantissa_matrix)
from nnleak.network import random_model
from nnleak.oracle import INPUT_STAGE, OpEvent, TimingOracle, TimingTrace
from nnleak.profiles import ATMEGA, CORTEX_M0, RISCV

P = ATMEGA


def _float_setup(n_hidden=16, seed=3, profile=P):
    model = random_model((16, n_hidden, 4), "float32", seed)
    mantissas = weight_mantissa_matrix(model.layers[0].weights)
    return model, mantissas, TimingOracle(model, profile)


def test_weight_mantissa_matrix():
    m = weight_mantissa_matrix(np.array([[1.5, 0.0, -1.0078125 * 4]], dtype=np.float32))
    assert m.tolist() == [[64, -1, 1]]


def test_exponent_of_200():
    # 200 = 1.5625 * 2**7: no normalization steps, fraction 72/128
    _, cycles = arith.leaky_int2float(200, P)
    assert decode_exponent(cycles, P) == 7
    assert arith.FloatRepr.from_float(200.0).mantissa7.frac7 == 72
    assert decode_exponent(arith.int2float_cycles(0, P), P) is None


def test_float_path_all_inputs_exact():
    model, mantissas, oracle = _float_setup()
    assert len(set(mantissas[:, 0].tolist())) >= 16
    for q in range(16):
        x = np.arange(16) + 16 * q
        est = recover_input_float(oracle.query(x), mantissas, P)
        assert est.values == x.tolist()


@pytest.mark.parametrize("profile", [CORTEX_M0, RISCV], ids=lambda p: p.name)
def test_exponent_channel_flat_off_atmega(profile):
    assert len({arith.int2float_cycles(ip, profile) for ip in range(1, 256)}) == 1
    assert isinstance(decode_exponent(100, profile), tuple)
    _, mantissas, oracle = _float_setup(profile=profile)
    x = np.arange(16) * 16 + 3
    est = recover_input_float(oracle.query(x), mantissas, profile)
    assert est.notes and not est.exact
    assert all(v in c for v, c in zip(x.tolist(), est.candidates))


def test_div255_path_all_inputs_exact():
    model = random_model((16, 8, 4), "fixed", 3, normalization="div255")
    oracle = TimingOracle(model, P)
    for q in range(16):
        x = np.arange(16) + 16 * q
        assert recover_input_div255(oracle.query(x)).values == x.tolist()


def _div_trace(bits_per_input):
    events, i = [], 0
    for pos, bits in enumerate(bits_per_input):
        for bit in bits:
            d = P.div_long if bit else P.div_short
            events.append(OpEvent(i, "div_bit", INPUT_STAGE, pos, float(d), (float(d),)))
            i += 1
    return TimingTrace(tuple(events))


def test_div255_decode_from_bits():
    third = [0, 0] + [1, 0] * 7          # raw 10922 = 85/255
    trace = _div_trace([[1] + [0] * 15, third, arith.div255_steps(17)[1], [0] * 16])
    assert recover_input_div255(trace).values == [255, 85, 17, 0]


def test_div255_all_zero_bits_is_flat():
    # A single duration class: nothing separates ones from zeros.
    est = recover_input_div255(_div_trace([[0] * 16]))
    assert est.notes and len(est.candidates[0]) == 256


def test_div255_flat_on_riscv():
    model = random_model((16, 8, 4), "fixed", 3, normalization="div255")
    est = recover_input_div255(TimingOracle(model, RISCV).query(np.arange(16) * 16))
    assert est.notes and not est.exact


def test_sparsity_mask():
    model = random_model((64, 8, 4), "float32", 3, zero_skipping=True)
    oracle = TimingOracle(model, P)
    rng = np.random.default_rng(0)
    x = rng.integers(1, 256, 64) * (rng.random(64) > 0.8)
    assert (x == 0).mean() > 0.7
    assert np.array_equal(recover_sparsity_mask(oracle.query(x)).zero_mask(), x == 0)
    assert not recover_sparsity_mask(oracle.query(np.full(64, 7))).zero_mask().any()
    assert recover_sparsity_mask(oracle.query(np.zeros(64, dtype=int))).zero_mask().all()


def test_estimate_output_formats():
    est = InputEstimate([(3,), (0,), tuple(range(1, 256)), (4, 6)], "test")
    assert est.to_csv().splitlines()[1:] == ["0,3,test", "1,0,test", "2,nonzero,test", "3,4|6,test"]
    assert est.to_pgm(2) == "P2\n2 2\n255\n3 0\n128 5\n"
    with pytest.raises(ValueError):
        est.to_pgm(3)


def test_distinct_mantissas_needed():
    """Exact recovery rate against the number of distinct first-layer mantissas.

    The rate is printed as it is an empirical quantity; with 16 distinct
    values every input must come back.
    """
    rates = {}
    for n_hidden in (1, 2, 4, 8, 16):
        model, mantissas, oracle = _float_setup(n_hidden)
        hits = 0
        for q in range(16):
            x = np.arange(16) + 16 * q
            est = recover_input_float(oracle.query(x), mantissas, P)
            hits += sum(v == t for v, t in zip(est.values, x.tolist()))
        k = len(set(mantissas[:, 0].tolist()))
        rates[k] = hits / 256
    print("distinct mantissas -> exact rate:", rates)
    assert rates[max(rates)] == 1.0
    assert min(rates.values()) < 1.0
