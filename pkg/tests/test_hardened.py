import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnleak import hardened as hd
from nnleak.network import (ModelError, equivalent_argmax, random_inputs, random_model,
                            reference_forward)
from nnleak.oracle import TimingOracle
from nnleak.profiles import ATMEGA

P = ATMEGA
weight_matrices = st.integers(0, 2 ** 20).map(
    lambda s: np.random.default_rng(s).uniform(-1, 1, (3, 5)) * 2.0 ** np.random.default_rng(s).integers(-9, 9))


# -- weight normalization ---------------------------------------------------


def test_shared_exponent_example():
    nw = hd.normalize_weights([[1.75, -1.32 * 2 ** -1, 2 ** -2]])
    assert nw.e_max == 0
    assert nw.stored[0] == pytest.approx([1.75, -0.66, 0.25], abs=2 ** -22)


def test_single_weight_keeps_its_exponent():
    nw = hd.normalize_weights([[-1.375 * 2 ** -5]])
    assert nw.e_max == -5 and nw.stored[0, 0] == -1.375


@given(weight_matrices)
def test_dequantization_error_bound(w):
    nw = hd.normalize_weights(w)
    assert np.all(np.abs(nw.dequantize() - w) <= 2.0 ** (nw.e_max - 23))
    assert np.abs(w).max() < 2.0 ** (nw.e_max + 1)


@given(weight_matrices)
def test_pack_round_trip(w):
    nw = hd.normalize_weights(w)
    data = nw.pack()
    assert len(data) == nw.storage_bytes == 3 * w.size
    again = hd.NormalizedLayerWeights.unpack(data, w.shape, nw.e_max)
    assert np.array_equal(again.words, nw.words)


def test_storage_ratio_exact():
    hm = hd.harden(random_model((16, 8, 4), seed=0))
    default, hardened = hm.weight_storage()
    assert hardened / default == 0.75


# -- kernels ----------------------------------------------------------------


def test_ct_mac_single_class():
    rng = np.random.default_rng(0)
    ips = rng.integers(0, 1 << 23, 10_000)
    wts = rng.integers(-(1 << 23), 1 << 23, 10_000)
    assert {hd.ct_mac(0, int(a), int(b), P)[1] for a, b in zip(ips, wts)} == {P.ct_mul + P.ct_add}


@given(st.floats(0, 1, exclude_max=True), st.floats(-1, 1))
def test_ct_multiply_close_to_real_product(a, w):
    ip = int(a * 2 ** hd.ACT_FRAC)
    nw = hd.normalize_weights([[w]])
    word, _ = hd.ct_multiply(ip, int(nw.words[0, 0]), P)
    scale = 2.0 ** (nw.e_max - hd.WEIGHT_FRAC - hd.ACT_FRAC + hd.PRODUCT_SHIFT)
    assert abs(word * scale - a * w) <= 2.0 ** -16 * 2.0 ** nw.e_max


@pytest.mark.parametrize("pa, out", [(-123, 0), (123, 123), (0, 0)])
def test_ct_relu_mask(pa, out):
    for width in (8, 32):
        assert hd.ct_relu(pa, P, width) == (out, P.ct_relu_fixed)


def test_ct_relu_float_bits():
    import struct
    bits = lambda v: struct.unpack(">I", struct.pack(">f", v))[0]
    assert hd.ct_relu_float(bits(-2.5), P)[0] == 0
    assert hd.ct_relu_float(bits(2.5), P)[0] == bits(2.5)


def test_ct_bnn_and_select():
    assert hd.ct_bnn_mac(10, 3, 1, P) == (13, P.ct_bnn)
    assert hd.ct_bnn_mac(10, 3, -1, P) == (7, P.ct_bnn)
    assert hd.ct_select_max(5, 0, 9, 1, P) == (9, 1, P.ct_cmp)
    assert hd.ct_select_max(9, 1, 5, 2, P) == (9, 1, P.ct_cmp)


def test_reciprocal_division_exact():
    for ip in range(256):
        assert hd.ct_normalize_div255(ip, P)[0] == (ip << 15) // 255


# -- normalization elimination ----------------------------------------------


def test_eliminate_normalization():
    model = random_model((16, 8, 4), "float32", 1, normalization="div255")
    folded = hd.eliminate_normalization(model)
    assert folded.normalization == "none"
    x = random_inputs(16, 1000, 1)
    original, now = hd.ideal_forward(model, x), hd.ideal_forward(folded, x)
    assert np.mean(original.argmax(1) == now.argmax(1)) == 1.0
    assert np.all(np.abs(original - now) <= 2.0 ** -12 * np.maximum(np.abs(original), 1.0))
    assert equivalent_argmax(model, folded, 1000, 1) == 1.0
    assert not TimingOracle(folded, P).query(x[0]).of_kind("div_bit")


def test_integer_models_keep_normalization_semantics():
    with pytest.raises(ModelError):
        hd.eliminate_normalization(random_model((4, 3), "fixed", 0, normalization="div255"))


# -- executor ---------------------------------------------------------------


@pytest.mark.parametrize("precision", ["fixed", "binary"])
@pytest.mark.parametrize("norm", ["none", "div255"])
def test_integer_hardening_is_exact(precision, norm):
    model = random_model((16, 8, 4), precision, 2, normalization=norm)
    x = random_inputs(16, 300, 2)
    assert np.array_equal(hd.hardened_forward(hd.harden(model), x), reference_forward(model, x))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["float32", "fixed", "binary"]), st.sampled_from(["none", "div255"]),
       st.integers(0, 1000))
def test_batched_hardened_matches_scalar(precision, norm, seed):
    hm = hd.harden(random_model((5, 4, 3), precision, seed, normalization=norm))
    x = random_inputs(5, 3, seed)
    words, timings = hd.execute_hardened(hm, x, P)
    for row in range(3):
        scalar_words, cycles = hd.scalar_hardened_inference(hm, x[row], P)
        assert list(words[row]) == scalar_words
        assert len(set(cycles)) <= 4   # a handful of fixed per-kernel costs


@pytest.mark.parametrize("seed", range(5))
def test_float_agreement_with_ideal(seed):
    hm = hd.harden(random_model((16, 8, 4), "float32", seed))
    assert hd.argmax_agreement(hm, 1000, seed, against="ideal") >= 0.999


def test_float_outputs_close_to_ideal():
    model = random_model((16, 8, 4), "float32", 0)
    x = random_inputs(16, 200, 0)
    ideal = hd.ideal_forward(model, x)
    assert np.abs(hd.hardened_forward(hd.harden(model), x) - ideal).max() <= 1e-2


@pytest.mark.parametrize("precision", ["float32", "fixed", "binary"])
def test_input_timing_collapses(precision):
    hm = hd.harden(random_model((4, 3, 2), precision, 0, normalization="div255", zero_skipping=True))
    totals = set()
    for ip in range(256):
        totals.add(hd.hardened_trace(hm, np.full(4, ip), P).total_cycles)
    assert len(totals) == 1


def test_hardening_disables_zero_skipping():
    hm = hd.harden(random_model((4, 3, 2), "float32", 0, zero_skipping=True))
    assert not hm.source.zero_skipping
    trace = hd.hardened_trace(hm, np.zeros(4, dtype=int), P)
    assert not trace.of_kind("skip")


def test_activation_words_domain():
    hm = hd.harden(random_model((4, 3, 2), "float32", 0))
    layer = hm.float_layers[1]
    with pytest.raises(ModelError):
        hd.activation_words(layer, [[2.0 ** layer.in_exp, 0, 0]])
