import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnleak.attacks.common import CrossoverSearch, LayerProbe
from nnleak.attacks.fixedmodel import (bias_magnitudes, build_crossover_lut, recover_fixed_layer,
                                       recover_fixed_model, recover_fixed_neuron,
                                       recover_weights_fixed_round1, recover_weights_fixed_round2)
from nnleak.network import Layer, NetworkModel, example_fixed_neuron, random_model, single_neuron
from nnleak.oracle import TimingOracle
from nnleak.profiles import ATMEGA

from conftest import same_model

P = ATMEGA
NONZERO_W = [w for w in range(-8, 8) if w]


def test_lut_entries():
    lut = build_crossover_lut()
    assert lut[108][3] == 36
    assert lut[92][5] == 19
    assert lut[1][1] == 1


def test_lut_full_grid():
    lut = build_crossover_lut()
    for b in range(1, 129):
        for w in range(1, 9):
            assert lut[b][w] == -(-b // w)


def test_bias_from_walkthrough_readings():
    assert bias_magnitudes([108, 36, 18, 16, 14]) == [108]


def test_single_reading_keeps_ambiguity():
    # 36 = ceil(b / w) for w = 1 (b = 36), w = 2 (71, 72) and w = 3 (106..108)
    assert bias_magnitudes([36]) == [36, 71, 72, 106, 107, 108]
    assert bias_magnitudes([]) == list(range(1, 129))


def test_round1_weights_walkthrough():
    # Sweeps report the first negative ip; ip = ceil(108/|w|) still gives pa >= 0
    # when |w| divides 108, so raw readings are floor(108/|w|) + 1.
    assert recover_weights_fixed_round1({4: 14, 3: 16}, 108) == {4: [-8], 3: [-7]}


def test_round1_column_120():
    # ceil(120 / m) = 15 only for m = 8; the raw first-negative ip is 16.
    assert [m for m in range(1, 9) if -(-120 // m) == 15] == [8]
    assert recover_weights_fixed_round1({0: 16}, 120) == {0: [-8]}


def test_round2_weights_walkthrough():
    # ref w0 = -1 held at 200: b' = 108 - 200 = -92
    assert recover_weights_fixed_round2({5: 46, 2: 23}, 108, -1, 200) == {5: [2], 2: [4]}


def test_walkthrough_neuron():
    oracle = TimingOracle(example_fixed_neuron(), P)
    search = CrossoverSearch(LayerProbe(oracle, 0), 9, P)
    neuron = recover_fixed_neuron(search, 0, np.arange(256), 0)
    assert neuron.weights == [-1, -3, 4, -7, -8, 2, -6, 5, 0]
    assert neuron.bias == 108
    assert neuron.canonical_readings() == [108, 36, 23, 16, 14, 46, 18, 19, None]
    assert not neuron.ambiguous
    assert 8 not in neuron.round1 and 8 not in neuron.round2   # the zero weight never flips


def test_walkthrough_with_w0_reference():
    oracle = TimingOracle(example_fixed_neuron(), P)
    search = CrossoverSearch(LayerProbe(oracle, 0), 9, P)
    neuron = recover_fixed_neuron(search, 0, np.arange(256), 0, ref=0, ip_ref=200)
    assert neuron.weights == [-1, -3, 4, -7, -8, 2, -6, 5, 0]
    assert neuron.canonical_readings() == [108, 36, 23, 16, 14, 46, 18, 19, None]


def test_round1_crossover_exhaustive():
    """First class change of a one-input sweep, over every (b, w) pair."""
    grid = [(b, w) for b in range(-128, 128) for w in NONZERO_W]
    B = np.array([b for b, _ in grid])
    W = np.array([[w] for _, w in grid])
    oracle = TimingOracle(NetworkModel("fixed", (Layer(W, B, "relu"),)), P)
    search = CrossoverSearch(LayerProbe(oracle, 0), 1, P)
    for j, (b, w) in enumerate(grid):
        got = search.reading(j, 0)
        if b < 0 < w:
            assert got == -(-(-b) // w)              # ceil(-b / w): first pa >= 0
        elif w < 0 <= b:
            assert got == b // -w + 1                # first pa < 0
        else:
            assert got is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(NONZERO_W), min_size=3, max_size=3), st.integers(-128, 127))
def test_recovered_candidates_contain_truth(weights, bias):
    oracle = TimingOracle(single_neuron(weights, bias, "fixed"), P)
    (neuron,) = recover_fixed_layer(LayerProbe(oracle, 0), 3, 1)
    for k, w in enumerate(weights):
        assert w in neuron.candidates[k]
    assert bias in neuron.bias_candidates


def test_collision_pairs_separable_with_known_partner():
    """Two candidate weights with the same reading, and a second input of known weight.

    For every such pair some two-input probe tells them apart.
    """
    ip = np.arange(256)
    for b in range(1, 129):
        col = {}
        for m in range(1, 9):
            col.setdefault(-(-b // m), []).append(-m)
        for cands in col.values():
            for wa, wb in itertools.combinations(cands, 2):
                separable = False
                for wm in NONZERO_W:
                    pa = b + wm * ip[:, None]
                    if np.any((pa + wa * ip[None, :] >= 0) != (pa + wb * ip[None, :] >= 0)):
                        separable = True
                        break
                assert separable, (b, wa, wb)


def test_scaled_copies_are_indistinguishable():
    """Distinct integer neurons can still agree on every probe.

    A neuron and its exact double have the same ReLU class on every input, so
    no timing query separates them; recovery keeps both as candidates.
    """
    grid = np.array(list(itertools.product(range(256), repeat=2)))
    pa_a = grid @ np.array([-1, 2]) + 3
    pa_b = grid @ np.array([-2, 4]) + 6
    assert np.array_equal(pa_a >= 0, pa_b >= 0)
    for weights, bias in (([-1, 2], 3), ([-2, 4], 6)):
        oracle = TimingOracle(single_neuron(weights, bias, "fixed"), P)
        (neuron,) = recover_fixed_layer(LayerProbe(oracle, 0), 2, 1)
        assert neuron.ambiguous
        assert {-1, -2} <= set(neuron.candidates[0]) and {2, 4} <= set(neuron.candidates[1])
        assert {3, 6} <= set(neuron.bias_candidates)


def test_random_fixed_model_exact():
    model = random_model((16, 8, 4), "fixed", 0)
    result = recover_fixed_model(TimingOracle(model, P))
    assert same_model(model, result.model)
    assert not result.ambiguous


def test_div255_fixed_layer_keeps_truth_in_candidates():
    """Normalized operands are not multiples of one quantum; some neurons stay ambiguous."""
    model = random_model((8, 6, 3), "fixed", 0, normalization="div255")
    oracle = TimingOracle(model, P)
    neurons = recover_fixed_layer(LayerProbe(oracle, 0), 8, 6)
    layer = model.layers[0]
    for j, neuron in enumerate(neurons):
        assert all(int(w) in c for w, c in zip(layer.weights[j], neuron.candidates))
        assert int(layer.bias[j]) in neuron.bias_candidates
