import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnleak.network import (Layer, ModelError, ModelParseError, NetworkModel, dumps_model,
                            equivalent_argmax, example_binary_neuron, example_fixed_neuron,
                            example_float_neuron, load_model, loads_model, random_model,
                            reference_forward, save_model, scale_model)

from conftest import same_model


def test_random_model_is_seeded():
    assert same_model(random_model((16, 8, 4), seed=5), random_model((16, 8, 4), seed=5))
    assert not same_model(random_model((16, 8, 4), seed=5), random_model((16, 8, 4), seed=6))


def test_random_model_shapes_and_ranges():
    m = random_model((16, 8, 4), "fixed", seed=1)
    assert [l.weights.shape for l in m.layers] == [(8, 16), (4, 8)]
    for layer in m.layers:
        assert layer.weights.min() >= -8 and layer.weights.max() <= 7
        assert np.all(layer.weights != 0)
    assert m.layers[-1].activation == "argmax"


@pytest.mark.parametrize("make", [example_float_neuron, example_fixed_neuron, example_binary_neuron])
def test_examples_round_trip(make, tmp_path):
    model = make()
    path = tmp_path / "m.txt"
    save_model(model, path)
    again = load_model(path)
    assert same_model(model, again)
    assert dumps_model(again) == path.read_text()


def test_table_neurons_content():
    fixed = example_fixed_neuron().layers[0]
    assert fixed.weights[0].tolist() == [-1, -3, 4, -7, -8, 2, -6, 5, 0]
    assert fixed.bias.tolist() == [108]
    flt = example_float_neuron().layers[0]
    assert np.isclose(flt.weights[0, 0], 1.0390 * 2 ** -2, rtol=1e-4)
    assert np.isclose(flt.bias[0], -1.5906 * 2 ** 5, rtol=1e-6)


@settings(max_examples=25)
@given(st.sampled_from(["float32", "fixed", "binary"]), st.integers(0, 2 ** 16),
       st.sampled_from(["none", "div255"]), st.booleans())
def test_serialization_round_trip(precision, seed, norm, skip):
    model = random_model((5, 4, 3), precision, seed, normalization=norm, zero_skipping=skip)
    again = loads_model(dumps_model(model))
    assert same_model(model, again)
    assert (again.normalization, again.zero_skipping) == (norm, skip)


def test_structural_errors():
    with pytest.raises(ModelError):
        NetworkModel("float32", ())
    w = np.ones((2, 3), dtype=np.float32)
    with pytest.raises(ModelError):
        NetworkModel("float32", (Layer(w, np.zeros(2, np.float32), "relu"),
                                 Layer(w, np.zeros(2, np.float32), "relu")))
    with pytest.raises(ModelError):
        NetworkModel("fixed", (Layer(np.array([[9]]), np.array([0]), "relu"),))
    with pytest.raises(ModelError):
        NetworkModel("binary", (Layer(np.array([[0]]), np.array([0]), "relu"),))


def test_parse_errors_carry_line_numbers():
    text = dumps_model(example_fixed_neuron()).replace("bias 108", "bias 1000")
    with pytest.raises(ModelError):
        loads_model(text)
    with pytest.raises(ModelParseError, match=":2"):
        loads_model("net fixed 1\nlayer 1 x relu\n")


def test_equivalent_argmax():
    m = random_model((16, 8, 4), seed=3)
    assert equivalent_argmax(m, m) == 1.0
    # Scaling the output layer by 2**k rescales every logit alike.
    assert equivalent_argmax(m, scale_model(m, [1.0, 8.0])) == 1.0
    single = random_model((16, 4), seed=3)
    assert equivalent_argmax(single, scale_model(single, [2.0 ** 5])) == 1.0
    assert equivalent_argmax(m, random_model((16, 8, 4), seed=4)) < 1.0


def test_reference_forward_fixed_neuron():
    out = reference_forward(example_fixed_neuron(), np.zeros((1, 9), dtype=np.int64))
    assert out.tolist() == [[108]]
    x = np.zeros((1, 9), dtype=np.int64)
    x[0, 0] = 200
    assert reference_forward(example_fixed_neuron(), x).tolist() == [[0]]
