import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnleak import arith
from nnleak.network import ModelError, first_layer_operands, example_fixed_neuron, random_model, reference_forward
from nnleak.oracle import (INPUT_STAGE, JitterConfig, TimingOracle, TimingTrace, execute, execute_layer,
                           probe_layer, run_inference, scalar_inference, trace_from_timings)
from nnleak.profiles import ATMEGA

P = ATMEGA


def _shape(events):
    """Events without their global index, for comparing sub-traces."""
    return [(e.kind, e.layer, e.neuron, e.cycles, e.sub_durations) for e in events]


def test_table_neuron_zero_input():
    out, trace = run_inference(example_fixed_neuron(), np.zeros(9, dtype=np.int64), P)
    assert out.tolist() == [108]
    (relu,) = trace.of_kind("relu")
    assert relu.cycles == P.fixed_relu_nonneg
    assert len(trace.of_kind("mac")) == 9


def test_div255_events_for_85():
    model = random_model((3, 2), "fixed", seed=0, normalization="div255")
    _, trace = run_inference(model, np.array([85, 0, 0]), P)
    steps = [e for e in trace.events if e.layer == INPUT_STAGE and e.neuron == 0]
    assert len(steps) == 16 and all(e.kind == "div_bit" for e in steps)
    bits = [1 if e.sub_durations[0] == P.div_long else 0 for e in steps]
    assert bits == [0, 0] + [1, 0] * 7
    assert steps[0].cycles == P.div_base + P.div_short


def test_zero_skipping_all_zero_input():
    model = random_model((6, 4, 3), "float32", seed=2, zero_skipping=True)
    _, trace = run_inference(model, np.zeros(6, dtype=np.int64), P)
    layer0 = [e for e in trace.events if e.layer == 0 and e.kind in ("mac", "skip")]
    assert {e.kind for e in layer0} == {"skip"}
    for n in range(4):
        total = sum(e.cycles for e in trace.events if e.layer == 0 and e.neuron == n)
        relu = [e for e in trace.events if e.layer == 0 and e.neuron == n and e.kind == "relu"][0]
        assert total == 6 * P.skip_cost + relu.cycles


def test_layer0_probe_matches_run():
    model = random_model((8, 5, 3), "float32", seed=4)
    x = np.arange(8) * 31
    _, full = run_inference(model, x, P)
    probe = probe_layer(model, 0, x, P)
    layer0 = [e for e in full.events if e.layer in (INPUT_STAGE, 0)]
    assert _shape(probe.events) == _shape(layer0)


@pytest.mark.parametrize("precision", ["float32", "fixed", "binary"])
def test_injection_reproduces_layer1(precision):
    model = random_model((8, 5, 3), precision, seed=4)
    x = np.arange(8) * 31
    _, full = run_inference(model, x, P)
    a, _ = execute_layer(model, 0, first_layer_operands(model, x[None, :])[0], P)
    probe = probe_layer(model, 1, a[0], P)
    assert _shape(probe.events) == _shape([e for e in full.events if e.layer == 1])


def test_out_of_domain_activation():
    model = random_model((4, 3, 2), "fixed", seed=0)
    with pytest.raises(ModelError):
        probe_layer(model, 1, [0, 256, 0], P)
    with pytest.raises(ModelError):
        probe_layer(random_model((4, 3, 2), seed=0), 1, [0.0, -1.0, 0.0], P)
    with pytest.raises(ModelError):
        run_inference(model, np.array([0, 0, 0, 300]), P)


def test_query_counter():
    oracle = TimingOracle(example_fixed_neuron(), P)
    assert oracle.query_count == 0
    oracle.query(np.zeros(9, dtype=np.int64))
    assert oracle.query_count == 1
    oracle.query_batch(np.zeros((5, 9), dtype=np.int64))
    oracle.probe_batch(0, np.zeros((2, 9), dtype=np.int64))
    assert oracle.query_count == 8
    oracle.reset_count()
    assert oracle.query_count == 0


def test_repeats_count_once():
    oracle = TimingOracle(example_fixed_neuron(), P, JitterConfig(2.0, 16, 1))
    oracle.query(np.zeros(9, dtype=np.int64))
    assert oracle.query_count == 1


def test_jitter_is_deterministic():
    x = np.arange(9)
    a = TimingOracle(example_fixed_neuron(), P, JitterConfig(3.0, 4, 7)).query(x)
    b = TimingOracle(example_fixed_neuron(), P, JitterConfig(3.0, 4, 7)).query(x)
    c = TimingOracle(example_fixed_neuron(), P, JitterConfig(3.0, 4, 8)).query(x)
    assert a == b and a != c


def test_trace_csv_round_trip():
    _, trace = run_inference(random_model((4, 3, 2), seed=1, normalization="div255"), np.arange(4) * 60, P)
    again = TimingTrace.from_csv(trace.to_csv())
    assert again == trace
    with pytest.raises(ValueError):
        TimingTrace.from_csv("a,b\n")


def test_argmax_emits_comparisons():
    model = random_model((4, 3, 5), seed=1)
    _, trace = run_inference(model, np.arange(4) * 60, P)
    cmps = trace.of_kind("cmp")
    assert len(cmps) == 4
    assert {e.cycles for e in cmps} <= {P.cmp_keep, P.cmp_update}


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["float32", "fixed", "binary"]), st.sampled_from(["none", "div255"]),
       st.booleans(), st.integers(0, 1000), st.lists(st.integers(0, 255), min_size=5, max_size=5))
def test_batched_executor_matches_scalar_kernels(precision, norm, skip, seed, x):
    model = random_model((5, 4, 3), precision, seed, normalization=norm, zero_skipping=skip)
    x = np.array(x)
    out, timings = execute(model, x[None, :], P)
    scalar = scalar_inference(model, x, P)
    assert scalar.trace == trace_from_timings(timings, 0, P.div_base)
    assert np.array_equal(scalar.output, out[0])
    assert np.array_equal(reference_forward(model, x[None, :])[0], out[0])


def test_int2float_events():
    _, trace = run_inference(random_model((3, 2), seed=0), np.array([200, 1, 0]), P)
    conv = trace.of_kind("int2float")
    assert [e.cycles for e in conv] == [arith.int2float_cycles(v, P) for v in (200, 1, 0)]
