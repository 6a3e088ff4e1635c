import csv
import io

from nnleak import reports
from nnleak.profiles import ATMEGA

P = ATMEGA


def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_figure_schemas():
    expected = {
        "mul_lut.csv": ["input_frac7", "weight_frac7", "cycles"],
        "relu_float.csv": ["ip", "pre_activation", "relu_cycles", "class"],
        "relu_fixed.csv": ["ip", "pre_activation", "relu_cycles", "class"],
        "int2float.csv": ["ip", "exponent", "cycles"],
        "div255_steps.csv": ["ip", "step", "quotient_bit", "cycles"],
    }
    for name, header in expected.items():
        rows = _rows(reports.FIGURES[name](P))
        assert rows[0] == header
    assert len(_rows(reports.mul_lut_csv(P))) == 1 + 128 * 128
    assert len(_rows(reports.div255_steps_csv(P))) == 1 + 256 * 16


def test_relu_sweeps_show_classes():
    fixed = _rows(reports.relu_fixed_csv(P))[1:]
    assert {r[3] for r in fixed} == {"non-negative", "negative"}
    assert {int(r[2]) for r in fixed} == {P.fixed_relu_nonneg, P.fixed_relu_neg}
    # ip_1 sweeps against b = 108 with weight -3: still non-negative at 36
    assert fixed[36][3] == "non-negative" and fixed[37][3] == "negative"


def test_float_neuron_table():
    text_csv, table = reports.float_neuron_report(P)
    rows = {r[0]: r for r in _rows(text_csv)[1:]}
    assert [rows[f"w{k}"][4] for k in range(5)] == ["1.0391", "1.6641", "1.0859", "1.1797", "1.1250"]
    assert [rows[f"w{k}"][5] for k in range(5)] == ["0", "-1", "-4", "0", "-5"]
    assert [rows[f"w{k}"][8] for k in range(5)] == ["196", "74", "213", "173", "188"]
    assert "bias" in table


def test_fixed_neuron_table():
    text_csv, _ = reports.fixed_neuron_report(P)
    rows = _rows(text_csv)[1:]
    assert [r[2] for r in rows[:9]] == ["-1", "-3", "4", "-7", "-8", "2", "-6", "5", "0"]
    assert [r[4] for r in rows[:9]] == ["108", "36", "23", "16", "14", "46", "18", "19", ""]
    assert rows[9][:3] == ["bias", "108", "108"]


def test_report_files_deterministic(tmp_path):
    a = reports.report_files(P, seed=1)
    b = reports.report_files(P, seed=1)
    assert a == b
    written = reports.write_files(tmp_path, a)
    assert sorted(p.name for p in written) == sorted(a)
