"""Command-line front end.

Every command builds its outputs in memory first and only then writes them
under ``--out``, so a failing run leaves nothing behind. Outputs depend only
on the arguments: the same command line gives byte-identical files.

Exit codes: 0 on success, 1 on a domain error (bad model file, failed
attack, unknown profile), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import hardened as hd
from . import leakage, reports
from .attacks import AttackError, compare_models, recover_model
from .attacks.inputs import (InputEstimate, recover_input_div255, recover_input_float,
                             recover_sparsity_mask, weight_mantissa_matrix)
from .network import (NORMALIZATIONS, PRECISIONS, ModelError, NetworkModel, dumps_model,
                      example_binary_neuron, example_fixed_neuron, example_float_neuron,
                      load_model, random_inputs, random_model)
from .oracle import INPUT_STAGE, JitterConfig, TimingOracle, TimingTrace
from .profiles import BUILTIN_PROFILES, PROFILE_DIR_ENV, ProfileError, load_profile

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

EXAMPLES = {
    "float-neuron": example_float_neuron,
    "fixed-neuron": example_fixed_neuron,
    "binary-neuron": example_binary_neuron,
}


class UsageError(Exception):
    """Arguments parsed but do not make sense together."""


def _csv(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def _metrics(pairs) -> str:
    return _csv(["metric", "value"], pairs)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# shared argument handling


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be comma-separated integers, got {text!r}") from None
    if len(dims) < 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError("dims need at least an input and an output width, all positive")
    return dims


def _jitter(args) -> JitterConfig:
    return JitterConfig(args.sigma, args.repeats, args.seed)


def _model(args) -> NetworkModel:
    """The model named by --model, --example or the random-model flags."""
    if getattr(args, "model", None):
        return load_model(args.model)
    if getattr(args, "example", None):
        return EXAMPLES[args.example]()
    return random_model(args.dims, args.precision, args.seed, normalization=args.normalization,
                        zero_skipping=args.zero_skipping)


def _parse_input(text: str, width: int) -> np.ndarray:
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ModelError(f"input must be integers, got {text!r}") from None
    if len(values) != width:
        raise ModelError(f"input has {len(values)} values, model expects {width}")
    return np.array(values, dtype=np.int64)


def _input_vector(args, model: NetworkModel) -> np.ndarray:
    if args.input and args.input_file:
        raise UsageError("give --input or --input-file, not both")
    if args.input_file:
        return _parse_input(Path(args.input_file).read_text(), model.input_width)
    if args.input:
        return _parse_input(args.input, model.input_width)
    return random_inputs(model.input_width, 1, args.seed)[0]


# --------------------------------------------------------------------------
# commands; each returns (files, summary text)


def cmd_gen(args):
    model = _model(args)
    text = dumps_model(model)
    return {"model.txt": text}, text


def cmd_capture(args):
    profile = load_profile(args.profile)
    model = _model(args)
    x = _input_vector(args, model)
    jitter = _jitter(args)
    if args.hardened:
        oracle = hd.HardenedOracle(hd.harden(model), profile, jitter)
    else:
        oracle = TimingOracle(model, profile, jitter)
    trace = oracle.query(x)
    files = {"trace.csv": trace.to_csv(), "input.csv": _csv(["position", "value"], enumerate(x.tolist()))}
    target = "hardened" if args.hardened else "default"
    summary = f"captured {len(trace.events)} events, {trace.total_cycles:g} cycles ({target} executor)\n"
    return files, summary


def cmd_attack_model(args):
    profile = load_profile(args.profile)
    truth = _model(args)
    jitter = _jitter(args)
    if args.hardened:
        oracle = hd.HardenedOracle(hd.harden(truth), profile, jitter)
    else:
        oracle = TimingOracle(truth, profile, jitter)
    result = recover_model(oracle)
    cmp = compare_models(truth, result.model, seed=args.seed)
    metrics = [("precision", truth.precision), ("dims", ",".join(map(str, truth.dims))),
               ("queries", result.queries), ("exact", int(cmp.exact)),
               ("argmax_agreement", cmp.argmax_agreement),
               ("ambiguous_parameters", len(result.ambiguous))]
    metrics += [(f"max_rel_error_layer{i}", e) for i, e in enumerate(cmp.max_rel_error)]
    files = {
        "recovered.model": dumps_model(result.model),
        "parameters.csv": result.report_csv(),
        "metrics.csv": _metrics((k, _fmt(v)) for k, v in metrics),
    }
    if result.notes:
        files["notes.txt"] = "\n".join(result.notes) + "\n"
    summary = "".join(f"{k}: {_fmt(v)}\n" for k, v in metrics)
    return files, summary


def _input_estimate(method: str, trace: TimingTrace, model: NetworkModel | None, profile) -> InputEstimate:
    kinds = {e.kind for e in trace.events if e.layer == INPUT_STAGE}
    if method == "auto":
        if "div_bit" in kinds:
            method = "div255"
        elif "int2float" in kinds:
            method = "float"
        elif trace.of_kind("skip"):
            method = "sparsity"
        else:
            raise AttackError("trace carries no input-dependent channel this tool can read")
    if method == "div255":
        return recover_input_div255(trace)
    if method == "sparsity":
        return recover_sparsity_mask(trace)
    if model is None:
        raise UsageError("--method float needs the (recovered) model via --model")
    if model.precision != "float32":
        raise ModelError("--method float needs a float32 model")
    return recover_input_float(trace, weight_mantissa_matrix(model.layers[0].weights), profile)


def cmd_attack_input(args):
    profile = load_profile(args.profile)
    trace = TimingTrace.from_csv(Path(args.trace).read_text())
    model = load_model(args.model) if args.model else None
    estimate = _input_estimate(args.method, trace, model, profile)
    resolved = sum(1 for v in estimate.values if v is not None)
    zeros = int(estimate.zero_mask().sum())
    metrics = [("method", estimate.method), ("positions", len(estimate)), ("resolved", resolved),
               ("known_zero", zeros), ("queries", 1)]
    files = {"input.csv": estimate.to_csv(), "metrics.csv": _metrics(metrics)}
    if estimate.notes:
        files["notes.txt"] = "\n".join(estimate.notes) + "\n"
    if args.pgm_width:
        files["input.pgm"] = estimate.to_pgm(args.pgm_width)
    summary = "".join(f"{k}: {v}\n" for k, v in metrics)
    return files, summary


def _weights_csv(hm: hd.HardenedModel) -> str:
    rows = []
    for index, layer in enumerate(hm.float_layers):
        for (j, k), word in np.ndenumerate(layer.weights.words):
            rows.append([index, j, k, layer.weights.e_max, int(word)])
    return _csv(["layer", "neuron", "index", "e_max", "word"], rows)


def cmd_harden(args):
    profile = load_profile(args.profile)
    model = _model(args)
    hm = hd.harden(model)
    metrics = [("precision", model.precision),
               ("argmax_agreement_default", hd.argmax_agreement(hm, seed=args.seed, against="default")),
               ("argmax_agreement_ideal", hd.argmax_agreement(hm, seed=args.seed, against="ideal"))]
    files = {}
    if hm.float_layers is not None:
        default_bytes, hardened_bytes = hm.weight_storage()
        metrics += [("weight_bytes_default", default_bytes), ("weight_bytes_hardened", hardened_bytes)]
        metrics += [(f"layer{i}_{name}", getattr(layer, name)) for i, layer in enumerate(hm.float_layers)
                    for name in ("in_exp", "out_exp", "acc_bits")]
        files["normalized_weights.csv"] = _weights_csv(hm)
    overheads = leakage.overhead_report(profile, args.seed)
    files["metrics.csv"] = _metrics((k, _fmt(v)) for k, v in metrics)
    files["overheads.csv"] = overheads.to_csv()
    summary = "".join(f"{k}: {_fmt(v)}\n" for k, v in metrics) + overheads.to_table()
    return files, summary


def cmd_verify_ct(args):
    profile = load_profile(args.profile)
    if args.kernel == "all":
        report = leakage.verify_all(profile, args.seed)
    else:
        report = leakage.verify_constant_time(args.kernel, profile, args.hardened, seed=args.seed)
    return {"leakage.csv": report.to_csv()}, report.to_table()


def cmd_report(args):
    profile = load_profile(args.profile)
    jitter = _jitter(args)
    files = reports.report_files(profile, args.seed, jitter)
    ct = leakage.verify_all(profile, args.seed)
    files["leakage.csv"], files["leakage.txt"] = ct.to_csv(), ct.to_table()
    if args.resistance:
        model = _model(args)
        suite = leakage.attack_resistance_suite(hd.harden(model), profile, args.seed, jitter=jitter)
        files["resistance.csv"], files["resistance.txt"] = suite.to_csv(), suite.to_table()
    summary = "".join(f"{name}\n" for name in sorted(files))
    return files, summary


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", help=f"cost profile: {', '.join(BUILTIN_PROFILES)} (default atmega-like), "
                                     f"a file, or a name under ${PROFILE_DIR_ENV}")
    p.add_argument("--seed", type=int, default=0, help="seed for random models, inputs and jitter")
    p.add_argument("--out", help="output directory; without it only the summary is printed")


def _add_jitter(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian timing jitter in cycles")
    p.add_argument("--repeats", type=int, default=1, help="measurements averaged per query")


def _add_model(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--model", help="model file")
    src.add_argument("--example", choices=sorted(EXAMPLES), help="builtin walkthrough neuron")
    p.add_argument("--precision", choices=PRECISIONS, default="float32", help="precision of a random model")
    p.add_argument("--dims", type=_dims, default=(16, 8, 4), help="random model widths, e.g. 16,8,4")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="none")
    p.add_argument("--zero-skipping", action="store_true", help="random model skips zero inputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nnleak {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="write a random or example model")
    _add_common(p)
    _add_model(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("capture", help="record the timing trace of one inference")
    _add_common(p)
    _add_model(p)
    _add_jitter(p)
    p.add_argument("--input", help="input values, comma or space separated (default: random)")
    p.add_argument("--input-file", help="file holding the input values")
    p.add_argument("--hardened", action="store_true", help="run the constant-time executor")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("attack-model", help="recover a model through the timing oracle")
    _add_common(p)
    _add_model(p)
    _add_jitter(p)
    p.add_argument("--hardened", action="store_true", help="attack the constant-time executor")
    p.set_defaults(func=cmd_attack_model)

    p = sub.add_parser("attack-input", help="recover the input behind a captured trace")
    _add_common(p)
    p.add_argument("--trace", required=True, help="trace CSV from 'capture'")
    p.add_argument("--model", help="model file, needed by the float method")
    p.add_argument("--method", choices=("auto", "float", "div255", "sparsity"), default="auto")
    p.add_argument("--pgm-width", type=int, help="also write input.pgm with this row width")
    p.set_defaults(func=cmd_attack_input)

    p = sub.add_parser("harden", help="compile a model for the constant-time executor")
    _add_common(p)
    _add_model(p)
    p.set_defaults(func=cmd_harden)

    p = sub.add_parser("verify-ct", help="count distinct cycle classes of a kernel")
    _add_common(p)
    p.add_argument("--kernel", choices=leakage.KERNELS + ("all",), default="all")
    p.add_argument("--hardened", action="store_true", help="check the hardened variant")
    p.set_defaults(func=cmd_verify_ct)

    p = sub.add_parser("report", help="summary tables and plot data")
    _add_common(p)
    _add_model(p)
    _add_jitter(p)
    p.add_argument("--resistance", action="store_true", help="also run the attack suite on a hardened model")
    p.set_defaults(func=cmd_report)
    return parser


def write_outputs(out_dir: str, files: dict[str, str]) -> list[Path]:
    """Write every file or none: on failure the files already written are removed."""
    out = Path(out_dir)
    created_dir = not out.exists()
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            path = out / name
            path.write_text(files[name])
            written.append(path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        if created_dir and out.exists() and not any(out.iterdir()):
            out.rmdir()
        raise
    return written


DOMAIN_ERRORS = (ModelError, ProfileError, AttackError, ValueError, ArithmeticError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        files, summary = args.func(args)
        if args.out:
            write_outputs(args.out, files)
    except UsageError as exc:
        print(f"nnleak {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DOMAIN_ERRORS as exc:
        print(f"nnleak {args.command}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    sys.stdout.write(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
