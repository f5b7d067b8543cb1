"""Command-line interface: ``opensetids {assemble,synth,train,detect,eval,inspect}``."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from . import evaluation, synth
from .errors import DataError, OpenSetIDSError
from .flows import (DEFAULT_IDLE_TIMEOUT, assemble_flows, label_flows, parse_capture,
                    read_attack_records, read_flows, write_flows)
from .pipeline import (OpenSetDetector, detect_many, load_bundle, read_verdicts,
                       save_bundle, write_verdicts)

log = logging.getLogger("opensetids")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bounded(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def convert(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise argparse.ArgumentTypeError(f"{value} is below the allowed range")
        if hi is not None and (value > hi or (hi_open and value == hi)):
            raise argparse.ArgumentTypeError(f"{value} is above the allowed range")
        return value
    convert.__name__ = kind.__name__
    return convert


positive_int = _bounded(int, 1)
nonneg_int = _bounded(int, 0)
nonneg_float = _bounded(float, 0.0)
positive_float = _bounded(float, 0.0, lo_open=True)
unit_interval = _bounded(float, 0.0, 1.0)
position_type = _bounded(float, 0.0, 1.0, lo_open=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opensetids", description=__doc__)
    parser.add_argument("--config", type=Path,
                        help="key = value file of option defaults; flags take precedence")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("assemble", help="pcap (+ attack CSV) -> flow container")
    p.add_argument("pcap", type=Path, nargs="+")
    p.add_argument("--labels", type=Path, help="CSV: src_ip,dst_ip,start_time,end_time,label")
    p.add_argument("--idle-timeout", type=nonneg_float, default=DEFAULT_IDLE_TIMEOUT)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="synthetic class plan -> flow container")
    p.add_argument("plan", type=Path, nargs="?", help="JSON plan; stock classes if omitted")
    p.add_argument("--count", type=positive_int, default=200,
                   help="flows per stock class (ignored with a plan)")
    p.add_argument("--classes", nargs="+", help="subset of stock class names")
    p.add_argument("--difficulty", type=unit_interval)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("train", help="labeled flows -> model bundle")
    p.add_argument("flows", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=nonneg_int, default=20)
    p.add_argument("--batch-size", type=positive_int, default=64)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--learning-rate", type=positive_float, default=1e-3)
    p.add_argument("--attenuation", type=unit_interval, default=0.5)
    p.add_argument("--tail-fraction", type=position_type, default=0.05)
    p.add_argument("--tail-floor", type=positive_int, default=10)
    p.add_argument("--vae-epochs", type=nonneg_int, default=50)
    p.add_argument("--vae-batch-size", type=positive_int, default=64)
    p.add_argument("--vae-learning-rate", type=positive_float, default=1e-3)
    p.add_argument("--beta-kl", type=nonneg_float, default=1.0)
    p.add_argument("--threshold-position", type=position_type, default=0.96)
    p.add_argument("--calibrate-on", choices=("correct", "all"), default="correct")

    p = sub.add_parser("detect", help="bundle + flows -> verdict CSV")
    p.add_argument("flows", type=Path)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("-o", "--output", type=Path, help="default: stdout")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="verdicts + ground truth -> metrics report")
    p.add_argument("verdicts", type=Path)
    p.add_argument("--truth", type=Path, required=True, help="labeled flow container, same order")
    p.add_argument("--bundle", type=Path, required=True, help="supplies the known class list")
    p.add_argument("-o", "--output", type=Path, help="text report; default stdout")
    p.add_argument("--csv", type=Path, help="machine-readable report")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="summarize a model bundle")
    p.add_argument("bundle", type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    if not args.config.exists():
        raise FileNotFoundError(args.config)
    config = _read_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    defaults = {}
    for action in subparser._actions:
        if action.dest in config:
            raw = config[action.dest]
            try:
                value = action.type(raw) if action.type else raw
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"{args.config}: {action.dest}: {exc}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"{args.config}: {action.dest}: {value!r} not in {action.choices}")
            defaults[action.dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def cmd_assemble(args):
    flows, skipped = [], Counter()
    for path in args.pcap:
        flows_packets = parse_capture(_need(path).read_bytes(), skipped)
        flows += assemble_flows(flows_packets, args.idle_timeout)
    flows.sort(key=lambda f: f.start_time)
    if args.labels:
        flows = label_flows(flows, read_attack_records(_need(args.labels)))
    for reason, n in sorted(skipped.items()):
        log.info("skipped %d packet(s): %s", n, reason)
    with open(args.output, "wb") as fh:
        write_flows(flows, fh)
    print(f"wrote {len(flows)} flows to {args.output}", file=sys.stderr)


def cmd_synth(args):
    if args.plan:
        plan = synth.SynthPlan.from_json(_need(args.plan).read_text())
    else:
        specs = synth.default_specs()
        if args.classes:
            names = {s.name for s in specs}
            unknown = set(args.classes) - names
            if unknown:
                raise UsageError(f"unknown stock classes {sorted(unknown)}; have {sorted(names)}")
            specs = [s for s in specs if s.name in args.classes]
        plan = synth.SynthPlan(specs, [args.count] * len(specs))
    if args.seed is not None:
        plan.seed = args.seed
    if args.difficulty is not None:
        plan.difficulty = args.difficulty
    flows = plan.generate()
    with open(args.output, "wb") as fh:
        write_flows(flows, fh)
    print(f"wrote {len(flows)} flows to {args.output}", file=sys.stderr)


def cmd_train(args):
    from .features import featurize

    flows = read_flows(_need(args.flows).read_bytes())
    det = OpenSetDetector(
        epochs=args.epochs, batch_size=args.batch_size, optimizer=args.optimizer,
        learning_rate=args.learning_rate, attenuation=args.attenuation,
        tail_fraction=args.tail_fraction, tail_floor=args.tail_floor,
        vae_epochs=args.vae_epochs, vae_batch_size=args.vae_batch_size,
        vae_learning_rate=args.vae_learning_rate, beta_kl=args.beta_kl,
        threshold_position=args.threshold_position, calibrate_on=args.calibrate_on,
        random_state=args.seed)
    det.fit(featurize(flows), [f.label for f in flows])
    save_bundle(det.bundle_, str(args.output))
    print(f"trained on {len(flows)} flows, classes {det.bundle_.class_names}; "
          f"bundle written to {args.output}", file=sys.stderr)


def cmd_detect(args):
    bundle = load_bundle(str(_need(args.bundle)))
    flows = read_flows(_need(args.flows).read_bytes())
    verdicts = detect_many(flows, bundle)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            write_verdicts(verdicts, fh, bundle.n_classes)
    else:
        write_verdicts(verdicts, sys.stdout, bundle.n_classes)


def cmd_eval(args):
    bundle = load_bundle(str(_need(args.bundle)))
    with open(_need(args.verdicts), newline="") as fh:
        verdicts = read_verdicts(fh)
    truth = read_flows(_need(args.truth).read_bytes())
    if len(truth) != len(verdicts):
        raise DataError(f"{args.verdicts} has {len(verdicts)} verdicts but "
                        f"{args.truth} has {len(truth)} flows")
    for i, (v, f) in enumerate(zip(verdicts, truth)):
        if v.flow_key != str(f.key):
            raise DataError(f"row {i + 2} of {args.verdicts}: flow {v.flow_key} does not "
                            f"match {f.key} in {args.truth}")
    cm = evaluation.confusion([v.final_label for v in verdicts], [f.label for f in truth],
                              bundle.class_names)
    text = evaluation.format_report(cm)
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        args.csv.write_text(evaluation.report_csv(cm))


def cmd_inspect(args):
    b = load_bundle(str(_need(args.bundle)))
    om = b.openmax_config
    out = [f"format_version: {b.version}",
           f"classes ({b.n_classes}): {', '.join(b.class_names)}",
           f"openmax: attenuation={om.attenuation!r} tail_fraction={om.tail_fraction!r} "
           f"tail_floor={om.tail_floor}",
           "normalization (DIRC, PLDL, TCPW, ITVT):",
           f"  mean = {[float(x) for x in b.norm_stats.mean]}",
           f"  std  = {[float(x) for x in b.norm_stats.std]}",
           "per class:"]
    for name, cal, thr in zip(b.class_names, b.calibrations, b.thresholds):
        w = cal.weibull
        out.append(f"  [{cal.index}] {name}: tau={w.shift!r} kappa={w.shape!r} "
                   f"lambda={w.scale!r} tail={cal.tail_size} "
                   f"vae_threshold={thr.threshold!r} position={thr.position!r}")
    print("\n".join(out))


COMMANDS = {"assemble": cmd_assemble, "synth": cmd_synth, "train": cmd_train,
            "detect": cmd_detect, "eval": cmd_eval, "inspect": cmd_inspect}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"opensetids: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"opensetids {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"opensetids {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (OpenSetIDSError, OSError) as exc:
        print(f"opensetids {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
