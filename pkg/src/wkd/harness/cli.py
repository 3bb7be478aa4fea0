"""Command-line entry point: ``wkd <subcommand> [--config run.json] [--section.field VALUE ...]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .. import interrelation
from ..errors import NumericalError, ValidationError
from .._io import dump_json
from . import experiments as ex
from .config import TrainConfig, apply_overrides, leaf_fields, load_config
from .dataset import gen_dataset, save_dataset, summary


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {text!r}") from exc


def _parser_type(kind):
    if kind is bool:
        return _bool
    if kind in (int, float, str):
        return kind
    return _json_value  # tuples (stages, milestones) as JSON lists


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration JSON (defaults if omitted)")
    group = p.add_argument_group("configuration overrides")
    for name, kind, default in leaf_fields():
        group.add_argument(f"--{name}", dest=f"override:{name}", type=_parser_type(kind),
                           default=argparse.SUPPRESS, metavar=kind.__name__.upper(),
                           help=f"(default {json.dumps(default) if isinstance(default, tuple) else default})")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items() if k.startswith("override:")}
    return apply_overrides(cfg, overrides) if overrides else cfg.validate()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _config(args)
    data = gen_dataset(cfg.dataset)
    out = _out(args)
    save_dataset(out / "dataset.bin", data)
    dump_json(out / "dataset.json", summary(data))


def cmd_train_teacher(args):
    cfg = _config(args)
    _, record = ex.train_teacher(cfg, out_dir=_out(args))
    print(f"teacher test accuracy {record.final_test_acc:.4f}")


def _teacher(cfg, path):
    if not Path(path).exists():
        raise ValidationError(f"teacher checkpoint {path} not found")
    return ex.load_teacher(cfg, path)


def cmd_build_ir(args):
    cfg = _config(args)
    ex.build_ir(cfg, _teacher(cfg, args.teacher), out_dir=_out(args))


def cmd_distill(args):
    cfg = _config(args)
    teacher = _teacher(cfg, args.teacher)
    cost = None
    if args.cost is not None:
        if not Path(args.cost).exists():
            raise ValidationError(f"cost matrix {args.cost} not found")
        cost = interrelation.read_matrix_csv(args.cost)
    _, record = ex.distill(cfg, teacher, cost=cost, out_dir=_out(args))
    print(f"{cfg.loss.method} student test accuracy {record.final_test_acc:.4f}")


def cmd_self_kd(args):
    cfg = _config(args)
    (_, r0), (_, r1) = ex.self_kd(cfg, out_dir=_out(args))
    print(f"S0 test accuracy {r0.final_test_acc:.4f}, S1 test accuracy {r1.final_test_acc:.4f}")


def cmd_aggregate(args):
    rows = ex.aggregate(args.runs, args.out)
    for r in rows:
        print(f"{r['method']:>16} {r['group']}  n={r['n_runs']}  "
              f"{100 * r['mean_test_acc']:.2f} +- {100 * r['std_test_acc']:.2f}")


def cmd_verify(args):
    from .. import verify

    results = verify.run_all(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise verify.VerificationFailed(f"{sum(not ok for _, ok, _ in results)} check(s) failed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset and its summary")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher with cross-entropy")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("build-ir", help="category interrelation and cost matrices from a teacher")
    _add_config_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_ir)

    p = sub.add_parser("distill", help="train a student with the configured loss")
    _add_config_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--cost", help="cost matrix CSV (built from the teacher if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("self-kd", help="born-again self distillation S0 -> S1 with WKD-L")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_self_kd)

    p = sub.add_parser("aggregate", help="mean/std test accuracy per configuration over seeds")
    p.add_argument("runs", nargs="+", help="run directories containing record.json")
    p.add_argument("--out", help="output table (.json or .csv)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("verify", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
