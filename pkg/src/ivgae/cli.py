"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .config import _KEYS, TrainConfig, build_configs, load_json
from .dataio import load_csv, write_csv, write_norm_params
from .errors import IvgaeError
from .missingness import MECHANISMS, generate, mask_stats, read_mask, write_mask

logger = logging.getLogger("ivgae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand."""
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="random seed (default 0)")
    p.add_argument("--config", default=default, help="JSON config file")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else ".", help="output directory (default .)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ivgae", description="Graph-based imputation of mixed-type tables.", parents=[_common(False)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    common = [_common(True)]
    mechs = [m.lower() for m in MECHANISMS]

    g = sub.add_parser("generate-missing", parents=common, help="write a missingness mask for a complete CSV")
    g.add_argument("data")
    g.add_argument("--mechanism", choices=mechs, default="mcar")
    g.add_argument("--rate", type=float, default=0.3)
    g.add_argument("--schema", help="JSON column schema")

    i = sub.add_parser("impute", parents=common, help="fill the masked cells of a table")
    i.add_argument("data")
    i.add_argument("--mask", required=True, help="mask CSV (1 observed, 0 missing)")
    i.add_argument("--method", choices=("ivgae", "mean", "knn"), default="ivgae")
    i.add_argument("--k", type=int, default=5, help="neighbours for knn")
    i.add_argument("--epochs", type=int, help="training epochs (default: desk preset)")
    i.add_argument("--schema")
    i.add_argument("--checkpoint", help="where to save the trained model (.npz)")

    e = sub.add_parser("evaluate", parents=common, help="AvgErr of an imputed table against the truth")
    e.add_argument("--truth", required=True)
    e.add_argument("--imputed", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--schema")

    x = sub.add_parser("experiment", parents=common, help="run an experiment grid from a JSON config")
    x.add_argument("--no-figures", action="store_true")

    gc = sub.add_parser("grad-check", parents=common, help="finite-difference gradient checks")
    gc.add_argument("--max-elems", type=int, default=24)

    s = sub.add_parser("synth", parents=common, help="write a synthetic dataset")
    s.add_argument("--kind", choices=("factor", "mixed", "gaussian"), default="factor")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--p", type=int, default=10, help="columns (factor/gaussian) or continuous columns (mixed)")
    s.add_argument("--categorical", type=int, default=2, help="categorical columns (mixed)")
    s.add_argument("--categories", type=int, default=3)
    s.add_argument("--rank", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--name", default="synth.csv")
    return parser


def _apply_config(args: argparse.Namespace) -> dict:
    """Config keys that name a flag override it; model/train keys are returned for the trainer."""
    if not args.config or args.command == "experiment":
        return {}
    cfg = load_json(args.config)
    model_keys = {}
    flat = {}
    for key, value in cfg.items():
        if isinstance(value, dict) and key in {k.split(".")[0] for k in _KEYS}:
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    for key, value in flat.items():
        if key in _KEYS:
            model_keys[key] = value
        elif hasattr(args, key.replace("-", "_")):
            setattr(args, key.replace("-", "_"), value)
        else:
            raise UsageError(f"unknown config key {key!r}")
    return model_keys


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_missing(args) -> int:
    data = load_csv(args.data, args.schema)
    mask = generate(data, args.mechanism, args.rate, args.seed)
    out = _out(args)
    path = out / f"{Path(args.data).stem}_mask.csv"
    write_mask(mask, data.names, path)
    stats = mask_stats(mask, data)
    print(f"wrote {path} ({int((mask.m == 0).sum())} missing cells, rate {stats.global_rate:.4f})")
    return EXIT_OK


def cmd_impute(args, model_keys: dict) -> int:
    from .baselines import baseline_knn, baseline_mean_mode
    from .plotting import training_curve
    from .trainer import IVGAE

    data = load_csv(args.data, args.schema)
    mask = read_mask(args.mask)
    out = _out(args)
    if args.method == "mean":
        imp = baseline_mean_mode(data, mask)
    elif args.method == "knn":
        imp = baseline_knn(data, mask, args.k)
    else:
        base = TrainConfig.desk(seed=args.seed)
        model_cfg, train_cfg = build_configs(model_keys, train=base)
        if args.epochs is not None:
            model_cfg, train_cfg = build_configs({**model_keys, "train.epochs": args.epochs}, train=base)
        model = IVGAE(data, mask, model_cfg, train_cfg)
        model.fit(log_path=out / "progress.csv")
        imp = model.impute()
        write_norm_params(model.data, out / "norm.json")
        model.save(args.checkpoint or out / "model.npz")
        training_curve(pd.read_csv(out / "progress.csv"), out / "loss.png")
    write_csv(imp.dataset, out / "imputed.csv")
    print(f"wrote {out / 'imputed.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import avg_err
    from .plotting import column_errors

    truth = load_csv(args.truth, args.schema)
    schema = [c.to_json() for c in truth.schema]
    imputed = load_csv(args.imputed, schema)
    mask = read_mask(args.mask)
    report = avg_err(truth, imputed, mask)
    out = _out(args)
    payload = {"truth": str(args.truth), "imputed": str(args.imputed), **report.to_json()}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    rows = [
        {"mechanism": mask.mechanism, "rate": mask.rate, "seed": mask.seed, "method": "external",
         "column": c, "avg_err": v}
        for c, v in report.per_column.items()
    ]
    tidy = pd.DataFrame(rows, columns=["mechanism", "rate", "seed", "method", "column", "avg_err"])
    tidy.to_csv(out / "tidy.csv", index=False, float_format="%.17g")
    if len(tidy):
        column_errors(tidy, out / "avg_err.png", "AvgErr per column")
    for name, value in report.per_column.items():
        print(f"{name:<24} {value:.6f}")
    print(f"{'macro':<24} {report.macro:.6f}" if report.macro is not None else "macro undefined")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import run_suite

    if not args.config:
        raise UsageError("experiment needs --config <file>")
    payload = load_json(args.config)
    if args.out != "." or "out" not in payload:
        payload["out"] = args.out
    summary = run_suite(payload, figures=not args.no_figures)
    failed = 0
    for cell in summary["cells"]:
        spec, agg = cell["spec"], cell["aggregate"]
        failed += agg["n_failed"]
        mean = "n/a" if agg["mean"] is None else f"{agg['mean']:.6f}"
        print(f"{spec['method']:<6} {spec['mechanism']:<5} {spec['rate']:<5g} macro AvgErr {mean} (failed seeds: {agg['n_failed']})")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import format_table, run_all

    rows = run_all(seed=args.seed, max_elems=args.max_elems)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


def cmd_synth(args) -> int:
    from .synth import factor_model, gaussian, mixed_type

    if args.kind == "factor":
        data = factor_model(args.n, args.p, args.rank, args.noise, args.seed)
    elif args.kind == "gaussian":
        data = gaussian(args.n, args.p, args.seed)
    else:
        data = mixed_type(args.n, args.p, args.categorical, args.categories, args.rank, args.noise, args.seed)
    out = _out(args)
    write_csv(data, out / args.name)
    schema_path = out / (Path(args.name).stem + ".schema.json")
    schema_path.write_text(json.dumps([c.to_json() for c in data.schema], indent=2) + "\n")
    print(f"wrote {out / args.name} and {schema_path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("ivgae: error: a subcommand is required")
        model_keys = _apply_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-missing":
            return cmd_generate_missing(args)
        if args.command == "impute":
            return cmd_impute(args, model_keys)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "experiment":
            return cmd_experiment(args)
        if args.command == "grad-check":
            return cmd_grad_check(args)
        return cmd_synth(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (IvgaeError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"ivgae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
