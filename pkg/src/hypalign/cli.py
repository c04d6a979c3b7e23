"""Command-line entry point.

Exit status: 0 on success, 1 on invalid input (flags, config, data files),
2 when a computation fails (failed checks, divergence, attack errors).
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

import torch

from hypalign import checks, margin
from hypalign.adversary import AttackError, PerturbationSpec, generate_hierarchical_adversaries
from hypalign.dataio import (
    LabeledFeature,
    RunConfig,
    atomic_write_text,
    config_from_mapping,
    features_to_csv_text,
    generate_synthetic,
    load_config,
    load_features_csv,
    metrics_to_csv_text,
    stack,
)
from hypalign.gradengine import NonFiniteError
from hypalign.hierarchy import HierarchyForest, load_forest
from hypalign.model import load_checkpoint, save_checkpoint
from hypalign.trainer import TrainingDiverged, evaluate, train, transfer_attack_eval


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def reference_forest_path() -> Path:
    return Path(str(files("hypalign") / "data" / "reference_2_4_8.tsv"))


def resolve_forest(cfg: RunConfig) -> HierarchyForest:
    return load_forest(cfg.forest or reference_forest_path())


def _set_threads() -> None:
    raw = os.environ.get("HYPALIGN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HYPALIGN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("HYPALIGN_THREADS must be >= 1")
    torch.set_num_threads(n)


# -- argument groups --------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="training/attack seed")
    p.add_argument("--forest", help="hierarchy file (default: bundled 2-4-8 reference tree)")
    p.add_argument("--out-dir", default=".", help="directory receiving every output")


def _add_attack_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--eps-x", type=float)
    p.add_argument("--alpha-x", type=float)


def _effective_config(args, **overrides) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    cfg = config_from_mapping(values, cfg)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "forest", None):
        overrides["forest"] = args.forest
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def _out(args, name: str) -> Path:
    return Path(args.out_dir) / name


def _echo_config(args, cfg: RunConfig) -> None:
    atomic_write_text(_out(args, "config.cfg"), cfg.to_text())


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _data(args, cfg: RunConfig, forest: HierarchyForest, split: int):
    path = getattr(args, "data", None)
    if path:
        records = load_features_csv(path, forest.leaves)
        if records and len(records[0].features) != cfg.feature_dim:
            raise ValueError(f"{path}: features have {len(records[0].features)} columns, model expects {cfg.feature_dim}")
    else:
        n = cfg.samples_per_leaf if split == 0 else cfg.test_samples_per_leaf
        records = generate_synthetic(forest, n, cfg.feature_dim, cfg.level_spread, cfg.leaf_noise, cfg.data_seed, split)
    if not records:
        raise ValueError("no data records")
    return stack(records, forest)


# -- subcommands -----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = checks.gradient_checks(args.cases, args.seed, tolerance=args.tolerance)
    return _report_checks(args, results, "gradcheck.csv")


def cmd_geom_test(args) -> int:
    results = checks.geometry_checks(args.cases, args.seed) + checks.hyp_avg_checks(args.cases, args.seed)
    return _report_checks(args, results, "geom_test.csv")


def _report_checks(args, results, name: str) -> int:
    rows = [(c.name, c.cases, c.max_error, c.tolerance, "pass" if c.passed else "fail") for c in results]
    atomic_write_text(_out(args, name), _rows_csv(("check", "cases", "max_error", "tolerance", "status"), rows))
    failed = [c.name for c in results if not c.passed]
    for c in results:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: max error {c.max_error:.3e} (tolerance {c.tolerance:.0e})")
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_margin_curve(args) -> int:
    if args.grid < 2:
        raise ValueError("--grid needs at least 2 points")
    grid = margin.default_grid(args.r, args.grid)
    path = Path(args.out_dir) / args.out
    margin.write_margin_curve(path, grid, args.beta_c, args.beta_cp, args.lam, args.r)
    print(f"wrote {len(grid)} rows to {path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    forest = resolve_forest(cfg)
    for split, name, n in ((0, "train.csv", cfg.samples_per_leaf), (1, "test.csv", cfg.test_samples_per_leaf)):
        records = generate_synthetic(forest, n, cfg.feature_dim, cfg.level_spread, cfg.leaf_noise, cfg.data_seed, split)
        atomic_write_text(_out(args, name), features_to_csv_text(records))
    _echo_config(args, cfg)
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args, epochs=args.epochs, strategy=args.strategy)
    forest = resolve_forest(cfg)
    x, y = _data(args, cfg, forest, 0)
    try:
        state = train(cfg, forest, x, y)
    except TrainingDiverged as exc:
        save_checkpoint(exc.state.model, cfg, _out(args, "checkpoint.last.json"))
        atomic_write_text(_out(args, "metrics.csv"), metrics_to_csv_text(exc.state.metrics))
        raise
    metrics = list(state.metrics)
    if args.evaluate:
        xt, yt = _data(argparse.Namespace(data=None), cfg, forest, 1)
        report = evaluate(state.model, xt, yt, PerturbationSpec.for_evaluation(cfg, cfg.seed))
        metrics += report.rows(state.epoch, "test")
    atomic_write_text(_out(args, "metrics.csv"), metrics_to_csv_text(metrics))
    save_checkpoint(state.model, cfg, _out(args, "checkpoint.json"))
    _echo_config(args, cfg)
    return 0


def _load(args):
    model, cfg = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return model, cfg


def cmd_attack(args) -> int:
    model, cfg = _load(args)
    changes = {
        "strategy": args.strategy,
        "pgd_steps_train": args.steps,
        "eps_x": args.eps_x,
        "alpha_x": args.alpha_x,
        "eps_t": args.eps_t,
        "alpha_t": args.alpha_t,
    }
    cfg = cfg.replace(**{k: v for k, v in changes.items() if v is not None})
    x, y = _data(args, cfg, model.forest, 1)
    xt, yt = torch.as_tensor(x), torch.as_tensor(y)
    adv = generate_hierarchical_adversaries(xt, yt, model, PerturbationSpec.for_training(cfg, cfg.seed), cfg)
    batches = adv if isinstance(adv, list) else [adv]
    out = Path(args.out_dir) / args.out
    labels = [model.forest.leaves[int(i)] for i in y]
    for level, batch in enumerate(batches):
        path = out if len(batches) == 1 else out.with_name(f"{out.stem}.level{level}{out.suffix}")
        records = [LabeledFeature(row, lab) for row, lab in zip(batch.x_adv.numpy(), labels)]
        atomic_write_text(path, features_to_csv_text(records))
        trace_rows = [(i, v) for i, v in enumerate(batch.trace)]
        atomic_write_text(path.with_name(path.stem + ".trace.csv"), _rows_csv(("step", "loss"), trace_rows))
    _echo_config(args, cfg)
    return 0


def _eval_spec(args, cfg: RunConfig) -> PerturbationSpec:
    spec = PerturbationSpec.for_evaluation(cfg, cfg.seed)
    changes = {"steps": args.steps, "eps_x": args.eps_x, "alpha_x": args.alpha_x}
    return replace(spec, **{k: v for k, v in changes.items() if v is not None})


def cmd_eval(args) -> int:
    model, cfg = _load(args)
    x, y = _data(args, cfg, model.forest, 1)
    report = evaluate(model, x, y, _eval_spec(args, cfg))
    atomic_write_text(_out(args, "eval.csv"), metrics_to_csv_text(report.rows(0, "test")))
    summary = [
        ("norm_ordering", report.norm_ordering),
        ("mean_image_norm", report.mean_image_norm),
        ("mean_leaf_text_norm", report.mean_leaf_text_norm),
    ]
    atomic_write_text(_out(args, "eval_summary.csv"), _rows_csv(("quantity", "value"), summary))
    for l, (c, r) in enumerate(zip(report.clean_acc, report.robust_acc)):
        print(f"level {l}: clean {c:.4f} robust {r:.4f}")
    _echo_config(args, cfg)
    return 0


def cmd_transfer_eval(args) -> int:
    model, cfg = _load(args)
    if model.forest[0].depth < 1:
        raise ValueError("transfer evaluation needs at least one superclass level")
    x, y = _data(args, cfg, model.forest, 1)
    matrix = transfer_attack_eval(model, x, y, _eval_spec(args, cfg))
    rows = [(a, e, float(matrix[a, e])) for a in range(matrix.shape[0]) for e in range(matrix.shape[1])]
    atomic_write_text(_out(args, "transfer.csv"), _rows_csv(("attack_level", "eval_level", "success_rate"), rows))
    _echo_config(args, cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypalign", description="Hierarchical robust alignment in the Poincare ball.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and loss")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("geom-test", help="geometry and averaging property checks")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_geom_test)

    p = sub.add_parser("margin-curve", help="hyperbolic vs Euclidean margin over feature norms")
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--beta-c", type=float, required=True)
    p.add_argument("--beta-cp", type=float, required=True)
    p.add_argument("--grid", type=int, default=400, help="number of log-spaced norms")
    p.add_argument("--out", default="margin_curve.csv")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_margin_curve)

    p = sub.add_parser("gen-data", help="write synthetic train/test feature CSVs")
    _add_config_args(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="adversarial training; writes metrics.csv and checkpoint.json")
    _add_config_args(p)
    p.add_argument("--data", help="training features CSV (default: generate from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--strategy", choices=("leaf-only", "per-level", "universal"))
    p.add_argument("--evaluate", action="store_true", help="append test-split accuracy rows to metrics.csv")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("attack", cmd_attack, "write hierarchical adversarial features"),
        ("eval", cmd_eval, "per-level clean and robust accuracy"),
        ("transfer-eval", cmd_transfer_eval, "attack-level by eval-level success matrix"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="features CSV (default: the config's synthetic test split)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=".")
        _add_attack_args(p)
        if name == "attack":
            p.add_argument("--strategy", choices=("leaf-only", "per-level", "universal"))
            p.add_argument("--eps-t", type=float)
            p.add_argument("--alpha-t", type=float)
            p.add_argument("--out", default="adversarial.csv")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_threads()
        Path(getattr(args, "out_dir", ".")).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (TrainingDiverged, AttackError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
