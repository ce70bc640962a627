"""Command-line entry point: ``mtadvlab <subcommand> [options]``.

Exit status is 0 on full success and 2 when any row-level error was
recorded (see ``errors.csv`` in the output directory).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from ..attacks import make_attack
from ..metrics import vulnerability_report
from ..model import MultiTaskModel
from .config import ConfigError, config_from_mapping, read_flat
from .svg import emit_outputs
from .sweep import (SweepTable, cell_seed, incremental_task_sweep, load_data, run_experiment,
                    surrogate_correlation, train_models)

EXIT_OK, EXIT_ROW_ERRORS = 0, 2


def _common(p):
    p.add_argument("--config", help="flat key=value or .json config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--eps", help="comma list of epsilons, fractions allowed (8/255)")
    p.add_argument("--steps", help="comma list of step counts")
    p.add_argument("--norm", choices=("l2", "linf"))
    p.add_argument("--tasks", help="comma separated task ids to model (order matters "
                                   "for 'incremental')")
    p.add_argument("--variant", choices=("fgsm", "pgd", "wgd", "apgd"))


def build_parser():
    parser = argparse.ArgumentParser(prog="mtadvlab",
                                     description="Adversarial vulnerability experiments "
                                                 "on multi-task models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train (or fetch from cache) every model of a config"),
                       ("attack", "attack the all-task model and write report and traces"),
                       ("sweep", "run the configured sweep and emit results"),
                       ("incremental", "enable tasks one by one and measure vulnerability")):
        _common(sub.add_parser(name, help=text))
    a = sub.add_parser("analyze", help="correlate a target sweep with a surrogate sweep")
    a.add_argument("--target", required=True, help="results.csv of the target sweep")
    a.add_argument("--surrogate", required=True, help="results.csv of the surrogate sweep")
    a.add_argument("--statistic", default="pearson", choices=("pearson", "kendall", "wilcoxon"))
    a.add_argument("--metric", help="metric of the target table (and surrogate by default)")
    a.add_argument("--surrogate-metric")
    a.add_argument("--filter", action="append", default=[], metavar="COL=VALUE",
                   help="keep only rows with COL == VALUE in both tables (repeatable)")
    e = sub.add_parser("emit", help="rewrite results.csv and charts from a results table")
    e.add_argument("--table", required=True)
    e.add_argument("--out", required=True)
    return parser


def config_from_args(args):
    flat = read_flat(args.config) if args.config else {}
    if args.seed is not None:
        flat["seed"] = args.seed
    if args.out:
        flat["output_dir"] = args.out
    if args.eps:
        flat["sweep.epsilon"] = args.eps
    if args.steps:
        flat["sweep.steps"] = args.steps
    if args.norm:
        flat.pop("sweep.norm", None)
        flat["attack.norm"] = args.norm
    if args.variant:
        flat["attack.variant"] = args.variant
    cfg = config_from_mapping(flat)
    if args.tasks:
        cfg = cfg.restrict_tasks([t.strip() for t in args.tasks.split(",") if t.strip()])
    return cfg


def _status(table):
    if table.errors:
        print(f"{len(table.errors)} row-level error(s); see errors.csv", file=sys.stderr)
        return EXIT_ROW_ERRORS
    return EXIT_OK


def _cmd_train(args):
    cfg = config_from_args(args)
    table = train_models(cfg)
    log = table.run_log
    print(f"models={len(log['models'])} trained="
          f"{sum(not m['cached'] for m in log['models'])} train_steps={log['train_steps']}")
    return _status(table)


def _cmd_sweep(args):
    cfg = config_from_args(args)
    table = run_experiment(cfg)
    for path in emit_outputs(table, cfg.output_dir):
        print(path)
    return _status(table)


def _cmd_incremental(args):
    cfg = config_from_args(args)
    order = cfg.model_tasks if args.tasks else None
    table = incremental_task_sweep(cfg, order)
    for path in emit_outputs(table, cfg.output_dir):
        print(path)
    return _status(table)


def _cmd_attack(args):
    cfg = config_from_args(args)
    # a single all-task model
    cfg = replace(cfg, sweep=replace(cfg.sweep, combinations="incremental", encoders=None,
                                     epochs=None))
    table = train_models(cfg)
    if table.errors:
        return _status(table)
    model = MultiTaskModel.load(os.path.join(cfg.output_dir, "cache",
                                             table.run_log["models"][0]["key"] + ".ckpt"))
    data = load_data(cfg)
    attacked = list(cfg.model_tasks or model.task_ids)
    eps_list = cfg.sweep.epsilon or (cfg.attack.epsilon,)
    steps_list = cfg.sweep.steps or (cfg.attack.steps,)
    errors = []
    for variant in cfg.attack.variants:
        for eps in eps_list:
            for steps in steps_list:
                tag = f"{variant}_eps{eps:.6g}_steps{steps}".replace("/", "_")
                seed = cell_seed(cfg.seed, ("attack", variant, eps, steps))
                atk = make_attack(variant, **cfg.attack.params(variant, eps, steps,
                                                               cfg.attack.norm, seed))
                try:
                    report = vulnerability_report(model, data.X_eval, data.Y_eval,
                                                  attacked, atk)
                except (FloatingPointError, ValueError) as exc:
                    print(f"{tag}: {type(exc).__name__}: {exc}", file=sys.stderr)
                    errors.append(exc)
                    continue
                report.to_csv(os.path.join(cfg.output_dir, f"report_{tag}.csv"))
                report.trace.to_csv(os.path.join(cfg.output_dir, f"trace_{tag}.csv"))
                print(f"{tag}: vulnerability={report.vulnerability!r}")
    return EXIT_ROW_ERRORS if errors else EXIT_OK


def _filtered(table, filters):
    conds = {}
    for f in filters:
        col, _, val = f.partition("=")
        conds[col] = val
    if not conds:
        return table
    probe = table.rows[0] if len(table) else None
    typed = {c: type(getattr(probe, c))(v) if probe is not None else v
             for c, v in conds.items()}
    return table.filter(**typed)


def _cmd_analyze(args):
    target = _filtered(SweepTable.from_csv(args.target), args.filter)
    surrogate = _filtered(SweepTable.from_csv(args.surrogate), args.filter)
    res = surrogate_correlation(target, surrogate, args.statistic, args.metric,
                                args.surrogate_metric)
    print(f"statistic={args.statistic} value={res.statistic!r} p_value={res.p_value!r} "
          f"n={res.n} method={res.method}")
    return EXIT_OK


def _cmd_emit(args):
    for path in emit_outputs(SweepTable.from_csv(args.table), args.out):
        print(path)
    return EXIT_OK


_COMMANDS = {"train": _cmd_train, "attack": _cmd_attack, "sweep": _cmd_sweep,
             "incremental": _cmd_incremental, "analyze": _cmd_analyze, "emit": _cmd_emit}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"mtadvlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
