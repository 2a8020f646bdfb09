"""Command-line entry point.

Every subcommand writes only below ``--out`` (default: ``$WHATHOW_OUT`` or
``./runs``), echoes the resolved configuration there as ``config.json``,
prints progress on stdout and reports failures as a single
``error: <category>: <message>`` line on stderr. Exit codes: 0 success,
1 runtime failure, 2 bad arguments or configuration.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness as hz
from . import taskgen as tg
from .contextrnn import RNNError, load_checkpoint
from .taskmodel import TaskModelError

OUT_ENV = "WHATHOW_OUT"
EXPERIMENTS = ("continual", "transfer-fwd", "transfer-bwd", "compgen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        sys.exit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file overriding preset values")
    p.add_argument("--preset", choices=sorted(hz.PRESETS), default=None, help="scale preset (default: desk)")
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default: 0)")
    p.add_argument("--threads", type=int, default=None, help="cap on numerical library threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="whathow", description="Context inference plus context-gated RNNs for "
                                                 "continual learning of compositional tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="sample trials and write them as columnar dumps")
    _common(p)
    p.add_argument("--task", required=True, choices=tg.TASK_NAMES, help="task to sample")
    p.add_argument("--n", type=int, default=10, help="number of trials (default: 10)")

    p = sub.add_parser("train-what", help="train the task model alone and log its likelihood")
    _common(p)
    p.add_argument("--order", nargs="+", choices=tg.TASK_NAMES, help="task order (default: config task_order)")

    p = sub.add_parser("train-full", help="sequential training of one learner, saving checkpoints")
    _common(p)
    p.add_argument("--learner", choices=hz.LEARNERS, default="context", help="learner (default: context)")
    p.add_argument("--order", nargs="+", choices=tg.TASK_NAMES, help="task order (default: config task_order)")

    p = sub.add_parser("eval", help="evaluate checkpoints written by train-full")
    _common(p)
    p.add_argument("--checkpoint-dir", type=Path, required=True, help="directory holding the checkpoints")

    p = sub.add_parser("experiment", help="run one of the experiments with metrics and plots")
    _common(p)
    p.add_argument("name", choices=EXPERIMENTS, help="experiment")
    p.add_argument("--learners", nargs="+", choices=hz.LEARNERS, default=None,
                   help="learners for continual (default: all) or transfer-bwd (default: context owp)")

    p = sub.add_parser("plot", help="emit plots from a metrics log")
    _common(p)
    p.add_argument("--metrics", type=Path, required=True, help="metrics log to plot")
    p.add_argument("--figures", nargs="+", choices=("continual", "what_ll", "transfer", "compgen"),
                   help="figures to draw (default: all available)")

    p = sub.add_parser("inspect-checkpoint", help="print a summary of a checkpoint file")
    p.add_argument("path", type=Path, help="checkpoint file")
    return parser


def _resolve_config(args) -> hz.ExperimentConfig:
    if args.config is not None:
        return hz.load_config(args.config, args.preset)
    return hz.make_config(args.preset or "desk")


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, args, cfg: hz.ExperimentConfig | None) -> None:
    rec = {"command": args.command, "seed": args.seed,
           "args": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()}}
    if cfg is not None:
        rec["config"] = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(rec, indent=1, sort_keys=True, default=list) + "\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen(args, cfg, out):
    if args.n < 1:
        raise UsageError("--n must be positive")
    gen = cfg.gen_config()
    suite = tg.full_suite(gen)
    tg.save_suite(suite, out / "suite.json")
    c = tg.TASK_ID[args.task]
    for i in range(args.n):
        tr = tg.sample_trial(suite, c, gen, tg.trial_rng(args.seed, hz.TRAIN_STREAM, c, i))
        tg.dump_trial(tr, out / f"{args.task}_{i:04d}.tsv")
    _say(f"wrote {args.n} trials of {args.task} to {out}")


def cmd_train_what(args, cfg, out):
    log, tm = hz.run_what(cfg, args.seed, args.order, progress=_say)
    log.save(out / "metrics.tsv")
    tm.save(out / "taskmodel.npz")
    hz.emit_plots(log, out / "plots")


def cmd_train_full(args, cfg, out):
    order = tuple(args.order or cfg.task_order)
    r = hz.run_sequence(cfg, args.learner, args.seed, order, f"{args.learner}-s{args.seed}", progress=_say)
    r.log.save(out / "metrics.tsv")
    hz.save_agent(r.agent, out)
    hz.emit_plots(r.log, out / "plots")
    _say("final performance: " + " ".join(f"{k}={v:.3f}" for k, v in r.final_perf.items()))


def cmd_eval(args, cfg, out):
    agent = hz.load_agent(args.checkpoint_dir, cfg, args.seed)
    log = hz.evaluate_agent(agent, cfg, args.seed)
    if len(log) == 0:
        raise hz.ConfigError("checkpoint has no trained task to evaluate")
    log.save(out / "metrics.tsv")
    for r in log:
        _say(f"{r.eval_task}: loss={r.test_loss:.4f} performance={r.performance:.3f}")


def cmd_experiment(args, cfg, out):
    seeds = (args.seed,)
    if args.name == "continual":
        log, results = hz.run_continual(cfg, args.learners or hz.LEARNERS, seeds=seeds, progress=_say)
        summary = [{"run_id": r.run_id, "final_perf": r.final_perf, "isolation": r.isolation} for r in results]
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    elif args.name == "transfer-fwd":
        log = hz.run_transfer_forward(cfg, seeds=seeds, progress=_say)
    elif args.name == "transfer-bwd":
        log = hz.run_transfer_backward(cfg, learners=args.learners or ("context", "owp"), seeds=seeds,
                                       progress=_say)
    else:
        res = hz.run_compgen(cfg, args.seed, progress=_say)
        log = res.log
        summary = {"context": res.context_curve, "baselines": res.baseline_curves,
                   "bank_unchanged": res.bank_checksum_before == res.bank_checksum_after}
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.save(out / "metrics.tsv")
    hz.emit_plots(log, out / "plots")


def cmd_plot(args, cfg, out):
    log = hz.MetricsLog.load(args.metrics)
    for p in hz.emit_plots(log, out, args.figures):
        _say(f"wrote {p}")


def cmd_inspect(args):
    path = args.path
    try:
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            shapes = {k: list(f[k].shape) for k in f.files if k != "meta"}
    except (OSError, KeyError, ValueError) as err:
        raise RNNError(f"{path}: unreadable checkpoint ({err})") from None
    if meta.get("format") == "whathow.bank":
        load_checkpoint(path)
    print(json.dumps({"meta": meta, "arrays": shapes}, indent=1, sort_keys=True))


COMMANDS = {"gen": cmd_gen, "train-what": cmd_train_what, "train-full": cmd_train_full, "eval": cmd_eval,
            "experiment": cmd_experiment, "plot": cmd_plot}


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            cmd_inspect(args)
            return 0
        cfg = _resolve_config(args)
        out = _out_dir(args)
        _echo_config(out, args, cfg)
        run = COMMANDS[args.command]
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                run(args, cfg, out)
        else:
            run(args, cfg, out)
    except (hz.ConfigError, UsageError) as err:
        print(f"error: config: {err}", file=sys.stderr)
        return 2
    except (RNNError, TaskModelError, tg.TaskGenError, hz.PlotError, FloatingPointError, ValueError, OSError) as err:
        print(f"error: runtime: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
