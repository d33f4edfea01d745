"""Command-line entry point: ``dxtk <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import config as cfgmod
from . import homotopy_gen as hg
from . import io
from . import synth
from .evalkit import EvalError, eval_row, median_summary, rows_to_csv, fmt
from .flywheel import FlywheelError, Pipeline, holdout_split, run_flywheel
from .learner import controller_rollouts, demo_threshold_for, load_policy, save_policy, train_controller
from .miner import (DemoStore, MiningError, curate_demos, mine_parents, save_paths, track_single,
                    load_paths)
from .parallel import default_workers, derive_seed, run_jobs
from .retarget import RetargetError, retarget_trajectory
from .types import TaskError, embed_task, load_tasks, save_tasks

log = logging.getLogger("dxtk")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
SCALING_FRACTIONS = (0.1, 0.3, 0.5, 0.9, 1.0)
DATA_ERRORS = (TaskError, RetargetError, io.CheckpointError, EvalError, MiningError, FlywheelError,
               hg.GeneratorError, FileNotFoundError, json.JSONDecodeError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _global_options(p, default) -> None:
    # ``default`` is SUPPRESS on subcommands so they do not overwrite values given before the name
    store_true = dict(action="store_true") if default is None else dict(action="store_true", default=default)
    p.add_argument("--config", default=default, help="INI-style config file")
    p.add_argument("--seed", type=int, default=default, help="overrides [flywheel] seed")
    p.add_argument("--serial", help="single process, single thread (deterministic)", **store_true)
    p.add_argument("--workers", type=int, default=default, help="worker processes (default: logical cores)")
    p.add_argument("-v", "--verbose", **store_true)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dxtk", description="Planar dexterous tracking: data, mining, training, evaluation.")
    _global_options(p, None)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    # global options are also accepted after the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, argparse.SUPPRESS)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    g = add("gen-library", "generate a synthetic task library")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("-o", "--output", required=True)

    r = add("retarget", "retarget a (F, 6, 2) keypoint sequence to hand DoF")
    r.add_argument("input", help=".npy or JSON keypoint sequence")
    r.add_argument("-o", "--output", required=True, help="JSON list of 7-DoF frames")

    t = add("track-one", "train a single-trajectory tracker")
    t.add_argument("task_id")
    t.add_argument("--library", required=True)
    t.add_argument("--budget", type=int, help="env steps (default [flywheel] per_traj_budget)")
    t.add_argument("-o", "--output", required=True, help="output directory")

    m = add("mine", "track a library directly, then search effective parents")
    m.add_argument("--library", required=True)
    m.add_argument("--budget", type=int)
    m.add_argument("--threshold", type=float, help="demo reward threshold")
    m.add_argument("-o", "--output", required=True, help="output directory (demos/, paths.jsonl)")

    tg = add("train-generator", "train the parent-proposal generator")
    tg.add_argument("--library", required=True)
    tg.add_argument("--paths", help="mined paths (JSON lines); without it only the unconditional stage runs")
    tg.add_argument("--epochs", type=int, help="default [flywheel] generator_epochs")
    tg.add_argument("-o", "--output", required=True)

    tc = add("train-controller", "train the generalisable controller")
    tc.add_argument("--library", required=True)
    tc.add_argument("--demos", help="demo store directory")
    tc.add_argument("--budget", type=int, help="default [flywheel] controller_budget")
    tc.add_argument("--threshold", type=float)
    tc.add_argument("-o", "--output", required=True)

    f = add("flywheel", "three-stage mining and training loop")
    f.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    f.add_argument("--library", help="task library (default: generated)")
    f.add_argument("--run-dir", help="default [paths] run_dir or $" + cfgmod.RUN_DIR_ENV)
    f.add_argument("--resume", action="store_true")

    e = add("eval", "metrics CSV for rollouts or a controller")
    e.add_argument("--library", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--controller")
    src.add_argument("--rollouts", help="JSON lines with task_id and achieved states")
    e.add_argument("-o", "--output", required=True)

    s = add("scaling-curve", "held-out success against the fraction of demos used")
    s.add_argument("--library", required=True)
    s.add_argument("--demos", required=True)
    s.add_argument("--fractions", default=",".join(str(x) for x in SCALING_FRACTIONS))
    s.add_argument("--budget", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("-o", "--output", required=True)
    return p


# helpers


def _pipeline(cfg: cfgmod.RunConfig, workers: int) -> Pipeline:
    return Pipeline(cfg.ppo, cfg.tracker, cfg.sim, cfg.reward, cfg.eval, workers)


def _library(path):
    tasks = load_tasks(path)
    if not tasks:
        raise TaskError(f"{path}: empty library")
    return tasks


def _threshold(args, tasks, cfg):
    if getattr(args, "threshold", None) is not None:
        return args.threshold
    if cfg.flywheel.demo_threshold is not None:
        return cfg.flywheel.demo_threshold
    return demo_threshold_for(int(np.median([t.n_steps for t in tasks])), cfg.reward)


def _default_library(cfg):
    return synth.gen_library(cfg.flywheel.library_size, cfg.seed, synth.default_families(),
                             synth.default_geometries(), cfg.sim)


def _read_keypoints(path):
    if str(path).endswith(".npy"):
        return np.load(path)
    return np.asarray(io.read_json(path), dtype=float)


def _write_csv(path, header, rows):
    text = ",".join(header) + "\n" + "".join(",".join(fmt(v) for v in r) + "\n" for r in rows)
    io.atomic_write_text(path, text)


# commands


def cmd_gen_library(args, cfg, pipe):
    tasks = synth.gen_library(args.count, cfg.seed, synth.default_families(), synth.default_geometries(), cfg.sim)
    save_tasks(args.output, tasks)
    print(f"wrote {len(tasks)} tasks to {args.output}")


def cmd_retarget(args, cfg, pipe):
    dof = retarget_trajectory(_read_keypoints(args.input), cfg.sim)
    io.write_json(args.output, dof.tolist())
    print(f"retargeted {len(dof)} frames")


def cmd_track_one(args, cfg, pipe):
    tasks = {t.id: t for t in _library(args.library)}
    if args.task_id not in tasks:
        raise TaskError(f"unknown task id {args.task_id!r}")
    task = tasks[args.task_id]
    budget = cfg.flywheel.per_traj_budget if args.budget is None else args.budget
    res = track_single(task, task.hand, budget, cfg.seed, cfg.tracker, cfg.sim, cfg.reward)
    os.makedirs(args.output, exist_ok=True)
    DemoStore({task.id: res.rollout}).save(args.output)
    print(f"{task.id}: tracking error {res.error:.6g}, episode reward {res.rollout.episode_reward:.6g}")


def _direct_job(task, budget, seed, tcfg, params, weights):
    return track_single(task, task.hand, budget, seed, tcfg, params, weights)


def cmd_mine(args, cfg, pipe):
    tasks = _library(args.library)
    budget = cfg.flywheel.per_traj_budget if args.budget is None else args.budget
    jobs = [(t, budget, derive_seed(cfg.seed, "track", t.id), cfg.tracker, cfg.sim, cfg.reward) for t in tasks]
    direct = dict(zip([t.id for t in tasks], run_jobs(_direct_job, jobs, pipe.workers)))
    rep = mine_parents(tasks, direct, cfg.flywheel.k_nei, cfg.flywheel.k_max, budget,
                       derive_seed(cfg.seed, "mine"), cfg.tracker, pipe.workers, cfg.sim, cfg.reward)
    os.makedirs(args.output, exist_ok=True)
    store = curate_demos(rep.results.values(), _threshold(args, tasks, cfg))
    store.save(os.path.join(args.output, "demos"))
    save_paths(os.path.join(args.output, "paths.jsonl"), rep.paths)
    io.write_jsonl(os.path.join(args.output, "mining_log.jsonl"), rep.log)
    print(f"{len(store)} demos, {len(rep.paths)} paths, {sum(map(len, rep.parents.values()))} effective parents")


def cmd_train_generator(args, cfg, pipe):
    tasks = _library(args.library)
    by_id = {t.id: t for t in tasks}
    epochs = cfg.flywheel.generator_epochs if args.epochs is None else args.epochs
    emb = np.stack([embed_task(t) for t in tasks])
    model = hg.train_unconditional(emb, epochs, cfg.seed)
    pairs = []
    if args.paths:
        for p in load_paths(args.paths):
            for parent, child in zip(p.chain[:-1], p.chain[1:]):
                if parent in by_id and child in by_id:
                    pairs.append((embed_task(by_id[child]), embed_task(by_id[parent])))
    if pairs:
        model = hg.finetune_conditional(model, pairs, cfg.flywheel.generator_finetune_epochs, cfg.seed + 1)
    hg.save_generator(args.output, model)
    print(f"generator trained on {len(tasks)} tasks and {len(pairs)} pairs")


def cmd_train_controller(args, cfg, pipe):
    tasks = _library(args.library)
    demos = DemoStore.load(args.demos) if args.demos else DemoStore()
    budget = cfg.flywheel.controller_budget if args.budget is None else args.budget
    res = train_controller(tasks, demos, cfg.ppo, budget, cfg.seed, _threshold(args, tasks, cfg), cfg.sim, cfg.reward)
    save_policy(args.output, res.policy, cfg.ppo, {"steps": res.steps})
    print(f"controller trained for {res.steps} steps")


def cmd_flywheel(args, cfg, pipe):
    if args.preset:
        cfg = cfgmod.with_preset(cfg, args.preset)
        pipe = _pipeline(cfg, pipe.workers)
    cfg = cfgmod.apply_env(cfg)
    run_dir = args.run_dir or cfg.paths.run_dir
    library_path = args.library or cfg.paths.library
    library = _library(library_path) if library_path else _default_library(cfg)
    os.makedirs(run_dir, exist_ok=True)
    io.atomic_write_text(os.path.join(run_dir, "config.snapshot"), cfgmod.to_text(cfg))
    save_tasks(os.path.join(run_dir, "library.jsonl"), library)
    res = run_flywheel(library, cfg.flywheel, pipe, run_dir, resume=args.resume)
    shutil.copy2(os.path.join(run_dir, "stage3", "eval.csv"), os.path.join(run_dir, "eval.csv"))
    io.write_json(os.path.join(run_dir, "reports.json"), res.reports)
    for rep in res.reports:
        print(f"stage {rep['stage']}: held-out success loose {fmt(rep.get('success_loose', float('nan')))}"
              f" tight {fmt(rep.get('success_tight', float('nan')))}")


def cmd_eval(args, cfg, pipe):
    tasks = {t.id: t for t in _library(args.library)}
    if args.controller:
        policy, pcfg, _ = load_policy(args.controller)
        order = list(tasks.values())
        demos = controller_rollouts(policy, pcfg, order, cfg.sim, cfg.reward)
        pairs = [(t, d.achieved) for t, d in zip(order, demos)]
    else:
        pairs = []
        for rec in io.read_jsonl(args.rollouts):
            if rec["task_id"] not in tasks:
                raise TaskError(f"rollout for unknown task {rec['task_id']!r}")
            pairs.append((tasks[rec["task_id"]], np.asarray(rec["achieved"], dtype=float)))
    rows = [eval_row(t, a, cfg.eval) for t, a in pairs]
    io.atomic_write_text(args.output, rows_to_csv(rows))
    summ = median_summary(rows)
    print(f"{summ['count']} rollouts, success loose {fmt(summ.get('success_loose', 0.0))}")


def scaling_curve(tasks, demos, fractions, cfg, budget, threshold, seed):
    """Held-out success of controllers trained with growing random subsets of the demos."""
    train_ids, held = holdout_split(tasks, cfg.flywheel.holdout_fraction)
    by_id = {t.id: t for t in tasks}
    train_tasks = [by_id[i] for i in train_ids]
    held_tasks = [by_id[i] for i in held]
    eligible = sorted(i for i in demos if i in set(train_ids))
    order = list(np.random.default_rng(derive_seed(seed, "scaling")).permutation(eligible))
    rows = []
    for frac in fractions:
        keep = order[: int(round(frac * len(order)))]
        subset = DemoStore({i: demos[i] for i in keep})
        res = train_controller(train_tasks, subset, cfg.ppo, budget, seed, threshold, cfg.sim, cfg.reward)
        ev = controller_rollouts(res.policy, cfg.ppo, held_tasks, cfg.sim, cfg.reward)
        summ = median_summary([eval_row(t, d.achieved, cfg.eval) for t, d in zip(held_tasks, ev)])
        rows.append((frac, len(keep), summ.get("success_loose", float("nan")),
                     summ.get("success_tight", float("nan")), summ.get("tracking_error", float("nan"))))
    return rows


def cmd_scaling_curve(args, cfg, pipe):
    tasks = _library(args.library)
    try:
        fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    except ValueError as exc:
        raise cfgmod.ConfigError(f"bad --fractions: {exc}") from exc
    if not fractions or any(not 0.0 <= f <= 1.0 for f in fractions):
        raise cfgmod.ConfigError("fractions must lie in [0, 1]")
    budget = cfg.flywheel.controller_budget if args.budget is None else args.budget
    rows = scaling_curve(tasks, DemoStore.load(args.demos), fractions, cfg, budget,
                         _threshold(args, tasks, cfg), cfg.seed)
    _write_csv(args.output, ("fraction", "demos", "success_loose", "success_tight", "median_tracking_error"), rows)
    for r in rows:
        print(f"fraction {fmt(r[0])}: success loose {fmt(r[2])}")


COMMANDS = {
    "gen-library": cmd_gen_library,
    "retarget": cmd_retarget,
    "track-one": cmd_track_one,
    "mine": cmd_mine,
    "train-generator": cmd_train_generator,
    "train-controller": cmd_train_controller,
    "flywheel": cmd_flywheel,
    "eval": cmd_eval,
    "scaling-curve": cmd_scaling_curve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.serial:
        import torch

        torch.set_num_threads(1)
        workers = 1
    else:
        workers = default_workers() if args.workers is None else args.workers
        if workers < 1:
            print("config error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg, _pipeline(cfg, workers))
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
