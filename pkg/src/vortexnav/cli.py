"""Command-line entry point: train, eval, compare, render, inspect-checkpoint.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .agents import load_planner, train
from .config import RunConfig
from .env import Environment
from .evaluation import RUNTIME_COLUMNS, SUMMARY_COLUMNS, evaluate_suite, read_episode_csv, write_rows
from .nn import read_checkpoint

log = logging.getLogger("vortexnav")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    try:
        return RunConfig.load(args.config) if args.config else RunConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    return out


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args)
    try:
        cfg = cfg.with_train(total_steps=args.steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    handler = logging.FileHandler(out / "train.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("vortexnav").addHandler(handler)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    try:
        trainer = train(args.agent, cfg.train, args.seed, out, resume=args.resume)
    finally:
        logging.getLogger("vortexnav").removeHandler(handler)
        handler.close()
    if trainer.eval_rows:
        from .plotting import plot_learning_curve

        plot_learning_curve(trainer.eval_rows, out / "learning_curve.svg")
    print(f"trained {args.agent} for {trainer.step} steps ({trainer.episodes} episodes); "
          f"{len(trainer.checkpoints)} checkpoints in {out / 'checkpoints'}")
    return 0


def _planner(spec: str, checkpoint, cfg: RunConfig):
    try:
        planner = load_planner(spec, checkpoint, k=cfg.eval.k)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    # classical planners act on the configured robot limits and control step
    if hasattr(planner, "dt"):
        planner.dt = cfg.eval.dt
    if spec == "ba":
        planner.params = replace(planner.params, v_max=cfg.env.v_max)
    return planner


def _print_table(rows: list[list[str]]) -> None:
    print(f"{'agent':<14}{'success':>9}{'oob':>8}{'time (s)':>10}{'energy':>9}")
    for r in rows:
        t, e = float(r[8]), float(r[9])
        print(f"{r[0]:<14}{float(r[3]):>9.2f}{float(r[4]):>8.2f}"
              f"{'-' if math.isnan(t) else f'{t:.2f}':>10}{'-' if math.isnan(e) else f'{e:.2f}':>9}")


def _print_runtime(rows: list[list[str]]) -> None:
    print(f"{'agent':<14}{'mean (ms)':>11}{'max (ms)':>10}")
    for r in rows:
        print(f"{r[0]:<14}{float(r[1]):>11.3f}{float(r[2]):>10.3f}")


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args).with_eval(case=args.case, n=args.n, seed=args.seed)
    planner = _planner(args.planner, args.checkpoint, cfg)
    result = evaluate_suite(planner, cfg.eval.case, cfg.eval.n, cfg.eval.seed, cfg.eval.dt, cfg.env)
    result.write(out, episodes=not args.no_episodes)
    _print_table([result.summary_row()])
    print()
    _print_runtime([result.runtime_row()])
    if args.figures:
        from .plotting import render_trajectory

        for i in range(min(args.figures, len(result.records))):
            rows = [dict(zip(("t", "x", "y"), (t, *p))) for t, p in zip(result.records[i].times,
                                                                        result.records[i].positions)]
            render_trajectory(result.environments[i], rows, out / f"episode_{i:04d}.svg",
                              title=f"{planner.name}: {result.records[i].outcome}", dt=cfg.eval.dt)
    return 0


def cmd_compare(args) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args).with_eval(case=args.case, n=args.n, seed=args.seed)
    summary, runtime = [], []
    for spec in args.planners.split(","):
        ckpt = args.iqn_checkpoint if spec.startswith("iqn") else args.dqn_checkpoint if spec == "dqn" else None
        planner = _planner(spec, ckpt, cfg)
        result = evaluate_suite(planner, cfg.eval.case, cfg.eval.n, cfg.eval.seed, cfg.eval.dt, cfg.env)
        summary.append(result.summary_row())
        runtime.append(result.runtime_row())
    write_rows(out / "table.csv", SUMMARY_COLUMNS, summary)
    write_rows(out / "runtime.csv", RUNTIME_COLUMNS, runtime)
    from .plotting import plot_suite_outcomes

    plot_suite_outcomes(summary, out / "outcomes.svg")
    _print_table(summary)
    print()
    _print_runtime(runtime)
    return 0


def cmd_render(args) -> int:
    from .plotting import RenderError, render_trajectory

    try:
        env = Environment.load(args.snapshot)
        rows = read_episode_csv(args.episode) if args.episode else []
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        render_trajectory(env, rows, args.out, title=args.title)
    except RenderError as exc:
        raise UsageError(str(exc)) from exc
    return 0


def cmd_inspect(args) -> int:
    try:
        doc = read_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    n_params = 0
    for key in ("kind", "seed", "step", "dtype"):
        print(f"{key}: {doc.get(key)}")
    print("layers:")
    for layer in doc["layers"]:
        n = len(layer["weight"]) + len(layer["bias"])
        n_params += n
        print(f"  {layer['name']:<10}{layer['shape'][0]:>5} -> {layer['shape'][1]:<5}{layer['activation']:<10}{n:>8}")
    print(f"parameters: {n_params}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortexnav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an IQN or DQN agent")
    t.add_argument("--agent", choices=("iqn", "dqn"), required=True)
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--out", default=".", help="existing output directory")
    t.add_argument("--resume", action="store_true", help="continue from the saved training state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one planner on a test-case suite")
    e.add_argument("--planner", required=True, help="apf, ba, dqn, iqn:<phi> or iqn:adaptive")
    e.add_argument("--checkpoint", help="checkpoint for iqn/dqn planners")
    e.add_argument("--config")
    e.add_argument("--case", type=int, choices=(1, 2))
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", default=".")
    e.add_argument("--no-episodes", action="store_true", help="skip per-episode CSV and snapshot files")
    e.add_argument("--figures", type=int, default=0, help="render the first N episodes as SVG")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="evaluate several planners on the same suite")
    c.add_argument("--planners", default="iqn:adaptive,iqn:0.25,iqn:0.5,iqn:0.75,iqn:1.0,dqn,apf,ba")
    c.add_argument("--iqn-checkpoint")
    c.add_argument("--dqn-checkpoint")
    c.add_argument("--config")
    c.add_argument("--case", type=int, choices=(1, 2))
    c.add_argument("--n", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("render", help="render an episode over its environment as SVG")
    r.add_argument("--snapshot", required=True, help="environment snapshot JSON")
    r.add_argument("--episode", help="per-step episode CSV (omit to draw the environment only)")
    r.add_argument("--out", required=True, help="output SVG path")
    r.add_argument("--title")
    r.set_defaults(func=cmd_render)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata and layer sizes")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    logging.getLogger("vortexnav").setLevel(logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vortexnav: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"vortexnav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
