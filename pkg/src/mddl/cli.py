"""Command-line entry point: gen, train, eval and experiment subcommands.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
Setting ``MDDL_DETERMINISTIC=1`` forces single-threaded execution and
overrides ``--workers``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import evalkit, feedsim, trainer
from .collect import collect_random, collect_strategy
from .core import LoadError, merge_datasets, read_dataset, write_dataset
from .evalkit import Clustering, kmeans_states, od_metrics, realized_returns, reward_eval
from .experiment import (ALPHA2_GRID, BETA_GRID, Scale, run_sweep, run_table2, write_cells,
                         write_sweep, write_table2)
from .feedsim import EnvConfig, load_env_config, position_table
from .qfunc import QModel, TrainingError
from .trainer import VARIANTS, TrainConfig, train_variant, write_loss_trace
from .wer import wer_table

log = logging.getLogger("mddl")

DETERMINISTIC_ENV = "MDDL_DETERMINISTIC"
EVAL_COLUMNS = ["variant", "seed", "reward", "avg_od", "std_od"]

# input problems that the user can fix by changing flags or files
USAGE_ERRORS = (feedsim.ConfigError, feedsim.UsageError, trainer.ConfigError,
                trainer.UsageError, evalkit.ConfigError, evalkit.UsageError)


class CLIError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() not in ("", "0", "false", "no")


def _env_config(path: Optional[str]) -> EnvConfig:
    return load_env_config(path) if path else EnvConfig()


def _train_config(path: Optional[str], **overrides) -> TrainConfig:
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        data = data.get("train", data)
    cfg = TrainConfig.from_dict(data)
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"hidden sizes must be integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return sizes


def _seeds(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list, got {text!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    env = _env_config(args.config)
    if args.policy == "random":
        ds = collect_random(env, args.episodes, seed=args.seed,
                            first_episode_id=args.first_episode_id)
    else:
        base = QModel.load(args.base_model)
        ds = collect_strategy(env, base, args.episodes, epsilon=args.epsilon, seed=args.seed,
                              first_episode_id=args.first_episode_id)
    write_dataset(args.out, ds)
    log.info("wrote %d transitions (%d episodes) to %s", len(ds), ds.n_episodes, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data, _, _, _ = VARIANTS[args.variant]
    if data in ("random", "both") and not args.random_data:
        raise CLIError(f"variant {args.variant} needs --random-data")
    if data in ("strategy", "both") and not args.strategy_data:
        raise CLIError(f"variant {args.variant} needs --strategy-data")
    env = _env_config(args.config)
    cfg = _train_config(args.train_config, seed=args.seed, steps=args.steps,
                        alpha2=args.alpha2, beta=args.beta)
    d_r = read_dataset(args.random_data) if args.random_data else None
    d_m = read_dataset(args.strategy_data) if args.strategy_data else None
    model = QModel.for_env(env.state_dim, env.n_actions, args.hidden, seed=args.init_seed,
                           dtype=args.dtype)
    wtab = wer_table(position_table(env), env.K, env.T_max)
    model, trace = train_variant(args.variant, model, d_m, d_r, cfg, wtab)
    model.train_config = {**model.train_config, "variant": args.variant}
    model.save(args.out)
    if args.loss_trace:
        write_loss_trace(args.loss_trace, trace)
    log.info("trained %s for %d steps; final loss %.6g", args.variant, cfg.steps,
             trace[-1] if trace else float("nan"))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    env = _env_config(args.config)
    model = QModel.load(args.model)
    if model.input_dim != env.state_dim or model.n_actions != env.n_actions:
        raise CLIError(f"model maps {model.input_dim} features to {model.n_actions} actions "
                       f"but the world has {env.state_dim} and {env.n_actions}")
    reward = reward_eval(env, model, args.episodes, args.gamma, seed=args.seed)
    avg_od = std_od = float("nan")
    if args.data:
        datasets = [read_dataset(p) for p in args.data]
        merged = datasets[0]
        for other in datasets[1:]:
            merged = merge_datasets(merged, other)
        merged = realized_returns(merged, args.gamma)
        if args.clusters:
            clustering = Clustering.load(args.clusters)
        else:
            clustering = kmeans_states(merged, args.n_clusters, seed=args.seed)
        report = od_metrics(model, merged, clustering)
        avg_od, std_od = report.avg_od, report.std_od
        report.to_csv(args.types_report or f"{args.report}.types.csv")
    variant = (model.train_config or {}).get("variant", "")
    with open(args.report, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        w.writerow([variant, args.seed, repr(reward), repr(avg_od), repr(std_od)])
    log.info("reward=%.6g avg_od=%.6g std_od=%.6g", reward, avg_od, std_od)
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}", code=1)
    env = _env_config(args.config)
    cfg = _train_config(args.train_config, steps=args.steps)
    scale = Scale(random_episodes=args.random_episodes,
                  strategy_episodes=args.strategy_episodes,
                  steps=cfg.steps,
                  eval_episodes=args.eval_episodes,
                  od_episodes=args.od_episodes,
                  n_clusters=args.n_clusters,
                  epsilon=args.epsilon,
                  base_random_episodes=args.base_random_episodes,
                  hidden=args.hidden,
                  dtype=args.dtype)
    workers = 1 if deterministic_mode() else args.workers
    if args.name == "table2":
        results = run_table2(env, cfg, scale, args.seeds, out_dir=out, workers=workers)
        write_table2(out / "table2.csv", results)
    else:
        name = "alpha2" if args.name == "sweep_alpha2" else "beta"
        grid = ALPHA2_GRID if name == "alpha2" else BETA_GRID
        results = run_sweep(env, cfg, scale, args.seeds, name, grid, workers=workers)
        write_sweep(out / f"{args.name}.csv", name, results)
    write_cells(out / f"{args.name}_cells.csv", results)
    log.info("wrote %s results for %d seeds to %s", args.name, len(args.seeds), out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mddl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="collect a logged dataset")
    p.add_argument("--policy", choices=("random", "strategy"), required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--config", help="world config (JSON); defaults when omitted")
    p.add_argument("--base-model", help="logging model for --policy strategy")
    p.add_argument("--epsilon", type=float, default=0.05,
                   help="exploration rate of the strategy logger (default 0.05)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--first-episode-id", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one comparison variant")
    p.add_argument("--variant", choices=tuple(VARIANTS), required=True)
    p.add_argument("--random-data")
    p.add_argument("--strategy-data")
    p.add_argument("--config", help="world config (JSON)")
    p.add_argument("--train-config", help="training config (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="batch sampling seed")
    p.add_argument("--init-seed", type=int, default=0, help="parameter initialisation seed")
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha2", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--hidden", type=_hidden, default=(64, 64))
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--loss-trace", help="write the per-step loss as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="reward and overestimation metrics of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", help="world config (JSON)")
    p.add_argument("--data", nargs="*", default=[], help="logged datasets for OD metrics")
    p.add_argument("--clusters", help="saved clustering to reuse")
    p.add_argument("--n-clusters", type=int, default=10)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--report", required=True, help="metrics CSV path")
    p.add_argument("--types-report", help="per-type OD CSV (default: REPORT.types.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="five-variant comparison or a sensitivity sweep")
    p.add_argument("--name", choices=("table2", "sweep_alpha2", "sweep_beta"), required=True)
    p.add_argument("--config", help="world config (JSON)")
    p.add_argument("--train-config", help="training config (JSON)")
    p.add_argument("--seeds", type=_seeds, default=[1, 2, 3, 4, 5])
    p.add_argument("--out-dir", required=True)
    d = Scale()
    p.add_argument("--random-episodes", type=int, default=d.random_episodes)
    p.add_argument("--strategy-episodes", type=int, default=d.strategy_episodes)
    p.add_argument("--base-random-episodes", type=int, default=d.base_random_episodes,
                   help="separate random episodes behind the logging model (0 reuses D_r)")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--eval-episodes", type=int, default=d.eval_episodes)
    p.add_argument("--od-episodes", type=int, default=d.od_episodes)
    p.add_argument("--n-clusters", type=int, default=d.n_clusters)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--hidden", type=_hidden, default=d.hidden)
    p.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)
    p.add_argument("--workers", type=int, default=1,
                   help=f"parallel seeds; ignored when {DETERMINISTIC_ENV}=1")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "gen" and args.policy == "strategy" and not args.base_model:
        parser.error("--policy strategy requires --base-model")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"mddl {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except USAGE_ERRORS as exc:
        print(f"mddl {args.command}: {exc}", file=sys.stderr)
        return 2
    except (LoadError, TrainingError, OSError, FloatingPointError) as exc:
        print(f"mddl {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        # malformed config files and similar bad input
        print(f"mddl {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
