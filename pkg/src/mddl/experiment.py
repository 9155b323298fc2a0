"""Five-variant comparison and hyperparameter sweeps over the full pipeline."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .collect import collect_random, collect_strategy, train_base_model
from .core import Dataset, merge_datasets
from .evalkit import Clustering, ODReport, kmeans_states, od_metrics, realized_returns, reward_eval
from .feedsim import EnvConfig, position_table
from .qfunc import QModel
from .trainer import VARIANT_LABELS, TrainConfig, train_variant
from .wer import wer_table

log = logging.getLogger(__name__)

VARIANT_ORDER = ("random_rl", "strategy_rl", "strategy_il", "mixed_rl", "mddl")
ALPHA2_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)
BETA_GRID = (0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class Scale:
    random_episodes: int = 2000
    strategy_episodes: int = 20000
    steps: int = 20000
    eval_episodes: int = 2000
    od_episodes: int = 2000       # held-out logged episodes per source for OD metrics
    n_clusters: int = 10
    epsilon: float = 0.05
    # random episodes behind the logging policy; 0 reuses the training random set
    base_random_episodes: int = 2000
    hidden: tuple[int, ...] = (64, 64)
    dtype: str = "float32"


def derive_seed(seed: int, tag: str) -> int:
    words = [seed] + [ord(c) for c in tag]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class SeedData:
    """Everything the variants of one seed share."""
    seed: int
    d_r: Dataset
    d_m: Dataset
    base: QModel
    eval_data: Dataset
    clustering: Clustering


@dataclass(frozen=True)
class CellResult:
    variant: str
    seed: int
    reward: float
    avg_od: float
    std_od: float
    label: str = ""
    param: Optional[float] = None


def prepare_seed(env: EnvConfig, train_cfg: TrainConfig, scale: Scale, seed: int) -> SeedData:
    table = position_table(env)
    t0 = time.perf_counter()
    d_r = collect_random(env, scale.random_episodes, seed=derive_seed(seed, "random"))
    base_cfg = train_cfg.replace(seed=derive_seed(seed, "base"), alpha1=1.0, alpha2=0.0,
                                 steps=scale.steps)
    base = QModel.for_env(env.state_dim, env.n_actions, scale.hidden,
                          seed=derive_seed(seed, "base-init"), dtype=scale.dtype)
    n_r = scale.random_episodes
    d_base = d_r
    if scale.base_random_episodes:
        # the logging policy was fit on an earlier, separate random window
        d_base = collect_random(env, scale.base_random_episodes,
                                seed=derive_seed(seed, "random-base"), first_episode_id=10**9)
    base = train_base_model(d_base, base_cfg, table, model=base, T_max=env.T_max)
    d_m = collect_strategy(env, base, scale.strategy_episodes, scale.epsilon,
                           seed=derive_seed(seed, "strategy"), first_episode_id=n_r)
    # held-out logs from both policies, as in a later test window
    first = n_r + scale.strategy_episodes
    test_m = collect_strategy(env, base, scale.od_episodes, scale.epsilon,
                              seed=derive_seed(seed, "test-strategy"), first_episode_id=first)
    test_r = collect_random(env, scale.od_episodes, seed=derive_seed(seed, "test-random"),
                            first_episode_id=first + scale.od_episodes)
    eval_data = realized_returns(merge_datasets(test_m, test_r), train_cfg.gamma)
    clustering = kmeans_states(eval_data, scale.n_clusters, seed=derive_seed(seed, "kmeans"))
    log.info("seed %d: data + base model in %.1fs (|D_r|=%d, |D_m|=%d)", seed,
             time.perf_counter() - t0, len(d_r), len(d_m))
    return SeedData(seed, d_r, d_m, base, eval_data, clustering)


def run_cell(env: EnvConfig, train_cfg: TrainConfig, scale: Scale, data: SeedData,
             variant: str, label: str = "", param: Optional[float] = None
             ) -> tuple[CellResult, QModel, ODReport]:
    table = position_table(env)
    wtab = wer_table(table, env.K, env.T_max)
    model = QModel.for_env(env.state_dim, env.n_actions, scale.hidden,
                           seed=derive_seed(data.seed, "init"), dtype=scale.dtype)
    cfg = train_cfg.replace(seed=derive_seed(data.seed, "train"), steps=scale.steps)
    t0 = time.perf_counter()
    model, _ = train_variant(variant, model, data.d_m, data.d_r, cfg, wtab)
    reward = reward_eval(env, model, scale.eval_episodes, train_cfg.gamma,
                         seed=derive_seed(data.seed, "eval"))
    report = od_metrics(model, data.eval_data, data.clustering)
    log.info("seed %d %-12s %s reward=%.4f avg_od=%.3f std_od=%.3f (%.1fs)", data.seed,
             variant, label, reward, report.avg_od, report.std_od, time.perf_counter() - t0)
    return (CellResult(variant, data.seed, reward, report.avg_od, report.std_od, label, param),
            model, report)


def _table2_seed(args) -> list[CellResult]:
    env, train_cfg, scale, seed, variants, out_dir = args
    data = prepare_seed(env, train_cfg, scale, seed)
    if out_dir is not None:
        data.clustering.save(out_dir / f"clusters_seed{seed}.json")
    results = []
    for variant in variants:
        res, _, report = run_cell(env, train_cfg, scale, data, variant)
        results.append(res)
        if out_dir is not None:
            report.to_csv(out_dir / f"od_types_{variant}_seed{seed}.csv")
    return results


def _sweep_seed(args) -> list[CellResult]:
    env, train_cfg, scale, seed, name, grid = args
    data = prepare_seed(env, train_cfg, scale, seed)
    results = []
    for value in grid:
        cfg = train_cfg.replace(alpha1=1.0, **{name: value})
        res, _, _ = run_cell(env, cfg, scale, data, "mddl", label=f"{name}={value:g}",
                             param=value)
        results.append(res)
    return results


def _map_seeds(fn, jobs: list, workers: int) -> list[CellResult]:
    """Run one job per seed, in parallel when asked; results keep seed order."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            chunks = list(pool.map(fn, jobs))
    else:
        chunks = [fn(job) for job in jobs]
    return [r for chunk in chunks for r in chunk]


def run_table2(env: EnvConfig, train_cfg: TrainConfig, scale: Scale, seeds: Sequence[int],
               variants: Iterable[str] = VARIANT_ORDER, out_dir: Optional[Path] = None,
               workers: int = 1) -> list[CellResult]:
    """All variants on shared per-seed data; one seed per worker process."""
    variants = tuple(variants)
    jobs = [(env, train_cfg, scale, seed, variants, out_dir) for seed in seeds]
    return _map_seeds(_table2_seed, jobs, workers)


def run_sweep(env: EnvConfig, train_cfg: TrainConfig, scale: Scale, seeds: Sequence[int],
              name: str, grid: Optional[Sequence[float]] = None,
              workers: int = 1) -> list[CellResult]:
    """MDDL reward as one hyperparameter moves over a grid, others fixed."""
    if name == "alpha2":
        grid = grid or ALPHA2_GRID
    elif name == "beta":
        grid = grid or BETA_GRID
    else:
        raise ValueError(f"unknown sweep {name!r}")
    jobs = [(env, train_cfg, scale, seed, name, tuple(grid)) for seed in seeds]
    return _map_seeds(_sweep_seed, jobs, workers)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def write_table2(path: Path, results: Sequence[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "reward", "avg_od", "std_od"])
        for variant in VARIANT_ORDER:
            rows = [r for r in results if r.variant == variant]
            if not rows:
                continue
            cells = []
            for metric in ("reward", "avg_od", "std_od"):
                mean, std = summarize([getattr(r, metric) for r in rows])
                cells.append(f"{mean:.3f}±{std:.3f}")
            w.writerow([VARIANT_LABELS[variant], *cells])


def write_cells(path: Path, results: Sequence[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "param", "seed", "reward", "avg_od", "std_od"])
        for r in results:
            w.writerow([r.variant, "" if r.param is None else repr(r.param), r.seed,
                        repr(r.reward), repr(r.avg_od), repr(r.std_od)])


def write_sweep(path: Path, name: str, results: Sequence[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([name, "reward_mean", "reward_std", "n_seeds"])
        for value in sorted({r.param for r in results}):
            mean, std = summarize([r.reward for r in results if r.param == value])
            n = sum(r.param == value for r in results)
            w.writerow([repr(value), repr(mean), repr(std), n])
