"""Evaluation: realized returns, state typing, overestimation degree, policy reward."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import Dataset, StateVec, Transition, to_arrays
from .feedsim import EnvConfig, rollout
from .qfunc import QModel
from .wer import PositionTable


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


QSource = Union[QModel, Callable[[np.ndarray], np.ndarray]]


def _q_values(model: QSource, states: np.ndarray) -> np.ndarray:
    if isinstance(model, QModel):
        return model.forward(states)
    return np.asarray(model(states), dtype=np.float64)


# ---------------------------------------------------------------------------
# Returns
# ---------------------------------------------------------------------------

def realized_returns(dataset: Dataset, gamma: float = 0.9) -> Dataset:
    """Fill realized_return with the discounted reward-to-go of each episode."""
    trs = dataset.transitions
    out: list[Transition] = [None] * len(trs)  # type: ignore[list-item]
    seen: set[int] = set()
    end = len(trs)
    while end > 0:
        start = end - 1
        eid = trs[start].episode_id
        while start > 0 and trs[start - 1].episode_id == eid:
            start -= 1
        if eid in seen:
            raise UsageError(f"episode {eid} is not contiguous")
        seen.add(eid)
        g = 0.0
        for i in range(end - 1, start - 1, -1):
            if i < end - 1 and trs[i].t + 1 != trs[i + 1].t:
                raise UsageError(f"episode {eid} is not ordered by screen")
            g = trs[i].reward + gamma * g
            out[i] = replace(trs[i], realized_return=g)
        end = start
    result = dataset.with_transitions(out)
    result.meta["returns_gamma"] = gamma
    return result


# ---------------------------------------------------------------------------
# k-means over state features
# ---------------------------------------------------------------------------

@dataclass
class Clustering:
    centroids: np.ndarray
    labels: np.ndarray
    seed: int
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def assign(self, X: np.ndarray) -> np.ndarray:
        return nearest_centroid(np.asarray(X, dtype=np.float64), self.centroids)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "centroids": self.centroids.tolist()}

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Clustering":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(np.array(data["centroids"], dtype=np.float64), np.empty(0, dtype=np.int64),
                   data["seed"])


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def nearest_centroid(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.argmin(_sq_dists(X, C), axis=1)  # first minimum = lowest index


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [X[rng.integers(len(X))]]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(X) - 1)
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def kmeans(X: np.ndarray, n_clusters: int = 10, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-8) -> Clustering:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise UsageError("cannot cluster an empty set")
    n_distinct = len(np.unique(X, axis=0))
    if n_clusters < 1 or n_clusters > n_distinct:
        raise ConfigError(f"n_clusters={n_clusters} but only {n_distinct} distinct states")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, n_clusters, rng)
    labels = nearest_centroid(X, C)
    trace = [float(((X - C[labels]) ** 2).sum())]
    for _ in range(max_iter):
        new = C.copy()
        for c in range(n_clusters):
            members = labels == c
            if members.any():
                new[c] = X[members].mean(axis=0)
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        labels = nearest_centroid(X, C)
        trace.append(float(((X - C[labels]) ** 2).sum()))
        if shift < tol:
            break
    return Clustering(C, labels, seed, trace)


def kmeans_states(dataset: Dataset | np.ndarray, n_clusters: int = 10, seed: int = 0) -> Clustering:
    if isinstance(dataset, Dataset):
        if len(dataset) == 0:
            raise UsageError("dataset is empty")
        X = np.array([tr.state.features for tr in dataset], dtype=np.float64)
    else:
        X = np.asarray(dataset, dtype=np.float64)
    return kmeans(X, n_clusters, seed)


# ---------------------------------------------------------------------------
# Overestimation degree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TypeRecord:
    cluster_id: int
    action_index: int
    count: int
    mean_od: float


@dataclass
class ODReport:
    records: list[TypeRecord]
    avg_od: float
    std_od: float
    n_types_observed: int
    centroids: np.ndarray
    seed: int
    weighted: bool = False

    @classmethod
    def from_records(cls, records: Sequence[TypeRecord], centroids: np.ndarray, seed: int,
                     weighted: bool = False) -> "ODReport":
        records = sorted(records, key=lambda r: (r.cluster_id, r.action_index))
        means = np.array([r.mean_od for r in records])
        if weighted:
            w = np.array([r.count for r in records], dtype=np.float64)
            avg = float((w * means).sum() / w.sum())
            std = float(np.sqrt((w * (means - avg) ** 2).sum() / w.sum()))
        else:
            avg = float(means.mean())
            std = float(means.std())  # population (ddof=0)
        return cls(list(records), avg, std, len(records), centroids, seed, weighted)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster_id", "action_index", "count", "mean_od"])
            for r in self.records:
                w.writerow([r.cluster_id, r.action_index, r.count, repr(r.mean_od)])
            w.writerow(["summary", self.n_types_observed, sum(r.count for r in self.records),
                        f"avg_od={self.avg_od!r};std_od={self.std_od!r}"])


def od_metrics(model: QSource, dataset: Dataset, clustering: Clustering,
               weighted: bool = False) -> ODReport:
    """Q(s, a) minus realized return, averaged per (state cluster, action) type."""
    if len(dataset) == 0:
        raise UsageError("dataset is empty")
    if any(tr.realized_return is None for tr in dataset):
        raise UsageError("realized_return missing; run realized_returns first")
    arr = to_arrays(dataset)
    q = _q_values(model, arr.states)
    od = q[np.arange(len(arr)), arr.actions] - np.array([tr.realized_return for tr in dataset])
    clusters = clustering.assign(arr.states)
    # summing in sorted order makes the result independent of episode order
    order = np.lexsort((od, arr.actions, clusters))
    sums: dict[tuple[int, int], list] = defaultdict(lambda: [0, 0.0])
    for i in order:
        s = sums[(int(clusters[i]), int(arr.actions[i]))]
        s[0] += 1
        s[1] += float(od[i])
    records = [TypeRecord(c, a, n, total / n) for (c, a), (n, total) in sums.items()]
    return ODReport.from_records(records, clustering.centroids, clustering.seed, weighted)


# ---------------------------------------------------------------------------
# Policy value in the simulator
# ---------------------------------------------------------------------------

def reward_eval(config: EnvConfig, model: QSource, episodes: int = 2000, gamma: float = 0.9,
                seed: int = 0) -> float:
    """Mean discounted return of the greedy policy in expected-reward mode."""
    cfg = config if config.reward_mode == "expected" else config.replace(reward_mode="expected")
    valid = cfg.valid_actions
    masked = cfg.action_mask is not None

    def act(obs: StateVec, rng) -> int:
        q = _q_values(model, obs.as_array()[None, :])[0]
        if masked:
            return int(valid[np.argmax(q[valid])])
        return int(np.argmax(q))

    _, mean_return = rollout(cfg, act, episodes, gamma=gamma, seed=seed, policy_id="greedy")
    return mean_return


# ---------------------------------------------------------------------------
# Position statistics from the simulator's click sidecar
# ---------------------------------------------------------------------------

def estimate_position_table(click_log: Sequence[dict] | Dataset, T_max: int, K: int,
                            n_requests: Optional[int] = None) -> PositionTable:
    """Empirical exposure probability and CTR per global position.

    Exposure is counted per request (episode), so a position on a screen that
    users rarely reach has a small exposure probability; CTR is clicks over
    exposures. ``n_requests`` defaults to the number of episodes in the log.
    """
    if isinstance(click_log, Dataset):
        if n_requests is None and len(click_log):
            n_requests = click_log.n_episodes
        click_log = click_log.click_log
    if not click_log:
        raise UsageError("click log is empty")
    n = T_max * K
    exposures = np.zeros(n)
    clicks = np.zeros(n)
    for rec in click_log:
        j = int(rec["j"])
        if not 1 <= j <= n:
            raise UsageError(f"position {j} outside 1..{n}")
        exposures[j - 1] += rec["exposed"]
        clicks[j - 1] += rec["clicked"]
    if n_requests is None:
        n_requests = len({rec["episode_id"] for rec in click_log})
    p = exposures / n_requests
    with np.errstate(invalid="ignore", divide="ignore"):
        ctr = np.where(exposures > 0, clicks / np.where(exposures > 0, exposures, 1), 0.0)
    # counting noise can break monotonicity slightly; enforce the table invariant
    p = np.minimum.accumulate(np.clip(p, 0.0, 1.0))
    return PositionTable(p, np.clip(ctr, 0.0, 1.0))
