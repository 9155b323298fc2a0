"""Imitation (WER) and Bellman losses, per-source gating, and the training loop."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, TransitionArrays, to_arrays
from .qfunc import QModel
from .wer import PositionTable, softmax, wer_table

ROUTINGS = ("gated", "rl_all")


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1.0           # weight of the Bellman loss
    alpha2: float = 1.0           # weight of the imitation loss
    beta: float = 10.0            # softmax temperature in the soft argmax
    gamma: float = 0.9
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 20_000
    target_sync_period: int = 500
    seed: int = 0
    sampler: str = "uniform"      # uniform | stratified | full
    routing: str = "gated"        # gated (per-source losses) | rl_all (Bellman on every sample)
    # recorded, not used: the second coefficient quoted next to the temperature
    # in the original hyperparameter list has no unambiguous home in the losses
    beta_note: float = 0.5

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1 and alpha2 must be >= 0")
        if self.beta < 0 or not np.isfinite(self.beta):
            raise ConfigError("beta must be finite and >= 0")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0 or self.target_sync_period < 1:
            raise ConfigError("batch_size and target_sync_period must be positive, steps >= 0")
        if self.sampler not in ("uniform", "stratified", "full"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"unknown routing {self.routing!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# Per-sample loss terms. Each returns (per-sample loss, upstream d/dQ rows)
# for the rows it is given, unnormalised; callers pick the batch mean.
# ---------------------------------------------------------------------------

def il_terms(q: np.ndarray, t: np.ndarray, actions: np.ndarray, wtab: np.ndarray,
             beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Squared gap between logged-action WER and soft-argmax WER.

    q: (n, N) online action values; wtab: (T_max, N) WER per screen/action.
    """
    wers = wtab[t]                                   # (n, N)
    w = softmax(beta * q, axis=1)
    soft = np.einsum("ij,ij->i", w, wers)
    err = wers[np.arange(len(actions)), actions] - soft
    # d soft / d q_n = beta * w_n * (WER_n - soft)
    dsoft = beta * w * (wers - soft[:, None])
    return err ** 2, (-2.0 * err)[:, None] * dsoft


def rl_terms(q: np.ndarray, q_next_target: np.ndarray, actions: np.ndarray,
             rewards: np.ndarray, terminal: np.ndarray, gamma: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """Squared TD error against a frozen target; gradient only through Q(s, a)."""
    # argmax picks the lowest index among ties, so max is well defined either way
    boot = np.where(terminal, 0.0, q_next_target.max(axis=1))
    y = rewards + gamma * boot
    rows = np.arange(len(actions))
    delta = y - q[rows, actions]
    up = np.zeros_like(q)
    up[rows, actions] = -2.0 * delta
    return delta ** 2, up


def _check_sources(batch: TransitionArrays, strategy: bool, what: str) -> None:
    bad = batch.is_strategy != strategy
    if np.any(bad):
        other = "random" if strategy else "strategy"
        raise UsageError(f"{what} received {int(bad.sum())} {other}-source transition(s)")


def il_loss(model: QModel, batch: TransitionArrays, wtab: np.ndarray, beta: float,
            enforce_source: bool = True) -> tuple[float, list[np.ndarray]]:
    if enforce_source:
        _check_sources(batch, True, "il_loss")
    q, acts = model.forward_cached(batch.states)
    per, up = il_terms(q, batch.t, batch.actions, wtab, beta)
    n = len(batch)
    return float(per.mean()), model.backward(acts, up / n)


def rl_loss(model: QModel, batch: TransitionArrays, gamma: float,
            enforce_source: bool = True) -> tuple[float, list[np.ndarray]]:
    if enforce_source:
        _check_sources(batch, False, "rl_loss")
    q, acts = model.forward_cached(batch.states)
    q_next = model.forward(batch.next_states, use_target=True)
    per, up = rl_terms(q, q_next, batch.actions, batch.rewards, batch.terminal, gamma)
    n = len(batch)
    return float(per.mean()), model.backward(acts, up / n)


@dataclass(frozen=True)
class StepLosses:
    total: float
    rl: float
    il: float
    n_random: int
    n_strategy: int


def combined_loss(model: QModel, batch: TransitionArrays, config: TrainConfig,
                  wtab: np.ndarray, routing: Optional[str] = None
                  ) -> tuple[StepLosses, list[np.ndarray]]:
    """Total loss and gradient for one mixed batch.

    ``gated``: random-source rows feed only the Bellman term, strategy-source
    rows only the imitation term; each term is the mean over its own rows.
    ``rl_all``: the Bellman term over every row, sources ignored.
    """
    if len(batch) == 0:
        raise UsageError("empty batch")
    routing = routing or config.routing
    q, acts = model.forward_cached(batch.states)
    up = np.zeros_like(q)
    rl = il = 0.0
    if routing == "rl_all":
        rl_mask = np.ones(len(batch), dtype=bool)
        il_mask = np.zeros(len(batch), dtype=bool)
    else:
        rl_mask = ~batch.is_strategy
        il_mask = batch.is_strategy
    n_rl, n_il = int(rl_mask.sum()), int(il_mask.sum())
    if n_rl and config.alpha1 > 0:
        sub = batch.take(rl_mask)
        q_next = model.forward(sub.next_states, use_target=True)
        per, g = rl_terms(q[rl_mask], q_next, sub.actions, sub.rewards, sub.terminal,
                          config.gamma)
        rl = float(per.mean())
        up[rl_mask] += (config.alpha1 / n_rl) * g
    if n_il and config.alpha2 > 0:
        sub = batch.take(il_mask)
        per, g = il_terms(q[il_mask], sub.t, sub.actions, wtab, config.beta)
        il = float(per.mean())
        up[il_mask] += (config.alpha2 / n_il) * g
    total = config.alpha1 * rl + config.alpha2 * il
    grads = model.backward(acts, up)
    return StepLosses(total, rl, il, n_rl, n_il), grads


def combined_step(model: QModel, batch: TransitionArrays, config: TrainConfig,
                  wtab: np.ndarray, routing: Optional[str] = None) -> tuple[float, QModel]:
    losses, grads = combined_loss(model, batch, config, wtab, routing)
    model.adam_step(grads, config.lr)
    if model.step % config.target_sync_period == 0:
        model.sync_target()
    return losses.total, model


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class BatchSampler:
    def __init__(self, data: TransitionArrays, config: TrainConfig):
        self.data = data
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5A3]))
        self.strategy_idx = np.flatnonzero(data.is_strategy)
        self.random_idx = np.flatnonzero(~data.is_strategy)

    def sample(self) -> TransitionArrays:
        n, B = len(self.data), self.config.batch_size
        if self.config.sampler == "full":
            return self.data
        if self.config.sampler == "stratified" and len(self.strategy_idx) and len(self.random_idx):
            n_m = int(round(B * len(self.strategy_idx) / n))
            n_m = min(max(n_m, 1), B - 1)
            idx = np.concatenate([
                self.strategy_idx[self.rng.integers(len(self.strategy_idx), size=n_m)],
                self.random_idx[self.rng.integers(len(self.random_idx), size=B - n_m)]])
            return self.data.take(idx)
        return self.data.take(self.rng.integers(n, size=B))


def _as_arrays(ds) -> Optional[TransitionArrays]:
    if ds is None:
        return None
    if isinstance(ds, TransitionArrays):
        return ds
    if len(ds) == 0:
        return None
    return to_arrays(ds)


def train(model: QModel, d_m: Optional[Dataset], d_r: Optional[Dataset], config: TrainConfig,
          table: PositionTable | np.ndarray, T_max: Optional[int] = None,
          routing: Optional[str] = None) -> tuple[QModel, list[float]]:
    """Run ``config.steps`` combined steps on batches drawn from d_m ∪ d_r.

    ``table`` is either a PositionTable (``T_max`` then required) or an
    already-built (T_max, 2^K) WER table.
    """
    parts = [p for p in (_as_arrays(d_m), _as_arrays(d_r)) if p is not None]
    if not parts:
        raise UsageError("no training data")
    dims = {p.states.shape[1] for p in parts}
    if len(dims) > 1:
        raise ConfigError(f"feature dimension mismatch between datasets: {sorted(dims)}")
    if dims.pop() != model.input_dim:
        raise ConfigError("dataset feature dimension does not match the model input")
    data = TransitionArrays.concat(parts)
    if isinstance(table, PositionTable):
        if T_max is None:
            T_max = int(data.t.max()) + 1
        K = int(np.log2(model.n_actions))
        wtab = wer_table(table, K, T_max)
    else:
        wtab = np.asarray(table)
    model.train_config = {**config.to_dict(), "routing": routing or config.routing}
    sampler = BatchSampler(data, config)
    trace: list[float] = []
    for _ in range(config.steps):
        loss, model = combined_step(model, sampler.sample(), config, wtab, routing)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {model.step}")
        trace.append(loss)
    return model, trace


def write_loss_trace(path: str | Path, trace: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace, start=1):
            w.writerow([i, repr(loss)])


# (data, alpha1, alpha2, routing) per experiment variant
VARIANTS = {
    "random_rl": ("random", 1.0, 0.0, "rl_all"),
    "strategy_rl": ("strategy", 1.0, 0.0, "rl_all"),
    "strategy_il": ("strategy", 0.0, 1.0, "gated"),
    "mixed_rl": ("both", 1.0, 0.0, "rl_all"),
    "mddl": ("both", None, None, "gated"),
}

VARIANT_LABELS = {
    "random_rl": "Random Data & RL",
    "strategy_rl": "Strategy Data & RL",
    "strategy_il": "Strategy Data & IL",
    "mixed_rl": "Mixed Data & RL",
    "mddl": "MDDL",
}


def train_variant(variant: str, model: QModel, d_m: Optional[Dataset], d_r: Optional[Dataset],
                  config: TrainConfig, table, T_max: Optional[int] = None
                  ) -> tuple[QModel, list[float]]:
    """Train one of the five comparison variants; mddl keeps config's alphas."""
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    data, a1, a2, routing = VARIANTS[variant]
    if data in ("random", "both") and (d_r is None or len(d_r) == 0):
        raise UsageError(f"variant {variant} needs random data")
    if data in ("strategy", "both") and (d_m is None or len(d_m) == 0):
        raise UsageError(f"variant {variant} needs strategy data")
    if a1 is not None:
        config = config.replace(alpha1=a1, alpha2=a2)
    return train(model,
                 d_m if data in ("strategy", "both") else None,
                 d_r if data in ("random", "both") else None,
                 config, table, T_max=T_max, routing=routing)
