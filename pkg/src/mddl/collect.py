"""Two-source data generation: uniform random logging and a near-greedy base policy."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import Dataset, Source, StateVec
from .feedsim import EnvConfig, rollout, uniform_policy
from .qfunc import QModel, greedy_actions
from .trainer import TrainConfig, UsageError, train
from .wer import PositionTable


def collect_random(config: EnvConfig, episodes: int, seed: int = 0,
                   first_episode_id: int = 0) -> Dataset:
    ds, _ = rollout(config, uniform_policy(config), episodes, seed=seed,
                    source=Source.RANDOM, policy_id="random",
                    first_episode_id=first_episode_id)
    return ds


def train_base_model(d_r: Dataset, config: TrainConfig, table: PositionTable,
                     model: Optional[QModel] = None, T_max: Optional[int] = None,
                     hidden=(64, 64), n_actions: Optional[int] = None) -> QModel:
    """Pure Bellman training on random data (imitation weight forced to 0)."""
    if len(d_r) == 0:
        raise UsageError("base model needs random data")
    if Source.STRATEGY in d_r.sources():
        raise UsageError("base model must be trained on random-source data only")
    if model is None:
        if n_actions is None:
            n_actions = 1 << int(d_r.meta.get("K", 5))
        model = QModel.for_env(d_r.dim, n_actions, hidden, seed=config.seed)
    model, _ = train(model, None, d_r, config.replace(alpha1=1.0, alpha2=0.0), table,
                     T_max=T_max, routing="gated")
    return model


def greedy_policy(model: QModel, config: EnvConfig, epsilon: float = 0.0):
    valid = config.valid_actions
    masked = config.action_mask is not None

    def act(obs: StateVec, rng: np.random.Generator) -> int:
        if epsilon > 0 and rng.random() < epsilon:
            return int(valid[rng.integers(len(valid))])
        q = model.forward(obs.as_array())
        return int(greedy_actions(q, valid if masked else None)[0])
    return act


def collect_strategy(config: EnvConfig, base: QModel, episodes: int, epsilon: float = 0.05,
                     seed: int = 0, first_episode_id: int = 0) -> Dataset:
    if not 0 <= epsilon <= 1:
        raise UsageError(f"epsilon must lie in [0, 1], got {epsilon}")
    if base.input_dim != config.state_dim or base.n_actions != config.n_actions:
        raise UsageError("base model does not fit this environment")
    ds, _ = rollout(config, greedy_policy(base, config, epsilon), episodes, seed=seed,
                    source=Source.STRATEGY, policy_id=f"qmodel:{base.fingerprint()}",
                    first_episode_id=first_episode_id)
    ds.meta["epsilon"] = epsilon
    return ds
