"""An enumerable two-screen world and a brute-force value-iteration oracle.

Items in both pools are identical, so the only stochastic element is whether
the user continues to the second screen. Continuation probabilities are
multiples of 1/10, which lets a finite dataset reproduce the exact transition
law by duplicating episodes.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from mddl.core import Dataset, Source, Transition, decode_action
from mddl.feedsim import EnvConfig, env_reset, observe, transition_outcome, position_table
from mddl.qfunc import QModel
from mddl.trainer import TrainConfig, train_variant
from mddl.wer import wer_table

COPIES = 40       # episodes per first action; COPIES * continue_prob is an integer multiple of 4
GAMMA = 0.9


def toy_config() -> EnvConfig:
    return EnvConfig(K=2, T_max=2, continue_base=1.0, fatigue_weight=1.0,
                     archetypes=[{"probability": 1.0, "video_affinity": 0.6}],
                     pools={"n_video": 4, "n_text": 4, "quality_range": (0.8, 0.8),
                            "price_range": (20.0, 20.0)},
                     reward_mode="expected")


def value_iteration(cfg: EnvConfig, gamma: float = GAMMA) -> tuple[np.ndarray, np.ndarray]:
    """Optimal (Q at t=0, Q at t=1) from the primitive parameters alone.

    Second-screen values do not depend on the first action because the pools
    hold identical items and never run dry in two screens of two slots.
    """
    K, n = cfg.K, 1 << cfg.K
    v = cfg.archetypes[0].video_affinity
    q, price = cfg.pools.quality_range[0], cfg.pools.price_range[0]
    ctr = {1: cfg.base_ctr * (0.5 + v), 0: cfg.base_ctr * (1.5 - v)}

    def reward(t, a):
        bits = decode_action(a, K)
        return sum(cfg.position_decay ** (t * K + k) * ctr[b] * q * cfg.buy_coeff * q * price
                   for k, b in enumerate(bits))

    def cont(a):
        frac = sum(decode_action(a, K)) / K
        return cfg.continue_base * (1 - cfg.fatigue_weight * abs(frac - v))

    q1 = np.array([reward(1, a) for a in range(n)])
    v1 = q1.max()
    q0 = np.array([reward(0, a) + gamma * cont(a) * v1 for a in range(n)])
    return q0, q1


def _episodes(cfg: EnvConfig, second_action):
    """Yield (first action, continued, second action) with exact frequencies.

    ``second_action`` maps the first action to a list of second actions used
    for each continuing block; its length must divide the continuing count.
    """
    for a0 in range(1 << cfg.K):
        state, _ = env_reset(cfg, 0)
        n_cont = round(COPIES * transition_outcome(state, a0).continue_prob)
        seconds = second_action(a0)
        assert n_cont % len(seconds) == 0
        for i in range(n_cont):
            yield a0, True, seconds[i % len(seconds)]
        for _ in range(COPIES - n_cont):
            yield a0, False, None


def exhaustive_dataset(cfg: EnvConfig, second_action=None,
                       source: Source = Source.RANDOM) -> Dataset:
    """Episodes over every first action, weighted by the exact continuation law.

    By default second actions cycle uniformly through all actions.
    """
    if second_action is None:
        second_action = lambda a0: list(range(1 << cfg.K))  # noqa: E731
    transitions = []
    for eid, (a0, cont, a1) in enumerate(_episodes(cfg, second_action)):
        state, obs0 = env_reset(cfg, 0, episode_id=eid)
        out = transition_outcome(state, a0)
        if not cont:
            transitions.append(Transition(eid, 0, obs0, a0, out.expected_reward, None, True,
                                          source))
            continue
        nxt = out.after
        nxt.t = 1
        obs1 = observe(nxt)
        transitions.append(Transition(eid, 0, obs0, a0, out.expected_reward, obs1, False,
                                      source))
        r1 = transition_outcome(nxt, a1).expected_reward
        transitions.append(Transition(eid, 1, obs1, a1, r1, None, True, source))
    return Dataset(transitions, {"K": cfg.K, "D": cfg.state_dim})


# Full-batch Adam settles into a jitter of roughly lr in parameter space, so
# the step size is lowered in stages to bring Q within 1e-3 of the oracle.
LR_SCHEDULE = ((1e-3, 5000), (1e-4, 5000), (1e-5, 5000))


@lru_cache(maxsize=None)
def trained_toy_model(seed: int = 0) -> QModel:
    """Random Data & RL on the exhaustive uniform toy dataset."""
    cfg = toy_config()
    data = exhaustive_dataset(cfg)
    wtab = wer_table(position_table(cfg), cfg.K, cfg.T_max)
    model = QModel.for_env(cfg.state_dim, cfg.n_actions, (64, 64), seed=seed)
    for lr, steps in LR_SCHEDULE:
        tc = TrainConfig(sampler="full", steps=steps, lr=lr, gamma=GAMMA, seed=seed)
        model, _ = train_variant("random_rl", model, None, data, tc, wtab)
    return model


def toy_states(cfg: EnvConfig):
    """The first-screen state and the second-screen state reached after each first action."""
    state, s0 = env_reset(cfg, 0)
    s1 = []
    for a0 in range(1 << cfg.K):
        nxt = transition_outcome(state, a0).after
        nxt.t = 1
        s1.append(observe(nxt))
    return s0, s1
