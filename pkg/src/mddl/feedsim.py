"""Synthetic two-channel feed world.

Each request (episode) draws a user archetype and two candidate pools (videos
and graphic-texts). Every screen the agent decides, slot by slot, which channel
fills it; the best remaining item of that channel is shown. Per-slot expected
GMV is

    p_j * ctr_channel(u) * q * (buy_coeff * q) * price,   p_j = decay ** (j - 1)

with j = t*K + k the global (1-based) feed position. The user keeps scrolling
with probability ``continue_base * (1 - fatigue_weight * |video_frac - v_u|)``
and the request always ends after ``T_max`` screens.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import (DEFAULT_K, Action, Dataset, Source, StateVec, Transition,
                   decode_action)
from .wer import PositionTable

SAMPLE_LEVELS = ("exposure", "click", "purchase")
VIDEO, TEXT = 1, 0


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class Archetype:
    probability: float
    video_affinity: float


@dataclass(frozen=True)
class PoolConfig:
    n_video: int = 30
    n_text: int = 60
    quality_range: tuple[float, float] = (0.5, 1.0)
    price_range: tuple[float, float] = (10.0, 50.0)


def _default_archetypes() -> tuple[Archetype, ...]:
    return (Archetype(0.3, 0.1), Archetype(0.4, 0.5), Archetype(0.3, 0.9))


@dataclass(frozen=True)
class EnvConfig:
    K: int = DEFAULT_K
    T_max: int = 6
    archetypes: tuple[Archetype, ...] = field(default_factory=_default_archetypes)
    position_decay: float = 0.85
    base_ctr: float = 0.12
    buy_coeff: float = 0.3
    continue_base: float = 0.85
    fatigue_weight: float = 0.5
    pools: PoolConfig = field(default_factory=PoolConfig)
    reward_mode: str = "expected"
    # sampled mode: the last Bernoulli stage actually drawn (exposure, click or purchase);
    # later stages are credited at their expectation
    sample_level: str = "click"
    seed: int = 0
    action_mask: Optional[tuple[int, ...]] = None
    # optional explicit WER statistics; derived from the world when absent
    position_table: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "archetypes", tuple(
            a if isinstance(a, Archetype) else Archetype(**a) for a in self.archetypes))
        if isinstance(self.pools, dict):
            pools = dict(self.pools)
            for key in ("quality_range", "price_range"):
                if key in pools:
                    pools[key] = tuple(pools[key])
            object.__setattr__(self, "pools", PoolConfig(**pools))
        if self.action_mask is not None:
            object.__setattr__(self, "action_mask", tuple(int(a) for a in self.action_mask))
        self.validate()

    def validate(self) -> None:
        if self.K < 1 or self.T_max < 1:
            raise ConfigError("K and T_max must be positive")
        if not self.archetypes:
            raise ConfigError("at least one archetype is required")
        total = sum(a.probability for a in self.archetypes)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"archetype probabilities sum to {total!r}, not 1")
        for a in self.archetypes:
            if not (0 <= a.probability <= 1 and 0 <= a.video_affinity <= 1):
                raise ConfigError(f"archetype {a} has values outside [0, 1]")
        for name in ("position_decay", "continue_base"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if not 0 <= self.base_ctr <= 1:
            raise ConfigError(f"base_ctr must lie in [0, 1], got {self.base_ctr}")
        if not 0 <= self.buy_coeff <= 1 or self.fatigue_weight < 0:
            raise ConfigError("buy_coeff must lie in [0, 1] and fatigue_weight be >= 0")
        lo, hi = self.pools.quality_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"quality range {self.pools.quality_range} invalid")
        lo, hi = self.pools.price_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"price range {self.pools.price_range} invalid")
        if self.pools.n_video < 0 or self.pools.n_text < 0:
            raise ConfigError("pool sizes must be nonnegative")
        if self.pools.n_video + self.pools.n_text == 0:
            raise ConfigError("both candidate pools are empty")
        if self.reward_mode not in ("expected", "sampled"):
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")
        if self.sample_level not in SAMPLE_LEVELS:
            raise ConfigError(f"unknown sample_level {self.sample_level!r}")
        if self.action_mask is not None:
            if not self.action_mask or any(not 0 <= a < self.n_actions for a in self.action_mask):
                raise ConfigError("action_mask must list valid action indices")

    @property
    def n_actions(self) -> int:
        return 1 << self.K

    @property
    def state_dim(self) -> int:
        return len(self.archetypes) + 6

    @property
    def valid_actions(self) -> np.ndarray:
        if self.action_mask is None:
            return np.arange(self.n_actions)
        return np.array(sorted(set(self.action_mask)), dtype=np.int64)

    def exposure_prob(self, j: int) -> float:
        return self.position_decay ** (j - 1)

    def ctr(self, channel: int, v: float) -> float:
        if channel == VIDEO:
            return self.base_ctr * (0.5 + v)
        return self.base_ctr * (1.5 - v)

    def continue_prob(self, video_frac: float, v: float) -> float:
        p = self.continue_base * (1.0 - self.fatigue_weight * abs(video_frac - v))
        return min(max(p, 0.0), 1.0)

    def max_slot_gmv(self) -> float:
        q = self.pools.quality_range[1]
        ctr = self.base_ctr * 1.5
        return min(ctr * q, 1.0) * min(self.buy_coeff * q, 1.0) * self.pools.price_range[1]

    def replace(self, **changes) -> "EnvConfig":
        data = self.to_dict()
        data.update(changes)
        return EnvConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["archetypes"] = [asdict(a) for a in self.archetypes]
        data["pools"]["quality_range"] = list(self.pools.quality_range)
        data["pools"]["price_range"] = list(self.pools.price_range)
        if self.action_mask is not None:
            data["action_mask"] = list(self.action_mask)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_env_config(path: str | Path) -> EnvConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    # a config file may carry env settings under "env" next to other sections
    if "env" in data and isinstance(data["env"], dict):
        data = data["env"]
    return EnvConfig.from_dict(data)


def save_env_config(path: str | Path, config: EnvConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def position_table(config: EnvConfig) -> PositionTable:
    """WER statistics for this world.

    Explicit ``position_table`` entries win; otherwise exposure is the
    in-screen decay times the chance that an average user reaches the screen
    (``continue_base ** t``) and CTR is the base rate.
    """
    n = config.T_max * config.K
    if config.position_table is not None:
        return PositionTable(np.asarray(config.position_table["p"], dtype=np.float64),
                             np.asarray(config.position_table["ctr"], dtype=np.float64))
    j = np.arange(1, n + 1)
    screen = (j - 1) // config.K
    p = config.position_decay ** (j - 1) * config.continue_base ** screen
    ctr = np.full(n, config.base_ctr)
    return PositionTable(p, ctr)


# ---------------------------------------------------------------------------
# Episode dynamics
# ---------------------------------------------------------------------------

@dataclass
class EpisodeState:
    config: EnvConfig
    archetype: int
    t: int
    videos: np.ndarray      # (n, 2) rows of (quality, price), best quality first
    texts: np.ndarray
    videos_shown: int
    alive: bool
    rng: np.random.Generator
    episode_id: int = 0
    events: list = field(default_factory=list)
    click_log: list = field(default_factory=list)

    @property
    def video_affinity(self) -> float:
        return self.config.archetypes[self.archetype].video_affinity


def _sample_pool(rng: np.random.Generator, n: int, pools: PoolConfig) -> np.ndarray:
    q = rng.uniform(*pools.quality_range, size=n)
    price = rng.uniform(*pools.price_range, size=n)
    order = np.argsort(-q, kind="stable")
    return np.column_stack([q[order], price[order]])


def env_reset(config: EnvConfig, episode_seed: int, episode_id: int = 0) -> tuple[EpisodeState, StateVec]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, episode_seed]))
    probs = np.array([a.probability for a in config.archetypes])
    archetype = int(rng.choice(len(probs), p=probs / probs.sum()))
    videos = _sample_pool(rng, config.pools.n_video, config.pools)
    texts = _sample_pool(rng, config.pools.n_text, config.pools)
    state = EpisodeState(config=config, archetype=archetype, t=0, videos=videos, texts=texts,
                         videos_shown=0, alive=True, rng=rng, episode_id=episode_id)
    return state, observe(state)


def observe(state: EpisodeState) -> StateVec:
    cfg = state.config
    onehot = [0.0] * len(cfg.archetypes)
    onehot[state.archetype] = 1.0

    def top_mean(pool: np.ndarray) -> float:
        return float(pool[:cfg.K, 0].mean()) if len(pool) else 0.0

    def frac(pool: np.ndarray, n: int) -> float:
        return len(pool) / n if n else 0.0

    features = onehot + [
        state.t / cfg.T_max,
        state.videos_shown / (cfg.K * cfg.T_max),
        top_mean(state.videos),
        top_mean(state.texts),
        frac(state.videos, cfg.pools.n_video),
        frac(state.texts, cfg.pools.n_text),
    ]
    return StateVec(tuple(features), state.t)


@dataclass(frozen=True)
class Outcome:
    """Deterministic part of one screen: what would be shown and its value."""
    expected_reward: float
    continue_prob: float
    slots: tuple            # (j, channel, quality, price, ctr, exposure)
    after: EpisodeState     # pools/counters updated, t not yet advanced
    fallback: bool


def transition_outcome(state: EpisodeState, action: Action | int) -> Outcome:
    cfg = state.config
    bits = action.bits if isinstance(action, Action) else decode_action(int(action), cfg.K)
    if len(bits) != cfg.K:
        raise UsageError(f"action has {len(bits)} slots, world uses K={cfg.K}")
    videos, texts = state.videos, state.texts
    vi = ti = 0
    v = state.video_affinity
    slots = []
    reward = 0.0
    n_video_slots = 0
    fallback = False
    for k, bit in enumerate(bits, start=1):
        channel = VIDEO if bit else TEXT
        if channel == VIDEO and vi >= len(videos):
            channel, fallback = TEXT, True
        elif channel == TEXT and ti >= len(texts):
            channel, fallback = VIDEO, True
        if channel == VIDEO and vi >= len(videos):
            break  # both pools exhausted: remaining slots stay empty
        if channel == VIDEO:
            q, price = videos[vi]
            vi += 1
            n_video_slots += 1
        else:
            q, price = texts[ti]
            ti += 1
        j = state.t * cfg.K + k
        p = cfg.exposure_prob(j)
        ctr = cfg.ctr(channel, v)
        reward += p * ctr * q * (cfg.buy_coeff * q) * price
        slots.append((j, channel, float(q), float(price), ctr, p))
    after = copy.copy(state)
    after.videos = videos[vi:]
    after.texts = texts[ti:]
    after.videos_shown = state.videos_shown + n_video_slots
    after.events = list(state.events)
    after.click_log = state.click_log
    video_frac = sum(bits) / cfg.K
    return Outcome(float(reward), cfg.continue_prob(video_frac, v), tuple(slots), after, fallback)


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: Optional[StateVec]

    @property
    def terminal(self) -> bool:
        return self.next_state is None


def env_step(state: EpisodeState, action: Action | int) -> StepResult:
    """Advance one screen in place."""
    if not state.alive:
        raise UsageError("episode already terminated")
    cfg = state.config
    out = transition_outcome(state, action)
    rng = state.rng
    if cfg.reward_mode == "expected":
        reward = out.expected_reward
    else:
        reward = 0.0
    for j, channel, q, price, ctr, p in out.slots:
        if cfg.reward_mode == "expected":
            exposed, clicked = p, p * min(ctr * q, 1.0)
        else:
            exposed = float(rng.random() < p)
            click_p, buy_p = min(ctr * q, 1.0), min(cfg.buy_coeff * q, 1.0)
            if cfg.sample_level == "exposure":
                clicked = exposed * click_p
                reward += clicked * buy_p * price
            else:
                clicked = float(exposed and rng.random() < click_p)
                if clicked:
                    if cfg.sample_level == "click":
                        reward += buy_p * price
                    elif rng.random() < buy_p:
                        reward += price
        state.click_log.append({"episode_id": state.episode_id, "t": state.t, "j": j,
                                "channel": channel, "exposed": exposed, "clicked": clicked})
    if out.fallback:
        state.events.append({"t": state.t, "event": "pool_exhausted"})
    state.videos, state.texts = out.after.videos, out.after.texts
    state.videos_shown = out.after.videos_shown
    keep_going = rng.random() < out.continue_prob
    if state.t + 1 >= cfg.T_max or not keep_going:
        state.alive = False
        return StepResult(reward, None)
    state.t += 1
    return StepResult(reward, observe(state))


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

Policy = Callable[[StateVec, np.random.Generator], int]


def episode_streams(seed: int, episode_id: int) -> tuple[int, np.random.Generator]:
    """(environment seed, policy generator) for one episode of a rollout."""
    ss = np.random.SeedSequence([seed, episode_id])
    env_ss, policy_ss = ss.spawn(2)
    return int(env_ss.generate_state(1)[0]), np.random.default_rng(policy_ss)


def rollout(config: EnvConfig, policy: Policy, episodes: int, gamma: float = 0.9,
            seed: int = 0, source: Source | str = Source.RANDOM, policy_id: str = "custom",
            first_episode_id: int = 0) -> tuple[Dataset, float]:
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    if not 0 <= gamma <= 1:
        raise UsageError(f"gamma must lie in [0, 1], got {gamma}")
    source = Source(source)
    valid = set(config.valid_actions.tolist())
    transitions: list[Transition] = []
    click_log: list[dict] = []
    events: list[dict] = []
    returns = np.empty(episodes)
    for e in range(episodes):
        episode_id = first_episode_id + e
        env_seed, policy_rng = episode_streams(seed, episode_id)
        state, obs = env_reset(config, env_seed, episode_id)
        ret, disc = 0.0, 1.0
        while True:
            a = int(policy(obs, policy_rng))
            if a not in valid:
                raise UsageError(f"policy chose invalid action {a}")
            step = env_step(state, a)
            transitions.append(Transition(episode_id, obs.t, obs, a, step.reward,
                                          step.next_state, step.terminal, source))
            ret += disc * step.reward
            disc *= gamma
            if step.terminal:
                break
            obs = step.next_state
        returns[e] = ret
        click_log.extend(state.click_log)
        events.extend({"episode_id": episode_id, **ev} for ev in state.events)
    meta = {"seed": seed, "env_hash": config.content_hash(), "policy_id": policy_id,
            "K": config.K, "D": config.state_dim}
    if events:
        meta["events"] = events
    return Dataset(transitions, meta, click_log), float(returns.mean())


def uniform_policy(config: EnvConfig) -> Policy:
    valid = config.valid_actions

    def act(obs: StateVec, rng: np.random.Generator) -> int:
        return int(valid[rng.integers(len(valid))])
    return act


def fixed_policy(index: int) -> Policy:
    def act(obs: StateVec, rng: np.random.Generator) -> int:
        return index
    return act
