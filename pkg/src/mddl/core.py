"""Shared domain types: actions, states, transitions, datasets and their file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_K = 5
FORMAT_VERSION = 1


class CodingError(ValueError):
    """Raised for malformed action vectors or out-of-range action indices."""


class LoadError(ValueError):
    """Raised when a dataset file cannot be parsed; message names the line."""


class Source(str, Enum):
    STRATEGY = "strategy"
    RANDOM = "random"


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------

def encode_action(bits: Sequence[int]) -> int:
    """Map a 0/1 slot vector to its index; slot k (1-based) is bit k-1."""
    if len(bits) == 0:
        raise CodingError("action vector is empty")
    index = 0
    for k, b in enumerate(bits):
        if isinstance(b, bool) or b not in (0, 1):
            raise CodingError(f"slot {k + 1} holds {b!r}, expected 0 or 1")
        index |= int(b) << k
    return index


def decode_action(index: int, K: int = DEFAULT_K) -> tuple[int, ...]:
    if K < 1:
        raise CodingError(f"K must be positive, got {K}")
    if not 0 <= index < (1 << K):
        raise CodingError(f"action index {index} outside [0, {1 << K})")
    return tuple((index >> k) & 1 for k in range(K))


@dataclass(frozen=True)
class Action:
    bits: tuple[int, ...]

    def __post_init__(self):
        # validates as a side effect
        encode_action(self.bits)

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def index(self) -> int:
        return encode_action(self.bits)

    @property
    def n_videos(self) -> int:
        return sum(self.bits)

    @classmethod
    def from_index(cls, index: int, K: int = DEFAULT_K) -> "Action":
        return cls(decode_action(index, K))


def action_bit_matrix(K: int) -> np.ndarray:
    """(2^K, K) array whose row i is decode_action(i, K)."""
    idx = np.arange(1 << K)
    return ((idx[:, None] >> np.arange(K)[None, :]) & 1).astype(np.int64)


# ---------------------------------------------------------------------------
# States and transitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateVec:
    features: tuple[float, ...]
    t: int

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(x) for x in self.features))
        if not all(math.isfinite(x) for x in self.features):
            raise ValueError("state features must be finite")
        if self.t < 0:
            raise ValueError(f"screen index must be >= 0, got {self.t}")

    @property
    def dim(self) -> int:
        return len(self.features)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class Transition:
    episode_id: int
    t: int
    state: StateVec
    action_index: int
    reward: float
    next_state: Optional[StateVec]
    terminal: bool
    source: Source
    realized_return: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if self.terminal != (self.next_state is None):
            raise ValueError("terminal must be true exactly when next_state is absent")
        if not self.reward >= 0:
            raise ValueError(f"reward must be nonnegative, got {self.reward}")
        if self.action_index < 0:
            raise CodingError(f"negative action index {self.action_index}")


@dataclass
class Dataset:
    transitions: list[Transition]
    meta: dict = field(default_factory=dict)
    # per-slot exposure/click records emitted by the simulator; not part of the
    # transition file, saved as a sidecar
    click_log: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    @property
    def dim(self) -> int:
        if not self.transitions:
            return int(self.meta.get("D", 0))
        return self.transitions[0].state.dim

    @property
    def n_episodes(self) -> int:
        return len({tr.episode_id for tr in self.transitions})

    def sources(self) -> set[Source]:
        return {tr.source for tr in self.transitions}

    def validate(self) -> None:
        dims = {tr.state.dim for tr in self.transitions}
        dims |= {tr.next_state.dim for tr in self.transitions if tr.next_state is not None}
        if len(dims) > 1:
            raise ValueError(f"mixed feature dimensions {sorted(dims)}")
        check_episodes_contiguous(self.transitions)

    def with_transitions(self, transitions: list[Transition]) -> "Dataset":
        return Dataset(transitions, dict(self.meta), list(self.click_log))


def check_episodes_contiguous(transitions: Sequence[Transition]) -> None:
    seen: set[int] = set()
    prev: Optional[Transition] = None
    for tr in transitions:
        if prev is not None and tr.episode_id == prev.episode_id:
            if tr.t != prev.t + 1:
                raise ValueError(
                    f"episode {tr.episode_id}: screen {tr.t} follows screen {prev.t}")
        else:
            if tr.episode_id in seen:
                raise ValueError(f"episode {tr.episode_id} is not contiguous")
            seen.add(tr.episode_id)
        prev = tr


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Concatenate two datasets whose episode ids do not overlap."""
    ids_a = {tr.episode_id for tr in a}
    ids_b = {tr.episode_id for tr in b}
    if ids_a & ids_b:
        raise ValueError("datasets share episode ids")
    if len(a) and len(b) and a.dim != b.dim:
        raise ValueError(f"dimension mismatch {a.dim} vs {b.dim}")
    meta = dict(a.meta)
    meta["merged_from"] = [a.meta.get("policy_id"), b.meta.get("policy_id")]
    return Dataset(list(a.transitions) + list(b.transitions), meta, a.click_log + b.click_log)


def with_source(dataset: Dataset, source: Source) -> Dataset:
    return dataset.with_transitions([replace(tr, source=source) for tr in dataset])


# ---------------------------------------------------------------------------
# Array view used by the trainer and evaluator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransitionArrays:
    states: np.ndarray          # (n, D)
    t: np.ndarray               # (n,)
    actions: np.ndarray         # (n,)
    rewards: np.ndarray         # (n,)
    next_states: np.ndarray     # (n, D); zeros where terminal
    terminal: np.ndarray        # (n,) bool
    is_strategy: np.ndarray     # (n,) bool
    episode_ids: np.ndarray     # (n,)

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "TransitionArrays":
        return TransitionArrays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def concat(parts: Iterable["TransitionArrays"]) -> "TransitionArrays":
        parts = list(parts)
        return TransitionArrays(*(
            np.concatenate([getattr(p, f) for p in parts])
            for f in TransitionArrays.__dataclass_fields__))


def to_arrays(dataset: Dataset | Sequence[Transition]) -> TransitionArrays:
    transitions = list(dataset)
    if not transitions:
        raise ValueError("cannot build arrays from an empty dataset")
    D = transitions[0].state.dim
    states = np.array([tr.state.features for tr in transitions], dtype=np.float64)
    next_states = np.array(
        [tr.next_state.features if tr.next_state is not None else (0.0,) * D
         for tr in transitions], dtype=np.float64)
    if states.shape[1] != D or next_states.shape[1] != D:
        raise ValueError("mixed feature dimensions")
    return TransitionArrays(
        states=states,
        t=np.array([tr.t for tr in transitions], dtype=np.int64),
        actions=np.array([tr.action_index for tr in transitions], dtype=np.int64),
        rewards=np.array([tr.reward for tr in transitions], dtype=np.float64),
        next_states=next_states,
        terminal=np.array([tr.terminal for tr in transitions], dtype=bool),
        is_strategy=np.array([tr.source is Source.STRATEGY for tr in transitions], dtype=bool),
        episode_ids=np.array([tr.episode_id for tr in transitions], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# File I/O: one JSON object per line, metadata first
# ---------------------------------------------------------------------------

TRANSITION_FIELDS = ("episode_id", "t", "state", "action_index", "reward",
                     "next_state", "terminal", "source", "realized_return")


def _transition_record(tr: Transition) -> dict:
    return {
        "episode_id": tr.episode_id,
        "t": tr.t,
        "state": list(tr.state.features),
        "action_index": tr.action_index,
        "reward": tr.reward,
        "next_state": None if tr.next_state is None else list(tr.next_state.features),
        "terminal": tr.terminal,
        "source": tr.source.value,
        "realized_return": tr.realized_return,
    }


def _dumps(obj) -> str:
    # float repr is the shortest string that round-trips a double exactly
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    dataset.validate()
    path = Path(path)
    K = int(dataset.meta.get("K", DEFAULT_K))
    header = {
        "version": FORMAT_VERSION,
        "D": dataset.dim,
        "K": K,
        "seed": dataset.meta.get("seed"),
        "env_hash": dataset.meta.get("env_hash"),
        "policy_id": dataset.meta.get("policy_id"),
    }
    extra = {k: v for k, v in dataset.meta.items() if k not in header}
    if extra:
        header["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for tr in dataset.transitions:
            fh.write(_dumps(_transition_record(tr)) + "\n")
    if dataset.click_log:
        with open(click_log_path(path), "w", encoding="utf-8") as fh:
            for rec in dataset.click_log:
                fh.write(_dumps(rec) + "\n")


def click_log_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".clicks")


def _parse_state(value, t: int, D: int, lineno: int, what: str) -> StateVec:
    if not isinstance(value, list) or len(value) != D:
        got = len(value) if isinstance(value, list) else type(value).__name__
        raise LoadError(f"line {lineno}: {what} has dimension {got}, header says {D}")
    try:
        return StateVec(tuple(value), t)
    except (TypeError, ValueError) as exc:
        raise LoadError(f"line {lineno}: bad {what}: {exc}") from exc


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    transitions: list[Transition] = []
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise LoadError(f"line 1: malformed metadata record: {exc}") from exc
        if not isinstance(header, dict) or "D" not in header:
            raise LoadError("line 1: metadata record lacks 'D'")
        D = int(header["D"])
        K = int(header.get("K", DEFAULT_K))
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"line {lineno}: malformed record: {exc}") from exc
            if not isinstance(rec, dict) or set(rec) != set(TRANSITION_FIELDS):
                raise LoadError(f"line {lineno}: expected fields {list(TRANSITION_FIELDS)}")
            if rec["source"] not in (s.value for s in Source):
                raise LoadError(f"line {lineno}: unknown source tag {rec['source']!r}")
            t = rec["t"]
            state = _parse_state(rec["state"], t, D, lineno, "state")
            nxt = None
            if rec["next_state"] is not None:
                nxt = _parse_state(rec["next_state"], t + 1, D, lineno, "next_state")
            if not 0 <= rec["action_index"] < (1 << K):
                raise LoadError(f"line {lineno}: action index {rec['action_index']} out of range")
            try:
                transitions.append(Transition(
                    episode_id=rec["episode_id"], t=t, state=state,
                    action_index=rec["action_index"], reward=rec["reward"],
                    next_state=nxt, terminal=rec["terminal"], source=Source(rec["source"]),
                    realized_return=rec["realized_return"]))
            except (TypeError, ValueError) as exc:
                raise LoadError(f"line {lineno}: {exc}") from exc
    meta = {k: v for k, v in header.items() if k not in ("version", "extra")}
    meta.update(header.get("extra", {}))
    ds = Dataset(transitions, meta)
    try:
        check_episodes_contiguous(transitions)
    except ValueError as exc:
        raise LoadError(str(exc)) from exc
    clicks = click_log_path(path)
    if clicks.exists():
        with open(clicks, encoding="utf-8") as fh:
            ds.click_log = [json.loads(line) for line in fh if line.strip()]
    return ds


def dataset_io(path: str | Path, mode: str, dataset: Optional[Dataset] = None) -> Optional[Dataset]:
    if mode == "read":
        return read_dataset(path)
    if mode == "write":
        if dataset is None:
            raise ValueError("write mode needs a dataset")
        write_dataset(path, dataset)
        return None
    raise ValueError(f"unknown mode {mode!r}")
