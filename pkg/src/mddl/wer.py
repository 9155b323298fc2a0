"""Weighted exposure ratio (WER) of slot allocations and its soft-argmax estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Action, action_bit_matrix, decode_action


@dataclass(frozen=True)
class PositionTable:
    """Exposure probability and CTR per global feed position (index 0 is j=1)."""
    p: np.ndarray
    ctr: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        ctr = np.asarray(self.ctr, dtype=np.float64)
        if p.shape != ctr.shape or p.ndim != 1:
            raise ValueError("p and ctr must be 1-d vectors of equal length")
        if np.any((p < 0) | (p > 1)) or np.any((ctr < 0) | (ctr > 1)):
            raise ValueError("position table entries must lie in [0, 1]")
        if np.any(np.diff(p) > 0):
            raise ValueError("exposure probabilities must be non-increasing in position")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "ctr", ctr)

    def __len__(self) -> int:
        return len(self.p)

    def weights(self, t: int, K: int) -> np.ndarray:
        """p_j * CTR_j for the K positions of screen t."""
        lo = t * K
        if t < 0 or lo + K > len(self.p):
            raise IndexError(f"table covers {len(self.p)} positions, screen {t} needs {lo + K}")
        return self.p[lo:lo + K] * self.ctr[lo:lo + K]

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "ctr": self.ctr.tolist()}


def wer(action: Action | Sequence[int], t: int, table: PositionTable) -> float:
    bits = action.bits if isinstance(action, Action) else tuple(action)
    w = table.weights(t, len(bits))
    return float(sum(w[k] for k, b in enumerate(bits) if b))


def wer_of_index(index: int, t: int, K: int, table: PositionTable) -> float:
    return wer(decode_action(index, K), t, table)


def wer_table(table: PositionTable, K: int, T_max: int) -> np.ndarray:
    """(T_max, 2^K) array of WER for every screen and action index."""
    bits = action_bit_matrix(K).astype(np.float64)
    return np.stack([bits @ table.weights(t, K) for t in range(T_max)])


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def soft_expected_wer(qvalues, wers, beta: float) -> float:
    q = np.asarray(qvalues, dtype=np.float64)
    w = np.asarray(wers, dtype=np.float64)
    if q.shape != w.shape or q.ndim != 1:
        raise ValueError(f"qvalues {q.shape} and wers {w.shape} must be equal-length vectors")
    if q.size == 0:
        raise ValueError("need at least one action")
    if not np.isfinite(beta) or beta < 0:
        raise ValueError(f"beta must be finite and >= 0, got {beta}")
    return float(softmax(beta * q) @ w)
