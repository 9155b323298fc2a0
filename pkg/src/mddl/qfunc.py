"""Feed-forward Q-network in numpy with analytic backprop, Adam and a target copy."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class TrainingError(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class QModel:
    """tanh MLP mapping a state batch (n, D) to action values (n, 2^K).

    Parameters are views ``[W0, b0, W1, b1, ...]`` into one flat buffer, with
    ``W`` shaped (fan_in, fan_out). The target copy is touched only by
    :meth:`sync_target`.
    """

    def __init__(self, sizes: Sequence[int], seed: int = 0, sync_at_init: bool = True,
                 dtype=np.float64):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        init = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            init += [glorot_uniform(rng, fan_in, fan_out), np.zeros(fan_out)]
        self._set_flat(np.concatenate([p.ravel() for p in init]).astype(self.dtype))
        if sync_at_init:
            self._set_target_flat(self.flat.copy())
        else:
            other = QModel(sizes, seed=int(rng.integers(2**31)), dtype=dtype)
            self._set_target_flat(other.flat.copy())
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.step = 0
        self.train_config: dict = {}

    def _shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        views, offset = [], 0
        for shape in self._shapes():
            size = int(np.prod(shape))
            views.append(flat[offset:offset + size].reshape(shape))
            offset += size
        return views

    def _set_flat(self, flat: np.ndarray) -> None:
        self.flat = flat
        self.params = self._views(flat)

    def _set_target_flat(self, flat: np.ndarray) -> None:
        self.target_flat = flat
        self.target = self._views(flat)

    @classmethod
    def for_env(cls, state_dim: int, n_actions: int, hidden: Sequence[int] = (64, 64),
                seed: int = 0, dtype=np.float64) -> "QModel":
        return cls((state_dim, *hidden, n_actions), seed=seed, dtype=dtype)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return self.flat.size

    def copy(self) -> "QModel":
        new = QModel.__new__(QModel)
        new.sizes, new.seed, new.dtype = self.sizes, self.seed, self.dtype
        new._set_flat(self.flat.copy())
        new._set_target_flat(self.target_flat.copy())
        new.m, new.v = self.m.copy(), self.v.copy()
        new.step = self.step
        new.train_config = dict(self.train_config)
        return new

    def astype(self, dtype) -> "QModel":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        new._set_flat(new.flat.astype(dtype))
        new._set_target_flat(new.target_flat.astype(dtype))
        new.m, new.v = new.m.astype(dtype), new.v.astype(dtype)
        return new

    # -- forward / backward -------------------------------------------------

    def _check_states(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"states have shape {x.shape}, model expects (n, {self.input_dim})")
        return x

    def forward(self, states, use_target: bool = False) -> np.ndarray:
        params = self.target if use_target else self.params
        h = self._check_states(states)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ params[2 * i]
            h += params[2 * i + 1]
            if i < last:
                np.tanh(h, out=h)
        return h

    def forward_cached(self, states) -> tuple[np.ndarray, list[np.ndarray]]:
        """Online forward that also returns layer inputs for :meth:`backward`."""
        h = self._check_states(states)
        acts = [h]
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ self.params[2 * i]
            h += self.params[2 * i + 1]
            if i < last:
                np.tanh(h, out=h)
                acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(upstream * output) for every online parameter."""
        upstream = np.asarray(upstream, dtype=self.dtype)
        n = acts[0].shape[0]
        if upstream.shape != (n, self.n_actions):
            raise ValueError(f"upstream shape {upstream.shape} != {(n, self.n_actions)}")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        delta = upstream
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                a = acts[i]
                delta = delta @ self.params[2 * i].T
                delta *= 1.0 - a * a
        return grads

    def gradients(self, states, upstream) -> list[np.ndarray]:
        _, acts = self.forward_cached(states)
        return self.backward(acts, upstream)

    # -- updates ------------------------------------------------------------

    def adam_step(self, grads: list[np.ndarray], lr: float = 1e-3, b1: float = 0.9,
                  b2: float = 0.999, eps: float = 1e-8) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        for i, (g, p) in enumerate(zip(grads, self.params)):
            if g.shape != p.shape:
                raise ValueError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        g = np.concatenate([x.ravel() for x in grads]).astype(self.dtype, copy=False)
        if not np.all(np.isfinite(g)):
            for i, x in enumerate(grads):
                if not np.all(np.isfinite(x)):
                    kind = "weight" if i % 2 == 0 else "bias"
                    raise TrainingError(f"non-finite gradient in layer {i // 2} {kind}")
        self.step += 1
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        self.flat -= lr * (self.m / c1) / (np.sqrt(self.v / c2) + eps)

    def sync_target(self) -> None:
        self.target_flat[...] = self.flat

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activation": "tanh",
            "dtype": self.dtype.name,
            "seed": self.seed,
            "params": [p.tolist() for p in self.params],
            "target": [p.tolist() for p in self.target],
            "adam": {"step": self.step, "m": self.m.tolist(), "v": self.v.tolist()},
            "train_config": self.train_config,
            "train_config_hash": config_hash(self.train_config),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QModel":
        model = cls.__new__(cls)
        model.sizes = tuple(data["sizes"])
        model.seed = data["seed"]
        model.dtype = np.dtype(data.get("dtype", "float64"))
        shapes = model._shapes()
        for name in ("params", "target"):
            got = [np.shape(p) for p in data[name]]
            if [tuple(s) for s in got] != shapes:
                raise ValueError(f"{name} shapes {got} do not match layer sizes {model.sizes}")

        def flat(arrays):
            return np.concatenate([np.asarray(p, dtype=model.dtype).ravel() for p in arrays])

        model._set_flat(flat(data["params"]))
        model._set_target_flat(flat(data["target"]))
        model.m = np.asarray(data["adam"]["m"], dtype=model.dtype)
        model.v = np.asarray(data["adam"]["v"], dtype=model.dtype)
        model.step = data["adam"]["step"]
        model.train_config = data.get("train_config", {})
        return model

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "QModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.flat).tobytes()).hexdigest()[:16]


def config_hash(config: Optional[dict]) -> str:
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def greedy_actions(q: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise argmax; np.argmax already breaks ties toward the lowest index."""
    if valid is None:
        return np.argmax(q, axis=1)
    return valid[np.argmax(q[:, valid], axis=1)]


# module-level aliases matching the operation names used elsewhere
def q_forward(model: QModel, states, use_target: bool = False) -> np.ndarray:
    return model.forward(states, use_target)


def q_backward(model: QModel, states, upstream) -> list[np.ndarray]:
    return model.gradients(states, upstream)


def adam_step(model: QModel, grads, lr: float = 1e-3) -> QModel:
    model.adam_step(grads, lr)
    return model


def sync_target(model: QModel) -> QModel:
    model.sync_target()
    return model
