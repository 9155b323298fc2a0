"""Multi-distribution offline RL for feed position allocation."""

import os as _os

# Deterministic mode pins BLAS to one thread so reductions keep a fixed order.
# This only takes effect if numpy has not been imported yet.
if _os.environ.get("MDDL_DETERMINISTIC", "").strip().lower() not in ("", "0", "false", "no"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = "1"

from .core import Action, Dataset, Source, StateVec, Transition, decode_action, encode_action
from .feedsim import EnvConfig, env_reset, env_step, rollout
from .qfunc import QModel
from .trainer import TrainConfig, train
from .wer import PositionTable, soft_expected_wer, wer

__all__ = ["Action", "Dataset", "Source", "StateVec", "Transition", "decode_action",
           "encode_action", "EnvConfig", "env_reset", "env_step", "rollout", "QModel",
           "TrainConfig", "train", "PositionTable", "soft_expected_wer", "wer"]

__version__ = "0.1.0"
