"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from errors import ContractError, ShapeError
from models.checkpoint import read_arrays, write_arrays
from models.config import TrainingConfig
from numerics import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()})

    def save(self, directory: Path) -> None:
        arrays = {f"m.{n}": a for n, a in self.m.items()}
        arrays.update({f"v.{n}": a for n, a in self.v.items()})
        arrays["step"] = np.array([self.step], dtype=np.float64)
        write_arrays(directory, arrays)

    @classmethod
    def load(cls, directory: Path, params: Mapping[str, Tensor]) -> "OptimizerState":
        shapes = {f"m.{n}": list(p.shape) for n, p in params.items()}
        shapes.update({f"v.{n}": list(p.shape) for n, p in params.items()})
        shapes["step"] = [1]
        arrays = read_arrays(directory, shapes)
        return cls({n: arrays[f"m.{n}"] for n in params}, {n: arrays[f"v.{n}"] for n in params},
                   int(arrays["step"][0]))


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
                   lr: float, weight_decay: float) -> OptimizerState:
    """One in-place AdamW update; decay is applied to the weights directly, scaled by lr."""
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {list(g.shape)}, parameter {list(p.data.shape)}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + EPS)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update
    return state


def warmup_steps(total_steps: int, cfg: TrainingConfig) -> int:
    return math.ceil(cfg.warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, cfg: TrainingConfig) -> float:
    if step < 0 or step > total_steps:
        raise ContractError(f"schedule step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.learning_rate * step / warm
    if cfg.lr_scheduler_type == "constant":
        return cfg.learning_rate
    progress = (step - warm) / max(1, total_steps - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
