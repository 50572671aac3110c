from __future__ import annotations

from pathlib import Path

import numpy as np

from errors import CheckpointError
from models.checkpoint import load_checkpoint, save_checkpoint
from models.tinylm import ModelConfig, TinyLM, parameter_shapes
from numerics import Tensor
from numerics import ops

HEAD_WEIGHT = "head.w"
HEAD_BIAS = "head.b"


class RewardModel:
    """TinyLM backbone + linear head over the mean-pooled final hidden state."""

    def __init__(self, backbone: TinyLM, head_w: Tensor, head_b: Tensor):
        self.backbone = backbone
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def from_backbone(cls, backbone: TinyLM, seed: int = 0) -> "RewardModel":
        rng = np.random.default_rng(seed)
        d = backbone.config.d_model
        return cls(backbone,
                   Tensor(rng.normal(0.0, 0.02, size=(d, 1)), requires_grad=True),
                   Tensor(np.zeros(1), requires_grad=True))

    @property
    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.parameters, HEAD_WEIGHT: self.head_w, HEAD_BIAS: self.head_b}

    def requires_grad_(self, flag: bool) -> "RewardModel":
        for p in self.parameters.values():
            p.requires_grad = flag
        return self

    def score(self, input_ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        """One scalar reward per sequence, shape [B]."""
        ids = np.asarray(input_ids, dtype=np.int64)
        mask = np.asarray(attention_mask, dtype=np.float64)
        hidden = self.backbone.hidden_states(ids)                      # [B, T, d]
        weights = mask / np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
        pooled = ops.matmul(Tensor(weights[:, None, :]), hidden)        # [B, 1, d]
        reward = ops.add(ops.matmul(pooled, self.head_w), self.head_b)  # [B, 1, 1]
        return ops.reshape(reward, (ids.shape[0],))

    def save(self, path: str | Path) -> Path:
        state = self.backbone.state_dict()
        state[HEAD_WEIGHT] = self.head_w.data
        state[HEAD_BIAS] = self.head_b.data
        return save_checkpoint(path, {**self.backbone.config.to_dict(), "kind": "reward_model"}, state)

    @classmethod
    def load(cls, path: str | Path) -> "RewardModel":
        config, arrays = load_checkpoint(path)
        if config.get("kind") != "reward_model" or HEAD_WEIGHT not in arrays:
            raise CheckpointError(f"{path} is not a reward model checkpoint")
        model_config = ModelConfig.from_dict(config)
        backbone = TinyLM(model_config, {n: Tensor(arrays[n], requires_grad=True)
                                         for n in parameter_shapes(model_config)})
        return cls(backbone, Tensor(arrays[HEAD_WEIGHT], requires_grad=True),
                   Tensor(arrays[HEAD_BIAS], requires_grad=True))
