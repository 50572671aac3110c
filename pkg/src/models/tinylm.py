from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from errors import ConfigError, ContractError
from models.checkpoint import load_checkpoint, save_checkpoint
from models.tokenizer import BYTE_VOCAB_SIZE, EOS_ID
from numerics import Tensor, no_grad
from numerics import ops

# additive attention mask value; exp() of it underflows to exactly 0
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            if not isinstance(getattr(self, f.name), int) or isinstance(getattr(self, f.name), bool):
                raise ConfigError(f"model config '{f.name}' must be an integer")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (pad/bos/eos/unk are reserved)")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("d_model, n_layers, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known}).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names in initialization order."""
    d, ff, V = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.w_qkv": (d, 3 * d), f"{p}.attn.b_qkv": (3 * d,),
            f"{p}.attn.w_out": (d, d), f"{p}.attn.b_out": (d,),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.mlp.w_in": (d, ff), f"{p}.mlp.b_in": (ff,),
            f"{p}.mlp.w_out": (ff, d), f"{p}.mlp.b_out": (d,),
        })
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["unembed"] = (d, V)
    return shapes


def _initial_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias") or name.split(".")[-1].startswith("b_"):
        return np.zeros(shape)
    return rng.normal(0.0, 0.02, size=shape)


class TinyLM:
    """Pre-norm decoder-only transformer with learned positional embeddings."""

    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor]):
        self.config = config.validate()
        expected = parameter_shapes(config)
        if set(parameters) != set(expected):
            missing = sorted(set(expected) - set(parameters))
            extra = sorted(set(parameters) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if parameters[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {list(parameters[name].shape)}, "
                                  f"expected {list(shape)}")
        self.parameters = {name: parameters[name] for name in expected}

    @classmethod
    def init_params(cls, config: ModelConfig) -> "TinyLM":
        config.validate()
        rng = np.random.default_rng(config.seed)
        params = {name: Tensor(_initial_value(name, shape, rng), requires_grad=True)
                  for name, shape in parameter_shapes(config).items()}
        return cls(config, params)

    # --- parameter helpers ---
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def requires_grad_(self, flag: bool) -> "TinyLM":
        for p in self.parameters.values():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters.items():
            p.data = np.array(state[name], dtype=np.float64)

    def frozen_copy(self) -> "TinyLM":
        clone = copy.deepcopy(self)
        return clone.requires_grad_(False)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.parameters.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    # --- forward ---
    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2):
            raise ContractError(f"tokens must be [T] or [B, T], got shape {list(ids.shape)}")
        T = ids.shape[-1]
        if T == 0:
            raise ContractError("cannot run forward on an empty sequence")
        if T > self.config.max_seq_len:
            raise ContractError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        return ids

    def hidden_states(self, tokens) -> Tensor:
        """Final-norm hidden states, [T, d] or [B, T, d]."""
        ids = self._check_tokens(tokens)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        B, T = ids.shape
        cfg = self.config
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        P = self.parameters

        causal = np.triu(np.full((T, T), MASK_VALUE), k=1)
        x = ops.add(ops.embedding_lookup(P["tok_emb"], ids), ops.select(P["pos_emb"], slice(0, T)))
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            h = ops.layernorm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
            qkv = ops.add(ops.matmul(h, P[f"{p}.attn.w_qkv"]), P[f"{p}.attn.b_qkv"])
            qkv = ops.transpose(ops.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = ops.select(qkv, 0), ops.select(qkv, 1), ops.select(qkv, 2)
            scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            attn = ops.softmax(ops.add(scores, causal))
            ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = ops.add(x, ops.add(ops.matmul(ctx, P[f"{p}.attn.w_out"]), P[f"{p}.attn.b_out"]))
            h = ops.layernorm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
            m = ops.gelu(ops.add(ops.matmul(h, P[f"{p}.mlp.w_in"]), P[f"{p}.mlp.b_in"]))
            x = ops.add(x, ops.add(ops.matmul(m, P[f"{p}.mlp.w_out"]), P[f"{p}.mlp.b_out"]))
        x = ops.layernorm(x, P["ln_f.gain"], P["ln_f.bias"])
        return ops.reshape(x, (T, cfg.d_model)) if single else x

    def forward(self, tokens) -> Tensor:
        """Logits [T, V] for a sequence or [B, T, V] for an equal-length batch."""
        return ops.matmul(self.hidden_states(tokens), self.parameters["unembed"])

    __call__ = forward

    def generate(self, prompt: Sequence[int], temperature: float, max_new_tokens: int,
                 seed: Optional[int] = None, eos_id: int = EOS_ID) -> list[int]:
        return generate(self, prompt, temperature, max_new_tokens, seed, eos_id)

    # --- persistence ---
    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.config.to_dict(), self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "TinyLM":
        config, arrays = load_checkpoint(path)
        model_config = ModelConfig.from_dict(config)
        names = parameter_shapes(model_config)
        return cls(model_config, {n: Tensor(arrays[n], requires_grad=True) for n in names})


def init_params(config: ModelConfig) -> TinyLM:
    return TinyLM.init_params(config)


def forward(model: TinyLM, tokens) -> Tensor:
    return model.forward(tokens)


def generate(model: TinyLM, prompt: Sequence[int], temperature: float, max_new_tokens: int,
             seed: Optional[int] = None, eos_id: int = EOS_ID) -> list[int]:
    """Sample up to max_new_tokens after `prompt`; the returned tokens include a final eos if emitted.

    temperature 0 decodes greedily (lowest id wins ties).
    """
    if len(prompt) == 0:
        raise ContractError("generate() needs a non-empty prompt")
    if temperature < 0:
        raise ContractError(f"temperature must be >= 0, got {temperature}")
    rng = np.random.default_rng(seed)
    window = model.config.max_seq_len
    seq = [int(t) for t in prompt]
    out: list[int] = []
    with no_grad():
        for _ in range(max_new_tokens):
            logits = model.forward(seq[-window:]).data[-1]
            if temperature == 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(p.size, p=p))
            out.append(nxt)
            seq.append(nxt)
            if nxt == eos_id:
                break
    return out
