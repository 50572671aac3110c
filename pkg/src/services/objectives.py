"""Training objectives.

Token-level losses reduce to a mean over masked positions.  Passing an explicit
`normalizer` divides the masked sum by it instead, which lets a trainer
normalize every microbatch of an accumulation window by the window's total
token count.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import AlignmentError, ConfigError, ContractError, NonFiniteError
from models.config import DistillSpec
from models.records import GroupRollout, TopKLogitsRecord
from numerics import Tensor, as_tensor, no_grad
from numerics import ops
from services.encoding import Batch

logger = logging.getLogger(__name__)

TEACHER_PROB_FLOOR = 1e-12
ADVANTAGE_EPS = 1e-8


def _reduce(per_position: Tensor, mask, normalizer: Optional[float]) -> Tensor:
    return ops.sum_masked(per_position, mask, mean=normalizer is None, normalizer=normalizer)


def token_logprobs(logits, targets) -> Tensor:
    return ops.gather(ops.log_softmax(logits), targets)


def sft_loss(student_logits, target_tokens, response_mask, normalizer: Optional[float] = None) -> Tensor:
    return ops.neg(_reduce(token_logprobs(student_logits, target_tokens), response_mask, normalizer))


def _check_aligned(teacher_logprobs: np.ndarray, student_logits: Tensor) -> None:
    if teacher_logprobs.shape != student_logits.shape:
        raise AlignmentError(f"teacher log-probs {list(teacher_logprobs.shape)} do not align with "
                             f"student logits {list(student_logits.shape)}")


def forward_kld(teacher_logprobs, student_logits, mask, normalizer: Optional[float] = None) -> Tensor:
    """Masked mean of KL(teacher || student)."""
    student_logits = as_tensor(student_logits)
    t = np.asarray(teacher_logprobs, dtype=np.float64)
    _check_aligned(t, student_logits)
    p_t = np.exp(t)
    with np.errstate(invalid="ignore"):
        entropy_term = np.where(p_t > 0, p_t * t, 0.0).sum(axis=-1)
    cross = ops.sum(ops.mul(ops.log_softmax(student_logits), p_t), axis=-1)
    return _reduce(ops.sub(entropy_term, cross), mask, normalizer)


def reverse_kld(teacher_logprobs, student_logits, mask, normalizer: Optional[float] = None) -> Tensor:
    """Masked mean of KL(student || teacher) with teacher probabilities floored at 1e-12."""
    student_logits = as_tensor(student_logits)
    t = np.asarray(teacher_logprobs, dtype=np.float64)
    _check_aligned(t, student_logits)
    log_t = np.log(np.maximum(np.exp(t), TEACHER_PROB_FLOOR))
    log_s = ops.log_softmax(student_logits)
    p_s = ops.exp(log_s)
    per = ops.sum(ops.mul(p_s, ops.sub(log_s, log_t)), axis=-1)
    return _reduce(per, mask, normalizer)


def divergence(kind: str, teacher_logprobs, student_logits, mask, normalizer: Optional[float] = None) -> Tensor:
    if kind == "forward_kld":
        return forward_kld(teacher_logprobs, student_logits, mask, normalizer)
    if kind == "reverse_kld":
        return reverse_kld(teacher_logprobs, student_logits, mask, normalizer)
    raise ConfigError(f"unknown distillation_type {kind!r}")


@dataclass
class TopKTargets:
    """Teacher top-k supports laid out on a batch grid: ids/logprobs [B, T, k]."""

    token_ids: np.ndarray
    logprobs: np.ndarray
    mask: np.ndarray

    @property
    def k(self) -> int:
        return self.token_ids.shape[-1]

    @classmethod
    def from_records(cls, records: Sequence[TopKLogitsRecord], batch: Batch, vocab_size: int) -> "TopKTargets":
        if len(records) != len(batch.sample_indices):
            raise AlignmentError(f"{len(records)} logits records for a batch of {len(batch.sample_indices)}")
        widths = {len(p.topk) for r in records for p in r.positions}
        if len(widths) != 1:
            raise AlignmentError(f"logits records carry mixed top-k widths {sorted(widths)}")
        k = widths.pop()
        B, T = batch.targets.shape
        token_ids = np.broadcast_to(np.arange(k, dtype=np.int64), (B, T, k)).copy()
        logprobs = np.zeros((B, T, k), dtype=np.float64)
        for row, (record, sample_index) in enumerate(zip(records, batch.sample_indices)):
            if record.sample_index != sample_index:
                raise AlignmentError(f"logits record {record.sample_index} does not match sample "
                                     f"{sample_index}", sample_index)
            positions = np.flatnonzero(batch.mask[row])
            if len(positions) != len(record.positions):
                raise AlignmentError(f"sample {sample_index}: {len(record.positions)} logits positions for "
                                     f"{len(positions)} response tokens", sample_index)
            for col, pos in zip(positions, record.positions):
                if pos.target_token != batch.targets[row, col]:
                    raise AlignmentError(f"sample {sample_index}: target token {pos.target_token} at "
                                         f"position {col} does not match {batch.targets[row, col]}",
                                         sample_index)
                ids = [t for t, _ in pos.topk]
                if max(ids) >= vocab_size:
                    raise AlignmentError(f"sample {sample_index}: teacher token id {max(ids)} is outside "
                                         f"the student vocabulary ({vocab_size})", sample_index)
                token_ids[row, col] = ids
                logprobs[row, col] = [lp for _, lp in pos.topk]
        return cls(token_ids, logprobs, batch.mask.copy())


def _renormalize(logprobs: np.ndarray) -> np.ndarray:
    top = logprobs.max(axis=-1, keepdims=True)
    return logprobs - (top + np.log(np.exp(logprobs - top).sum(axis=-1, keepdims=True)))


def topk_kld(topk: TopKTargets, student_logits, spec: DistillSpec, normalizer: Optional[float] = None) -> Tensor:
    """Divergence restricted to the teacher's top-k support, both sides renormalized over it."""
    support = ops.gather(student_logits, topk.token_ids)
    return divergence(spec.distillation_type, _renormalize(topk.logprobs), support, topk.mask, normalizer)


@dataclass
class KDBatch:
    batch: Batch
    topk: Optional[TopKTargets] = None
    teacher_logprobs: Optional[np.ndarray] = None


def combined_kd_loss(student_logits, kd: KDBatch, spec: DistillSpec, normalizer: Optional[float] = None,
                     parts: Optional[dict[str, float]] = None) -> Tensor:
    """(1 - kd_ratio) * SFT + kd_ratio * divergence; the endpoints return one term unchanged.

    When `parts` is given it receives both unweighted terms, keyed "sft" and
    the distillation type.
    """
    r = spec.kd_ratio
    b = kd.batch

    def div() -> Tensor:
        if kd.topk is not None:
            return topk_kld(kd.topk, student_logits, spec, normalizer)
        if kd.teacher_logprobs is None:
            raise ContractError("combined_kd_loss needs top-k targets or full teacher log-probs")
        return divergence(spec.distillation_type, kd.teacher_logprobs, student_logits, b.mask, normalizer)

    def sft() -> Tensor:
        return sft_loss(student_logits, b.targets, b.mask, normalizer)

    sft_term = sft() if r < 1.0 else None
    div_term = div() if r > 0.0 else None
    if sft_term is None:
        loss = div_term
    elif div_term is None:
        loss = sft_term
    else:
        loss = ops.add(ops.scale(sft_term, 1.0 - r), ops.scale(div_term, r))
    if parts is not None:
        with no_grad():
            parts["sft"] = (sft_term if sft_term is not None else sft()).item()
            parts[spec.distillation_type] = (div_term if div_term is not None else div()).item()
    return loss


def sequence_logps(logits, targets, mask) -> Tensor:
    """Sum of response-token log-probs per sequence, shape [B]."""
    return ops.sum(ops.mul(token_logprobs(logits, targets), np.asarray(mask, dtype=np.float64)), axis=-1)


def _check_finite(name: str, *values) -> None:
    for v in values:
        arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} received non-finite log-probabilities")


def _batch_reduce(per_item: Tensor, normalizer: Optional[float]) -> Tensor:
    n = float(per_item.size) if normalizer is None else float(normalizer)
    return ops.scale(ops.sum(per_item), 1.0 / n)


def dpo_loss(policy_logps_chosen, policy_logps_rejected, ref_logps_chosen, ref_logps_rejected,
             beta: float, normalizer: Optional[float] = None) -> Tensor:
    if beta <= 0:
        raise ContractError(f"dpo beta must be > 0, got {beta}")
    _check_finite("dpo_loss", policy_logps_chosen, policy_logps_rejected, ref_logps_chosen, ref_logps_rejected)
    chosen = ops.sub(policy_logps_chosen, ref_logps_chosen)
    rejected = ops.sub(policy_logps_rejected, ref_logps_rejected)
    margin = ops.scale(ops.sub(chosen, rejected), beta)
    return ops.neg(_batch_reduce(ops.log_sigmoid(margin), normalizer))


def reward_model_loss(reward_chosen, reward_rejected, normalizer: Optional[float] = None) -> Tensor:
    """Bradley-Terry pairwise loss."""
    _check_finite("reward_model_loss", reward_chosen, reward_rejected)
    return ops.neg(_batch_reduce(ops.log_sigmoid(ops.sub(reward_chosen, reward_rejected)), normalizer))


def grpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError(f"group-relative advantages need at least 2 rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise NonFiniteError("grpo_advantages received non-finite rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + ADVANTAGE_EPS)


def kl_penalty(policy_logps, ref_logps) -> Tensor:
    """Per-token k3 estimator exp(ref - pi) - (ref - pi) - 1, always >= 0."""
    d = ops.sub(ref_logps, policy_logps)
    return ops.sub(ops.sub(ops.exp(d), d), 1.0)


def grpo_loss(group: GroupRollout, policy_logps, ref_logps, clip_eps: float, kl_coeff: float) -> Tensor:
    """Clipped ratio surrogate plus KL penalty, averaged over all completion tokens of the group."""
    if group.old_logprobs is None:
        raise ContractError("grpo_loss needs the old log-probs recorded at sampling time")
    policy_logps = as_tensor(policy_logps)
    G, T = policy_logps.shape
    if G != group.group_size:
        raise ContractError(f"policy log-probs cover {G} completions, group has {group.group_size}")
    mask = np.ones((G, T)) if group.completion_mask is None else np.asarray(group.completion_mask, dtype=np.float64)
    advantages = np.repeat(grpo_advantages(group.rewards)[:, None], T, axis=1)
    ratio = ops.exp(ops.sub(policy_logps, group.old_logprobs))
    unclipped = ops.mul(ratio, advantages)
    clipped = ops.mul(ops.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages)
    per_token = ops.neg(ops.minimum(unclipped, clipped))
    if kl_coeff:
        per_token = ops.add(per_token, ops.scale(kl_penalty(policy_logps, ref_logps), kl_coeff))
    return ops.sum_masked(per_token, mask, mean=True)
