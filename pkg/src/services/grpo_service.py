"""Group-relative policy optimization against a frozen reference policy."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from errors import ConfigError, NonFiniteError, TrainingError
from models.chat_template import ChatTemplate
from models.config import GrpoConfig, TrainingConfig
from models.manifest import RunManifest
from models.records import GroupRollout, InstructionRecord
from models.reward_model import RewardModel
from models.tinylm import TinyLM, generate
from models.tokenizer import EOS_ID, detokenize
from numerics import Tape, no_grad
from numerics import ops
from services.encoding import Batch, completion_batch, encode_prompt
from services.objectives import grpo_advantages, grpo_loss, kl_penalty, token_logprobs
from services.optimizer import OptimizerState, lr_at, optimizer_step
from services.training_service import (CHECKPOINT_DIR, DEFAULT_SYSTEM_PROMPT, FINAL_DIR, OPTIMIZER_DIR, TRAINER_STATE,
                                       _new_manifest)

logger = logging.getLogger(__name__)

RewardFn = Callable[[str], float]
CONTAINS_PREFIX = "contains:"


def contains_reward(target: str) -> RewardFn:
    """1.0 when the completion contains `target`, else 0.0."""
    def reward(text: str) -> float:
        return 1.0 if target in text else 0.0
    return reward


def resolve_reward(source: str, base_dir: Optional[Path] = None) -> Union[RewardFn, RewardModel]:
    """`contains:<text>` or the path of a reward-model checkpoint."""
    if source.startswith(CONTAINS_PREFIX):
        target = source[len(CONTAINS_PREFIX):]
        if not target:
            raise ConfigError("grpo.reward 'contains:' needs a non-empty target text")
        return contains_reward(target)
    path = Path(source)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return RewardModel.load(path)


@dataclass
class GrpoResult:
    iterations: int
    mean_rewards: list[float] = field(default_factory=list)
    mean_kl: list[float] = field(default_factory=list)
    advantage_means: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_path: Optional[Path] = None


def _completion_text(tokens: Sequence[int]) -> str:
    return detokenize([t for t in tokens if t != EOS_ID])


def score_completions(reward: Union[RewardFn, RewardModel], prompt: Sequence[int],
                      completions: Sequence[Sequence[int]]) -> np.ndarray:
    if isinstance(reward, RewardModel):
        batch = completion_batch(prompt, completions)
        with no_grad():
            return reward.score(batch.input_ids, batch.attention_mask).data.copy()
    try:
        values = [float(reward(_completion_text(c))) for c in completions]
    except Exception as e:
        raise TrainingError(f"reward function failed: {e}") from e
    return np.asarray(values, dtype=np.float64)


def _save_checkpoint(student: TinyLM, state: OptimizerState, result: GrpoResult, step: int, output_dir: Path,
                     manifest: RunManifest) -> Path:
    path = output_dir / CHECKPOINT_DIR / f"step-{step}"
    student.save(path)
    state.save(path / OPTIMIZER_DIR)
    (path / TRAINER_STATE).write_text(json.dumps({"step": step, "mean_rewards": result.mean_rewards,
                                                   "mean_kl": result.mean_kl}), encoding="utf-8")
    manifest.add_checkpoint(path)
    logger.info("grpo: saved checkpoint %s", path)
    return path


def sample_group(policy: TinyLM, prompt: list[int], grpo: GrpoConfig, seed: int) -> list[list[int]]:
    return [generate(policy, prompt, grpo.temperature, grpo.max_new_tokens, seed=seed + g)
            for g in range(grpo.group_size)]


def rollout(policy: TinyLM, prompt: list[int], completions: list[list[int]],
            rewards: np.ndarray) -> tuple[GroupRollout, Batch]:
    """Attach the sampling-time log-probs and completion mask to a scored group."""
    batch = completion_batch(prompt, completions)
    with no_grad():
        old = token_logprobs(policy(batch.input_ids), batch.targets).data * batch.mask
    return GroupRollout(prompt, completions, rewards, old, batch.mask), batch


def train_grpo(student: TinyLM, prompts: Sequence[InstructionRecord], reward: Union[RewardFn, RewardModel],
               grpo: GrpoConfig, cfg: TrainingConfig, template: ChatTemplate, *,
               reference: Optional[TinyLM] = None, system_prompt: str = DEFAULT_SYSTEM_PROMPT,
               output_dir: Optional[Path] = None, manifest: Optional[RunManifest] = None) -> tuple[TinyLM, RunManifest, GrpoResult]:
    """One optimizer step per iteration over freshly sampled groups.

    Groups whose completions all score the same carry zero advantage; only the
    KL term trains on them.
    """
    grpo.validate()
    if not prompts:
        raise TrainingError("grpo needs at least one prompt")
    output_dir = Path(output_dir or cfg.output_dir)
    manifest = _new_manifest(output_dir, cfg, manifest)
    manifest.reset_metrics()
    reference = reference if reference is not None else student.frozen_copy()
    max_prompt = student.config.max_seq_len - grpo.max_new_tokens
    if max_prompt < 1:
        raise ConfigError(f"grpo.max_new_tokens {grpo.max_new_tokens} leaves no room for a prompt "
                          f"within max_seq_len {student.config.max_seq_len}")
    encoded = [encode_prompt(template, system_prompt, p.instruction, max_prompt, student.config.vocab_size)
               for p in prompts]
    seed = cfg.resolved_seed
    rng = np.random.default_rng(seed)
    state = OptimizerState.for_params(student.parameters)
    params = list(student.parameters.values())
    names = list(student.parameters)
    result = GrpoResult(grpo.iterations)

    for it in tqdm(range(grpo.iterations), desc="grpo", disable=None, leave=False):
        picks = rng.choice(len(encoded), size=grpo.prompts_per_iteration, replace=len(encoded) < grpo.prompts_per_iteration)
        groups = []
        for j, idx in enumerate(picks):
            prompt = encoded[int(idx)]
            completions = sample_group(student, prompt, grpo, seed=seed * 1_000_003 + it * 1009 + j * 97)
            rewards = score_completions(reward, prompt, completions)
            if not np.all(np.isfinite(rewards)):
                raise TrainingError(f"iteration {it}: reward source returned non-finite values")
            if len({tuple(c) for c in completions}) == 1 or np.all(rewards == rewards[0]):
                logger.warning("iteration %d: group rewards are all equal; advantages are zero", it)
            groups.append(rollout(student, prompt, completions, rewards))
            result.advantage_means.append(float(grpo_advantages(rewards).mean()))
        mean_reward = float(np.mean([g.rewards.mean() for g, _ in groups]))

        with Tape() as tape:
            total = None
            kl_values = []
            for g, batch in groups:
                logits = student(batch.input_ids)
                policy_lp = ops.mul(token_logprobs(logits, batch.targets), batch.mask)
                with no_grad():
                    ref_lp = token_logprobs(reference(batch.input_ids), batch.targets).data * batch.mask
                    kl = kl_penalty(policy_lp.data, ref_lp).data
                kl_values.append(float((kl * batch.mask).sum() / batch.mask.sum()))
                loss = grpo_loss(g, policy_lp, ref_lp, grpo.clip_eps, grpo.kl_coeff)
                total = loss if total is None else ops.add(total, loss)
            total = ops.scale(total, 1.0 / len(groups))
            try:
                grads = dict(zip(names, tape.gradients(total, params)))
            except NonFiniteError as e:
                raise TrainingError(f"grpo iteration {it}: {e}") from e
        loss_value = total.item()
        if not math.isfinite(loss_value):
            raise TrainingError(f"grpo iteration {it}: non-finite loss")
        lr = lr_at(it, grpo.iterations, cfg)
        optimizer_step(student.parameters, grads, state, lr, cfg.weight_decay)

        result.mean_rewards.append(mean_reward)
        result.mean_kl.append(float(np.mean(kl_values)))
        step = it + 1
        if step % cfg.logging_steps == 0:
            manifest.log_step({"step": step, "lr": lr, "loss": loss_value, "mean_reward": mean_reward,
                               "kl": result.mean_kl[-1]})
        logger.info("grpo iteration %d mean reward %.4f", step, mean_reward)
        if step % cfg.save_steps == 0:
            result.checkpoints.append(_save_checkpoint(student, state, result, step, output_dir, manifest))

    result.final_path = student.save(output_dir / FINAL_DIR)
    manifest.summary.update({"mean_rewards": result.mean_rewards, "final": str(result.final_path),
                             "reference_fingerprint": reference.fingerprint()})
    manifest.save()
    return student, manifest, result
