"""Preference trainers: DPO on a policy, Bradley-Terry on a reward model."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from errors import TrainingError
from models.chat_template import ChatTemplate
from models.config import TrainingConfig
from models.manifest import RunManifest
from models.records import PreferenceRecord
from models.reward_model import RewardModel
from models.tinylm import TinyLM
from numerics import no_grad
from services.encoding import EncodedSample, collate, encode_example
from services.objectives import dpo_loss, reward_model_loss, sequence_logps
from services.training_service import (DEFAULT_SYSTEM_PROMPT, TrainingLoop, TrainingOutcome,
                                       _new_manifest)

logger = logging.getLogger(__name__)


@dataclass
class PreferencePair:
    chosen: EncodedSample
    rejected: EncodedSample


def encode_pairs(prefs: Sequence[PreferenceRecord], template: ChatTemplate, system_prompt: str,
                 max_seq_length: int, model: TinyLM) -> list[PreferencePair]:
    limit = min(max_seq_length, model.config.max_seq_len)
    vocab = model.config.vocab_size
    pairs, degenerate = [], 0
    for i, p in enumerate(prefs):
        if p.degenerate:
            degenerate += 1
            continue
        pairs.append(PreferencePair(
            encode_example(template, system_prompt, p.instruction, p.chosen, limit, vocab, i),
            encode_example(template, system_prompt, p.instruction, p.rejected, limit, vocab, i)))
    if degenerate:
        logger.warning("skipped %d degenerate preference pair(s) with chosen == rejected", degenerate)
    if not pairs:
        raise TrainingError("no usable preference pairs")
    return pairs


def pair_logps(model: TinyLM, pairs: Sequence[PreferencePair]):
    chosen = collate([p.chosen for p in pairs])
    rejected = collate([p.rejected for p in pairs])
    return (sequence_logps(model(chosen.input_ids), chosen.targets, chosen.mask),
            sequence_logps(model(rejected.input_ids), rejected.targets, rejected.mask))


def preferred_accuracy(model: TinyLM, pairs: Sequence[PreferencePair], ref_c: np.ndarray,
                       ref_r: np.ndarray) -> float:
    """Fraction of pairs with a positive DPO margin against the reference.

    A margin of exactly zero counts as half a pair, so a policy identical to
    its reference scores 0.5.
    """
    with no_grad():
        pc, pr = pair_logps(model, pairs)
    margin = (pc.data - ref_c) - (pr.data - ref_r)
    return float(np.mean(np.where(margin > 0, 1.0, np.where(margin < 0, 0.0, 0.5))))


def train_dpo(student: TinyLM, reference: Optional[TinyLM], prefs: Sequence[PreferenceRecord], beta: float,
              cfg: TrainingConfig, template: ChatTemplate, *, system_prompt: str = DEFAULT_SYSTEM_PROMPT,
              max_seq_length: Optional[int] = None, output_dir: Optional[Path] = None,
              manifest: Optional[RunManifest] = None) -> TrainingOutcome:
    """Reference defaults to a frozen copy of the student as it is before training."""
    output_dir = Path(output_dir or cfg.output_dir)
    manifest = _new_manifest(output_dir, cfg, manifest)
    reference = reference if reference is not None else student.frozen_copy()
    pairs = encode_pairs(prefs, template, system_prompt, max_seq_length or cfg.max_seq_length, student)
    with no_grad():
        ref_c, ref_r = pair_logps(reference, pairs)
        ref_c, ref_r = ref_c.data.copy(), ref_r.data.copy()

    def loss_fn(mb: list[int], normalizer: float):
        pc, pr = pair_logps(student, [pairs[i] for i in mb])
        loss = dpo_loss(pc, pr, ref_c[mb], ref_r[mb], beta, normalizer)
        return loss, {"dpo": loss.item()}

    manifest.summary["initial_accuracy"] = preferred_accuracy(student, pairs, ref_c, ref_r)
    manifest.summary["reference_fingerprint"] = reference.fingerprint()
    logger.info("dpo: initial preferred accuracy %.3f", manifest.summary["initial_accuracy"])
    loop = TrainingLoop("dpo", student.parameters, len(pairs), loss_fn, lambda mb: float(len(mb)),
                        cfg, output_dir, manifest, student.save,
                        on_epoch_end=lambda epoch: {
                            "preferred_accuracy": preferred_accuracy(student, pairs, ref_c, ref_r)})
    result = loop.run()
    manifest.summary["final_accuracy"] = preferred_accuracy(student, pairs, ref_c, ref_r)
    manifest.save()
    return TrainingOutcome(student, manifest, result)


def _scores(rm: RewardModel, samples: Sequence[EncodedSample]):
    batch = collate(samples)
    return rm.score(batch.input_ids, batch.attention_mask)


def pairwise_accuracy(rm: RewardModel, pairs: Sequence[PreferencePair]) -> float:
    with no_grad():
        rc = _scores(rm, [p.chosen for p in pairs]).data
        rr = _scores(rm, [p.rejected for p in pairs]).data
    return float(np.mean(rc > rr))


def train_reward_model(backbone: TinyLM, prefs: Sequence[PreferenceRecord], cfg: TrainingConfig,
                       template: ChatTemplate, *, system_prompt: str = DEFAULT_SYSTEM_PROMPT,
                       max_seq_length: Optional[int] = None, output_dir: Optional[Path] = None,
                       manifest: Optional[RunManifest] = None) -> TrainingOutcome:
    output_dir = Path(output_dir or cfg.output_dir)
    manifest = _new_manifest(output_dir, cfg, manifest)
    rm = RewardModel.from_backbone(backbone, seed=cfg.resolved_seed)
    pairs = encode_pairs(prefs, template, system_prompt, max_seq_length or cfg.max_seq_length, backbone)

    def loss_fn(mb: list[int], normalizer: float):
        rc = _scores(rm, [pairs[i].chosen for i in mb])
        rr = _scores(rm, [pairs[i].rejected for i in mb])
        loss = reward_model_loss(rc, rr, normalizer)
        return loss, {"reward_loss": loss.item()}

    manifest.summary["initial_accuracy"] = pairwise_accuracy(rm, pairs)
    loop = TrainingLoop("reward_model", rm.parameters, len(pairs), loss_fn, lambda mb: float(len(mb)),
                        cfg, output_dir, manifest, rm.save,
                        on_epoch_end=lambda epoch: {"pairwise_accuracy": pairwise_accuracy(rm, pairs)})
    result = loop.run()
    manifest.summary["final_accuracy"] = pairwise_accuracy(rm, pairs)
    manifest.save()
    return TrainingOutcome(rm, manifest, result)
