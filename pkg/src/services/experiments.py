"""Desk-scale distillation experiments on a toy copy / reverse / add grammar.

Each function is self-contained and seeded; the slow test tier runs them.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from models.chat_template import ChatTemplate
from models.config import DistillSpec, GrpoConfig, InferenceConfig, TrainingConfig
from models.records import InstructionRecord, LabeledRecord, PreferenceRecord
from models.tinylm import ModelConfig, TinyLM
from numerics import no_grad
from numerics import ops
from services.encoding import EncodedSample, collate, encode_example
from services.evaluation import heldout_ce, heldout_forward_kld
from services.grpo_service import contains_reward, train_grpo
from services.objectives import TopKTargets, forward_kld, topk_kld
from services.preference_service import train_dpo
from services.teacher_service import annotate_local, export_topk_logits, topk_of
from services.training_service import encode_labeled, train_sft, train_white_box

logger = logging.getLogger(__name__)

TOY_TEMPLATE = "U:{user}\nA:{assistant}"
TOY_SYSTEM = ""
LETTERS = "abcde"


def toy_template() -> ChatTemplate:
    return ChatTemplate(TOY_TEMPLATE)


def toy_corpus(n: int, seed: int) -> list[LabeledRecord]:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        task = rng.integers(3)
        if task == 2:
            a, b = (int(x) for x in rng.integers(0, 50, size=2))
            rows.append(LabeledRecord(f"add {a} {b}", str(a + b)))
            continue
        word = "".join(rng.choice(list(LETTERS), size=int(rng.integers(2, 6))))
        if task == 0:
            rows.append(LabeledRecord(f"copy {word}", word))
        else:
            rows.append(LabeledRecord(f"rev {word}", word[::-1]))
    return rows


def teacher_config(seed: int) -> ModelConfig:
    return ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, max_seq_len=32, seed=seed)


def student_config(seed: int) -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256, max_seq_len=32, seed=seed + 1)


def toy_training(output_dir: Path, seed: int, epochs: int = 3, learning_rate: float = 3e-3,
                 batch_size: int = 8) -> TrainingConfig:
    return TrainingConfig(output_dir=str(output_dir), num_train_epochs=epochs,
                          per_device_train_batch_size=batch_size, gradient_accumulation_steps=1,
                          save_steps=10 ** 9, logging_steps=1, learning_rate=learning_rate,
                          weight_decay=0.0, warmup_ratio=0.1, seed=seed, max_seq_length=32)


def encode(records: Sequence[LabeledRecord], model: TinyLM) -> list[EncodedSample]:
    return encode_labeled(records, toy_template(), TOY_SYSTEM, model.config.max_seq_len, model)


def train_toy_teacher(seed: int, workdir: Path, n: int = 400, epochs: int = 6) -> TinyLM:
    teacher = TinyLM.init_params(teacher_config(seed))
    train_sft(teacher, toy_corpus(n, seed), toy_training(workdir / "teacher", seed, epochs), toy_template(),
              system_prompt=TOY_SYSTEM)
    return teacher.requires_grad_(False)


def teacher_labels(teacher: TinyLM, instructions: Sequence[str], seed: int) -> list[LabeledRecord]:
    cfg = InferenceConfig(temperature=0.0, max_new_tokens=8, system_prompt=TOY_SYSTEM, seed=seed)
    labeled = annotate_local([InstructionRecord(i) for i in instructions], teacher, cfg, toy_template())
    return [r for r in labeled if r.ok]


def black_box_run(seed: int, workdir: Path, teacher: TinyLM | None = None) -> dict:
    """Student CE on held-out teacher labels before and after black-box distillation."""
    teacher = teacher or train_toy_teacher(seed, workdir)
    train = teacher_labels(teacher, [r.instruction for r in toy_corpus(200, seed + 10)], seed)
    held = teacher_labels(teacher, [r.instruction for r in toy_corpus(50, seed + 20)], seed)
    student = TinyLM.init_params(student_config(seed))
    held_samples = encode(held, student)
    before = heldout_ce(student, held_samples)
    train_sft(student, train, toy_training(workdir / "student_bb", seed), toy_template(), system_prompt=TOY_SYSTEM)
    return {"untrained_ce": before, "trained_ce": heldout_ce(student, held_samples)}


def white_vs_black_run(seed: int, workdir: Path, teacher: TinyLM | None = None, k: int = 10) -> dict:
    """Held-out forward KLD to the teacher for kd_ratio 0 and 0.5 students under the same budget."""
    teacher = teacher or train_toy_teacher(seed, workdir)
    train = teacher_labels(teacher, [r.instruction for r in toy_corpus(200, seed + 10)], seed)
    held = teacher_labels(teacher, [r.instruction for r in toy_corpus(50, seed + 20)], seed)
    logits = export_topk_logits(teacher, train, k, 32, toy_template(), workdir / "logits.jsonl",
                                system_prompt=TOY_SYSTEM)
    out = {}
    for ratio in (0.0, 0.5):
        student = TinyLM.init_params(student_config(seed))
        spec = DistillSpec(kd_ratio=ratio, distillation_type="forward_kld", k=k, max_seq_length=32)
        train_white_box(student, train, logits, spec, toy_training(workdir / f"student_kd{ratio}", seed),
                        toy_template(), system_prompt=TOY_SYSTEM)
        out[f"kd{ratio}_kld"] = heldout_forward_kld(student, teacher, encode(held, student))
    return out


def topk_sweep(teacher: TinyLM, student: TinyLM, samples: Sequence[EncodedSample],
               ks: Sequence[int] = (2, 4, 8, 16)) -> dict[int, float]:
    """Mean |topk_kld - forward_kld| per k; the full vocabulary is appended as the last k."""
    vocab = teacher.config.vocab_size
    ks = [*ks, vocab]
    gaps = {k: [] for k in ks}
    with no_grad():
        for s in samples:
            batch = collate([s])
            t = ops.log_softmax(teacher(batch.input_ids)).data
            logits = student(batch.input_ids)
            full = forward_kld(t, logits, batch.mask).item()
            for k in ks:
                ids = np.zeros(t.shape[:-1] + (k,), dtype=np.int64)
                lps = np.zeros_like(ids, dtype=np.float64)
                for pos in np.flatnonzero(batch.mask[0]):
                    top = topk_of(t[0, pos], k)
                    ids[0, pos] = [i for i, _ in top]
                    lps[0, pos] = [lp for _, lp in top]
                targets = TopKTargets(ids, lps, batch.mask)
                approx = topk_kld(targets, logits, DistillSpec(k=k)).item()
                gaps[k].append(abs(approx - full))
    return {k: float(np.mean(v)) for k, v in gaps.items()}


def marker_preferences(n: int, seed: int, marker: str = "!") -> list[PreferenceRecord]:
    """Pairs whose chosen response ends with `marker` and rejected with '.'."""
    rng = np.random.default_rng(seed)
    prefs = []
    for _ in range(n):
        word = "".join(rng.choice(list(LETTERS), size=int(rng.integers(2, 5))))
        prefs.append(PreferenceRecord(f"say {word}", word + marker, word + "."))
    return prefs


def dpo_run(seed: int, workdir: Path, n_pairs: int = 200, epochs: int = 3) -> dict:
    student = TinyLM.init_params(student_config(seed))
    cfg = toy_training(workdir / "dpo", seed, epochs=epochs, learning_rate=1e-3)
    outcome = train_dpo(student, None, marker_preferences(n_pairs, seed), 0.1, cfg, toy_template(),
                        system_prompt=TOY_SYSTEM, max_seq_length=32)
    summary = outcome.manifest.summary
    return {"step0_loss": outcome.result.losses[0], "initial_accuracy": summary["initial_accuracy"],
            "final_accuracy": summary["final_accuracy"]}


def grpo_run(seed: int, workdir: Path, iterations: int = 50, target: str = "a",
             kl_coeff: float = 0.04) -> dict:
    student = TinyLM.init_params(student_config(seed))
    grpo = GrpoConfig(group_size=8, iterations=iterations, max_new_tokens=8, temperature=1.0,
                      kl_coeff=kl_coeff, reward=f"contains:{target}")
    cfg = replace(toy_training(workdir / "grpo", seed, learning_rate=3e-3), warmup_ratio=0.0)
    prompts = [InstructionRecord(r.instruction) for r in toy_corpus(20, seed)]
    _, _, result = train_grpo(student, prompts, contains_reward(target), grpo, cfg, toy_template(),
                              system_prompt=TOY_SYSTEM)
    return {"mean_rewards": result.mean_rewards, "mean_kl": result.mean_kl,
            "advantage_means": result.advantage_means}
