"""Training loop shared by every trainer, plus the SFT and white-box KD trainers.

Examples are visited in a per-epoch permutation seeded by (seed, epoch).
Microbatches of per_device_train_batch_size examples are grouped into
accumulation windows of gradient_accumulation_steps; every microbatch loss is
normalized by the window's total token count, so one window equals one
large batch.  save_steps and logging_steps count optimizer steps.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from tqdm import tqdm

from errors import AlignmentError, NonFiniteError, RecordError, TrainingError
from models.chat_template import ChatTemplate
from models.checkpoint import load_checkpoint
from models.config import DistillSpec, TrainingConfig
from models.manifest import RunManifest
from models.records import LabeledRecord, TopKLogitsRecord, iter_topk_records
from models.tinylm import TinyLM
from numerics import Tape, Tensor
from services.encoding import EncodedSample, collate, encode_example
from services.objectives import KDBatch, TopKTargets, combined_kd_loss, sft_loss
from services.optimizer import OptimizerState, lr_at, optimizer_step

logger = logging.getLogger(__name__)

DEFAULT_SYSTEM_PROMPT = "You are a helpful assistant."
CHECKPOINT_DIR = "checkpoints"
FINAL_DIR = "final"
OPTIMIZER_DIR = "optimizer"
TRAINER_STATE = "trainer_state.json"

LossFn = Callable[[list[int], float], tuple[Tensor, dict[str, float]]]


@dataclass
class TrainingResult:
    steps: int
    total_steps: int
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_path: Optional[Path] = None


class TrainingOutcome(NamedTuple):
    model: object
    manifest: RunManifest
    result: TrainingResult


class TrainingLoop:
    def __init__(self, name: str, params: dict[str, Tensor], num_examples: int, loss_fn: LossFn,
                 token_count: Callable[[list[int]], float], cfg: TrainingConfig, output_dir: Path,
                 manifest: RunManifest, save_model: Callable[[Path], Path],
                 on_epoch_end: Optional[Callable[[int], dict]] = None):
        if num_examples < 1:
            raise TrainingError(f"{name}: no training examples")
        self.name = name
        self.params = params
        self.num_examples = num_examples
        self.loss_fn = loss_fn
        self.token_count = token_count
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.manifest = manifest
        self.save_model = save_model
        self.on_epoch_end = on_epoch_end

    @property
    def steps_per_epoch(self) -> int:
        micro = math.ceil(self.num_examples / self.cfg.per_device_train_batch_size)
        return math.ceil(micro / self.cfg.gradient_accumulation_steps)

    @property
    def total_steps(self) -> int:
        return self.cfg.num_train_epochs * self.steps_per_epoch

    def windows(self, epoch: int) -> list[list[list[int]]]:
        order = np.random.default_rng([self.cfg.resolved_seed, epoch]).permutation(self.num_examples)
        bs, acc = self.cfg.per_device_train_batch_size, self.cfg.gradient_accumulation_steps
        micro = [order[i:i + bs].tolist() for i in range(0, self.num_examples, bs)]
        return [micro[j:j + acc] for j in range(0, len(micro), acc)]

    def _microbatch(self, mb: list[int], normalizer: float, tensors: list[Tensor]):
        with Tape() as tape:
            loss, parts = self.loss_fn(mb, normalizer)
            grads = tape.gradients(loss, tensors)
        return loss.item(), parts, grads

    def _window(self, window, pool: Optional[ThreadPoolExecutor]):
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        normalizer = float(sum(self.token_count(mb) for mb in window))
        if pool is not None and len(window) > 1:
            results = list(pool.map(lambda mb: self._microbatch(mb, normalizer, tensors), window))
        else:
            results = [self._microbatch(mb, normalizer, tensors) for mb in window]
        grads = {n: np.zeros_like(t.data) for n, t in zip(names, tensors)}
        loss, parts = 0.0, {}
        # fixed microbatch order keeps the sum deterministic
        for mb_loss, mb_parts, mb_grads in results:
            loss += mb_loss
            for k, v in mb_parts.items():
                parts[k] = parts.get(k, 0.0) + v
            for n, g in zip(names, mb_grads):
                grads[n] += g
        return loss, parts, grads

    def _save_checkpoint(self, step: int, state: OptimizerState, losses: list[float]) -> Path:
        path = self.output_dir / CHECKPOINT_DIR / f"step-{step}"
        self.save_model(path)
        state.save(path / OPTIMIZER_DIR)
        (path / TRAINER_STATE).write_text(json.dumps({"step": step, "losses": losses}), encoding="utf-8")
        self.manifest.add_checkpoint(path)
        logger.info("%s: saved checkpoint %s", self.name, path)
        return path

    def _resume(self, path: Path) -> tuple[int, OptimizerState, list[float]]:
        _, arrays = load_checkpoint(path)
        for n, p in self.params.items():
            p.data = arrays[n].copy()
        state = OptimizerState.load(path / OPTIMIZER_DIR, self.params)
        meta = json.loads((path / TRAINER_STATE).read_text(encoding="utf-8"))
        logger.info("%s: resuming from %s at step %d", self.name, path, meta["step"])
        return int(meta["step"]), state, list(meta["losses"])

    def run(self, resume_from: Optional[Path] = None, stop_after: Optional[int] = None) -> TrainingResult:
        cfg = self.cfg
        total = self.total_steps
        if resume_from is not None:
            step, state, losses = self._resume(Path(resume_from))
        else:
            step, state, losses = 0, OptimizerState.for_params(self.params), []
            self.manifest.reset_metrics()
        result = TrainingResult(step, total, losses)
        logger.info("%s: %d examples, %d epochs, %d optimizer steps", self.name, self.num_examples,
                    cfg.num_train_epochs, total)
        pool = ThreadPoolExecutor(max_workers=cfg.num_workers) if cfg.num_workers > 1 else None
        progress = tqdm(total=total, initial=step, desc=self.name, disable=None, leave=False)
        seen = 0
        try:
            for epoch in range(cfg.num_train_epochs):
                for window in self.windows(epoch):
                    seen += 1
                    if seen <= step:
                        continue
                    if stop_after is not None and step >= stop_after:
                        break
                    try:
                        loss, parts, grads = self._window(window, pool)
                    except NonFiniteError as e:
                        raise TrainingError(f"{self.name}: non-finite value at step {step + 1} "
                                            f"(epoch {epoch}): {e}") from e
                    if not math.isfinite(loss):
                        raise TrainingError(f"{self.name}: non-finite loss at step {step + 1} (epoch {epoch})")
                    lr = lr_at(step, total, cfg)
                    optimizer_step(self.params, grads, state, lr, cfg.weight_decay)
                    step += 1
                    losses.append(loss)
                    progress.update(1)
                    if step % cfg.logging_steps == 0:
                        entry = {"step": step, "epoch": epoch, "lr": lr, "loss": loss, **parts}
                        self.manifest.log_step(entry)
                        logger.info("%s step %d/%d loss %.6f lr %.3e", self.name, step, total, loss, lr)
                    if step % cfg.save_steps == 0:
                        result.checkpoints.append(self._save_checkpoint(step, state, losses))
                if stop_after is not None and step >= stop_after:
                    break
                if self.on_epoch_end is not None:
                    metrics = self.on_epoch_end(epoch)
                    self.manifest.summary.setdefault("epochs", []).append({"epoch": epoch, **metrics})
                    logger.info("%s epoch %d: %s", self.name, epoch, metrics)
        finally:
            progress.close()
            if pool is not None:
                pool.shutdown()

        result.steps = step
        if step < total:
            if not result.checkpoints or result.checkpoints[-1].name != f"step-{step}":
                result.checkpoints.append(self._save_checkpoint(step, state, losses))
        else:
            result.final_path = self.save_model(self.output_dir / FINAL_DIR)
            self.manifest.summary["final"] = str(result.final_path)
        per_epoch = self.steps_per_epoch
        result.epoch_losses = [float(np.mean(losses[i:i + per_epoch]))
                               for i in range(0, len(losses), per_epoch)]
        self.manifest.summary["epoch_losses"] = result.epoch_losses
        self.manifest.save()
        return result


def encode_labeled(labeled: Sequence[LabeledRecord], template: ChatTemplate, system_prompt: str,
                   max_seq_length: int, model: TinyLM) -> list[EncodedSample]:
    """Encode usable rows; sample_index is the row's position in `labeled`."""
    limit = min(max_seq_length, model.config.max_seq_len)
    samples, skipped = [], 0
    for i, rec in enumerate(labeled):
        if not rec.ok:
            skipped += 1
            continue
        samples.append(encode_example(template, system_prompt, rec.instruction, rec.output, limit,
                                      model.config.vocab_size, sample_index=i))
    if skipped:
        logger.warning("skipped %d record(s) the teacher failed to label", skipped)
    if not samples:
        raise TrainingError("no usable labeled records to train on")
    return samples


def _new_manifest(output_dir: Path, cfg: TrainingConfig, manifest: Optional[RunManifest]) -> RunManifest:
    if manifest is not None:
        return manifest
    return RunManifest(output_dir, seed=cfg.resolved_seed)


def train_sft(student: TinyLM, labeled: Sequence[LabeledRecord], cfg: TrainingConfig, template: ChatTemplate,
              *, system_prompt: str = DEFAULT_SYSTEM_PROMPT, max_seq_length: Optional[int] = None,
              output_dir: Optional[Path] = None, manifest: Optional[RunManifest] = None,
              resume_from: Optional[Path] = None, stop_after: Optional[int] = None) -> TrainingOutcome:
    """Black-box distillation: masked cross-entropy on teacher responses."""
    output_dir = Path(output_dir or cfg.output_dir)
    manifest = _new_manifest(output_dir, cfg, manifest)
    samples = encode_labeled(labeled, template, system_prompt, max_seq_length or cfg.max_seq_length, student)

    def loss_fn(mb: list[int], normalizer: float):
        batch = collate([samples[i] for i in mb])
        loss = sft_loss(student(batch.input_ids), batch.targets, batch.mask, normalizer)
        return loss, {"sft": loss.item()}

    loop = TrainingLoop("sft", student.parameters, len(samples), loss_fn,
                        lambda mb: sum(samples[i].num_tokens for i in mb), cfg, output_dir, manifest, student.save)
    result = loop.run(resume_from, stop_after)
    return TrainingOutcome(student, manifest, result)


def load_topk_for(samples: Sequence[EncodedSample], logits_path: Path) -> dict[int, TopKLogitsRecord]:
    wanted = {s.sample_index for s in samples}
    found: dict[int, TopKLogitsRecord] = {}
    for rec in iter_topk_records(logits_path):
        if rec.sample_index in wanted:
            try:
                found[rec.sample_index] = rec.validate()
            except RecordError as e:
                raise AlignmentError(str(e), rec.sample_index) from e
    for s in samples:
        if s.sample_index not in found:
            raise AlignmentError(f"logits file {logits_path} has no line for sample_index {s.sample_index}",
                                 s.sample_index)
    return found


def train_white_box(student: TinyLM, labeled: Sequence[LabeledRecord], logits_path: Path, spec: DistillSpec,
                    cfg: TrainingConfig, template: ChatTemplate, *, system_prompt: str = DEFAULT_SYSTEM_PROMPT,
                    output_dir: Optional[Path] = None, manifest: Optional[RunManifest] = None,
                    resume_from: Optional[Path] = None, stop_after: Optional[int] = None) -> TrainingOutcome:
    """White-box distillation against exported teacher top-k log-probs."""
    output_dir = Path(output_dir or cfg.output_dir)
    manifest = _new_manifest(output_dir, cfg, manifest)
    samples = encode_labeled(labeled, template, system_prompt, spec.max_seq_length, student)
    records = load_topk_for(samples, Path(logits_path))
    vocab = student.config.vocab_size

    def loss_fn(mb: list[int], normalizer: float):
        batch = collate([samples[i] for i in mb])
        topk = TopKTargets.from_records([records[i] for i in batch.sample_indices], batch, vocab)
        parts: dict[str, float] = {}
        loss = combined_kd_loss(student(batch.input_ids), KDBatch(batch, topk), spec, normalizer, parts)
        return loss, {"kd": loss.item(), **parts}

    loop = TrainingLoop("white_box", student.parameters, len(samples), loss_fn,
                        lambda mb: sum(samples[i].num_tokens for i in mb), cfg, output_dir, manifest, student.save)
    result = loop.run(resume_from, stop_after)
    return TrainingOutcome(student, manifest, result)
