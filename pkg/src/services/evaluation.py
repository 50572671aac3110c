"""Held-out metrics shared by the trainers and the desk-scale experiments."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from models.records import iter_topk_records
from models.tinylm import TinyLM
from numerics import no_grad
from numerics import ops
from services.encoding import EncodedSample, collate
from services.objectives import forward_kld, sft_loss

EVAL_BATCH = 16


def _batches(samples: Sequence[EncodedSample]):
    for i in range(0, len(samples), EVAL_BATCH):
        yield collate(samples[i:i + EVAL_BATCH])


def heldout_ce(model: TinyLM, samples: Sequence[EncodedSample]) -> float:
    """Token-mean response cross-entropy."""
    tokens = sum(s.num_tokens for s in samples)
    total = 0.0
    with no_grad():
        for batch in _batches(samples):
            total += sft_loss(model(batch.input_ids), batch.targets, batch.mask, normalizer=tokens).item()
    return total


def heldout_forward_kld(student: TinyLM, teacher: TinyLM, samples: Sequence[EncodedSample]) -> float:
    """Token-mean KL(teacher || student) over response positions."""
    tokens = sum(s.num_tokens for s in samples)
    total = 0.0
    with no_grad():
        for batch in _batches(samples):
            t = ops.log_softmax(teacher(batch.input_ids)).data
            total += forward_kld(t, student(batch.input_ids), batch.mask, normalizer=tokens).item()
    return total


def topk_mass(logits_path: Path) -> float:
    """Mean probability mass the exported top-k entries cover per position."""
    masses = [float(np.exp([lp for _, lp in pos.topk]).sum())
              for rec in iter_topk_records(logits_path) for pos in rec.positions]
    return float(np.mean(masses)) if masses else 0.0
