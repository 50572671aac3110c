"""Turn records into token batches.

A training sequence is [BOS] + bytes(rendered conversation) + [EOS], truncated
to max_seq_length + 1 ids so that inputs and next-token targets both have at
most max_seq_length positions.  The loss mask covers the response bytes, plus
the EOS when the template ends with the response slot.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from errors import RecordError
from models.chat_template import ChatTemplate
from models.tokenizer import BOS_ID, EOS_ID, PAD_ID, tokenize


@dataclass
class EncodedSample:
    input_ids: np.ndarray   # [T]
    targets: np.ndarray     # [T]
    mask: np.ndarray        # [T], 1.0 on response targets
    sample_index: int = 0

    @property
    def num_tokens(self) -> float:
        return float(self.mask.sum())


@dataclass
class Batch:
    input_ids: np.ndarray   # [B, T]
    targets: np.ndarray     # [B, T]
    mask: np.ndarray        # [B, T]
    sample_indices: list[int]

    @property
    def num_tokens(self) -> float:
        return float(self.mask.sum())

    @property
    def attention_mask(self) -> np.ndarray:
        return (self.input_ids != PAD_ID).astype(np.float64)


def encode_example(template: ChatTemplate, system: str, instruction: str, response: str,
                   max_seq_length: int, vocab_size: int, sample_index: int = 0) -> EncodedSample:
    text, (start, end) = template.render(system, instruction, response)
    body = tokenize(text, vocab_size)
    ids = [BOS_ID] + body + [EOS_ID]
    in_response = np.zeros(len(ids), dtype=np.float64)
    in_response[1 + start:1 + end] = 1.0
    if template.ends_with_response:
        in_response[-1] = 1.0
    ids = ids[:max_seq_length + 1]
    in_response = in_response[:max_seq_length + 1]
    mask = in_response[1:]
    if not mask.any():
        raise RecordError(f"sample {sample_index}: response span is empty after truncation to "
                          f"{max_seq_length} tokens")
    arr = np.asarray(ids, dtype=np.int64)
    return EncodedSample(arr[:-1], arr[1:], mask, sample_index)


def encode_prompt(template: ChatTemplate, system: str, instruction: str, max_len: int,
                  vocab_size: int) -> list[int]:
    """Generation prompt: everything up to the response slot, left-truncated to max_len ids."""
    text, _ = template.render(system, instruction)
    ids = [BOS_ID] + tokenize(text, vocab_size)
    return ids[-max_len:] if len(ids) > max_len else ids


def collate(samples: Sequence[EncodedSample], pad_to: Optional[int] = None) -> Batch:
    """Right-pad to a common length; padded positions carry mask 0."""
    T = max(len(s.input_ids) for s in samples)
    if pad_to is not None:
        T = max(T, pad_to)
    B = len(samples)
    input_ids = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float64)
    for i, s in enumerate(samples):
        n = len(s.input_ids)
        input_ids[i, :n] = s.input_ids
        targets[i, :n] = s.targets
        mask[i, :n] = s.mask
    return Batch(input_ids, targets, mask, [s.sample_index for s in samples])


def completion_batch(prompt: Sequence[int], completions: Sequence[Sequence[int]]) -> Batch:
    """Teacher-forced batch over prompt + completion with the mask on completion tokens."""
    samples = []
    p = len(prompt)
    for i, comp in enumerate(completions):
        ids = np.asarray(list(prompt) + list(comp), dtype=np.int64)
        mask = np.zeros(len(ids) - 1, dtype=np.float64)
        mask[p - 1:] = 1.0
        samples.append(EncodedSample(ids[:-1], ids[1:], mask, i))
    return collate(samples)
