"""Byte-level tokenizer: id = byte + 4, ids 0..3 reserved."""
from __future__ import annotations

from typing import Iterable

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
BYTE_OFFSET = 4
BYTE_VOCAB_SIZE = 256 + BYTE_OFFSET


def tokenize(text: str | bytes, vocab_size: int = BYTE_VOCAB_SIZE) -> list[int]:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return [b + BYTE_OFFSET if b + BYTE_OFFSET < vocab_size else UNK_ID for b in raw]


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    """Special and out-of-range ids are dropped."""
    return bytes(i - BYTE_OFFSET for i in ids if BYTE_OFFSET <= i < BYTE_VOCAB_SIZE)


def detokenize(ids: Iterable[int]) -> str:
    """Text view of the bytes; invalid UTF-8 becomes U+FFFD, so use detokenize_bytes for an exact round trip."""
    return detokenize_bytes(ids).decode("utf-8", errors="replace")
