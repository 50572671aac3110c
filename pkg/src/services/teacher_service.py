"""Teacher access: OpenAI-format API annotation, local-model annotation, top-k logits export."""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import httpx
import numpy as np
import openai
from tenacity import (RetryCallState, Retrying, retry_if_exception_type, retry_if_not_exception_type,
                      stop_after_attempt, wait_exponential)
from tqdm import tqdm

from errors import ConfigError, ContractError, TeacherAuthError, TeacherError
from models.chat_template import ChatTemplate
from models.config import REDACTED, InferenceConfig
from models.records import InstructionRecord, LabeledRecord, TopKLogitsRecord, TopKLogitsWriter, TopKPosition
from models.tinylm import TinyLM, generate
from models.tokenizer import EOS_ID, detokenize
from numerics import no_grad
from numerics import ops
from services.encoding import encode_example, encode_prompt

logger = logging.getLogger(__name__)

MAX_BACKOFF_SECONDS = 30.0


class TeacherClient(Protocol):
    config_hash: str

    def complete(self, user: str, system: Optional[str] = None, seed: Optional[int] = None) -> str:
        ...


def config_hash(cfg: InferenceConfig, **extra) -> str:
    data = {k: v for k, v in vars(cfg).items() if k != "extra"}
    data["api_key"] = REDACTED if cfg.api_key else None
    data.update(extra)
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _log_retry(state: RetryCallState) -> None:
    logger.warning("teacher request failed (attempt %d): %s", state.attempt_number, state.outcome.exception())


class ApiTeacherClient:
    """Chat-completions client; retries transient failures with exponential backoff."""

    def __init__(self, cfg: InferenceConfig, http_client: Optional[httpx.Client] = None):
        if not cfg.base_url or not cfg.api_key:
            raise ConfigError("api mode needs inference.base_url and inference.api_key")
        self.cfg = cfg
        self.config_hash = config_hash(cfg)
        self._client = openai.OpenAI(base_url=cfg.base_url, api_key=cfg.api_key, max_retries=0,
                                     timeout=cfg.timeout, http_client=http_client)

    def _messages(self, user: str, system: Optional[str]) -> list[dict]:
        system = self.cfg.system_prompt if system is None else system
        messages = [{"role": "system", "content": system}] if system else []
        return messages + [{"role": "user", "content": user}]

    def _request(self, user: str, system: Optional[str], seed: Optional[int]) -> str:
        kwargs = dict(model=self.cfg.model, messages=self._messages(user, system),
                      temperature=self.cfg.temperature, max_tokens=self.cfg.max_new_tokens)
        seed = self.cfg.seed if seed is None else seed
        if seed is not None:
            kwargs["seed"] = seed
        try:
            if self.cfg.stream:
                parts = []
                for chunk in self._client.chat.completions.create(stream=True, **kwargs):
                    if chunk.choices and chunk.choices[0].delta.content:
                        parts.append(chunk.choices[0].delta.content)
                return "".join(parts)
            response = self._client.chat.completions.create(**kwargs)
            content = response.choices[0].message.content
        except (openai.AuthenticationError, openai.PermissionDeniedError) as e:
            raise TeacherAuthError(f"teacher endpoint rejected credentials ({e.status_code})") from e
        except openai.APIError as e:
            raise TeacherError(f"teacher request failed: {e.__class__.__name__}") from e
        except (AttributeError, IndexError, TypeError, ValueError) as e:
            raise TeacherError(f"malformed teacher response: {e}") from e
        if content is None:
            raise TeacherError("malformed teacher response: no message content")
        return content

    def complete_with_retries(self, user: str, system: Optional[str] = None,
                              seed: Optional[int] = None) -> tuple[str, int]:
        """Reply text and the number of retries it took; safe to call from worker threads."""
        retrying = Retrying(
            stop=stop_after_attempt(max(1, self.cfg.max_retries)),
            wait=wait_exponential(multiplier=self.cfg.retry_backoff, max=MAX_BACKOFF_SECONDS),
            retry=retry_if_exception_type(TeacherError) & retry_if_not_exception_type(TeacherAuthError),
            before_sleep=_log_retry,
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                text = self._request(user, system, seed)
        return text, attempt.retry_state.attempt_number - 1

    def complete(self, user: str, system: Optional[str] = None, seed: Optional[int] = None) -> str:
        return self.complete_with_retries(user, system, seed)[0]


class LocalTeacherClient:
    """Generates with a local TinyLM checkpoint, loaded on first use."""

    def __init__(self, teacher: Union[TinyLM, str, Path], cfg: InferenceConfig, template: ChatTemplate):
        self._teacher = teacher if isinstance(teacher, TinyLM) else None
        self._path = None if isinstance(teacher, TinyLM) else Path(teacher)
        self.cfg = cfg
        self.template = template
        self.config_hash = config_hash(cfg, teacher=str(self._path) if self._path else "in-memory")

    @property
    def loaded(self) -> bool:
        return self._teacher is not None

    @property
    def model(self) -> TinyLM:
        if self._teacher is None:
            logger.info("loading local teacher from %s", self._path)
            self._teacher = TinyLM.load(self._path).requires_grad_(False)
        return self._teacher

    def complete(self, user: str, system: Optional[str] = None, seed: Optional[int] = None) -> str:
        model = self.model
        system = self.cfg.system_prompt if system is None else system
        max_prompt = max(1, model.config.max_seq_len - 1)
        prompt = encode_prompt(self.template, system, user, max_prompt, model.config.vocab_size)
        seed = self.cfg.seed if seed is None else seed
        out = generate(model, prompt, self.cfg.temperature, self.cfg.max_new_tokens, seed=seed)
        return detokenize([t for t in out if t != EOS_ID])


def _label(index: int, rec: InstructionRecord, client: TeacherClient, source: str) -> LabeledRecord:
    try:
        if isinstance(client, ApiTeacherClient):
            text, retries = client.complete_with_retries(rec.instruction)
            if retries:
                logger.info("instruction %d labeled after %d retries", index, retries)
        else:
            text = client.complete(rec.instruction)
    except TeacherAuthError:
        raise
    except TeacherError as e:
        logger.warning("instruction %d left unlabeled: %s", index, e)
        return LabeledRecord(rec.instruction, "", error=str(e), provenance={"source": source})
    if not text:
        return LabeledRecord(rec.instruction, "", error="empty teacher response", provenance={"source": source})
    return LabeledRecord(rec.instruction, text, provenance={"source": source})


def annotate_api(instructions: Sequence[InstructionRecord], cfg: InferenceConfig,
                 client: Optional[TeacherClient] = None,
                 http_client: Optional[httpx.Client] = None) -> list[LabeledRecord]:
    """One chat completion per instruction, in input order; failed rows carry an error marker."""
    if not instructions:
        return []
    client = client or ApiTeacherClient(cfg, http_client=http_client)
    logger.info("annotating %d instructions via %s (concurrency %d)", len(instructions), cfg.base_url,
                cfg.max_concurrency)
    with ThreadPoolExecutor(max_workers=max(1, cfg.max_concurrency)) as pool:
        results = pool.map(lambda item: _label(item[0], item[1], client, "api"), enumerate(instructions))
        labeled = list(tqdm(results, total=len(instructions), desc="annotate", disable=None, leave=False))
    failed = sum(not r.ok for r in labeled)
    if failed:
        logger.warning("%d of %d instructions could not be labeled", failed, len(labeled))
    return labeled


def annotate_local(instructions: Sequence[InstructionRecord], teacher: Union[TinyLM, str, Path, LocalTeacherClient],
                   cfg: InferenceConfig, template: ChatTemplate, seed: int = 0) -> list[LabeledRecord]:
    """Greedy or seeded sampling from a local teacher; record i uses seed + i."""
    if not instructions:
        return []
    client = teacher if isinstance(teacher, LocalTeacherClient) else LocalTeacherClient(teacher, cfg, template)
    base = cfg.seed if cfg.seed is not None else seed
    out = []
    for i, rec in enumerate(tqdm(instructions, desc="annotate", disable=None, leave=False)):
        text = client.complete(rec.instruction, seed=base + i)
        if text:
            out.append(LabeledRecord(rec.instruction, text, provenance={"source": "local"}))
        else:
            out.append(LabeledRecord(rec.instruction, "", error="empty teacher response",
                                     provenance={"source": "local"}))
    return out


def topk_of(logprobs: np.ndarray, k: int) -> list[tuple[int, float]]:
    """k largest entries, ties broken toward the lower token id."""
    order = np.argsort(-logprobs, kind="stable")[:k]
    return [(int(t), float(logprobs[t])) for t in order]


def export_topk_logits(teacher: TinyLM, labeled: Sequence[LabeledRecord], k: int, max_seq_length: int,
                       template: ChatTemplate, path: str | Path,
                       system_prompt: str = "You are a helpful assistant.") -> Path:
    """Teacher-forced pass over each labeled row; writes one JSON line per usable row.

    k = 0 exports the full distribution.
    """
    vocab = teacher.config.vocab_size
    if k < 0 or k > vocab:
        raise ContractError(f"top-k width {k} must be in [0, {vocab}]")
    width = vocab if k == 0 else k
    limit = min(max_seq_length, teacher.config.max_seq_len)
    path = Path(path)
    with TopKLogitsWriter(path) as writer, no_grad():
        for i, rec in enumerate(tqdm(labeled, desc="export logits", disable=None, leave=False)):
            if not rec.ok:
                continue
            sample = encode_example(template, system_prompt, rec.instruction, rec.output, limit, vocab, i)
            logprobs = ops.log_softmax(teacher.forward(sample.input_ids)).data
            positions = [TopKPosition(int(sample.targets[j]), topk_of(logprobs[j], width))
                         for j in np.flatnonzero(sample.mask)]
            writer.write(TopKLogitsRecord(i, positions))
    logger.info("exported top-%d logits for %d samples to %s", width, writer.count, path)
    return path
