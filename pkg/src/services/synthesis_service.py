"""Teacher-driven data synthesis operators.

Every operator renders a prompt template from services/prompts/ (or the job's
own template file), calls the teacher with bounded concurrency, and parses the
reply.  Results keep input order and carry provenance: operator, source id and
the teacher configuration hash.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar, Union

from errors import ConfigError, ContractError, RecordError, TeacherAuthError, TeacherError
from models.chat_template import PLACEHOLDER_RE
from models.config import SynthesisJob
from models.records import CoTRecord, InstructionRecord, LabeledRecord, PreferenceRecord, load_records
from models.tokenizer import tokenize
from services.teacher_service import TeacherClient

logger = logging.getLogger(__name__)

T = TypeVar("T")
PROMPTS_DIR = Path(__file__).resolve().parent / "prompts"

# template file -> slots it must contain
TEMPLATE_SLOTS = {
    "expand": {"instruction", "n"},
    "refine": {"instruction"},
    "pairs_from_text": {"text", "delimiter"},
    "cot_generate": {"instruction", "begin", "end"},
    "cot_generate_grounded": {"instruction", "answer", "begin", "end"},
    "cot_simplify": {"instruction", "reasoning", "begin", "end"},
    "cot_extend": {"instruction", "reasoning", "begin", "end"},
    "preference_chosen": {"instruction"},
    "preference_rejected": {"instruction"},
}
ALL_SLOTS = set().union(*TEMPLATE_SLOTS.values())

# operator -> (input kind, output kind)
OPERATORS = {
    "expand": ("instruction", "instruction"),
    "refine": ("instruction", "instruction"),
    "pairs_from_text": ("text", "labeled"),
    "preference_pairs": ("instruction", "preference"),
    "cot_generate": ("grounding", "cot"),
    "cot_simplify": ("cot", "cot"),
    "cot_extend": ("cot", "cot"),
}
ACCEPTS = {
    "instruction": {"instruction", "labeled", "cot"},
    "grounding": {"instruction", "labeled"},
    "cot": {"cot"},
    "text": {"text"},
}

_NUMBERING = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    source: str

    def __post_init__(self):
        found = {m.group(1) for m in PLACEHOLDER_RE.finditer(self.source)}
        unknown = found - ALL_SLOTS
        if unknown:
            raise ConfigError(f"prompt template '{self.name}' has unknown slot(s): {', '.join(sorted(unknown))}")
        missing = TEMPLATE_SLOTS[self.name] - found
        if missing:
            raise ConfigError(f"prompt template '{self.name}' is missing slot(s): {', '.join(sorted(missing))}")

    @classmethod
    def load(cls, name: str, path: Optional[Union[str, Path]] = None) -> "PromptTemplate":
        path = Path(path) if path else PROMPTS_DIR / f"{name}.txt"
        if not path.is_file():
            raise ConfigError(f"prompt template file not found: {path}")
        return cls(name, path.read_text(encoding="utf-8"))

    def render(self, **values: Any) -> str:
        return PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), self.source)


# --- near-duplicate filtering ---

def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def trigrams(text: str) -> set[str]:
    s = normalize_text(text)
    if len(s) < 3:
        return {s}
    return {s[i:i + 3] for i in range(len(s) - 2)}


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def is_near_duplicate(a: str, b: str, threshold: float) -> bool:
    """Threshold 1.0 means exact duplicates (after case/whitespace normalization) only."""
    if threshold >= 1.0:
        return normalize_text(a) == normalize_text(b)
    return jaccard(trigrams(a), trigrams(b)) >= threshold


def dedup(items: Sequence[T], threshold: float, key: Callable[[T], str] = lambda x: x) -> list[T]:
    """Keep the first of every group of near-duplicates, in input order."""
    kept: list[T] = []
    kept_grams: list[set[str]] = []
    for item in items:
        text = key(item)
        if threshold >= 1.0:
            if any(is_near_duplicate(text, key(k), threshold) for k in kept):
                continue
        else:
            grams = trigrams(text)
            if any(jaccard(grams, g) >= threshold for g in kept_grams):
                continue
            kept_grams.append(grams)
        kept.append(item)
    return kept


def split_cot(text: str, begin: str, end: str) -> Optional[tuple[str, str]]:
    """(reasoning, answer) from `...{begin} reasoning {end} answer`, or None without both markers."""
    b = text.find(begin)
    if b < 0:
        return None
    e = text.find(end, b + len(begin))
    if e < 0:
        return None
    return text[b + len(begin):e].strip(), text[e + len(end):].strip()


def chunk_text(text: str, limit: int) -> list[str]:
    """Split on whitespace into pieces of at most `limit` UTF-8 bytes."""
    chunks, current = [], ""
    for word in text.split():
        candidate = f"{current} {word}" if current else word
        if len(candidate.encode("utf-8")) <= limit:
            current = candidate
            continue
        if current:
            chunks.append(current)
        while len(word.encode("utf-8")) > limit:
            cut = limit
            while len(word[:cut].encode("utf-8")) > limit:
                cut -= 1
            chunks.append(word[:cut])
            word = word[cut:]
        current = word
    if current:
        chunks.append(current)
    return chunks


class SynthesisService:
    def __init__(self, client: TeacherClient, job: SynthesisJob, max_model_len: int = 4096):
        self.client = client
        self.job = job
        self.max_model_len = max_model_len
        self.stats: Counter = Counter()
        self.errors: list[dict[str, Any]] = []

    def _template(self, name: str) -> PromptTemplate:
        # a job's own template replaces the main prompt of its first operator only
        main = "preference_chosen" if self.job.operator == "preference_pairs" else self.job.operator
        return PromptTemplate.load(name, self.job.prompt_template if name == main else None)

    def _provenance(self, operator: str, **ids: Any) -> dict[str, Any]:
        return {"operator": operator, **ids, "teacher": self.client.config_hash}

    def _map(self, fn: Callable[[int, Any], T], items: Sequence[Any]) -> list[T]:
        with ThreadPoolExecutor(max_workers=max(1, self.job.max_concurrency)) as pool:
            return list(pool.map(lambda pair: fn(*pair), enumerate(items)))

    def _ask(self, prompt: str, operator: str, source_id: int) -> Optional[str]:
        try:
            return self.client.complete(prompt)
        except TeacherAuthError:
            raise
        except TeacherError as e:
            self.stats["teacher_errors"] += 1
            self.errors.append({"operator": operator, "source_id": source_id, "error": str(e)})
            logger.warning("%s: teacher failed for item %d: %s", operator, source_id, e)
            return None

    # --- instruction operators ---
    def expand_instructions(self, seeds: Sequence[InstructionRecord]) -> list[InstructionRecord]:
        if not seeds:
            raise ContractError("instruction expansion needs at least one seed")
        template = self._template("expand")
        fan_out = self.job.fan_out

        def one(i: int, seed: InstructionRecord) -> list[InstructionRecord]:
            reply = self._ask(template.render(instruction=seed.instruction, n=fan_out), "expand", i)
            if reply is None:
                return []
            lines = [_NUMBERING.sub("", line).strip() for line in reply.splitlines()]
            return [InstructionRecord(line, self._provenance("expand", seed_id=i))
                    for line in lines if line][:fan_out]

        candidates = [rec for group in self._map(one, seeds) for rec in group]
        kept = dedup(candidates, self.job.dedup_threshold, key=lambda r: r.instruction)
        self.stats["candidates"] += len(candidates)
        self.stats["duplicates_removed"] += len(candidates) - len(kept)
        logger.info("expand: %d candidates, %d kept", len(candidates), len(kept))
        return kept

    def refine_instructions(self, instructions: Sequence[InstructionRecord]) -> list[InstructionRecord]:
        template = self._template("refine")

        def one(i: int, rec: InstructionRecord) -> InstructionRecord:
            reply = self._ask(template.render(instruction=rec.instruction), "refine", i)
            text = (reply or "").strip()
            if not text:
                self.stats["fallbacks"] += 1
                logger.warning("refine: kept original instruction %d", i)
                return InstructionRecord(rec.instruction, self._provenance("refine", source_id=i, fallback=True))
            return InstructionRecord(text, self._provenance("refine", source_id=i))

        return self._map(one, instructions)

    def pairs_from_text(self, documents: Sequence[str]) -> list[LabeledRecord]:
        template = self._template("pairs_from_text")
        delim = self.job.pair_delimiter
        overhead = len(tokenize(template.render(text="", delimiter=delim)))
        limit = self.max_model_len - overhead
        if limit < 1:
            raise ConfigError(f"max_model_len {self.max_model_len} leaves no room for text after the "
                              f"pairs template ({overhead} tokens)")
        chunks = [(d, c, chunk) for d, doc in enumerate(documents) for c, chunk in enumerate(chunk_text(doc, limit))]

        def one(i: int, item: tuple[int, int, str]) -> tuple[list[LabeledRecord], int]:
            doc_id, chunk_id, chunk = item
            reply = self._ask(template.render(text=chunk, delimiter=delim), "pairs_from_text", i)
            if reply is None:
                return [], 0
            out, dropped = [], 0
            for line in reply.splitlines():
                if not line.strip():
                    continue
                instruction, sep, response = line.partition(delim)
                instruction, response = _NUMBERING.sub("", instruction).strip(), response.strip()
                if not sep or not instruction or not response:
                    dropped += 1
                    continue
                out.append(LabeledRecord(instruction, response,
                                         provenance=self._provenance("pairs_from_text", doc_id=doc_id,
                                                                     chunk_id=chunk_id)))
            return out, dropped

        records, parsed_total, dropped_total = [], 0, 0
        for pairs, dropped in self._map(one, chunks):
            records.extend(pairs)
            parsed_total += len(pairs)
            dropped_total += dropped
        self.stats["unparseable"] += dropped_total
        if dropped_total and dropped_total > 0.5 * (parsed_total + dropped_total):
            self.stats["parse_failure_warnings"] += 1
            logger.warning("pairs_from_text: %d of %d teacher lines were unparseable", dropped_total,
                           parsed_total + dropped_total)
        return records

    def preference_pairs(self, instructions: Sequence[InstructionRecord]) -> list[PreferenceRecord]:
        chosen_t = self._template("preference_chosen")
        rejected_t = self._template("preference_rejected")

        def one(i: int, rec: InstructionRecord) -> Optional[PreferenceRecord]:
            chosen = self._ask(chosen_t.render(instruction=rec.instruction), "preference_pairs", i)
            rejected = self._ask(rejected_t.render(instruction=rec.instruction), "preference_pairs", i)
            chosen, rejected = (chosen or "").strip(), (rejected or "").strip()
            if not chosen or not rejected or chosen == rejected:
                self.stats["dropped"] += 1
                return None
            return PreferenceRecord(rec.instruction, chosen, rejected, self._provenance("preference_pairs", source_id=i))

        return [r for r in self._map(one, instructions) if r is not None]

    # --- chain-of-thought operators ---
    def cot_generate(self, items: Sequence[Union[InstructionRecord, LabeledRecord]]) -> list[CoTRecord]:
        plain = self._template("cot_generate")
        grounded = self._template("cot_generate_grounded")
        begin, end = self.job.cot_begin, self.job.cot_end

        def one(i: int, item) -> Optional[CoTRecord]:
            known = item.output if isinstance(item, LabeledRecord) and item.ok else None
            if known is not None:
                prompt = grounded.render(instruction=item.instruction, answer=known, begin=begin, end=end)
            else:
                prompt = plain.render(instruction=item.instruction, begin=begin, end=end)
            reply = self._ask(prompt, "cot_generate", i)
            split = split_cot(reply, begin, end) if reply else None
            if split is None or not split[0]:
                self.stats["dropped"] += 1
                return None
            reasoning, answer = split
            return CoTRecord(item.instruction, reasoning, answer or known or "",
                             self._provenance("cot_generate", source_id=i, grounded=known is not None))

        return [r for r in self._map(one, items) if r is not None]

    def _rewrite_cots(self, operator: str, cots: Sequence[CoTRecord]) -> list[CoTRecord]:
        template = self._template(operator)
        begin, end = self.job.cot_begin, self.job.cot_end

        def one(i: int, cot: CoTRecord) -> Optional[CoTRecord]:
            reply = self._ask(template.render(instruction=cot.instruction, reasoning=cot.reasoning,
                                              begin=begin, end=end), operator, i)
            split = split_cot(reply, begin, end) if reply else None
            if split is None or not split[0]:
                self.stats["dropped"] += 1
                return None
            reasoning = split[0]
            before, after = len(tokenize(cot.reasoning)), len(tokenize(reasoning))
            if operator == "cot_simplify" and after >= before or operator == "cot_extend" and after <= before:
                self.stats["length_warnings"] += 1
                logger.warning("%s: reasoning length went from %d to %d tokens for item %d",
                               operator, before, after, i)
            return CoTRecord(cot.instruction, reasoning, cot.answer,
                             self._provenance(operator, source_id=i, length_before=before, length_after=after))

        return [r for r in self._map(one, cots) if r is not None]

    def cot_simplify(self, cots: Sequence[CoTRecord]) -> list[CoTRecord]:
        return self._rewrite_cots("cot_simplify", cots)

    def cot_extend(self, cots: Sequence[CoTRecord]) -> list[CoTRecord]:
        return self._rewrite_cots("cot_extend", cots)

    # --- dispatch ---
    def apply(self, operator: str, inputs: Sequence[Any]) -> list[Any]:
        fn = {
            "expand": self.expand_instructions,
            "refine": self.refine_instructions,
            "pairs_from_text": self.pairs_from_text,
            "preference_pairs": self.preference_pairs,
            "cot_generate": self.cot_generate,
            "cot_simplify": self.cot_simplify,
            "cot_extend": self.cot_extend,
        }[operator]
        if OPERATORS[operator][0] == "instruction":
            inputs = [r if isinstance(r, InstructionRecord) else InstructionRecord(r.instruction, dict(r.provenance))
                      for r in inputs]
        return fn(inputs)

    def run_chain(self, inputs: Sequence[Any]) -> list[Any]:
        """Apply the job operator, then each chained operator to the previous output."""
        operators = chain_operators(self.job)
        data = list(inputs)
        for operator in operators:
            data = self.apply(operator, data)
            logger.info("%s produced %d records", operator, len(data))
        return data


def chain_operators(job: SynthesisJob) -> list[str]:
    operators = [job.operator, *job.chain]
    for op in operators:
        if op not in OPERATORS:
            raise ConfigError(f"unknown synthesis operator {op!r}; expected one of {', '.join(OPERATORS)}")
    for prev, nxt in zip(operators, operators[1:]):
        if OPERATORS[prev][1] not in ACCEPTS[OPERATORS[nxt][0]]:
            raise ConfigError(f"synthesis chain: {nxt} cannot consume the {OPERATORS[prev][1]} records "
                              f"produced by {prev}")
    return operators


def load_inputs(path: Union[str, Path], operator: str) -> list[Any]:
    kind = OPERATORS[operator][0]
    path = Path(path)
    if kind == "text":
        try:
            rows = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise RecordError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(rows, list):
            raise RecordError(f"{path}: expected a JSON array of documents")
        return [r if isinstance(r, str) else str(r.get("text", "")) for r in rows]
    if kind == "cot":
        return load_records(path, CoTRecord)
    if kind == "grounding":
        rows = json.loads(path.read_text(encoding="utf-8"))
        return [LabeledRecord.from_dict(r) if isinstance(r, dict) and r.get("output") else
                InstructionRecord.from_dict(r if isinstance(r, dict) else {"instruction": r}) for r in rows]
    return load_records(path, InstructionRecord)
