import json
import logging

import pytest

from errors import ConfigError, ContractError, TeacherAuthError, TeacherError
from models.config import SynthesisJob
from models.records import CoTRecord, InstructionRecord, LabeledRecord
from models.tokenizer import tokenize
from services.synthesis_service import (PromptTemplate, SynthesisService, chain_operators, chunk_text, dedup,
                                        is_near_duplicate, load_inputs, split_cot)


def last_field(prompt, label):
    for line in prompt.splitlines():
        if line.startswith(label):
            return line[len(label):].strip()
    raise AssertionError(f"no {label!r} in prompt")


def service(client, **job):
    return SynthesisService(client, SynthesisJob(**{"operator": "expand", "max_concurrency": 2, **job}))


# --- helpers ---

def test_near_duplicates_and_dedup():
    assert is_near_duplicate("Add two numbers", "add  two NUMBERS", 1.0)
    assert not is_near_duplicate("add two numbers", "add two numbers!", 1.0)
    assert is_near_duplicate("add two numbers", "add two numbers!", 0.8)
    assert dedup(["a b", "A  B", "a bc"], 1.0) == ["a b", "a bc"]
    assert dedup(["write a poem about cats", "write a poem about cats.", "sum a list"], 0.8) == \
        ["write a poem about cats", "sum a list"]


def test_split_cot():
    assert split_cot("x <think> r1 r2 </think> 42", "<think>", "</think>") == ("r1 r2", "42")
    assert split_cot("<think>only reasoning", "<think>", "</think>") is None
    assert split_cot("no markers", "<think>", "</think>") is None


def test_chunk_text_respects_byte_limit():
    assert chunk_text("aaaa bbbb cccc", 9) == ["aaaa bbbb", "cccc"]
    assert chunk_text("abcdefghij", 4) == ["abcd", "efgh", "ij"]
    assert all(len(c.encode()) <= 5 for c in chunk_text("héllo wörld ünïcode", 5))


def test_prompt_templates_check_their_slots(tmp_path):
    assert "{n}" in PromptTemplate.load("expand").source
    bad = tmp_path / "bad.txt"
    bad.write_text("Rewrite {instruction} for {audience}")
    with pytest.raises(ConfigError, match="audience"):
        PromptTemplate.load("refine", bad)
    bad.write_text("Rewrite this")
    with pytest.raises(ConfigError, match="instruction"):
        PromptTemplate.load("refine", bad)
    with pytest.raises(ConfigError):
        PromptTemplate.load("refine", tmp_path / "missing.txt")


def test_chain_validation():
    assert chain_operators(SynthesisJob(operator="expand", chain=["refine", "cot_generate", "cot_simplify"])) == \
        ["expand", "refine", "cot_generate", "cot_simplify"]
    with pytest.raises(ConfigError, match="cot_simplify"):
        chain_operators(SynthesisJob(operator="expand", chain=["cot_simplify"]))
    with pytest.raises(ConfigError, match="pairs_from_text"):
        chain_operators(SynthesisJob(operator="refine", chain=["pairs_from_text"]))
    with pytest.raises(ConfigError, match="unknown synthesis operator"):
        chain_operators(SynthesisJob(operator="translate"))


# --- operators ---

def test_expand_caps_fan_out_and_removes_duplicates(scripted_client):
    client = scripted_client(lambda p: "1. add three numbers\n2. Add three numbers\n3) multiply two numbers\n4. extra")
    svc = service(client, fan_out=3, dedup_threshold=0.9)
    out = svc.expand_instructions([InstructionRecord("add two numbers")])
    assert [r.instruction for r in out] == ["add three numbers", "multiply two numbers"]
    assert out[0].provenance == {"operator": "expand", "seed_id": 0, "teacher": "scripted"}
    assert svc.stats["duplicates_removed"] == 1
    assert "add two numbers" in client.prompts[0]
    assert "3 new instructions" in client.prompts[0]


def test_expand_keeps_seed_order(scripted_client):
    svc = service(scripted_client(lambda p: f"variant of {last_field(p, 'Instruction:')}"), fan_out=1,
                  dedup_threshold=1.0)
    seeds = [InstructionRecord(f"seed number {i}") for i in range(6)]
    out = svc.expand_instructions(seeds)
    assert [r.instruction for r in out] == [f"variant of seed number {i}" for i in range(6)]


def test_expand_needs_seeds(scripted_client):
    with pytest.raises(ContractError):
        service(scripted_client(str)).expand_instructions([])


def test_refine_falls_back_to_the_original(scripted_client, caplog):
    def reply(prompt):
        text = last_field(prompt, "Instruction:")
        return "" if text == "keep me" else f"Please {text} carefully."

    svc = service(scripted_client(reply), operator="refine")
    out = svc.refine_instructions([InstructionRecord("sort a list"), InstructionRecord("keep me")])
    assert [r.instruction for r in out] == ["Please sort a list carefully.", "keep me"]
    assert out[1].provenance["fallback"] is True
    assert svc.stats["fallbacks"] == 1
    assert "kept original instruction 1" in caplog.text


def test_teacher_errors_are_recorded_and_auth_errors_abort(scripted_client):
    def reply(prompt):
        raise TeacherError("timeout")

    svc = service(scripted_client(reply), operator="refine")
    out = svc.refine_instructions([InstructionRecord("a task")])
    assert out[0].instruction == "a task"
    assert svc.stats["teacher_errors"] == 1
    assert svc.errors == [{"operator": "refine", "source_id": 0, "error": "timeout"}]

    def denied(prompt):
        raise TeacherAuthError("401")

    with pytest.raises(TeacherAuthError):
        service(scripted_client(denied), operator="refine").refine_instructions([InstructionRecord("a task")])


def test_pairs_from_text_parses_lines_and_warns_on_garbage(scripted_client, caplog):
    reply = "1. What is x? ||| x is one\nnonsense\nbad line\nalso bad\nWhat is y? ||| y is two"
    svc = service(scripted_client(lambda p: reply), operator="pairs_from_text")
    with caplog.at_level(logging.WARNING):
        out = svc.pairs_from_text(["x is one and y is two"])
    assert [(r.instruction, r.output) for r in out] == [("What is x?", "x is one"), ("What is y?", "y is two")]
    assert out[0].provenance == {"operator": "pairs_from_text", "doc_id": 0, "chunk_id": 0, "teacher": "scripted"}
    assert svc.stats["unparseable"] == 3
    assert svc.stats["parse_failure_warnings"] == 1
    assert "unparseable" in caplog.text


def test_pairs_from_text_chunks_long_documents(scripted_client):
    template = PromptTemplate.load("pairs_from_text")
    overhead = len(tokenize(template.render(text="", delimiter="|||")))
    client = scripted_client(lambda p: "q ||| a")
    svc = SynthesisService(client, SynthesisJob(operator="pairs_from_text", max_concurrency=1),
                           max_model_len=overhead + 12)
    doc = "alpha bravo charlie delta echo foxtrot golf hotel"
    out = svc.pairs_from_text([doc, "short"])
    chunks = chunk_text(doc, 12)
    assert len(client.prompts) == len(chunks) + 1
    assert [(r.provenance["doc_id"], r.provenance["chunk_id"]) for r in out] == \
        [(0, c) for c in range(len(chunks))] + [(1, 0)]
    with pytest.raises(ConfigError, match="max_model_len"):
        SynthesisService(client, SynthesisJob(operator="pairs_from_text"), max_model_len=10).pairs_from_text([doc])


def test_preference_pairs_drop_identical_answers(scripted_client):
    def reply(prompt):
        instruction = last_field(prompt, "Instruction:")
        if instruction == "same":
            return "identical"
        return "meh" if "unhelpful" in prompt else f"A full answer to {instruction}."

    svc = service(scripted_client(reply), operator="preference_pairs")
    out = svc.preference_pairs([InstructionRecord("explain tides"), InstructionRecord("same")])
    assert len(out) == 1
    assert out[0].chosen == "A full answer to explain tides."
    assert out[0].rejected == "meh"
    assert svc.stats["dropped"] == 1


def test_cot_generate_plain_and_grounded(scripted_client):
    def reply(prompt):
        if "Known answer" in prompt:
            return "<think>3 and 4 make 7</think>"
        if "no markers" in prompt:
            return "just 5"
        return "<think>2 plus 3 is 5</think> 5"

    svc = service(scripted_client(reply), operator="cot_generate")
    out = svc.cot_generate([InstructionRecord("2+3"), LabeledRecord("3+4", "7"), InstructionRecord("no markers")])
    assert [(r.instruction, r.reasoning, r.answer) for r in out] == \
        [("2+3", "2 plus 3 is 5", "5"), ("3+4", "3 and 4 make 7", "7")]
    assert out[1].provenance["grounded"] is True
    assert svc.stats["dropped"] == 1


def test_cot_simplify_and_extend_report_lengths(scripted_client, caplog):
    cot = CoTRecord("2+3", "first take two then add three to get five", "5")
    short = service(scripted_client(lambda p: "<think>2+3=5</think>"), operator="cot_simplify")
    (simplified,) = short.cot_simplify([cot])
    assert simplified.reasoning == "2+3=5"
    assert simplified.answer == "5"
    assert simplified.provenance["length_after"] < simplified.provenance["length_before"]
    assert short.stats["length_warnings"] == 0

    same = service(scripted_client(lambda p: "<think>tiny</think>"), operator="cot_extend")
    with caplog.at_level(logging.WARNING):
        (extended,) = same.cot_extend([cot])
    assert extended.reasoning == "tiny"
    assert same.stats["length_warnings"] == 1
    assert "reasoning length" in caplog.text


def test_cot_rewrites_drop_replies_without_delimiters(scripted_client):
    cot = CoTRecord("2+3", "first take two then add three to get five", "5")
    for operator in ("cot_simplify", "cot_extend"):
        svc = service(scripted_client(lambda p: "Sorry, I cannot help with that."), operator=operator)
        assert svc.apply(operator, [cot]) == []
        assert svc.stats["dropped"] == 1
        assert svc.stats["length_warnings"] == 0


def test_custom_template_replaces_the_first_operator_prompt(scripted_client, tmp_path):
    custom = tmp_path / "refine.txt"
    custom.write_text("REWRITE: {instruction}")
    client = scripted_client(lambda p: "better")
    svc = service(client, operator="refine", prompt_template=str(custom))
    svc.refine_instructions([InstructionRecord("task")])
    assert client.prompts == ["REWRITE: task"]


def test_run_chain_feeds_each_operator_the_previous_output(scripted_client):
    def reply(prompt):
        if prompt.startswith("Write"):
            return "1. count the vowels"
        if prompt.startswith("Rewrite"):
            return "Count the vowels in a word."
        return "<think>check each letter</think> done"

    svc = service(scripted_client(reply), operator="expand", chain=["refine", "cot_generate"], fan_out=1)
    out = svc.run_chain([InstructionRecord("count the letters")])
    assert len(out) == 1
    assert isinstance(out[0], CoTRecord)
    assert out[0].instruction == "Count the vowels in a word."
    assert out[0].reasoning == "check each letter"


def test_load_inputs_by_operator_kind(tmp_path):
    docs = tmp_path / "docs.json"
    docs.write_text(json.dumps(["plain text", {"text": "wrapped"}]))
    assert load_inputs(docs, "pairs_from_text") == ["plain text", "wrapped"]
    grounding = tmp_path / "ground.json"
    grounding.write_text(json.dumps([{"instruction": "a", "output": "b"}, {"instruction": "c"}, "d"]))
    rows = load_inputs(grounding, "cot_generate")
    assert [type(r) for r in rows] == [LabeledRecord, InstructionRecord, InstructionRecord]
    seeds = tmp_path / "seeds.json"
    seeds.write_text(json.dumps(["one", {"instruction": "two"}]))
    assert [r.instruction for r in load_inputs(seeds, "expand")] == ["one", "two"]
