import json
import logging
import threading

import httpx
import numpy as np
import pytest

from errors import ConfigError, ContractError, TeacherAuthError
from models.config import InferenceConfig
from models.records import InstructionRecord, LabeledRecord, iter_topk_records
from models.tinylm import TinyLM
from services.teacher_service import (ApiTeacherClient, LocalTeacherClient, annotate_api, annotate_local,
                                      config_hash, export_topk_logits, topk_of)


def api_config(**overrides):
    base = dict(base_url="http://teacher.test/v1", api_key="sk-secret", model="big-teacher", max_retries=3,
                retry_backoff=0.0, max_concurrency=1, system_prompt="Be brief.")
    base.update(overrides)
    return InferenceConfig(**base)


def echo(text):
    return f"answer to {text}"


INSTRUCTIONS = [InstructionRecord(f"question {i}") for i in range(5)]


def test_plain_completion_request(mock_teacher):
    teacher = mock_teacher(echo)
    client = ApiTeacherClient(api_config(seed=7, temperature=0.3), http_client=teacher.client())
    assert client.complete("hello") == "answer to hello"
    request = teacher.requests[0]
    assert request["body"]["model"] == "big-teacher"
    assert request["body"]["messages"] == [{"role": "system", "content": "Be brief."},
                                           {"role": "user", "content": "hello"}]
    assert request["body"]["seed"] == 7
    assert request["body"]["temperature"] == 0.3
    assert request["headers"]["authorization"] == "Bearer sk-secret"


def test_streamed_completion_is_reassembled(mock_teacher):
    teacher = mock_teacher(lambda text: "a streamed reply of several pieces")
    client = ApiTeacherClient(api_config(stream=True), http_client=teacher.client())
    assert client.complete("hi") == "a streamed reply of several pieces"
    assert teacher.requests[0]["body"]["stream"] is True


def test_transient_errors_are_retried(mock_teacher, caplog):
    calls = {"n": 0}

    def flaky(text):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(500, json={"error": {"message": "busy"}})
        return echo(text)

    client = ApiTeacherClient(api_config(), http_client=mock_teacher(flaky).client())
    with caplog.at_level(logging.WARNING):
        assert client.complete_with_retries("q") == ("answer to q", 2)
    assert calls["n"] == 3
    assert sum("attempt" in r.getMessage() for r in caplog.records) == 2


def test_annotate_api_logs_retries_per_instruction(mock_teacher, caplog):
    seen = set()
    lock = threading.Lock()

    def first_try_fails(text):
        with lock:
            fresh = text not in seen
            seen.add(text)
        if fresh:
            return httpx.Response(500, json={"error": {"message": "busy"}})
        return echo(text)

    with caplog.at_level(logging.INFO):
        labeled = annotate_api(INSTRUCTIONS, api_config(max_concurrency=3),
                               http_client=mock_teacher(first_try_fails).client())
    assert all(r.ok for r in labeled)
    retried = sorted(r.getMessage() for r in caplog.records if "labeled after" in r.getMessage())
    assert retried == [f"instruction {i} labeled after 1 retries" for i in range(5)]


def test_auth_failure_is_not_retried(mock_teacher):
    teacher = mock_teacher(lambda text: httpx.Response(401, json={"error": {"message": "bad key"}}))
    client = ApiTeacherClient(api_config(), http_client=teacher.client())
    with pytest.raises(TeacherAuthError):
        client.complete("q")
    assert len(teacher.requests) == 1


def test_api_mode_needs_endpoint_and_key():
    with pytest.raises(ConfigError):
        ApiTeacherClient(api_config(api_key=None))
    with pytest.raises(ConfigError):
        ApiTeacherClient(api_config(base_url=None))


def test_config_hash_ignores_the_key_value():
    assert config_hash(api_config(api_key="one")) == config_hash(api_config(api_key="two"))
    assert config_hash(api_config(temperature=0.1)) != config_hash(api_config(temperature=0.2))


def test_annotate_api_keeps_input_order(mock_teacher):
    teacher = mock_teacher(echo)
    labeled = annotate_api(INSTRUCTIONS, api_config(max_concurrency=4), http_client=teacher.client())
    assert [r.instruction for r in labeled] == [r.instruction for r in INSTRUCTIONS]
    assert [r.output for r in labeled] == [f"answer to question {i}" for i in range(5)]
    assert all(r.ok and r.provenance == {"source": "api"} for r in labeled)
    assert len(teacher.requests) == 5


def test_annotate_api_marks_rows_that_keep_failing(mock_teacher):
    def reply(text):
        if text == "question 2":
            return httpx.Response(503, json={"error": {"message": "down"}})
        return echo(text)

    teacher = mock_teacher(reply)
    labeled = annotate_api(INSTRUCTIONS, api_config(max_retries=2), http_client=teacher.client())
    assert [r.ok for r in labeled] == [True, True, False, True, True]
    assert labeled[2].error
    assert labeled[2].to_dict()["output"] == ""
    assert sum(r["body"]["messages"][-1]["content"] == "question 2" for r in teacher.requests) == 2


def test_annotate_api_aborts_on_auth_failure(mock_teacher):
    teacher = mock_teacher(lambda text: httpx.Response(403, json={"error": {"message": "no"}}))
    with pytest.raises(TeacherAuthError):
        annotate_api(INSTRUCTIONS[:2], api_config(), http_client=teacher.client())


def test_annotate_api_runs_requests_concurrently(mock_teacher):
    barrier = threading.Barrier(2, timeout=5)

    def reply(text):
        barrier.wait()
        return echo(text)

    labeled = annotate_api(INSTRUCTIONS[:2], api_config(max_concurrency=2), http_client=mock_teacher(reply).client())
    assert all(r.ok for r in labeled)


def test_annotate_api_of_nothing_makes_no_requests(mock_teacher):
    teacher = mock_teacher(echo)
    assert annotate_api([], api_config(), http_client=teacher.client()) == []
    assert teacher.requests == []


def test_annotate_local_is_seeded_and_lazy(tiny_config, tiny_template, tmp_path):
    TinyLM.init_params(tiny_config).save(tmp_path / "teacher")
    cfg = InferenceConfig(temperature=0.9, max_new_tokens=6, system_prompt="")
    client = LocalTeacherClient(tmp_path / "teacher", cfg, tiny_template)
    assert not client.loaded
    first = annotate_local(INSTRUCTIONS[:3], client, cfg, tiny_template, seed=4)
    assert client.loaded
    second = annotate_local(INSTRUCTIONS[:3], tmp_path / "teacher", cfg, tiny_template, seed=4)
    assert [r.to_dict() for r in first] == [r.to_dict() for r in second]
    assert all(r.provenance == {"source": "local"} for r in first)


def test_topk_of_breaks_ties_toward_lower_ids():
    assert topk_of(np.log(np.array([0.25, 0.25, 0.4, 0.1])), 3) == \
        [(2, pytest.approx(np.log(0.4))), (0, pytest.approx(np.log(0.25))), (1, pytest.approx(np.log(0.25)))]


def test_export_topk_logits_format(tiny_config, tiny_template, tmp_path):
    teacher = TinyLM.init_params(tiny_config)
    labeled = [LabeledRecord("hi", "yo"), LabeledRecord("bad", "", error="x"), LabeledRecord("2+2", "4")]
    path = export_topk_logits(teacher, labeled, 4, 40, tiny_template, tmp_path / "logits.json", system_prompt="")
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first["sample_index"] == 0
    assert len(first["positions"]) == 3  # "yo" + eos
    records = list(iter_topk_records(path))
    assert [r.sample_index for r in records] == [0, 2]
    for rec in records:
        rec.validate()
        assert all(len(p.topk) == 4 for p in rec.positions)
    assert records[0].positions[-1].target_token == 2


def test_export_full_distribution_and_bounds(tiny_config, tiny_template, tmp_path):
    teacher = TinyLM.init_params(tiny_config)
    labeled = [LabeledRecord("hi", "yo")]
    path = export_topk_logits(teacher, labeled, 0, 40, tiny_template, tmp_path / "full.json", system_prompt="")
    (rec,) = iter_topk_records(path)
    mass = np.exp([lp for _, lp in rec.positions[0].topk]).sum()
    assert len(rec.positions[0].topk) == tiny_config.vocab_size
    assert mass == pytest.approx(1.0, abs=1e-9)
    for k in (-1, tiny_config.vocab_size + 1):
        with pytest.raises(ContractError):
            export_topk_logits(teacher, labeled, k, 40, tiny_template, tmp_path / "x.json")
