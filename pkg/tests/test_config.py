import json
import logging

import pytest

from errors import ConfigError
from models.config import REDACTED, config_from_dict, loads_config, parse_config


def write(tmp_path, text, name="job.json"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def warnings_in(caplog):
    return [r for r in caplog.records if r.levelno >= logging.WARNING]


def test_api_sample_parses_without_warnings(tmp_path, sample_config, caplog):
    with caplog.at_level(logging.INFO):
        cfg = parse_config(write(tmp_path, sample_config("black_box_api")))
    assert not warnings_in(caplog)
    assert cfg.job_type == "black_box_kd_api"
    assert cfg.training.learning_rate == 2e-5
    assert cfg.training.warmup_ratio == 0.1
    assert cfg.training.lr_scheduler_type == "cosine"
    assert cfg.inference.stream is True
    assert cfg.inference.base_url == "ENDPOINT"
    assert cfg.dataset.template == "chat_template.jinja"
    assert cfg.models.student == "student/Qwen/Qwen2.5-0.5B-Instruct/"
    assert cfg.seed == 42
    assert cfg.training.resolved_seed == 42


def test_local_sample_resolves_abbreviated_sections(tmp_path, sample_config, caplog):
    with caplog.at_level(logging.INFO):
        cfg = parse_config(write(tmp_path, sample_config("black_box_local")))
    assert not warnings_in(caplog)
    assert cfg.job_type == "black_box_kd_local"
    assert cfg.inference.seed == 777
    assert cfg.inference.temperature == 0.8
    assert cfg.inference.backend_flags() == {"gpu_memory_utilization": 0.9, "enable_chunked_prefill": True,
                                             "trust_remote_code": True, "enforce_eager": False}
    assert cfg.dataset.instruction_path == "train.json"
    assert cfg.training.gradient_accumulation_steps == 8
    assert cfg.inference_mode == "local"
    assert any("backend flags" in r.getMessage() for r in caplog.records)


def test_white_box_sample_parses_distillation_block(tmp_path, sample_config, caplog):
    with caplog.at_level(logging.INFO):
        cfg = parse_config(write(tmp_path, sample_config("white_box_local")))
    assert not warnings_in(caplog)
    assert cfg.job_type == "white_box_kd_local"
    assert cfg.distillation.kd_ratio == 0.5
    assert cfg.distillation.distillation_type == "forward_kld"
    assert cfg.distillation.max_seq_length == 512
    assert cfg.dataset.logits_path == "logits.json"
    assert cfg.models.teacher == "teacher/Qwen/Qwen2.5-7B-Instruct/"


@pytest.mark.parametrize("name", ["black_box_api", "black_box_local", "white_box_local"])
def test_sample_round_trip(tmp_path, sample_config, name):
    cfg = parse_config(write(tmp_path, sample_config(name)))
    again = config_from_dict(json.loads(cfg.dumps()), base_dir=tmp_path)
    assert again == cfg


def test_missing_student_names_key_and_section():
    data = {"job_type": "black_box_kd_api", "inference": {"base_url": "http://x", "api_key": "k"}}
    with pytest.raises(ConfigError, match=r"models\.student"):
        config_from_dict(data)


def test_unknown_job_type():
    with pytest.raises(ConfigError, match="unknown job_type 'ppo'"):
        config_from_dict({"job_type": "ppo"})


def test_type_mismatch_names_the_key():
    data = {"job_type": "dpo", "models": {"student": "s"}, "dataset": {"preference_path": "p.json"},
            "training": {"learning_rate": "fast"}}
    with pytest.raises(ConfigError, match=r"training\.learning_rate"):
        config_from_dict(data)


def test_malformed_json_reports_position():
    with pytest.raises(ConfigError, match=r"line 2 column \d+"):
        loads_config('{"job_type": "dpo",\n  "models": {"student": }\n}', "bad.json")


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        parse_config(tmp_path / "nope.json")


def test_unknown_keys_are_kept_and_warned(caplog):
    data = {"job_type": "dpo", "models": {"student": "s"},
            "dataset": {"preference_path": "p.json", "shuffle_buffer": 7}, "notes": "hi"}
    with caplog.at_level(logging.WARNING):
        cfg = config_from_dict(data)
    assert cfg.dataset.extra == {"shuffle_buffer": 7}
    assert cfg.extra == {"notes": "hi"}
    assert len(warnings_in(caplog)) == 2
    assert cfg.to_dict()["dataset"]["shuffle_buffer"] == 7


def test_dpo_needs_preference_path():
    with pytest.raises(ConfigError, match="preference_path"):
        config_from_dict({"job_type": "dpo", "models": {"student": "s"}})


def test_grpo_group_size_below_two_is_rejected():
    data = {"job_type": "grpo", "models": {"student": "s"}, "grpo": {"group_size": 1}}
    with pytest.raises(ConfigError, match="group_size"):
        config_from_dict(data)


def test_env_key_overrides_and_snapshots_redact(monkeypatch, tmp_path, sample_config):
    monkeypatch.setenv("ED_API_KEY", "sk-from-env")
    cfg = parse_config(write(tmp_path, sample_config("black_box_api")))
    assert cfg.inference.api_key == "sk-from-env"
    snapshot = cfg.dumps(redact=True)
    assert "sk-from-env" not in snapshot
    assert json.loads(snapshot)["inference"]["api_key"] == REDACTED
    assert "sk-from-env" not in repr(cfg)


def test_synthesis_job_defaults_operator_from_job_type():
    data = {"job_type": "synth_expand", "models": {"teacher": "t"},
            "synthesis": {"output_path": "out.json"}}
    cfg = config_from_dict(data)
    assert cfg.synthesis.operator == "expand"
    assert cfg.inference_mode == "local"


def test_synthesis_job_needs_output_path():
    with pytest.raises(ConfigError, match="output_path"):
        config_from_dict({"job_type": "cot_generate", "models": {"teacher": "t"}, "synthesis": {}})


def white_box(distillation):
    return {"job_type": "white_box_kd_local", "models": {"student": "s", "teacher": "t"},
            "dataset": {"logits_path": "logits.json"}, "distillation": distillation}


def test_distillation_k_is_read_without_warnings(caplog):
    with caplog.at_level(logging.WARNING):
        cfg = config_from_dict(white_box({"kd_ratio": 0.5, "k": 4}))
    assert cfg.distillation.k == 4
    assert cfg.distillation.extra == {}
    assert not warnings_in(caplog)
    assert cfg.to_dict()["distillation"]["k"] == 4


def test_distillation_top_k_is_an_alias_for_k():
    assert config_from_dict(white_box({"top_k": 6})).distillation.k == 6
    with pytest.raises(ConfigError, match="top_k"):
        config_from_dict(white_box({"top_k": 6, "k": 4}))
    with pytest.raises(ConfigError, match=r"distillation\.k"):
        config_from_dict(white_box({"k": -1}))
