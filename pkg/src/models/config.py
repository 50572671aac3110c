"""Job configuration: the JSON schema of `easydistill --config=kd.json`.

Section defaults are the values of the black-box API sample configuration, so
a section abbreviated to "..." resolves to that block.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Optional, Union, get_args, get_origin, get_type_hints

from errors import ConfigError
from models.tinylm import ModelConfig

logger = logging.getLogger(__name__)

API_KEY_ENV = "ED_API_KEY"
REDACTED = "***"

# accepted for compatibility with GPU inference backends; recorded, otherwise unused
BACKEND_FLAGS = ("gpu_memory_utilization", "enable_chunked_prefill", "trust_remote_code", "enforce_eager")

KD_JOBS = ("black_box_kd_api", "black_box_kd_local", "white_box_kd_local")
TRAINING_JOBS = KD_JOBS + ("dpo", "reward_model", "grpo")
SYNTHESIS_JOBS = {
    "synth_expand": "expand",
    "synth_refine": "refine",
    "synth_pairs": "pairs_from_text",
    "synth_preference": "preference_pairs",
    "cot_generate": "cot_generate",
    "cot_simplify": "cot_simplify",
    "cot_extend": "cot_extend",
}
JOB_TYPES = TRAINING_JOBS + tuple(SYNTHESIS_JOBS)


@dataclass
class DatasetConfig:
    instruction_path: str = "train.json"
    labeled_path: str = "train_labeled.json"
    logits_path: Optional[str] = None
    preference_path: Optional[str] = None
    raw_path: Optional[str] = None
    template: str = "chat_template.jinja"
    seed: int = 42
    extra: dict = field(default_factory=dict)


@dataclass
class InferenceConfig:
    mode: Optional[str] = None
    base_url: Optional[str] = None
    api_key: Optional[str] = field(default=None, repr=False)
    model: str = "teacher"
    stream: bool = False
    system_prompt: str = "You are a helpful assistant."
    max_new_tokens: int = 512
    temperature: float = 0.0
    seed: Optional[int] = None
    max_model_len: int = 4096
    gpu_memory_utilization: Optional[float] = None
    enable_chunked_prefill: Optional[bool] = None
    trust_remote_code: Optional[bool] = None
    enforce_eager: Optional[bool] = None
    max_concurrency: int = 4
    max_retries: int = 3
    retry_backoff: float = 1.0
    timeout: float = 60.0
    extra: dict = field(default_factory=dict)

    def backend_flags(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in BACKEND_FLAGS if getattr(self, k) is not None}


@dataclass
class DistillSpec:
    kd_ratio: float = 0.5
    distillation_type: str = "forward_kld"
    k: int = 10
    max_seq_length: int = 512
    extra: dict = field(default_factory=dict)

    ALIASES: ClassVar[dict[str, str]] = {"top_k": "k"}

    def validate(self) -> "DistillSpec":
        if not 0.0 <= self.kd_ratio <= 1.0:
            raise ConfigError(f"distillation.kd_ratio must be in [0, 1], got {self.kd_ratio}")
        if self.distillation_type not in ("forward_kld", "reverse_kld"):
            raise ConfigError(f"distillation.distillation_type must be forward_kld or reverse_kld, "
                              f"got {self.distillation_type!r}")
        if self.k < 0:
            raise ConfigError("distillation.k must be >= 0 (0 = full distribution)")
        if self.k == 1:
            logger.warning("distillation.k = 1 makes the top-k divergence identically zero; use k >= 2")
        if self.max_seq_length < 1:
            raise ConfigError("distillation.max_seq_length must be >= 1")
        return self


@dataclass
class ModelsConfig:
    student: Optional[str] = None
    teacher: Optional[str] = None
    reference: Optional[str] = None
    extra: dict = field(default_factory=dict)


@dataclass
class TrainingConfig:
    output_dir: str = "result/"
    num_train_epochs: int = 3
    per_device_train_batch_size: int = 1
    gradient_accumulation_steps: int = 8
    save_steps: int = 1000
    logging_steps: int = 1
    learning_rate: float = 2e-5
    weight_decay: float = 0.05
    warmup_ratio: float = 0.1
    lr_scheduler_type: str = "cosine"
    seed: Optional[int] = None
    max_seq_length: int = 512
    num_workers: int = 1
    extra: dict = field(default_factory=dict)

    def validate(self) -> "TrainingConfig":
        for name in ("num_train_epochs", "per_device_train_batch_size", "gradient_accumulation_steps",
                     "save_steps", "logging_steps", "max_seq_length", "num_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be > 0")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("training.warmup_ratio must be in [0, 1]")
        if self.lr_scheduler_type not in ("cosine", "constant"):
            raise ConfigError(f"training.lr_scheduler_type must be cosine or constant, "
                              f"got {self.lr_scheduler_type!r}")
        return self

    @property
    def resolved_seed(self) -> int:
        return 0 if self.seed is None else self.seed


@dataclass
class DpoConfig:
    beta: float = 0.1
    extra: dict = field(default_factory=dict)


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    iterations: int = 50
    prompts_per_iteration: int = 1
    temperature: float = 1.0
    max_new_tokens: int = 16
    reward: str = "contains:a"
    extra: dict = field(default_factory=dict)

    def validate(self) -> "GrpoConfig":
        if self.group_size < 2:
            raise ConfigError(f"grpo.group_size must be >= 2, got {self.group_size}")
        if self.iterations < 1 or self.prompts_per_iteration < 1 or self.max_new_tokens < 1:
            raise ConfigError("grpo.iterations, prompts_per_iteration and max_new_tokens must be >= 1")
        if self.clip_eps < 0 or self.kl_coeff < 0:
            raise ConfigError("grpo.clip_eps and grpo.kl_coeff must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("grpo.temperature must be > 0 for sampling groups")
        return self


@dataclass
class SynthesisJob:
    operator: Optional[str] = None
    output_path: Optional[str] = None
    input_path: Optional[str] = None
    prompt_template: Optional[str] = None
    fan_out: int = 3
    dedup_threshold: float = 0.9
    chain: list = field(default_factory=list)
    cot_begin: str = "<think>"
    cot_end: str = "</think>"
    pair_delimiter: str = "|||"
    max_concurrency: int = 4
    extra: dict = field(default_factory=dict)

    def validate(self) -> "SynthesisJob":
        if self.fan_out < 1:
            raise ConfigError("synthesis.fan_out must be >= 1")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ConfigError("synthesis.dedup_threshold must be in [0, 1]")
        if not self.output_path:
            raise ConfigError("missing required key 'output_path' in section 'synthesis'")
        return self


SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "inference": InferenceConfig,
    "distillation": DistillSpec,
    "models": ModelsConfig,
    "training": TrainingConfig,
    "dpo": DpoConfig,
    "grpo": GrpoConfig,
    "synthesis": SynthesisJob,
    "student_config": ModelConfig,
}
OPTIONAL_SECTIONS = ("distillation", "dpo", "grpo", "synthesis", "student_config")


@dataclass
class JobConfig:
    job_type: str
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    distillation: Optional[DistillSpec] = None
    dpo: Optional[DpoConfig] = None
    grpo: Optional[GrpoConfig] = None
    synthesis: Optional[SynthesisJob] = None
    student_config: Optional[ModelConfig] = None
    extra: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd, compare=False, repr=False)

    @property
    def seed(self) -> int:
        return self.dataset.seed

    @property
    def inference_mode(self) -> str:
        if self.inference.mode:
            return self.inference.mode
        if self.job_type == "black_box_kd_api" or self.inference.base_url:
            return "api"
        return "local"

    def resolve_path(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> "JobConfig":
        if self.job_type not in JOB_TYPES:
            raise ConfigError(f"unknown job_type {self.job_type!r}; expected one of {', '.join(JOB_TYPES)}")
        self.training.validate()
        if self.distillation is not None:
            self.distillation.validate()
        if self.grpo is not None:
            self.grpo.validate()
        if self.inference.mode not in (None, "api", "local"):
            raise ConfigError(f"inference.mode must be api or local, got {self.inference.mode!r}")
        if self.job_type in TRAINING_JOBS and not self.models.student:
            raise ConfigError("missing required key 'student' in section 'models' (models.student)")
        if self.inference_mode == "api" and (self.job_type == "black_box_kd_api" or self.job_type in SYNTHESIS_JOBS):
            for key in ("base_url", "api_key"):
                if not getattr(self.inference, key):
                    raise ConfigError(f"missing required key '{key}' in section 'inference' "
                                      f"(inference.{key}) for api mode")
        needs_teacher = self.job_type in ("black_box_kd_local", "white_box_kd_local") or (
            self.job_type in SYNTHESIS_JOBS and self.inference_mode == "local")
        if needs_teacher and not self.models.teacher:
            raise ConfigError("missing required key 'teacher' in section 'models' (models.teacher) for local inference")
        if self.job_type in ("dpo", "reward_model") and not self.dataset.preference_path:
            raise ConfigError(f"missing required key 'preference_path' in section 'dataset' for {self.job_type}")
        if self.job_type == "white_box_kd_local" and not self.dataset.logits_path:
            raise ConfigError("missing required key 'logits_path' in section 'dataset' (dataset.logits_path)")
        if self.job_type in SYNTHESIS_JOBS:
            if self.synthesis is None:
                raise ConfigError(f"missing required section 'synthesis' for {self.job_type}")
            self.synthesis.validate()
        return self

    def to_dict(self, redact: bool = False) -> dict:
        out: dict[str, Any] = {"job_type": self.job_type}
        for name in SECTIONS:
            section = getattr(self, name)
            if section is None:
                continue
            data = {f.name: getattr(section, f.name) for f in dataclasses.fields(section) if f.name != "extra"}
            data.update(getattr(section, "extra", {}))
            if redact and name == "inference" and data.get("api_key"):
                data["api_key"] = REDACTED
            out[name] = data
        out.update(self.extra)
        return out

    def dumps(self, redact: bool = False) -> str:
        return json.dumps(self.to_dict(redact=redact), indent=2, sort_keys=True)


# --- parsing ---

def _strip_optional(tp):
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _coerce(value: Any, tp, where: str):
    base, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where} must not be null")
    if base is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{where} must be a boolean, got {value!r}")
    if base is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if base is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where} must be a number, got {value!r}")
    if base is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where} must be a string, got {value!r}")
    if get_origin(base) is list or base is list:
        if isinstance(value, list):
            return list(value)
        raise ConfigError(f"{where} must be a list, got {value!r}")
    return value


def _parse_section(cls: type, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a JSON object")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)} - {"extra"}
    aliases = getattr(cls, "ALIASES", {})
    kwargs, extra = {}, {}
    for key, value in data.items():
        if key in aliases:
            if aliases[key] in data:
                raise ConfigError(f"section '{section}' sets both '{key}' and '{aliases[key]}'")
            key = aliases[key]
        if key in known:
            kwargs[key] = _coerce(value, hints[key], f"{section}.{key}")
        else:
            extra[key] = value
    if extra:
        logger.warning("unknown key(s) in section '%s' preserved: %s", section, ", ".join(sorted(extra)))
    obj = cls(**kwargs)
    if hasattr(obj, "extra"):
        obj.extra = extra
    return obj


_ELLIPSIS_LINE = re.compile(r"^[ \t]*\.\.\.[ \t]*,?[ \t]*$", re.MULTILINE)
_MISSING_COMMA = re.compile(r'([}\]"]|\d|true|false|null)([ \t]*\r?\n[ \t]*)(")')
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def normalize_abbreviated_json(text: str) -> str:
    """Turn the abbreviated sample configurations into strict JSON.

    Drops "..." lines, inserts the commas missing between a closing value and
    the next key, and removes trailing commas left behind.
    """
    text = _ELLIPSIS_LINE.sub("", text)
    text = _MISSING_COMMA.sub(r"\1,\2\3", text)
    return _TRAILING_COMMA.sub(r"\1", text)


def loads_config(text: str, source: str = "<config>") -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as strict_error:
        try:
            data = json.loads(normalize_abbreviated_json(text))
        except json.JSONDecodeError:
            raise ConfigError(f"{source}: malformed JSON at line {strict_error.lineno} column "
                              f"{strict_error.colno}: {strict_error.msg}") from strict_error
        logger.debug("%s: resolved abbreviated sections to defaults", source)
        return data


def config_from_dict(data: dict, base_dir: Optional[Path] = None) -> JobConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    if "job_type" not in data:
        raise ConfigError("missing required key 'job_type'")
    job_type = data["job_type"]
    if not isinstance(job_type, str):
        raise ConfigError("job_type must be a string")
    if job_type not in JOB_TYPES:
        raise ConfigError(f"unknown job_type {job_type!r}; expected one of {', '.join(JOB_TYPES)}")
    kwargs: dict[str, Any] = {}
    extra = {}
    for key, value in data.items():
        if key == "job_type":
            continue
        if key in SECTIONS:
            kwargs[key] = _parse_section(SECTIONS[key], value, key)
        else:
            extra[key] = value
    if extra:
        logger.warning("unknown top-level key(s) preserved: %s", ", ".join(sorted(extra)))
    cfg = JobConfig(job_type=job_type, extra=extra, base_dir=base_dir or Path.cwd(), **kwargs)
    if cfg.training.seed is None:
        cfg.training.seed = cfg.dataset.seed
    if cfg.job_type == "white_box_kd_local" and cfg.distillation is None:
        cfg.distillation = DistillSpec()
    if cfg.job_type == "dpo" and cfg.dpo is None:
        cfg.dpo = DpoConfig()
    if cfg.job_type == "grpo" and cfg.grpo is None:
        cfg.grpo = GrpoConfig()
    if cfg.job_type in SYNTHESIS_JOBS and cfg.synthesis is not None and not cfg.synthesis.operator:
        cfg.synthesis.operator = SYNTHESIS_JOBS[cfg.job_type]
    env_key = os.environ.get(API_KEY_ENV)
    if env_key:
        cfg.inference.api_key = env_key
    flags = cfg.inference.backend_flags()
    if flags:
        logger.info("backend flags recorded and not used at desk scale: %s", ", ".join(sorted(flags)))
    return cfg.validate()


def parse_config(path: str | Path) -> JobConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return config_from_dict(loads_config(text, str(path)), base_dir=path.resolve().parent)
