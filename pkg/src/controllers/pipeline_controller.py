"""Routes a parsed job configuration to its pipeline stages and caches finished stages."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

import httpx

from errors import CheckpointError, EasyDistillError, StageError
from models.chat_template import DEFAULT_TEMPLATE, ChatTemplate
from models.config import SYNTHESIS_JOBS, JobConfig
from models.database import DB_NAME, Database
from models.manifest import RunManifest, sha256_path
from models.records import InstructionRecord, LabeledRecord, PreferenceRecord, load_records, save_records
from models.stage import StageModel, StageRecord
from models.tinylm import ModelConfig, TinyLM
from services.grpo_service import resolve_reward, train_grpo
from services.preference_service import train_dpo, train_reward_model
from services.synthesis_service import SynthesisService, chain_operators, load_inputs
from services.teacher_service import (ApiTeacherClient, LocalTeacherClient, annotate_api, annotate_local,
                                      export_topk_logits)
from services.training_service import FINAL_DIR, train_sft, train_white_box

logger = logging.getLogger(__name__)

RAN = "ran"
CACHED = "skipped (cached)"
FAILED = "failed"
PENDING = "pending"


@dataclass
class Stage:
    name: str
    inputs: list[Path]
    outputs: list[Path]
    settings: dict[str, Any]
    run: Callable[[], None] = field(repr=False)


@dataclass
class StageReport:
    name: str
    status: str
    duration: float = 0.0
    outputs: list[str] = field(default_factory=list)


@dataclass
class RunResult:
    job_type: str
    stages: list[StageReport] = field(default_factory=list)

    @property
    def outputs(self) -> list[str]:
        return [o for s in self.stages for o in s.outputs]


class PipelineController:
    def __init__(self, config: JobConfig, view=None, http_client: Optional[httpx.Client] = None):
        self.config = config
        self.view = view
        self.http_client = http_client
        self.output_dir = config.resolve_path(config.training.output_dir)
        self._stages: Optional[StageModel] = None
        self._template: Optional[ChatTemplate] = None

    # --- helpers ---
    @property
    def stage_model(self) -> StageModel:
        if self._stages is None:
            self._stages = StageModel(Database.for_output_dir(self.output_dir))
        return self._stages

    def _path(self, value: Optional[str]) -> Optional[Path]:
        return self.config.resolve_path(value)

    @property
    def template(self) -> ChatTemplate:
        if self._template is None:
            path = self._path(self.config.dataset.template)
            if path is not None and path.is_file():
                self._template = ChatTemplate.from_file(path)
            else:
                logger.info("chat template %s not found; using the built-in template", path)
                self._template = ChatTemplate(DEFAULT_TEMPLATE)
        return self._template

    @property
    def system_prompt(self) -> str:
        return self.config.inference.system_prompt

    def _section(self, name: str) -> dict[str, Any]:
        data = self.config.to_dict(redact=True).get(name, {})
        if name == "inference":
            # the key never changes what the teacher returns
            data = {k: v for k, v in data.items() if k != "api_key"}
        return data

    def _teacher_path(self) -> Path:
        path = self._path(self.config.models.teacher)
        if path is None or not path.is_dir():
            raise CheckpointError(f"teacher checkpoint not found: {path}")
        return path

    def _load_student(self) -> TinyLM:
        path = self._path(self.config.models.student)
        if path is not None and path.is_dir():
            return TinyLM.load(path)
        model_config = self.config.student_config or ModelConfig(seed=self.config.seed)
        logger.info("no student checkpoint at %s; initializing a fresh TinyLM (seed %d)", path, model_config.seed)
        return TinyLM.init_params(model_config.validate())

    def _student_inputs(self) -> list[Path]:
        path = self._path(self.config.models.student)
        return [path] if path is not None and path.is_dir() else []

    def _manifest(self) -> RunManifest:
        return RunManifest(self.output_dir, config=self.config.to_dict(redact=True),
                           seed=self.config.training.resolved_seed)

    def _training_outputs(self) -> list[Path]:
        return [self.output_dir / FINAL_DIR]

    def _training_settings(self, *sections: str) -> dict[str, Any]:
        settings = {"training": self._section("training"), "student_config": self._section("student_config"),
                    "template": self.template.source, "system_prompt": self.system_prompt}
        for name in sections:
            settings[name] = self._section(name)
        return settings

    # --- stages ---
    def _annotate_stage(self) -> Stage:
        cfg = self.config
        src = self._path(cfg.dataset.instruction_path)
        dst = self._path(cfg.dataset.labeled_path)
        if cfg.inference_mode == "api":
            def run():
                rows = load_records(src, InstructionRecord)
                save_records(dst, annotate_api(rows, cfg.inference, http_client=self.http_client))
            return Stage("annotate_api", [src], [dst], {"inference": self._section("inference")}, run)

        def run_local():
            rows = load_records(src, InstructionRecord)
            save_records(dst, annotate_local(rows, self._teacher_path(), cfg.inference, self.template, seed=cfg.seed))
        teacher = self._path(cfg.models.teacher)
        return Stage("annotate_local", [src, teacher], [dst],
                     {"inference": self._section("inference"), "template": self.template.source,
                      "seed": cfg.seed}, run_local)

    def _export_stage(self) -> Stage:
        cfg = self.config
        labeled = self._path(cfg.dataset.labeled_path)
        dst = self._path(cfg.dataset.logits_path)

        def run():
            teacher = TinyLM.load(self._teacher_path()).requires_grad_(False)
            rows = load_records(labeled, LabeledRecord)
            export_topk_logits(teacher, rows, cfg.distillation.k, cfg.distillation.max_seq_length, self.template,
                               dst, system_prompt=self.system_prompt)
        return Stage("export_topk_logits", [labeled, self._path(cfg.models.teacher)], [dst],
                     {"distillation": self._section("distillation"), "template": self.template.source,
                      "system_prompt": self.system_prompt}, run)

    def _sft_stage(self) -> Stage:
        cfg = self.config
        labeled = self._path(cfg.dataset.labeled_path)

        def run():
            manifest = self._manifest()
            manifest.add_dataset(labeled)
            train_sft(self._load_student(), load_records(labeled, LabeledRecord), cfg.training, self.template,
                      system_prompt=self.system_prompt, output_dir=self.output_dir, manifest=manifest)
        return Stage("train_sft", [labeled, *self._student_inputs()], self._training_outputs(),
                     self._training_settings(), run)

    def _white_box_stage(self) -> Stage:
        cfg = self.config
        labeled = self._path(cfg.dataset.labeled_path)
        logits = self._path(cfg.dataset.logits_path)

        def run():
            manifest = self._manifest()
            manifest.add_dataset(labeled)
            manifest.add_dataset(logits)
            train_white_box(self._load_student(), load_records(labeled, LabeledRecord), logits, cfg.distillation,
                            cfg.training, self.template, system_prompt=self.system_prompt,
                            output_dir=self.output_dir, manifest=manifest)
        return Stage("train_white_box", [labeled, logits, *self._student_inputs()], self._training_outputs(),
                     self._training_settings("distillation"), run)

    def _dpo_stage(self) -> Stage:
        cfg = self.config
        prefs = self._path(cfg.dataset.preference_path)
        reference = self._path(cfg.models.reference)

        def run():
            manifest = self._manifest()
            manifest.add_dataset(prefs)
            ref = TinyLM.load(reference).requires_grad_(False) if reference is not None else None
            train_dpo(self._load_student(), ref, load_records(prefs, PreferenceRecord), cfg.dpo.beta, cfg.training,
                      self.template, system_prompt=self.system_prompt, output_dir=self.output_dir,
                      manifest=manifest)
        inputs = [prefs, *self._student_inputs(), *([reference] if reference is not None else [])]
        return Stage("train_dpo", inputs, self._training_outputs(), self._training_settings("dpo"), run)

    def _reward_stage(self) -> Stage:
        cfg = self.config
        prefs = self._path(cfg.dataset.preference_path)

        def run():
            manifest = self._manifest()
            manifest.add_dataset(prefs)
            train_reward_model(self._load_student(), load_records(prefs, PreferenceRecord), cfg.training,
                               self.template, system_prompt=self.system_prompt, output_dir=self.output_dir,
                               manifest=manifest)
        return Stage("train_reward_model", [prefs, *self._student_inputs()], self._training_outputs(),
                     self._training_settings(), run)

    def _grpo_stage(self) -> Stage:
        cfg = self.config
        prompts = self._path(cfg.dataset.instruction_path)
        reference = self._path(cfg.models.reference)
        inputs = [prompts, *self._student_inputs(), *([reference] if reference is not None else [])]
        if not cfg.grpo.reward.startswith("contains:"):
            inputs.append(self._path(cfg.grpo.reward))

        def run():
            manifest = self._manifest()
            manifest.add_dataset(prompts)
            ref = TinyLM.load(reference).requires_grad_(False) if reference is not None else None
            train_grpo(self._load_student(), load_records(prompts, InstructionRecord),
                       resolve_reward(cfg.grpo.reward, cfg.base_dir), cfg.grpo, cfg.training, self.template,
                       reference=ref, system_prompt=self.system_prompt, output_dir=self.output_dir,
                       manifest=manifest)
        return Stage("train_grpo", inputs, self._training_outputs(), self._training_settings("grpo"), run)

    def _synthesis_stage(self) -> Stage:
        cfg = self.config
        job = cfg.synthesis
        operators = chain_operators(job)
        src = self._path(job.input_path or cfg.dataset.instruction_path)
        dst = self._path(job.output_path)
        inputs = [src]
        if cfg.inference_mode == "local":
            inputs.append(self._path(cfg.models.teacher))
        if job.prompt_template:
            inputs.append(self._path(job.prompt_template))

        def run():
            if cfg.inference_mode == "api":
                client = ApiTeacherClient(cfg.inference, http_client=self.http_client)
            else:
                client = LocalTeacherClient(self._teacher_path(), cfg.inference, self.template)
            resolved = replace(job, prompt_template=str(self._path(job.prompt_template))) if job.prompt_template else job
            service = SynthesisService(client, resolved, cfg.inference.max_model_len)
            records = service.run_chain(load_inputs(src, operators[0]))
            save_records(dst, records)
            if service.errors:
                logger.warning("synthesis finished with %d teacher error(s)", len(service.errors))
            logger.info("synthesis stats: %s", dict(service.stats))
        return Stage("synthesis:" + "+".join(operators), inputs, [dst],
                     {"synthesis": self._section("synthesis"), "inference": self._section("inference"),
                      "template": self.template.source}, run)

    def plan(self) -> list[Stage]:
        """Stages for the configured job, in execution order."""
        job = self.config.job_type
        if job in ("black_box_kd_api", "black_box_kd_local"):
            return [self._annotate_stage(), self._sft_stage()]
        if job == "white_box_kd_local":
            stages = []
            labeled = self._path(self.config.dataset.labeled_path)
            if not labeled.exists() or self._has_record("annotate_local"):
                stages.append(self._annotate_stage())
            return stages + [self._export_stage(), self._white_box_stage()]
        if job == "dpo":
            return [self._dpo_stage()]
        if job == "reward_model":
            return [self._reward_stage()]
        if job == "grpo":
            return [self._grpo_stage()]
        if job in SYNTHESIS_JOBS:
            return [self._synthesis_stage()]
        raise EasyDistillError(f"no pipeline for job_type {job!r}")

    # --- cache ---
    def _has_record(self, stage: str) -> bool:
        if not (self.output_dir / DB_NAME).exists():
            return False
        return self.stage_model.get(self.config.job_type, stage) is not None

    def cache_key(self, stage: Stage) -> str:
        payload = {
            "stage": stage.name,
            "settings": stage.settings,
            "inputs": {str(p): sha256_path(p) if p.exists() else None for p in stage.inputs},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def is_cached(self, stage: Stage) -> bool:
        if not (self.output_dir / DB_NAME).exists():
            return False
        rec = self.stage_model.get(self.config.job_type, stage.name)
        if rec is None or rec.cache_key != self.cache_key(stage):
            return False
        for out in stage.outputs:
            if not out.exists() or rec.output_hashes.get(str(out)) != sha256_path(out):
                return False
        return True

    def describe(self) -> list[dict[str, Any]]:
        """Resolved plan without running anything; reads the stage cache only if it exists."""
        rows = []
        for stage in self.plan():
            rows.append({
                "stage": stage.name,
                "inputs": [str(p) for p in stage.inputs],
                "outputs": [str(p) for p in stage.outputs],
                "status": CACHED if self.is_cached(stage) else PENDING,
            })
        return rows

    # --- execution ---
    def dispatch(self) -> RunResult:
        cfg = self.config
        result = RunResult(cfg.job_type)
        produced: list[str] = []
        run_id = self.stage_model.start_run(cfg.job_type, cfg.dumps(redact=True))
        for stage in self.plan():
            if self.is_cached(stage):
                logger.info("stage %s: outputs up to date, skipping", stage.name)
                report = StageReport(stage.name, CACHED, outputs=[str(o) for o in stage.outputs])
                result.stages.append(report)
                produced.extend(report.outputs)
                self._report(report)
                continue
            key = self.cache_key(stage)
            logger.info("stage %s: running", stage.name)
            started = time.perf_counter()
            try:
                stage.run()
            except (EasyDistillError, OSError) as e:
                partial = produced + [str(o) for o in stage.outputs if o.exists()]
                self.stage_model.invalidate(cfg.job_type, stage.name)
                self.stage_model.finish_run(run_id, FAILED)
                self._report(StageReport(stage.name, FAILED, time.perf_counter() - started, partial))
                raise StageError(stage.name, str(e), partial) from e
            duration = time.perf_counter() - started
            outputs = [str(o) for o in stage.outputs]
            self.stage_model.save(StageRecord(cfg.job_type, stage.name, key, outputs,
                                              {str(o): sha256_path(o) for o in stage.outputs if o.exists()},
                                              duration))
            report = StageReport(stage.name, RAN, duration, outputs)
            result.stages.append(report)
            produced.extend(outputs)
            self._report(report)
        self.stage_model.finish_run(run_id, "ok")
        return result

    def _report(self, report: StageReport) -> None:
        if self.view is not None and hasattr(self.view, "display_stage_report"):
            self.view.display_stage_report(report)

