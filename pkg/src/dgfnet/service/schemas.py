"""Request and response models for the HTTP job service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConfigSource(_Strict):
    """Where the experiment config comes from: an inline tree with the
    same schema as the YAML file, a YAML path on the service host, or a
    named preset. Inline and path are mutually exclusive."""

    config: dict | None = None
    config_path: str | None = None
    preset: str = "desk"


class GenDataRequest(ConfigSource):
    split: Literal["train", "test"] = "test"
    out_dir: str | None = None
    write_wavs: bool = True
    limit: int | None = None


class TrainRequest(ConfigSource):
    out_dir: str | None = None
    resume_from: str | None = None


class EvalRequest(ConfigSource):
    checkpoint: str | None = None
    oracle: bool = False
    use_filter: bool = False
    include_baseline: bool = False
    limit: int | None = None
    out_dir: str | None = None


class AblateRequest(ConfigSource):
    out_dir: str | None = None


class AnalyzeGatesRequest(ConfigSource):
    checkpoint: str
    limit: int | None = None
    out_dir: str | None = None


class SeparateRequest(ConfigSource):
    split: Literal["train", "test"] = "test"
    index: int = 0
    checkpoint: str | None = None
    oracle: bool = False
    out_dir: str | None = None


class JobCreated(_Strict):
    job_id: str
    op: str
    state: str


class JobStatus(_Strict):
    job_id: str
    op: str
    state: Literal["queued", "running", "done", "failed"]
    progress: dict | None = None
    result: dict | None = None
    error: str | None = None
    error_category: str | None = None


class HealthResponse(_Strict):
    status: str
    version: str
