"""Request/response models of the HTTP service.

Configs travel as raw YAML text, not parsed trees, so the server hashes
exactly the bytes a local run would hash and the returned manifest is
byte-compatible with an equivalent in-process run.
"""
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    version: str


class TheoremInfo(BaseModel):
    theorem_id: str
    description: str
    runner: str
    driver_kinds: list[str]
    p_note: str


class RunRequest(BaseModel):
    config_text: str
    workers: int = Field(default=1, ge=1)
    seed: int | None = None
    mode: Literal["sync", "async"] = "sync"


class RunResponse(BaseModel):
    run_id: str
    status: Literal["running", "done", "failed", "error"]
    exit_code: int | None = None
    all_passed: bool | None = None
    manifest: dict | None = None
    files: dict[str, str] | None = None
    detail: str | None = None
