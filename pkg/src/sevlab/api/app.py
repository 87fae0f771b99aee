"""FastAPI wrapper around the config runner.

Runs execute in a scratch directory; every produced file is returned in
the response body so a thin client can materialize the same output tree
locally.  Async runs are tracked in an in-memory store and polled via
GET /runs/{id}.
"""
from __future__ import annotations

import tempfile
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigInvalid, parse_config
from ..convergence import list_registry
from ..runner import run_config
from .schemas import HealthResponse, RunRequest, RunResponse, TheoremInfo


class _RunStore:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._runs: dict[str, RunResponse] = {}

    def put(self, response: RunResponse) -> None:
        with self._lock:
            self._runs[response.run_id] = response

    def get(self, run_id: str) -> RunResponse | None:
        with self._lock:
            return self._runs.get(run_id)


def _collect_files(root: Path) -> dict[str, str]:
    files = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            files[path.relative_to(root).as_posix()] = path.read_text()
    return files


def _execute(request: RunRequest, run_id: str) -> RunResponse:
    config = parse_config(request.config_text)
    with tempfile.TemporaryDirectory(prefix="sevlab-run-") as tmp:
        outcome = run_config(
            config,
            request.config_text.encode("utf-8"),
            tmp,
            workers=request.workers,
            seed_override=request.seed,
        )
        files = _collect_files(Path(tmp))
    return RunResponse(
        run_id=run_id,
        status="done" if outcome.all_passed else "failed",
        exit_code=outcome.exit_code,
        all_passed=outcome.all_passed,
        manifest=outcome.manifest,
        files=files,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="sevlab", version=__version__)
    store = _RunStore()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.get("/experiments", response_model=list[TheoremInfo])
    def experiments(filter: str | None = None) -> list[TheoremInfo]:
        return [
            TheoremInfo(
                theorem_id=s.theorem_id,
                description=s.description,
                runner=s.runner,
                driver_kinds=list(s.driver_kinds),
                p_note=s.p_note,
            )
            for s in list_registry(filter)
        ]

    @app.post("/runs", response_model=RunResponse)
    def submit(request: RunRequest) -> RunResponse:
        # Validate up front so both modes reject bad configs immediately.
        try:
            parse_config(request.config_text)
        except ConfigInvalid as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        run_id = uuid.uuid4().hex
        if request.mode == "sync":
            try:
                response = _execute(request, run_id)
            except ConfigInvalid as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            except Exception as exc:
                response = RunResponse(run_id=run_id, status="error", detail=str(exc))
            store.put(response)
            return response

        placeholder = RunResponse(run_id=run_id, status="running")
        store.put(placeholder)

        def worker() -> None:
            try:
                store.put(_execute(request, run_id))
            except Exception as exc:
                store.put(
                    RunResponse(run_id=run_id, status="error", detail=str(exc))
                )

        threading.Thread(target=worker, daemon=True).start()
        return placeholder

    @app.get("/runs/{run_id}", response_model=RunResponse)
    def run_status(run_id: str) -> RunResponse:
        response = store.get(run_id)
        if response is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return response

    return app


app = create_app()
