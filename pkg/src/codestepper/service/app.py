"""FastAPI service wrapping the core package.

Every endpoint is stateless: a request carries the suite, scenarios and
config inline; mock backends are mounted in-process unless URLs point at
live services. The CLI is a thin client of this app.
"""

from __future__ import annotations

from contextlib import ExitStack
from pathlib import Path
from typing import Callable, Optional

import warnings

import httpx
from fastapi import FastAPI, HTTPException

with warnings.catch_warnings():
    # starlette 1.3 nags about httpx vs httpx2 under its TestClient; the
    # in-process client works fine on httpx and stays on it.
    warnings.simplefilter("ignore")
    from starlette.testclient import TestClient

from ..gateway import ExecutionGateway
from ..harness import (
    RunConfig,
    RunEnvironment,
    RunResult,
    build_report,
    collect_suite,
    load_trajectories,
    run_json_baseline,
    run_suite,
    ablation_variants,
    write_report,
    write_trajectories,
)
from ..mock_tools import make_prm_app, make_tool_app
from ..model import Trajectory
from ..policy import ScriptedPolicy
from ..runner import SubprocessRunnerTransport
from . import schemas


def in_process_client(app: FastAPI, base_url: str = "http://mock.local") -> httpx.Client:
    """Sync httpx client mounted directly on an ASGI app (no sockets)."""
    return TestClient(app, base_url=base_url)


def make_proxy_app(resolve_gateway: Callable[[], Optional[ExecutionGateway]]) -> FastAPI:
    """The tool-proxy endpoint external runner workers call back into."""
    app = FastAPI(title="gateway tool proxy", docs_url=None, redoc_url=None, openapi_url=None)

    @app.post("/proxy/call")
    async def proxy_call(payload: dict) -> dict:
        gateway = resolve_gateway()
        if gateway is None:
            return {"ok": False, "error": "no gateway bound"}
        try:
            body = gateway._proxy_call(
                str(payload.get("session", "")), str(payload.get("tool", "")), dict(payload.get("params") or {})
            )
        except Exception as exc:
            return {"ok": False, "error": str(exc)}
        return {"ok": True, "body": body}

    return app


def _apply_seed(config: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return config
    hp = config.engine.hp.model_copy(update={"rng_seed": seed})
    return config.model_copy(update={"engine": config.engine.model_copy(update={"hp": hp})})


def _build_env(
    scenario: schemas.PolicyScenario,
    backends: schemas.ServiceBackends,
    config: RunConfig,
    stack: ExitStack,
) -> RunEnvironment:
    tool_client: Optional[httpx.Client] = None
    if backends.tool_scenario is not None:
        tool_client = stack.enter_context(in_process_client(make_tool_app(backends.tool_scenario)))
    elif backends.tool_service_url:
        tool_client = stack.enter_context(httpx.Client(base_url=backends.tool_service_url, timeout=30.0))

    prm_client: Optional[httpx.Client] = None
    if config.engine.latent_mode == "prm":
        if backends.prm_url:
            prm_client = stack.enter_context(httpx.Client(base_url=backends.prm_url, timeout=30.0))
        else:
            prm_client = stack.enter_context(in_process_client(make_prm_app()))

    runner = None
    if backends.runner_command:
        runner = SubprocessRunnerTransport(backends.runner_command)
        stack.callback(runner.close)

    return RunEnvironment(
        policy=ScriptedPolicy(scenario), tool_client=tool_client, prm_client=prm_client, runner=runner
    )


def _run_response(result: RunResult, out_dir: Optional[str]) -> schemas.RunResponse:
    trajectory_files: list[str] = []
    report_files: dict[str, str] = {}
    if out_dir:
        trajectory_files = [str(p) for p in write_trajectories(result.trajectories, out_dir)]
        report_files = {k: str(v) for k, v in write_report(result.report, result.failures, out_dir).items()}
    return schemas.RunResponse(
        report=result.report,
        failures=result.failures,
        trajectory_files=trajectory_files,
        report_files=report_files,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="codestepper service", version="0.1.0")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"ok": True}

    @app.post("/run", response_model=schemas.RunResponse)
    def run(request: schemas.RunRequest) -> schemas.RunResponse:
        config = _apply_seed(request.config, request.seed)
        with ExitStack() as stack:
            env = _build_env(request.scenario, request.backends, config, stack)
            result = run_suite(request.suite, config, env)
        return _run_response(result, request.out_dir)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(request: schemas.RunRequest) -> schemas.AblateResponse:
        config = _apply_seed(request.config, request.seed)
        variants: dict[str, schemas.RunResponse] = {}
        for name, variant_config in ablation_variants(config).items():
            with ExitStack() as stack:
                env = _build_env(request.scenario, request.backends, variant_config, stack)
                result = run_suite(request.suite, variant_config, env)
            out_dir = str(Path(request.out_dir) / name) if request.out_dir else None
            variants[name] = _run_response(result, out_dir)
        return schemas.AblateResponse(variants=variants)

    @app.post("/collect", response_model=schemas.CollectResponse)
    def collect(request: schemas.CollectRequest) -> schemas.CollectResponse:
        config = _apply_seed(request.config, request.seed)
        with ExitStack() as stack:
            env = _build_env(request.scenario, request.backends, config, stack)
            pairs, _ = collect_suite(request.suite, config, env, request.depth_cap, request.out_path)
        return schemas.CollectResponse(
            pair_count=len(pairs),
            out_path=request.out_path,
            pairs=None if request.out_path else list(pairs),
        )

    @app.post("/conflict-stats", response_model=schemas.ReportResponse)
    def conflict_stats(request: schemas.ConflictStatsRequest) -> schemas.ReportResponse:
        if request.trajectory_dir:
            trajectories = load_trajectories(request.trajectory_dir)
        elif request.trajectories is not None:
            loaded = [Trajectory.model_validate(t) for t in request.trajectories]
            trajectories = {t.task_id: t for t in loaded}
        else:
            raise HTTPException(status_code=422, detail="trajectory_dir or trajectories required")
        return schemas.ReportResponse(report=build_report(trajectories))

    @app.post("/json-baseline", response_model=schemas.JsonBaselineResponse)
    def json_baseline(request: schemas.JsonBaselineRequest) -> schemas.JsonBaselineResponse:
        with ExitStack() as stack:
            env = _build_env({}, request.backends, request.config, stack)
            report, results = run_json_baseline(request.suite, request.config, request.json_scenario, env)
        report_files: dict[str, str] = {}
        if request.out_dir:
            report_files = {k: str(v) for k, v in write_report(report, {}, request.out_dir).items()}
        return schemas.JsonBaselineResponse(report=report, results=results, report_files=report_files)

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(request: schemas.ReportRequest) -> schemas.ReportResponse:
        directory = Path(request.trajectory_dir)
        if not directory.is_dir():
            raise HTTPException(status_code=404, detail=f"no such directory: {directory}")
        trajectories = load_trajectories(directory)
        if not trajectories:
            raise HTTPException(status_code=404, detail=f"no trajectories in {directory}")
        return schemas.ReportResponse(report=build_report(trajectories, request.labels))

    return app


app = create_app()
