"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field

from ..collector import PrmPair
from ..harness import BenchmarkSuite, ConflictDistribution, JsonModeResult, MetricsReport, RunConfig
from ..mock_tools import ScenarioSpec

PolicyScenario = dict[str, dict[str, list[str]]]


class ServiceBackends(BaseModel):
    """Where runs get their collaborators.

    Inline scenarios mount deterministic in-process services; URLs point at
    live ones. Omitting both leaves the corresponding backend unset.
    """

    tool_scenario: Optional[ScenarioSpec] = None
    tool_service_url: Optional[str] = None
    prm_url: Optional[str] = None
    runner_command: Optional[list[str]] = None


class RunRequest(BaseModel):
    suite: BenchmarkSuite
    scenario: PolicyScenario = Field(default_factory=dict)
    config: RunConfig = RunConfig()
    backends: ServiceBackends = ServiceBackends()
    seed: Optional[int] = None
    out_dir: Optional[str] = None


class RunResponse(BaseModel):
    report: MetricsReport
    failures: dict[str, str] = Field(default_factory=dict)
    trajectory_files: list[str] = Field(default_factory=list)
    report_files: dict[str, str] = Field(default_factory=dict)


class AblateResponse(BaseModel):
    variants: dict[str, RunResponse]


class CollectRequest(BaseModel):
    suite: BenchmarkSuite
    scenario: PolicyScenario = Field(default_factory=dict)
    config: RunConfig = RunConfig()
    backends: ServiceBackends = ServiceBackends()
    depth_cap: int = Field(default=2, ge=1)
    seed: Optional[int] = None
    out_path: Optional[str] = None


class CollectResponse(BaseModel):
    pair_count: int
    out_path: Optional[str] = None
    pairs: Optional[list[PrmPair]] = None


class ConflictStatsRequest(BaseModel):
    trajectory_dir: Optional[str] = None
    trajectories: Optional[list[dict[str, Any]]] = None


class JsonBaselineRequest(BaseModel):
    suite: BenchmarkSuite
    json_scenario: dict[str, list[dict[str, Any]]] = Field(default_factory=dict)
    config: RunConfig = RunConfig()
    backends: ServiceBackends = ServiceBackends()
    out_dir: Optional[str] = None


class JsonBaselineResponse(BaseModel):
    report: MetricsReport
    results: dict[str, JsonModeResult]
    report_files: dict[str, str] = Field(default_factory=dict)


class ReportRequest(BaseModel):
    trajectory_dir: str
    labels: dict[str, str] = Field(default_factory=dict)


class ReportResponse(BaseModel):
    report: MetricsReport
