from __future__ import annotations

import pytest

from codestepper.model import AnswerOracle, OracleMatcher, ParamSpec, Task, ToolDoc
from codestepper.mock_tools import ResponseRule, ScenarioSpec, make_tool_app
from codestepper.service import in_process_client


def weather_tool() -> ToolDoc:
    return ToolDoc(
        name="weather",
        description="Current weather for a city.",
        category="geo",
        url_template="/weather/{city}",
        params=[ParamSpec(name="city", required=True, description="city name")],
    )


def search_tool() -> ToolDoc:
    return ToolDoc(
        name="search",
        description="Keyword search.",
        category="web",
        url_template="/search",
        params=[ParamSpec(name="q", required=True)],
    )


def bigdoc_tool() -> ToolDoc:
    return ToolDoc(
        name="bigdoc",
        description="Fetch a very large document.",
        category="docs",
        url_template="/bigdoc/{doc_id}",
        params=[ParamSpec(name="doc_id", required=True)],
    )


def limited_tool() -> ToolDoc:
    return ToolDoc(name="limited", description="Always rate limited.", url_template="/limited")


def item_tool() -> ToolDoc:
    return ToolDoc(
        name="post_item",
        description="Create an item.",
        http_method="POST",
        url_template="/items",
        params=[ParamSpec(name="name", required=True)],
    )


def standard_scenario(oversized_bytes: int = 65536) -> ScenarioSpec:
    return ScenarioSpec(
        tools=[weather_tool(), search_tool(), bigdoc_tool(), limited_tool(), item_tool()],
        routes={
            "/weather/{city}": [ResponseRule(body={"city": "{city}", "temp_c": 21})],
            "/search": [ResponseRule(body={"q": "{q}", "hits": ["{q}-1", "{q}-2"]})],
            "/bigdoc/{doc_id}": [
                ResponseRule(
                    failure_mode="oversized",
                    size_bytes=oversized_bytes,
                    critical_key="access_code",
                    critical_value="CODE-{doc_id}",
                )
            ],
            "/limited": [ResponseRule(failure_mode="rate_limit")],
            "/items": [ResponseRule(body={"created": "{name}"})],
        },
    )


@pytest.fixture
def tool_scenario() -> ScenarioSpec:
    return standard_scenario()


@pytest.fixture
def tool_client(tool_scenario):
    with in_process_client(make_tool_app(tool_scenario), base_url="http://tools.local") as client:
        yield client


def make_task(task_id="t1", query="weather in paris?", oracle_terms=("paris",), **kwargs) -> Task:
    oracle = AnswerOracle(matchers=[OracleMatcher(pattern=t) for t in oracle_terms]) if oracle_terms else None
    defaults = dict(
        id=task_id,
        query=query,
        toolset=[weather_tool(), search_tool(), bigdoc_tool(), limited_tool(), item_tool()],
        oracle=oracle,
        max_depth=6,
    )
    defaults.update(kwargs)
    return Task(**defaults)
