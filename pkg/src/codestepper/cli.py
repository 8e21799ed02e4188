"""Thin HTTP client over the service app.

Without ``--server`` the service runs in-process (same wire format, no
sockets); with it, requests go to a live deployment. Exit codes: 0
success, 1 usage error, 2 environment error, 3 run completed with
per-task failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional

import httpx

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ENVIRONMENT = 2
EXIT_RUN_FAILURES = 3


class UsageError(Exception):
    pass


class EnvironmentProblem(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); the contract says 1
        raise UsageError(message)


def _load_json(path: Optional[str], default: Any = None) -> Any:
    if path is None:
        return default
    p = Path(path)
    if not p.is_file():
        raise EnvironmentProblem(f"file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {path}: {exc}") from exc


def _client(server: Optional[str]) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from .service import create_app, in_process_client

    return in_process_client(create_app(), base_url="http://codestepper.local")


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        response = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise EnvironmentProblem(f"service unreachable: {exc}") from exc
    if response.status_code == 422:
        raise UsageError(f"request rejected: {response.text}")
    if response.status_code >= 400:
        raise EnvironmentProblem(f"service error HTTP {response.status_code}: {response.text}")
    return response.json()


def _backends(args: argparse.Namespace) -> dict:
    backends: dict[str, Any] = {}
    if getattr(args, "tool_scenario", None):
        backends["tool_scenario"] = _load_json(args.tool_scenario)
    if getattr(args, "tool_url", None):
        backends["tool_service_url"] = args.tool_url
    if getattr(args, "prm_url", None):
        backends["prm_url"] = args.prm_url
    if getattr(args, "runner_command", None):
        backends["runner_command"] = args.runner_command.split()
    return backends


def _common_payload(args: argparse.Namespace) -> dict:
    payload: dict[str, Any] = {
        "suite": _load_json(args.suite),
        "scenario": _load_json(getattr(args, "scenario", None), default={}),
        "backends": _backends(args),
    }
    config = _load_json(getattr(args, "config", None))
    if config is not None:
        payload["config"] = config
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    return payload


def _print_report(report: dict) -> None:
    average = report["average"]
    scep_text = "n/a" if average.get("scep") is None else f"{average['scep']:.4f}"
    print(
        f"tasks={average['n_tasks']} sopr={average['sopr']:.4f} scep={scep_text} "
        f"avg_depth={average['avg_depth']:.2f} total_tokens={average['total_tokens']}"
    )
    for subset, metrics in sorted(report["per_subset"].items()):
        print(f"  [{subset}] n={metrics['n_tasks']} sopr={metrics['sopr']:.4f}")


def _cmd_run(client: httpx.Client, args: argparse.Namespace) -> int:
    payload = _common_payload(args)
    if args.out:
        payload["out_dir"] = args.out
    body = _post(client, "/run", payload)
    _print_report(body["report"])
    if body.get("failures"):
        for task_id, note in sorted(body["failures"].items()):
            print(f"FAILED {task_id}: {note}", file=sys.stderr)
        return EXIT_RUN_FAILURES
    return EXIT_OK


def _cmd_ablate(client: httpx.Client, args: argparse.Namespace) -> int:
    payload = _common_payload(args)
    if args.out:
        payload["out_dir"] = args.out
    body = _post(client, "/ablate", payload)
    failed = False
    for name, variant in body["variants"].items():
        print(f"variant {name}:")
        _print_report(variant["report"])
        failed = failed or bool(variant.get("failures"))
    return EXIT_RUN_FAILURES if failed else EXIT_OK


def _cmd_collect(client: httpx.Client, args: argparse.Namespace) -> int:
    payload = _common_payload(args)
    payload["depth_cap"] = args.depth_cap
    if args.out:
        payload["out_path"] = args.out
    body = _post(client, "/collect", payload)
    print(f"pairs={body['pair_count']}" + (f" -> {body['out_path']}" if body.get("out_path") else ""))
    return EXIT_OK


def _cmd_conflict_stats(client: httpx.Client, args: argparse.Namespace) -> int:
    body = _post(client, "/conflict-stats", {"trajectory_dir": args.trajectories})
    conflicts = body["report"]["conflicts"]
    for case in sorted(conflicts["counts"]):
        print(f"{case}: {conflicts['counts'][case]} ({conflicts['percentages'][case]:.2f}%)")
    print(f"total pairs: {conflicts['total']}")
    return EXIT_OK


def _cmd_json_baseline(client: httpx.Client, args: argparse.Namespace) -> int:
    payload: dict[str, Any] = {
        "suite": _load_json(args.suite),
        "json_scenario": _load_json(args.json_scenario, default={}),
        "backends": _backends(args),
    }
    config = _load_json(getattr(args, "config", None))
    if config is not None:
        payload["config"] = config
    if args.out:
        payload["out_dir"] = args.out
    body = _post(client, "/json-baseline", payload)
    _print_report(body["report"])
    return EXIT_OK


def _cmd_report(client: httpx.Client, args: argparse.Namespace) -> int:
    payload: dict[str, Any] = {"trajectory_dir": args.trajectories}
    if args.labels:
        payload["labels"] = _load_json(args.labels)
    body = _post(client, "/report", payload)
    _print_report(body["report"])
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="codestepper", description="Stepwise code-agent benchmark harness client")
    parser.add_argument("--server", help="base URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_backend_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--tool-scenario", help="mock tool universe scenario JSON")
        p.add_argument("--tool-url", help="base URL of a live tool service")
        p.add_argument("--prm-url", help="base URL of a PRM scoring service")
        p.add_argument("--runner-command", help="external runner worker command line")

    run_p = sub.add_parser("run", help="run the stepwise engine over a suite")
    run_p.add_argument("--suite", required=True)
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--config")
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--out")
    add_backend_flags(run_p)
    run_p.set_defaults(func=_cmd_run)

    ablate_p = sub.add_parser("ablate", help="run full, spot-off and latent-off variants")
    ablate_p.add_argument("--suite", required=True)
    ablate_p.add_argument("--scenario", required=True)
    ablate_p.add_argument("--config")
    ablate_p.add_argument("--seed", type=int)
    ablate_p.add_argument("--out")
    add_backend_flags(ablate_p)
    ablate_p.set_defaults(func=_cmd_ablate)

    collect_p = sub.add_parser("collect", help="collect PRM preference pairs")
    collect_p.add_argument("--suite", required=True)
    collect_p.add_argument("--scenario", required=True)
    collect_p.add_argument("--config")
    collect_p.add_argument("--seed", type=int)
    collect_p.add_argument("--depth-cap", type=int, default=2)
    collect_p.add_argument("--out")
    add_backend_flags(collect_p)
    collect_p.set_defaults(func=_cmd_collect)

    conflict_p = sub.add_parser("conflict-stats", help="conflict-case distribution over trajectories")
    conflict_p.add_argument("--trajectories", required=True)
    conflict_p.set_defaults(func=_cmd_conflict_stats)

    baseline_p = sub.add_parser("json-baseline", help="minimal truncating JSON-mode loop")
    baseline_p.add_argument("--suite", required=True)
    baseline_p.add_argument("--json-scenario", required=True)
    baseline_p.add_argument("--config")
    baseline_p.add_argument("--out")
    add_backend_flags(baseline_p)
    baseline_p.set_defaults(func=_cmd_json_baseline)

    report_p = sub.add_parser("report", help="recompute metrics from trajectory files")
    report_p.add_argument("--trajectories", required=True)
    report_p.add_argument("--labels")
    report_p.set_defaults(func=_cmd_report)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _client(args.server) as client:
            return args.func(client, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EnvironmentProblem as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT


if __name__ == "__main__":
    sys.exit(main())
