"""Command-line entry point.

``run`` executes a config in process by default; with ``--server`` it
posts the raw config text to a running service and materializes the
returned report files locally, producing the same output tree either
way.  ``list`` prints the theorem registry, ``serve`` starts the HTTP
service.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigInvalid
from .convergence import list_registry
from .runner import EXIT_FAILED, EXIT_INVALID, EXIT_OK, run_config_file


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sevlab",
        description="Convergence laboratory for regularized and perturbed "
        "stochastic evolution equations on spectral truncations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every experiment in a config file")
    run.add_argument("config", help="path to a YAML experiment config")
    run.add_argument("--out", help="output directory (default: config's output "
                     "field, else <config>_reports)")
    run.add_argument("--workers", type=int, default=1,
                     help="parallel sweep-point workers (results are "
                     "worker-count independent)")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config's base seed")
    run.add_argument("--server", default=None,
                     help="run remotely against this service URL")

    lst = sub.add_parser("list", help="list the registered theorem experiments")
    lst.add_argument("--filter", default=None,
                     help="only entries whose id or description contains this")
    lst.add_argument("--server", default=None,
                     help="query a running service instead of the local registry")

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _print_summary(manifest: dict) -> None:
    for entry in manifest["experiments"]:
        status = "PASS" if entry.get("passed") else "FAIL"
        line = f"{entry['label']:<18} {entry['theorem']:<16} {status}"
        if "final_error" in entry:
            line += f"  final={entry['final_error']:.4e}"
        if entry.get("slope") is not None:
            line += f"  slope={entry['slope']:+.3f}"
        if entry.get("error"):
            line += f"  error: {entry['error']}"
        print(line)
    print("all passed" if manifest["all_passed"] else "FAILED", flush=True)


def _run_local(args) -> int:
    try:
        outcome = run_config_file(
            args.config, args.out, workers=args.workers, seed_override=args.seed
        )
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _print_summary(outcome.manifest)
    return outcome.exit_code


def _run_remote(args) -> int:
    import httpx

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    payload = {"config_text": text, "workers": args.workers}
    if args.seed is not None:
        payload["seed"] = args.seed
    response = httpx.post(
        args.server.rstrip("/") + "/runs", json=payload, timeout=None
    )
    if response.status_code == 400:
        print(f"invalid config: {response.json()['detail']}", file=sys.stderr)
        return EXIT_INVALID
    response.raise_for_status()
    body = response.json()
    if body["status"] == "error":
        print(f"run failed remotely: {body.get('detail')}", file=sys.stderr)
        return EXIT_FAILED
    out = Path(args.out) if args.out else Path(Path(args.config).stem + "_reports")
    for rel, content in (body.get("files") or {}).items():
        target = out / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content)
    _print_summary(body["manifest"])
    return EXIT_OK if body["all_passed"] else EXIT_FAILED


def _list_local(pattern: str | None) -> list[tuple[str, str]]:
    return [(s.theorem_id, s.description) for s in list_registry(pattern)]


def _list_remote(server: str, pattern: str | None) -> list[tuple[str, str]]:
    import httpx

    response = httpx.get(
        server.rstrip("/") + "/experiments",
        params={} if pattern is None else {"filter": pattern},
        timeout=30.0,
    )
    response.raise_for_status()
    return [(e["theorem_id"], e["description"]) for e in response.json()]


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "run":
        return _run_remote(args) if args.server else _run_local(args)

    if args.command == "list":
        rows = (
            _list_remote(args.server, args.filter)
            if args.server
            else _list_local(args.filter)
        )
        for theorem_id, description in rows:
            print(f"{theorem_id:<16} {description}")
        return EXIT_OK

    if args.command == "serve":
        import uvicorn

        from .api import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
