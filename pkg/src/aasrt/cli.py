"""Command line: ``aasrt serve | pack | validate | import | instances | gc``.

Exit codes: 0 ok, 1 validation failure, 2 configuration error, 3 network
failure. Every subcommand accepts ``--json`` and then prints exactly one
JSON document matching :data:`OUTPUT_SCHEMA`.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Any, Optional, Sequence
from urllib.parse import urlparse

import httpx

from .aasx import MEDIA_TYPE, package_from_members, read_package, validate_package, write_package
from .errors import AasError, ConfigError, PackageError

log = logging.getLogger("aasrt")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NETWORK = 3

DEFAULTS = {
    "listen": "127.0.0.1:8080",
    "store": "./aasrt-data",
    "engine": "simulated",
    "engine_endpoint": "unix:///var/run/docker.sock",
    "token": None,
    "grace": 5.0,
    "log_level": "INFO",
    "api_base": None,
    "tick_interval": 1.0,
}

OUTPUT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "aasrt CLI output",
    "type": "object",
    "required": ["command", "ok", "exitCode"],
    "properties": {
        "command": {"enum": ["serve", "pack", "validate", "import", "instances", "gc"]},
        "ok": {"type": "boolean"},
        "exitCode": {"enum": [0, 1, 2, 3]},
        "error": {
            "type": "object",
            "required": ["code", "message"],
            "properties": {"code": {"type": "string"}, "message": {"type": "string"}},
        },
        "result": {},
    },
    "additionalProperties": False,
}


class CommandFailed(Exception):
    def __init__(self, exit_code: int, code: str, message: str, result: Any = None) -> None:
        super().__init__(message)
        self.exit_code = exit_code
        self.code = code
        self.message = message
        self.result = result


# -- config ---------------------------------------------------------------------


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace, environ: Optional[dict] = None) -> dict:
    """Merge flags > ``AASRT_*`` environment > config file > defaults, then check the result."""
    environ = os.environ if environ is None else environ
    file_cfg = _load_config_file(getattr(args, "config", None) or environ.get("AASRT_CONFIG"))
    cfg = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        env = environ.get("AASRT_" + key.upper())
        if flag is not None:
            cfg[key] = flag
        elif env is not None:
            cfg[key] = env
        elif key in file_cfg:
            cfg[key] = file_cfg[key]
        else:
            cfg[key] = default
    return check_config(cfg)


def parse_listen(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ConfigError(f"--listen must be HOST:PORT with 1 <= PORT <= 65535, got {text!r}")
    return host.strip("[]"), int(port)


def check_config(cfg: dict) -> dict:
    cfg = dict(cfg)
    cfg["host"], cfg["port"] = parse_listen(cfg["listen"])
    if cfg["engine"] not in ("simulated", "docker"):
        raise ConfigError(f"engine must be 'simulated' or 'docker', got {cfg['engine']!r}")
    if cfg["engine"] == "docker":
        parsed = urlparse(str(cfg["engine_endpoint"]))
        ok = (parsed.scheme == "unix" and parsed.path) or (parsed.scheme in ("tcp", "http", "https") and parsed.netloc)
        if not ok:
            raise ConfigError(f"engine endpoint must be unix:///path or tcp://host:port, got {cfg['engine_endpoint']!r}")
    try:
        cfg["grace"] = float(cfg["grace"])
        cfg["tick_interval"] = float(cfg["tick_interval"])
    except (TypeError, ValueError):
        raise ConfigError("grace and tick_interval must be numbers") from None
    if cfg["grace"] < 0 or cfg["tick_interval"] <= 0:
        raise ConfigError("grace must be >= 0 and tick_interval > 0")
    level = str(cfg["log_level"]).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level {cfg['log_level']!r}")
    cfg["log_level"] = level
    store = Path(cfg["store"])
    try:
        store.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create store directory {store}: {exc}") from None
    if not os.access(store, os.W_OK):
        raise ConfigError(f"store directory {store} is not writable")
    if not cfg["api_base"]:
        host = "127.0.0.1" if cfg["host"] in ("0.0.0.0", "::") else cfg["host"]
        cfg["api_base"] = f"http://{host}:{cfg['port']}"
    return cfg


# -- commands ---------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> dict:
    import uvicorn

    from .api import ServiceClient, create_app
    from .engine import Behavior, DockerEngine, SimulatedEngine
    from .runtime import Runtime

    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        raise CommandFailed(EXIT_CONFIG, exc.code, exc.message) from None
    logging.basicConfig(level=cfg["log_level"], format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if cfg["engine"] == "docker":
        engine = DockerEngine(cfg["engine_endpoint"])
    else:
        engine = SimulatedEngine(api_factory=ServiceClient, default_behavior=Behavior())
    runtime = Runtime(cfg["store"], engine=engine, api_base=cfg["api_base"], grace_s=cfg["grace"])
    app = create_app(runtime, token=cfg["token"])
    server = uvicorn.Server(uvicorn.Config(app, host=cfg["host"], port=cfg["port"], log_level=cfg["log_level"].lower()))

    stop = threading.Event()

    def supervise() -> None:
        while not stop.wait(cfg["tick_interval"]):
            try:
                runtime.tick()
            except Exception:
                log.exception("supervision tick failed")

    ticker = threading.Thread(target=supervise, name="aasrt-supervision", daemon=True)
    ticker.start()
    log.info("serving on %s:%d (engine %s, store %s)", cfg["host"], cfg["port"], cfg["engine"], cfg["store"])
    # uvicorn re-raises the stop signal once it has shut down; with a no-op
    # handler in place that lands here instead of killing the process, so
    # running instances still get stopped below.
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: None)
    try:
        server.run()
    finally:
        stop.set()
        ticker.join(timeout=5)
        stopped = runtime.shutdown()
        for t in stopped:
            log.info("stopped %s (%s): %s", t.instance_id, t.service_id, t.reason)
    if not server.started:
        raise CommandFailed(EXIT_CONFIG, "ConfigError", f"could not listen on {cfg['listen']}")
    return {"stopped": [t.to_dict() for t in stopped]}


def _read_tree(root: Path) -> dict[str, bytes]:
    members = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            members[path.relative_to(root).as_posix()] = path.read_bytes()
    return members


def cmd_pack(args: argparse.Namespace) -> dict:
    root = Path(args.directory)
    if not root.is_dir():
        raise CommandFailed(EXIT_CONFIG, "ConfigError", f"{root} is not a directory")
    try:
        pkg = package_from_members(_read_tree(root))
    except AasError as exc:
        raise CommandFailed(EXIT_VALIDATION, exc.code, exc.message) from None
    report = validate_package(pkg)
    if not report.ok:
        raise CommandFailed(EXIT_VALIDATION, "ValidationFailed", f"{len(report.errors)} error(s)", report.to_dict())
    data = write_package(pkg)
    out = Path(args.output)
    try:
        out.write_bytes(data)
    except OSError as exc:
        raise CommandFailed(EXIT_CONFIG, "IoFailure", f"cannot write {out}: {exc}") from None
    return {"output": str(out), "bytes": len(data), "findings": report.to_dict()}


def cmd_validate(args: argparse.Namespace) -> dict:
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        raise CommandFailed(EXIT_VALIDATION, "NotAZip", f"cannot read {args.file}: {exc}") from None
    try:
        report = validate_package(read_package(data))
    except PackageError as exc:
        raise CommandFailed(EXIT_VALIDATION, exc.code, exc.message) from None
    if not report.ok:
        raise CommandFailed(EXIT_VALIDATION, "ValidationFailed", f"{len(report.errors)} error(s)", report.to_dict())
    return report.to_dict()


def _client(args: argparse.Namespace) -> httpx.Client:
    token = args.token or os.environ.get("AASRT_TOKEN")
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    parsed = urlparse(args.server)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise CommandFailed(EXIT_CONFIG, "ConfigError", f"--server must be an http(s) URL, got {args.server!r}")
    return httpx.Client(base_url=args.server, headers=headers, timeout=args.timeout)


def _request(args: argparse.Namespace, method: str, path: str, **kwargs) -> Any:
    with _client(args) as client:
        try:
            resp = client.request(method, path, **kwargs)
        except httpx.HTTPError as exc:
            raise CommandFailed(EXIT_NETWORK, "NetworkError", f"{args.server}: {exc}") from None
    try:
        body = resp.json()
    except ValueError:
        body = {"code": "HttpError", "message": resp.text}
    if resp.status_code >= 400:
        code = body.get("code", "HttpError") if isinstance(body, dict) else "HttpError"
        message = body.get("message", resp.text) if isinstance(body, dict) else resp.text
        raise CommandFailed(EXIT_VALIDATION, code, f"HTTP {resp.status_code}: {message}", body)
    return body


def cmd_import(args: argparse.Namespace) -> dict:
    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        raise CommandFailed(EXIT_VALIDATION, "NotAZip", f"cannot read {args.file}: {exc}") from None
    return _request(args, "POST", "/import", content=data, headers={"Content-Type": MEDIA_TYPE})


def cmd_instances(args: argparse.Namespace) -> list:
    return _request(args, "GET", "/instances")


def cmd_gc(args: argparse.Namespace) -> dict:
    """Drop stored contexts that no registered spec can reach (run with the server stopped)."""
    from .runtime import Runtime

    store = Path(args.store or os.environ.get("AASRT_STORE") or DEFAULTS["store"])
    if not store.is_dir():
        raise CommandFailed(EXIT_CONFIG, "ConfigError", f"store directory {store} does not exist")
    runtime = Runtime(store)
    keep = set()
    for spec in runtime.orchestrator.specs.values():
        ctx = spec.context
        if ctx.is_external:
            continue
        if ctx.content_hash is not None:
            keep.add((ctx.service_id, ctx.content_hash))
        else:
            versions = runtime.contexts.list_versions(ctx.service_id)
            if versions:
                keep.add((ctx.service_id, versions[0].content_hash))
    removed = runtime.contexts.gc(keep)
    return {"removed": [c.to_dict() for c in removed], "kept": sorted(f"{s}@{h}" for s, h in keep)}


# -- entry point ------------------------------------------------------------------


def _human(command: str, result: Any) -> str:
    if command == "instances":
        if not result:
            return "no instances"
        return "\n".join(f"{i['instanceId']}  {i['serviceId']:<24} {i['state']:<10} {i['reason'] or ''}" for i in result)
    return json.dumps(result, indent=2, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print one machine-readable JSON document")

    parser = argparse.ArgumentParser(prog="aasrt", description="AAS runtime with containerized services")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP server")
    p.add_argument("--listen", help="HOST:PORT (default 127.0.0.1:8080)")
    p.add_argument("--store", help="storage directory")
    p.add_argument("--engine", choices=["simulated", "docker"])
    p.add_argument("--engine-endpoint", dest="engine_endpoint", help="unix:///path or tcp://host:port")
    p.add_argument("--token", help="require this bearer token")
    p.add_argument("--grace", type=float, help="seconds to wait on container stop")
    p.add_argument("--log-level", dest="log_level")
    p.add_argument("--api-base", dest="api_base", help="URL containers use to reach this server")
    p.add_argument("--tick-interval", dest="tick_interval", type=float, help="seconds between supervision ticks")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("pack", parents=[common], help="build an AASX package from a source directory")
    p.add_argument("directory")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("validate", parents=[common], help="check an AASX package")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    for name, func, helptext in (
        ("import", cmd_import, "upload a package to a running server"),
        ("instances", cmd_instances, "list service instances of a running server"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "import":
            p.add_argument("file")
        p.add_argument("--server", default=os.environ.get("AASRT_SERVER", "http://127.0.0.1:8080"))
        p.add_argument("--token")
        p.add_argument("--timeout", type=float, default=30.0)
        p.set_defaults(func=func)

    p = sub.add_parser("gc", parents=[common], help="remove unreferenced stored contexts")
    p.add_argument("--store")
    p.set_defaults(func=cmd_gc)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except CommandFailed as exc:
        if args.json:
            doc = {"command": args.command, "ok": False, "exitCode": exc.exit_code,
                   "error": {"code": exc.code, "message": exc.message}}
            if exc.result is not None:
                doc["result"] = exc.result
            print(json.dumps(doc, sort_keys=True))
        else:
            print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
            if exc.result is not None:
                print(json.dumps(exc.result, indent=2, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    if args.json:
        print(json.dumps({"command": args.command, "ok": True, "exitCode": EXIT_OK, "result": result}, sort_keys=True))
    else:
        print(_human(args.command, result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
