"""Container engine backends.

``SimulatedEngine`` is a deterministic in-process double: services are
Python callables registered per build-context hash, and every call is
appended to :attr:`SimulatedEngine.calls`. ``DockerEngine`` speaks the
Docker Engine HTTP API over a unix socket or TCP.
"""
from __future__ import annotations

import io
import json
import logging
import re
import tarfile
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol, Sequence
from urllib.parse import urlparse

import httpx

from .aasx import CONTAINERFILE, context_digest
from .errors import BuildFailed, ConfigError, EngineUnavailable, RunFailed, UnregisteredBehavior, UnknownInstance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContainerStatus:
    state: str  # created | running | exited
    exit_code: Optional[int] = None


class ContainerEngine(Protocol):
    def build(self, tree: dict[str, bytes], tag: str) -> str: ...

    def run(self, image_id: str, env: dict[str, str], labels: dict[str, str]) -> str: ...

    def stop(self, container_id: str, grace_s: float) -> None: ...

    def remove(self, container_id: str) -> None: ...

    def inspect(self, container_id: str) -> ContainerStatus: ...

    def health(self, container_id: str) -> Optional[bool]: ...


def tree_digest(tree: dict[str, bytes]) -> str:
    return context_digest(tree.get(CONTAINERFILE, b""), ((k, v) for k, v in tree.items() if k != CONTAINERFILE))


# -- simulated engine -------------------------------------------------------------


@dataclass
class Behavior:
    """What a simulated container does when started.

    ``action(env, api)`` runs synchronously inside ``run``. ``exit_code``
    None keeps the container running; otherwise it exits right after the
    action. ``health`` is consumed one entry per poll and the last entry
    sticks; an empty timeline means the engine reports no health support.
    """

    action: Optional[Callable[[dict, Any], None]] = None
    exit_code: Optional[int] = None
    health: Sequence[bool] = ()


@dataclass
class EngineCall:
    op: str
    args: dict = field(default_factory=dict)


@dataclass
class _SimContainer:
    container_id: str
    image_id: str
    env: dict
    labels: dict
    behavior: Behavior
    state: str = "created"
    exit_code: Optional[int] = None
    health_polls: int = 0
    removed: bool = False


def _containerfile_ok(data: bytes) -> bool:
    for line in data.decode("utf-8", "replace").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        return line.upper().startswith("FROM ") or line.upper().startswith("ARG ")
    return False


class SimulatedEngine:
    def __init__(self, api_factory: Optional[Callable[[dict], Any]] = None, default_behavior: Optional[Behavior] = None) -> None:
        self.api_factory = api_factory
        self.default_behavior = default_behavior
        self.calls: list[EngineCall] = []
        self.available = True
        self._behaviors: dict[str, Behavior] = {}
        self._images: dict[str, str] = {}
        self._containers: dict[str, _SimContainer] = {}
        self._counter = 0
        self._lock = threading.RLock()

    def register_behavior(self, content_hash: str, behavior: Behavior) -> None:
        """Bind ``behavior`` to a build context hash (or to an external image name)."""
        self._behaviors[content_hash] = behavior

    def _record(self, op: str, **args) -> None:
        with self._lock:
            self.calls.append(EngineCall(op, args))
        if not self.available:
            raise EngineUnavailable("simulated engine is unavailable")

    def count(self, op: str) -> int:
        return sum(1 for c in self.calls if c.op == op)

    def build(self, tree: dict[str, bytes], tag: str) -> str:
        digest = tree_digest(tree)
        self._record("build", tag=tag, content_hash=digest)
        if not _containerfile_ok(tree.get(CONTAINERFILE, b"")):
            raise BuildFailed("Containerfile must start with a FROM instruction")
        image_id = f"sha256:{digest}"
        self._images[image_id] = digest
        return image_id

    def run(self, image_id: str, env: dict[str, str], labels: dict[str, str]) -> str:
        self._record("run", image_id=image_id, env=dict(env), labels=dict(labels))
        key = self._images.get(image_id, image_id)
        behavior = self._behaviors.get(key, self.default_behavior)
        if behavior is None:
            raise UnregisteredBehavior(f"no behavior registered for {key}")
        with self._lock:
            self._counter += 1
            cid = f"sim-{self._counter:06d}"
            container = _SimContainer(cid, image_id, dict(env), dict(labels), behavior, state="running")
            self._containers[cid] = container
        if behavior.action is not None:
            api = self.api_factory(dict(env)) if self.api_factory is not None else None
            try:
                behavior.action(dict(env), api)
            except Exception:
                log.exception("simulated container %s crashed", cid)
                container.state, container.exit_code = "exited", 1
                return cid
        if behavior.exit_code is not None:
            container.state, container.exit_code = "exited", behavior.exit_code
        return cid

    def _container(self, container_id: str) -> _SimContainer:
        c = self._containers.get(container_id)
        if c is None or c.removed:
            raise UnknownInstance(f"no container {container_id}")
        return c

    def stop(self, container_id: str, grace_s: float) -> None:
        self._record("stop", container_id=container_id, grace_s=grace_s)
        c = self._container(container_id)
        if c.state == "running":
            c.state, c.exit_code = "exited", 143

    def remove(self, container_id: str) -> None:
        self._record("remove", container_id=container_id)
        self._container(container_id).removed = True

    def inspect(self, container_id: str) -> ContainerStatus:
        self._record("inspect", container_id=container_id)
        c = self._container(container_id)
        return ContainerStatus(c.state, c.exit_code)

    def health(self, container_id: str) -> Optional[bool]:
        self._record("health", container_id=container_id)
        c = self._container(container_id)
        timeline = c.behavior.health
        if not timeline:
            return None
        value = timeline[min(c.health_polls, len(timeline) - 1)]
        c.health_polls += 1
        return bool(value)

    def exit(self, container_id: str, exit_code: int) -> None:
        """Fault injection: make a running container exit."""
        c = self._container(container_id)
        c.state, c.exit_code = "exited", exit_code

    def container_env(self, container_id: str) -> dict:
        return dict(self._containers[container_id].env)

    def live_containers(self) -> list[str]:
        return [cid for cid, c in self._containers.items() if not c.removed]


# -- Docker Engine API ------------------------------------------------------------

API_VERSION = "v1.41"


def tar_context(tree: dict[str, bytes]) -> bytes:
    """Deterministic uncompressed tar of a build context."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for name in sorted(tree):
            info = tarfile.TarInfo(name)
            info.size = len(tree[name])
            info.mode = 0o644
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            tar.addfile(info, io.BytesIO(tree[name]))
    return buf.getvalue()


def make_client(endpoint: str, timeout: float = 30.0) -> httpx.Client:
    """Build an HTTP client for ``unix:///path``, ``tcp://host:port`` or ``http(s)://...``."""
    parsed = urlparse(endpoint)
    if parsed.scheme == "unix":
        if not parsed.path:
            raise ConfigError(f"unix endpoint needs a socket path: {endpoint!r}")
        return httpx.Client(transport=httpx.HTTPTransport(uds=parsed.path), base_url="http://docker", timeout=timeout)
    if parsed.scheme == "tcp":
        return httpx.Client(base_url=f"http://{parsed.netloc}", timeout=timeout)
    if parsed.scheme in ("http", "https") and parsed.netloc:
        return httpx.Client(base_url=endpoint, timeout=timeout)
    raise ConfigError(f"unsupported engine endpoint {endpoint!r}")


class DockerEngine:
    def __init__(self, endpoint: str = "unix:///var/run/docker.sock", client: Optional[httpx.Client] = None) -> None:
        self.endpoint = endpoint
        self.client = client if client is not None else make_client(endpoint)

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            return self.client.request(method, f"/{API_VERSION}{path}", **kwargs)
        except httpx.TransportError as exc:
            raise EngineUnavailable(f"{self.endpoint}: {exc}") from None

    def build(self, tree: dict[str, bytes], tag: str) -> str:
        resp = self._request(
            "POST",
            "/build",
            params={"t": tag, "dockerfile": CONTAINERFILE, "rm": "1", "forcerm": "1"},
            content=tar_context(tree),
            headers={"Content-Type": "application/x-tar"},
        )
        if resp.status_code != 200:
            raise BuildFailed(f"build returned {resp.status_code}: {resp.text[:500]}")
        image_id = None
        for line in resp.text.splitlines():
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                continue
            if msg.get("error"):
                raise BuildFailed(str(msg["error"]))
            aux = msg.get("aux") or {}
            if aux.get("ID"):
                image_id = aux["ID"]
        if image_id is None:
            resp = self._request("GET", f"/images/{tag}/json")
            if resp.status_code != 200:
                raise BuildFailed(f"built image {tag} not found")
            image_id = resp.json()["Id"]
        return image_id

    def run(self, image_id: str, env: dict[str, str], labels: dict[str, str]) -> str:
        body = {"Image": image_id, "Env": [f"{k}={v}" for k, v in sorted(env.items())], "Labels": labels}
        resp = self._request("POST", "/containers/create", json=body)
        if resp.status_code != 201:
            raise RunFailed(f"create returned {resp.status_code}: {resp.text[:500]}")
        cid = resp.json()["Id"]
        resp = self._request("POST", f"/containers/{cid}/start")
        if resp.status_code not in (204, 304):
            self._request("DELETE", f"/containers/{cid}", params={"force": "1"})
            raise RunFailed(f"start returned {resp.status_code}: {resp.text[:500]}")
        return cid

    def stop(self, container_id: str, grace_s: float) -> None:
        resp = self._request("POST", f"/containers/{container_id}/stop", params={"t": str(int(round(grace_s)))})
        if resp.status_code not in (204, 304):
            raise RunFailed(f"stop returned {resp.status_code}: {resp.text[:500]}")

    def remove(self, container_id: str) -> None:
        resp = self._request("DELETE", f"/containers/{container_id}", params={"force": "1"})
        if resp.status_code not in (204, 404):
            raise RunFailed(f"remove returned {resp.status_code}: {resp.text[:500]}")

    def _inspect(self, container_id: str) -> dict:
        resp = self._request("GET", f"/containers/{container_id}/json")
        if resp.status_code == 404:
            raise UnknownInstance(f"no container {container_id}")
        if resp.status_code != 200:
            raise EngineUnavailable(f"inspect returned {resp.status_code}")
        return resp.json()

    def inspect(self, container_id: str) -> ContainerStatus:
        state = self._inspect(container_id).get("State", {})
        status = state.get("Status", "created")
        if status in ("exited", "dead"):
            return ContainerStatus("exited", state.get("ExitCode"))
        if status in ("running", "paused", "restarting"):
            return ContainerStatus("running")
        return ContainerStatus("created")

    def health(self, container_id: str) -> Optional[bool]:
        health = self._inspect(container_id).get("State", {}).get("Health")
        if not health:
            return None
        return health.get("Status") != "unhealthy"


_TAG_SAFE = re.compile(r"[^a-z0-9_.\-]")


def image_tag(service_id: str, content_hash: str) -> str:
    return f"aasrt/{_TAG_SAFE.sub('-', service_id.lower())}:{content_hash[:12]}"
