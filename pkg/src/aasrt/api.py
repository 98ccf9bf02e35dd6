"""HTTP JSON interface to a :class:`~aasrt.runtime.Runtime`.

Element URLs are the canonical paths of :func:`aasrt.core.canonical_path`
(``/submodels/<id>/submodel-elements/<a.b.c>``), parsed from the raw,
still-encoded request path so identifiers containing '/' survive.

Containerized services use the same API. They identify themselves with
the ``X-AAS-Instance`` header; their reads never count as accesses.
"""
from __future__ import annotations

import logging
import secrets
from typing import Any, Optional
from urllib.parse import unquote

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from starlette.concurrency import run_in_threadpool

from . import codec
from .codec import element_to_dict
from .core import ElementReference, Property, canonical_path, parse_canonical_path
from .errors import AasError, InvalidElement, InvalidIdentifier, PackageError
from .runtime import Runtime, ValidationFailed

log = logging.getLogger(__name__)

INSTANCE_HEADER = "X-AAS-Instance"

_STATUS = {
    "UnknownSubmodel": 404,
    "UnknownShell": 404,
    "PathNotFound": 404,
    "UnknownService": 404,
    "UnknownInstance": 404,
    "UnknownContext": 404,
    "TypeMismatch": 422,
    "InvalidIdentifier": 400,
    "InvalidElement": 400,
    "MalformedSpec": 400,
    "ValidationFailed": 400,
    "DuplicateId": 409,
    "TriggerNotEnabled": 409,
    "AlreadyTerminated": 409,
    "EngineUnavailable": 503,
    "LoopBusy": 503,
    "IoFailure": 500,
}


def status_for(exc: AasError) -> int:
    if isinstance(exc, PackageError):
        return 400
    return _STATUS.get(exc.code, 500)


def _error(exc: AasError) -> JSONResponse:
    return JSONResponse(exc.to_dict(), status_code=status_for(exc))


def _raw_path(request: Request) -> str:
    raw = request.scope.get("raw_path")
    if raw:
        return raw.decode("latin-1")
    return request.url.path


async def _json_body(request: Request) -> Any:
    try:
        return await request.json()
    except ValueError:
        raise InvalidElement("request body is not valid JSON") from None


def _split_value_suffix(path: str) -> tuple[str, bool]:
    for suffix in ("/$value", "/%24value"):
        if path.endswith(suffix):
            return path[: -len(suffix)], True
    return path, False


class BearerToken:
    """Reject requests without ``Authorization: Bearer <token>``; /healthz stays open."""

    def __init__(self, app, token: str) -> None:
        self.app = app
        self.expected = f"Bearer {token}".encode()

    async def __call__(self, scope, receive, send):
        if scope["type"] == "http" and scope["path"] != "/healthz":
            given = dict(scope["headers"]).get(b"authorization", b"")
            if not secrets.compare_digest(given, self.expected):
                body = {"code": "Unauthorized", "message": "missing or wrong bearer token"}
                await JSONResponse(body, status_code=401)(scope, receive, send)
                return
        await self.app(scope, receive, send)


def create_app(runtime: Runtime, token: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="AAS runtime", version="0.1.0")
    app.state.runtime = runtime

    if token is not None:
        app.add_middleware(BearerToken, token=token)

    @app.exception_handler(AasError)
    async def aas_error(_request: Request, exc: AasError):
        return _error(exc)

    def internal(request: Request) -> bool:
        instance_id = request.headers.get(INSTANCE_HEADER)
        return instance_id is not None and instance_id in runtime.orchestrator.instances

    def settled(fn, *args):
        result = fn(*args)
        runtime.settle()
        return result

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    # -- import ---------------------------------------------------------------

    @app.post("/import", status_code=201)
    async def import_package(request: Request):
        data = await request.body()
        try:
            report = await run_in_threadpool(runtime.import_package, data)
        except ValidationFailed as exc:
            return JSONResponse(exc.to_dict(), status_code=400)
        return report.to_dict()

    # -- shells ---------------------------------------------------------------

    @app.get("/shells")
    async def list_shells():
        return [s.to_dict() for s in runtime.repository.list_shells()]

    @app.post("/shells", status_code=201)
    async def create_shell(request: Request):
        body = await _json_body(request)
        try:
            shell = codec.shell_from_dict(body)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidElement(f"bad shell document: {exc}") from None
        runtime.repository.create_shell(shell)
        return codec.shell_to_dict(shell)

    def shell_id(request: Request) -> str:
        rest = _raw_path(request)[len("/shells/"):].strip("/")
        if not rest or "/" in rest:
            raise InvalidIdentifier(f"bad shell path {rest!r}")
        return unquote(rest)

    @app.get("/shells/{rest:path}")
    async def get_shell(request: Request):
        sid = shell_id(request)
        shell = runtime.repository.get_shell(sid)
        body = codec.shell_to_dict(shell)
        body["danglingRefs"] = [canonical_path(r) for r in runtime.repository.dangling_refs(sid)]
        return body

    @app.delete("/shells/{rest:path}", status_code=204)
    async def delete_shell(request: Request):
        runtime.repository.delete_shell(shell_id(request))
        return Response(status_code=204)

    # -- submodels and elements ---------------------------------------------------

    @app.get("/submodels")
    async def list_submodels():
        return [s.to_dict() for s in runtime.repository.list_submodels()]

    @app.post("/submodels", status_code=201)
    async def create_submodel(request: Request):
        body = await _json_body(request)
        try:
            sm = codec.submodel_from_dict(body)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidElement(f"bad submodel document: {exc}") from None
        await run_in_threadpool(settled, runtime.repository.create_submodel, sm)
        return codec.submodel_to_dict(runtime.repository.get_submodel(sm.id))

    def target(request: Request) -> tuple[ElementReference, bool, bool]:
        """Return (reference, wants raw value, names the element container)."""
        path, value_only = _split_value_suffix(_raw_path(request))
        container = path.rstrip("/").endswith("/submodel-elements")
        if container:
            path = path.rstrip("/")[: -len("/submodel-elements")]
        return parse_canonical_path(path), value_only, container

    @app.get("/submodels/{rest:path}")
    async def read(request: Request):
        ref, value_only, container = target(request)
        record = not internal(request)
        if not ref.element_path:
            sm = await run_in_threadpool(settled, runtime.repository.get_submodel, ref.submodel_id, record)
            if container:
                return [element_to_dict(e) for e in sm.elements]
            return codec.submodel_to_dict(sm)
        node = await run_in_threadpool(settled, runtime.repository.get_element, ref, record)
        if value_only:
            if not isinstance(node, Property):
                body = element_to_dict(node)
                return {"value": body.get("value")}
            return {"value": node.value}
        return element_to_dict(node)

    @app.patch("/submodels/{rest:path}")
    async def write_value(request: Request):
        ref, _, container = target(request)
        if container or not ref.element_path:
            raise InvalidElement("PATCH needs an element path")
        body = await _json_body(request)
        if not isinstance(body, dict) or "value" not in body:
            raise InvalidElement('PATCH body must be {"value": <scalar>}')
        version = await run_in_threadpool(settled, runtime.repository.update_element, ref, body["value"])
        return {"version": version}

    @app.post("/submodels/{rest:path}", status_code=201)
    async def add_element(request: Request):
        ref, _, container = target(request)
        if not container and not ref.element_path:
            raise InvalidElement("POST elements to .../submodel-elements or to a collection path")
        body = await _json_body(request)
        try:
            element = codec.element_from_dict(body)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InvalidElement(f"bad element document: {exc}") from None
        version = await run_in_threadpool(
            settled, runtime.repository.add_element, ref.submodel_id, ref.element_path, element
        )
        return {"version": version}

    @app.delete("/submodels/{rest:path}", status_code=204)
    async def delete(request: Request):
        ref, _, container = target(request)
        if container:
            raise InvalidElement("cannot delete the element container")
        if ref.element_path:
            await run_in_threadpool(settled, runtime.repository.remove_element, ref)
        else:
            await run_in_threadpool(runtime.delete_submodel, ref.submodel_id)
        return Response(status_code=204)

    # -- services and instances -----------------------------------------------------

    @app.get("/services")
    async def list_services():
        specs = sorted(runtime.orchestrator.specs.values(), key=lambda s: s.service_id)
        return [s.to_dict() for s in specs]

    @app.post("/services/{service_id}/invoke", status_code=202)
    async def invoke(service_id: str):
        receipt = await run_in_threadpool(runtime.demand, service_id)
        return receipt.to_dict()

    @app.get("/instances")
    async def list_instances():
        return [i.to_dict() for i in list(runtime.orchestrator.instances.values())]

    @app.get("/instances/{instance_id}")
    async def instance_detail(instance_id: str):
        inst = runtime.orchestrator.instances.get(instance_id)
        if inst is None:
            return JSONResponse({"code": "UnknownInstance", "message": f"no instance {instance_id}"}, status_code=404)
        return inst.to_dict()

    @app.post("/instances/{instance_id}/stop")
    async def stop_instance(instance_id: str):
        inst = await run_in_threadpool(runtime.stop_instance, instance_id)
        if inst is None:
            return JSONResponse({"instanceId": instance_id, "state": "stop-pending"}, status_code=202)
        return inst.to_dict()

    @app.get("/events")
    async def events(since: int = 0):
        return [e.to_dict() for e in list(runtime.events.history) if e.seq > since]

    return app


class ServiceClient:
    """What a service container uses to talk to the runtime.

    ``client`` must already point at the API base; by default one is built
    from ``AAS_API_BASE``.
    """

    def __init__(self, env: dict, client: Optional[httpx.Client] = None) -> None:
        self.env = dict(env)
        self.client = client if client is not None else httpx.Client(base_url=env["AAS_API_BASE"], timeout=30.0)
        self.headers = {INSTANCE_HEADER: env.get("AAS_INSTANCE_ID", "")}

    @staticmethod
    def child_path(path: str, *segments: str) -> str:
        if not segments:
            return path
        ref = parse_canonical_path(path)
        return canonical_path(ref.child(*segments))

    def _check(self, resp: httpx.Response) -> Any:
        if resp.status_code >= 400:
            try:
                detail = resp.json()
            except ValueError:
                detail = {"code": "HttpError", "message": resp.text}
            raise AasError(f"{resp.status_code} {detail.get('code')}: {detail.get('message')}")
        return resp.json() if resp.content else None

    def get(self, path: str) -> Any:
        return self._check(self.client.get("/" + path.lstrip("/"), headers=self.headers))

    def get_value(self, path: str) -> Any:
        return self.get(path.rstrip("/") + "/$value")["value"]

    def set_value(self, path: str, value: Any) -> int:
        resp = self.client.patch("/" + path.lstrip("/"), json={"value": value}, headers=self.headers)
        return self._check(resp)["version"]

    def input_path(self, name: str, *segments: str) -> str:
        return self.child_path(self.env[f"AAS_INPUT_{name}"], *segments)

    def output_path(self, name: str, *segments: str) -> str:
        return self.child_path(self.env[f"AAS_OUTPUT_{name}"], *segments)

    def read_input(self, name: str, *segments: str) -> Any:
        return self.get_value(self.input_path(name, *segments))

    def write_output(self, name: str, *segments_and_value: Any) -> int:
        *segments, value = segments_and_value
        return self.set_value(self.output_path(name, *segments), value)
