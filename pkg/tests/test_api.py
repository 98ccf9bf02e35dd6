import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings, strategies as st

from aasrt.api import INSTANCE_HEADER, ServiceClient, create_app
from aasrt.engine import Behavior, SimulatedEngine
from aasrt.events import EventKind
from aasrt.runtime import Runtime, SimClock
from helpers import DATA_X, context, data_submodel, package_bytes, sim_runtime, spec_submodel
from test_acceptance import init_extras, trigger_package, trigger_problems

X_PATH = "/submodels/urn:test:data/submodel-elements/Position.X"


def client_for(*specs, behavior=None, token=None):
    runtime, engine, clock = sim_runtime(behavior=behavior)
    client = TestClient(create_app(runtime, token=token))
    if specs:
        contexts = [context(s.get("ServiceId").value) for s in specs]
        resp = client.post("/import", content=package_bytes(data_submodel(), *specs, contexts=contexts))
        assert resp.status_code == 201, resp.text
    return client, runtime, engine


def kinds(runtime):
    return [e.kind for e in runtime.events.history]


def test_import_and_read():
    client, runtime, _ = client_for(spec_submodel("svc", ["onDemand"]))
    assert client.get(X_PATH + "/$value").json() == {"value": 0.0}
    assert client.get(X_PATH).json()["valueType"] == "double"
    ids = [s["id"] for s in client.get("/submodels").json()]
    assert "urn:test:data" in ids
    assert client.get("/submodels/urn:test:data/submodel-elements").status_code == 200


def test_import_errors():
    client, _, _ = client_for()
    assert client.post("/import", content=b"junk").json()["code"] == "NotAZip"
    bad = client.post("/import", content=package_bytes(spec_submodel("svc", ["onDemand"], inputs={})))
    assert bad.status_code == 400 and bad.json()["code"] == "ValidationFailed"
    client.post("/import", content=package_bytes(data_submodel()))
    assert client.post("/import", content=package_bytes(data_submodel())).status_code == 409


def test_access_activates_on_access_service():
    client, runtime, engine = client_for(spec_submodel("svc", ["onAccess"]))
    client.get(X_PATH)
    assert engine.count("run") == 1
    assert runtime.events.history[-1].kind is EventKind.ACCESS


def test_internal_reads_do_not_emit_access():
    seen = []

    def action(env, api):
        seen.append(api.read_input("X"))

    client, runtime, engine = client_for(spec_submodel("svc", ["onAccess"]), behavior=Behavior(action))
    engine.api_factory = lambda env: ServiceClient(env, client)
    client.get(X_PATH)
    assert seen == [0.0]
    assert kinds(runtime).count(EventKind.ACCESS) == 1
    # an unknown instance header is treated as external
    client.get(X_PATH, headers={INSTANCE_HEADER: "inst-nope"})
    assert kinds(runtime).count(EventKind.ACCESS) == 2


def test_patch_and_equal_value():
    client, runtime, engine = client_for(spec_submodel("svc", ["onUpdate"]))
    assert client.patch(X_PATH, json={"value": 5.0}).json() == {"version": 2}
    assert engine.count("run") == 1
    mark = len(runtime.events.history)
    assert client.patch(X_PATH, json={"value": 5.0}).json() == {"version": 2}
    assert len(runtime.events.history) == mark
    assert client.patch(X_PATH, json={"value": "abc"}).status_code == 422
    assert client.patch(X_PATH, json={"nope": 1}).status_code == 400
    assert client.patch("/submodels/urn:test:data/submodel-elements/Nope", json={"value": 1}).status_code == 404


def test_add_and_delete_elements():
    client, runtime, _ = client_for()
    client.post("/import", content=package_bytes(data_submodel()))
    prop = {"modelType": "Property", "idShort": "Z", "valueType": "double", "value": 1.0}
    assert client.post("/submodels/urn:test:data/submodel-elements/Position", json=prop).status_code == 201
    assert client.get("/submodels/urn:test:data/submodel-elements/Position.Z/$value").json() == {"value": 1.0}
    assert client.delete("/submodels/urn:test:data/submodel-elements/Position.Z").status_code == 204
    assert client.delete("/submodels/urn:test:data").status_code == 204
    assert client.get("/submodels/urn:test:data").status_code == 404


def test_invoke_statuses():
    client, runtime, _ = client_for(spec_submodel("svc", ["onDemand"]), spec_submodel("upd", ["onUpdate"]))
    resp = client.post("/services/svc/invoke")
    assert resp.status_code == 202 and resp.json()["instanceId"]
    assert client.post("/services/upd/invoke").status_code == 409
    assert client.post("/services/nope/invoke").status_code == 404
    assert {s["serviceId"] for s in client.get("/services").json()} == {"svc", "upd"}


def test_instances_and_stop():
    client, _, _ = client_for(spec_submodel("svc", ["onDemand"]))
    iid = client.post("/services/svc/invoke").json()["instanceId"]
    assert client.get(f"/instances/{iid}").json()["state"] == "Running"
    stopped = client.post(f"/instances/{iid}/stop")
    assert stopped.status_code == 200 and stopped.json()["reason"] == "OperatorStop"
    assert client.post(f"/instances/{iid}/stop").status_code == 409
    assert client.get("/instances/nope").status_code == 404
    assert len(client.get("/instances").json()) == 1


def test_events_since():
    client, runtime, _ = client_for(spec_submodel("svc", ["onDemand"]))
    last = runtime.events.history[-1].seq
    client.patch(X_PATH, json={"value": 3.0})
    events = client.get("/events", params={"since": last}).json()
    assert [e["kind"] for e in events] == ["Update"]
    assert events[0]["subject"] == X_PATH.lstrip("/")


def test_shells():
    client, _, _ = client_for()
    client.post("/import", content=package_bytes(data_submodel()))
    shell = {"id": "https://x.org/aas/1", "idShort": "Aas", "submodels": [{"submodel": "urn:test:data"}, {"submodel": "urn:test:gone"}]}
    assert client.post("/shells", json={**shell, "submodels": ["urn:test:data"]}).status_code == 400
    assert client.post("/shells", json=shell).status_code == 201
    body = client.get("/shells/https:%2F%2Fx.org%2Faas%2F1").json()
    assert body["danglingRefs"] == ["submodels/urn:test:gone"]
    assert client.delete("/shells/https:%2F%2Fx.org%2Faas%2F1").status_code == 204
    assert client.get("/shells/https:%2F%2Fx.org%2Faas%2F1").status_code == 404


def test_bearer_token():
    client, _, _ = client_for(token="s3cret")
    assert client.get("/healthz").status_code == 200
    assert client.get("/submodels").status_code == 401
    assert client.get("/submodels", headers={"Authorization": "Bearer wrong"}).status_code == 401
    assert client.get("/submodels", headers={"Authorization": "Bearer s3cret"}).status_code == 200


def test_api_and_manager_emit_same_events():
    client, via_api, _ = client_for()
    client.post("/import", content=package_bytes(data_submodel()))
    client.patch(X_PATH, json={"value": 2.0})
    client.get(X_PATH)
    direct, _, _ = sim_runtime()
    direct.import_package(package_bytes(data_submodel()))
    direct.repository.update_element(DATA_X, 2.0)
    direct.repository.get_element(DATA_X, True)
    strip = lambda rt: [(e.kind, e.subject, e.payload) for e in rt.events.history]
    assert strip(via_api) == strip(direct)


class SwappableRuntime:
    """Lets one app (and one test client) serve a fresh runtime per sequence."""

    target = None

    def __getattr__(self, name):
        return getattr(self.target, name)


def _read_inputs(env, api):
    for key, path in env.items():
        if key.startswith("AAS_INPUT_"):
            api.get_value(path)


GET_TARGETS = [X_PATH, "/submodels/urn:test:data", "/submodels/urn:test:data/submodel-elements/Label", "/submodels/urn:test:other"]
http_operations = st.lists(
    st.one_of(
        st.tuples(st.just("get"), st.integers(0, 3)),
        st.tuples(st.just("get-internal"), st.integers(0, 3)),
        st.tuples(st.just("get-forged"), st.integers(0, 3)),
        st.tuples(st.just("patch"), st.floats(-1e3, 1e3, allow_nan=False)),
        st.tuples(st.just("demand"), st.sampled_from(["init", "demand", "access"])),
    ),
    max_size=6,
)


def test_http_trigger_properties():
    """The trigger invariants hold when everything, services included, goes through HTTP."""
    proxy = SwappableRuntime()
    with TestClient(create_app(proxy)) as client:

        @settings(max_examples=150, derandomize=True, database=None, deadline=None)
        @given(init_extras, http_operations)
        def prop(extras, ops):
            engine = SimulatedEngine(
                api_factory=lambda env: ServiceClient(env, client), default_behavior=Behavior(_read_inputs, exit_code=0)
            )
            runtime = proxy.target = Runtime(engine=engine, clock=SimClock(), api_base="http://testserver")
            assert client.post("/import", content=trigger_package(extras)).status_code == 201
            external_reads = external_scope_reads = demands = 0
            for op, arg in ops:
                if op in ("get", "get-forged") or (op == "get-internal" and not runtime.orchestrator.instances):
                    headers = {INSTANCE_HEADER: "inst-forged"} if op == "get-forged" else {}
                    assert client.get(GET_TARGETS[arg], headers=headers).status_code == 200
                    external_reads += 1
                    external_scope_reads += GET_TARGETS[arg] != "/submodels/urn:test:other"
                elif op == "get-internal":
                    iid = sorted(runtime.orchestrator.instances)[0]
                    client.get(GET_TARGETS[arg], headers={INSTANCE_HEADER: iid})
                elif op == "patch":
                    client.patch(X_PATH, json={"value": arg})
                elif op == "demand":
                    status = client.post(f"/services/{arg}/invoke").status_code
                    demands += arg == "demand" and status == 202
            assert trigger_problems(runtime, demands, external_reads, external_scope_reads) == []

        prop()
