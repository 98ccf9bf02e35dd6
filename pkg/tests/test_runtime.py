import pytest

from aasrt.aasx import MANIFEST_PATH
from aasrt.errors import DuplicateId, NotAZip, TriggerNotEnabled, UnknownService
from aasrt.events import EventKind
from aasrt.runtime import Runtime, ValidationFailed
from helpers import DATA_ID, DATA_X, context, data_submodel, package_bytes, sim_runtime, spec_submodel
from test_aasx import MINIMAL_MANIFEST, MINIMAL_SM, zip_of


def test_minimal_import_report():
    runtime, _, _ = sim_runtime()
    report = runtime.import_package(zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", MINIMAL_SM)]))
    body = report.to_dict()
    assert body["submodelsRegistered"] == {"count": 1, "ids": ["urn:x:a"]}
    assert body["shellsRegistered"]["count"] == 0
    assert body["activations"] == [] and body["specsRecognized"] == []


def test_on_initialize_activates_once():
    runtime, engine, _ = sim_runtime()
    data = package_bytes(data_submodel(), spec_submodel("svc", ["onInitialize"]), contexts=[context("svc")])
    report = runtime.import_package(data)
    assert [s for s, _ in report.activations] == ["svc"]
    assert engine.count("run") == 1
    runtime.repository.update_element(DATA_X, 7.0)
    runtime.settle()
    assert engine.count("run") == 1


def test_second_import_conflicts():
    runtime, _, _ = sim_runtime()
    data = package_bytes(data_submodel(), spec_submodel("svc", ["onDemand"]), contexts=[context("svc")])
    runtime.import_package(data)
    before = runtime.repository.state()
    with pytest.raises(DuplicateId):
        runtime.import_package(data)
    assert runtime.repository.state() == before


def test_conflicting_service_id_rejected():
    runtime, _, _ = sim_runtime()
    runtime.import_package(package_bytes(spec_submodel("svc", ["onDemand"], inputs={}), contexts=[context("svc")]))
    with pytest.raises(DuplicateId, match="service:svc"):
        runtime.import_package(
            package_bytes(spec_submodel("svc", ["onDemand"], inputs={}, n="other"), contexts=[context("svc", extra=b"2")])
        )


def test_invalid_packages_leave_no_trace():
    runtime, _, _ = sim_runtime()
    with pytest.raises(NotAZip):
        runtime.import_package(b"junk")
    with pytest.raises(ValidationFailed):
        runtime.import_package(package_bytes(spec_submodel("svc", ["onDemand"], inputs={})))
    assert runtime.repository.list_submodels() == [] and runtime.events.history == []


def test_demand():
    runtime, _, _ = sim_runtime()
    runtime.import_package(
        package_bytes(
            data_submodel(),
            spec_submodel("svc", ["onDemand"]),
            spec_submodel("upd", ["onUpdate"]),
            contexts=[context("svc"), context("upd")],
        )
    )
    receipt = runtime.demand("svc")
    assert receipt.instance_id is not None
    assert runtime.events.history[-1].kind is EventKind.DEMAND
    with pytest.raises(TriggerNotEnabled):
        runtime.demand("upd")
    with pytest.raises(UnknownService):
        runtime.demand("nope")


def test_trace_order_for_import():
    runtime, _, _ = sim_runtime()
    runtime.import_package(
        package_bytes(data_submodel(), spec_submodel("svc", ["onInitialize"]), contexts=[context("svc")])
    )
    ops = [(c, o) for c, o, _ in runtime.trace_log]
    assert ops.index(("manager", "create_submodel")) < ops.index(("store", "store_context"))
    assert ops.index(("store", "store_context")) < ops.index(("orchestrator", "register_spec"))
    assert ops.index(("orchestrator", "register_spec")) < ops.index(("orchestrator", "dispatch"))
    assert ops[-2:] == [("engine", "build"), ("engine", "run")]


def test_persisted_runtime_reloads_specs(tmp_path):
    runtime, _, _ = sim_runtime(root=tmp_path)
    runtime.import_package(package_bytes(data_submodel(), spec_submodel("svc", ["onDemand"]), contexts=[context("svc")]))
    again = Runtime(root=tmp_path)
    assert again.orchestrator.spec_for_service("svc") is not None
    assert again.contexts.latest("svc").content_hash == context("svc").content_hash
    assert again.repository.get_submodel(DATA_ID, record_access=False).version == 1
