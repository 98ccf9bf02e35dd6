"""Builders shared by the test modules."""
from aasrt.aasx import AasxPackage, ServiceContextEntry, write_package
from aasrt.core import Collection, ElementReference, Property, Submodel, ValueType
from aasrt.engine import Behavior, SimulatedEngine
from aasrt.execution import build_spec_submodel
from aasrt.runtime import Runtime, SimClock

MS = 1_000_000
S = 1_000_000_000

DATA_ID = "urn:test:data"
DATA_X = ElementReference(DATA_ID, ("Position", "X"))


def data_submodel(sm_id=DATA_ID, x=0.0):
    return Submodel(
        sm_id,
        "Data",
        (
            Collection("Position", (Property("X", ValueType.DOUBLE, x), Property("Y", ValueType.DOUBLE, 0.0))),
            Property("Label", ValueType.STRING, "a"),
        ),
    )


def context(service_id, containerfile=b"FROM scratch\n", extra=b""):
    files = (("payload.bin", extra),) if extra else ()
    return ServiceContextEntry(service_id, "1.0.0", containerfile, files)


def spec_submodel(service_id, triggers, inputs=None, n=None, **kw):
    sm_id = f"urn:test:spec:{n if n is not None else service_id}"
    inputs = {"X": DATA_X} if inputs is None else inputs
    return build_spec_submodel(sm_id, "Spec", service_id, triggers, inputs=inputs, **kw)


def package(*submodels, contexts=()):
    return AasxPackage.build(submodels, (), contexts)


def package_bytes(*submodels, contexts=()):
    return write_package(package(*submodels, contexts=contexts))


def sim_runtime(root=None, behavior=None):
    engine = SimulatedEngine(default_behavior=behavior if behavior is not None else Behavior())
    clock = SimClock()
    return Runtime(root=root, engine=engine, clock=clock), engine, clock
