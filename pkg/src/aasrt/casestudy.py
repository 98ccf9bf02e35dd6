"""Milling-machine scenario: geometry correction between two shells.

A physical machine publishes its measured tool position in the OSACA-CPS
submodel. Whenever that position changes, the ``geometry-correction``
service reads it, applies a constant per-axis offset, and writes the
compensated position into the OSACA-Simulation submodel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .aasx import AasxPackage, ServiceContextEntry
from .core import AssetAdministrationShell, Collection, ElementReference, Property, Submodel, ValueType, canonical_path
from .engine import Behavior, SimulatedEngine
from .errors import AasError
from .execution import ExecutionTrigger, build_spec_submodel
from .runtime import Runtime, SimClock

CPS_ID = "urn:example:osaca:cps:position"
SIMULATION_ID = "urn:example:osaca:simulation:position"
SPEC_ID = "urn:example:osaca:service:geometry-correction"
SERVICE_ID = "geometry-correction"
CPS_SHELL_ID = "urn:example:osaca:aas:cps"
SERVICE_SHELL_ID = "urn:example:osaca:aas:geometry-correction"
SIMULATION_SHELL_ID = "urn:example:osaca:aas:simulation"

CPS_POSITION = ElementReference(CPS_ID, ("Position",))
SIMULATION_POSITION = ElementReference(SIMULATION_ID, ("Position",))
AXES = ("X", "Y", "Z")

CONTAINERFILE = b"""FROM python:3.12-slim
RUN pip install --no-cache-dir httpx
COPY correct.py /app/correct.py
CMD ["python", "/app/correct.py"]
"""

SERVICE_SCRIPT = b'''import os

import httpx

base = os.environ["AAS_API_BASE"]
headers = {"X-AAS-Instance": os.environ.get("AAS_INSTANCE_ID", "")}
src = os.environ["AAS_INPUT_POSITION"]
dst = os.environ["AAS_OUTPUT_COMPENSATED_POSITION"]
delta = [float(os.environ.get(f"DELTA_{a}", "0")) for a in "XYZ"]
with httpx.Client(base_url=base, headers=headers) as client:
    for axis, d in zip("XYZ", delta):
        value = client.get(f"/{src}.{axis}/$value").json()["value"]
        client.patch(f"/{dst}.{axis}", json={"value": value + d}).raise_for_status()
'''


class NonFinite(AasError):
    code = "NonFinite"


def _check_finite(values: Iterable[float], what: str) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFinite(f"{what} must be finite, got {v!r}")


@dataclass(frozen=True)
class Position:
    """Tool position in millimetres."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite((self.x, self.y, self.z), "position")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True)
class CompensationModel:
    """Constant per-axis offset between measured and modelled position (mm)."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    def __post_init__(self) -> None:
        _check_finite((self.dx, self.dy, self.dz), "delta")

    def inverse(self) -> "CompensationModel":
        return CompensationModel(-self.dx, -self.dy, -self.dz)

    def env(self) -> dict[str, str]:
        return {"DELTA_X": repr(self.dx), "DELTA_Y": repr(self.dy), "DELTA_Z": repr(self.dz)}

    @classmethod
    def from_env(cls, env: dict) -> "CompensationModel":
        return cls(*(float(env.get(f"DELTA_{a}", "0")) for a in AXES))


def compensate(p: Position, m: CompensationModel) -> Position:
    return Position(p.x + m.dx, p.y + m.dy, p.z + m.dz)


def _position_collection(p: Position) -> Collection:
    return Collection(
        "Position",
        tuple(Property(axis, ValueType.DOUBLE, v) for axis, v in zip(AXES, p.as_tuple())),
    )


# Compensation shipped with samples/osaca-milling.
SAMPLE_DELTA = CompensationModel(0.02, -0.01, 0.005)


def build_case_study_package(
    delta: CompensationModel = CompensationModel(),
    policy: str = "restart",
    with_shells: bool = True,
) -> AasxPackage:
    origin = Position(0.0, 0.0, 0.0)
    cps = Submodel(CPS_ID, "OSACA_CPS", (_position_collection(origin),))
    simulation = Submodel(SIMULATION_ID, "OSACA_Simulation", (_position_collection(origin),))
    spec = build_spec_submodel(
        SPEC_ID,
        "GeometryCorrection",
        SERVICE_ID,
        [ExecutionTrigger.ON_UPDATE],
        inputs={"POSITION": CPS_POSITION},
        outputs={"COMPENSATED_POSITION": SIMULATION_POSITION},
        env=delta.env(),
        policy=policy,
    )
    context = ServiceContextEntry(SERVICE_ID, "1.0.0", CONTAINERFILE, (("correct.py", SERVICE_SCRIPT),))
    shells = ()
    if with_shells:
        shells = (
            AssetAdministrationShell(CPS_SHELL_ID, "OSACA_CPS_AAS", (cps.ref,)),
            AssetAdministrationShell(SERVICE_SHELL_ID, "GeometryCorrection_AAS", (spec.ref,)),
            AssetAdministrationShell(SIMULATION_SHELL_ID, "OSACA_Simulation_AAS", (simulation.ref,)),
        )
    return AasxPackage.build([cps, spec, simulation], shells, [context])


def correction_behavior(env: dict, api) -> None:
    """In-process stand-in for the service image: the same reads and writes, through the API."""
    delta = CompensationModel.from_env(env)
    p = Position(*(float(api.read_input("POSITION", axis)) for axis in AXES))
    q = compensate(p, delta)
    for axis, value in zip(AXES, q.as_tuple()):
        api.write_output("COMPENSATED_POSITION", axis, value)


@dataclass
class ScenarioTranscript:
    import_report: dict
    patches: list[tuple[str, float]] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    activations: list[dict] = field(default_factory=list)
    writes: list[dict] = field(default_factory=list)
    simulation_position: Optional[Position] = None


def make_runtime(root=None) -> tuple[Runtime, "object"]:
    """A fresh simulated runtime plus a test client bound to its API.

    The client is also what simulated service containers use, so all their
    reads and writes go through HTTP.
    """
    from fastapi.testclient import TestClient

    from .api import ServiceClient, create_app

    holder: dict = {}
    engine = SimulatedEngine(api_factory=lambda env: ServiceClient(env, holder["client"]))
    runtime = Runtime(root=root, engine=engine, clock=SimClock(), api_base="http://testserver")
    holder["client"] = TestClient(create_app(runtime))
    return runtime, holder["client"]


def register_correction(engine: SimulatedEngine, pkg: AasxPackage, behavior: Callable = correction_behavior) -> str:
    ctx = pkg.context(SERVICE_ID)
    engine.register_behavior(ctx.content_hash, Behavior(action=behavior, exit_code=0))
    return ctx.content_hash


def run_scenario(
    positions: Iterable[Position] = (Position(100.0, 50.0, 25.0),),
    delta: CompensationModel = SAMPLE_DELTA,
    policy: str = "restart",
) -> ScenarioTranscript:
    """Import the package, PATCH each CPS position axis by axis, read back the Simulation position."""
    from .aasx import write_package

    runtime, client = make_runtime()
    pkg = build_case_study_package(delta, policy)
    register_correction(runtime.engine, pkg)
    resp = client.post("/import", content=write_package(pkg))
    resp.raise_for_status()
    transcript = ScenarioTranscript(import_report=resp.json())
    for p in positions:
        for axis, value in zip(AXES, p.as_tuple()):
            path = canonical_path(CPS_POSITION.child(axis))
            client.patch(f"/{path}", json={"value": value}).raise_for_status()
            transcript.patches.append((path, value))
    runtime.tick()
    transcript.events = [e.to_dict() for e in runtime.events.history]
    transcript.activations = [i.to_dict() for i in runtime.orchestrator.instances.values()]
    transcript.writes = [
        e for e in transcript.events if e["kind"] == "Update" and e["subject"].startswith(canonical_path(SIMULATION_POSITION.whole_submodel))
    ]
    values = [
        client.get(f"/{canonical_path(SIMULATION_POSITION.child(axis))}/$value").json()["value"] for axis in AXES
    ]
    transcript.simulation_position = Position(*values)
    return transcript
