"""Wires repository, context store, orchestrator and engine into one runtime.

Also home of the package importer, which runs the import workflow in a
fixed order: parse and validate, register every shell and submodel, store
every service context, hand the recognized specs to the orchestrator, and
only then let the orchestrator evaluate triggers. An import either fully
succeeds or leaves no trace.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .aasx import AasxPackage, ValidationReport, read_package, validate_package
from .contexts import ContextStore
from .engine import ContainerEngine, SimulatedEngine
from .core import ElementReference
from .errors import AasError, AlreadyTerminated, DuplicateId, TriggerNotEnabled, UnknownInstance, UnknownService
from .events import EventKind, EventQueue
from .execution import ExecutionTrigger, ServiceExecutionSpec, parse_spec
from .manager import Repository
from .orchestrator import DEFAULT_GRACE_S, Orchestrator, ServiceInstance, Transition
from .storage import JsonDirectoryBackend, MemoryBackend

log = logging.getLogger(__name__)


class ValidationFailed(AasError):
    code = "ValidationFailed"

    def __init__(self, report: ValidationReport) -> None:
        self.report = report
        super().__init__("; ".join(f"{f.code} at {f.path}: {f.message}" for f in report.errors))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["report"] = self.report.to_dict()
        return d


class SimClock:
    """Manually advanced nanosecond clock for deterministic runs."""

    def __init__(self, start: int = 0) -> None:
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ns: int) -> int:
        self.now += ns
        return self.now


@dataclass
class ImportReport:
    shells: list[str] = field(default_factory=list)
    submodels: list[str] = field(default_factory=list)
    contexts_stored: list[tuple[str, str]] = field(default_factory=list)
    specs_recognized: list[str] = field(default_factory=list)
    activations: list[tuple[str, str]] = field(default_factory=list)
    findings: ValidationReport = field(default_factory=ValidationReport)

    def to_dict(self) -> dict:
        return {
            "shellsRegistered": {"count": len(self.shells), "ids": self.shells},
            "submodelsRegistered": {"count": len(self.submodels), "ids": self.submodels},
            "contextsStored": [{"serviceId": s, "contentHash": h} for s, h in self.contexts_stored],
            "specsRecognized": self.specs_recognized,
            "activations": [{"serviceId": s, "instanceId": i} for s, i in self.activations],
            "findings": self.findings.to_dict(),
        }


@dataclass(frozen=True)
class DemandReceipt:
    service_id: str
    event_seq: int
    instance_id: Optional[str]

    def to_dict(self) -> dict:
        return {"serviceId": self.service_id, "eventSeq": self.event_seq, "instanceId": self.instance_id}


class Runtime:
    """One server's worth of state.

    ``root`` selects on-disk persistence (``<root>/store`` and
    ``<root>/contexts``); without it everything lives in memory.
    """

    def __init__(
        self,
        root: Optional[Path | str] = None,
        engine: Optional[ContainerEngine] = None,
        clock: Callable[[], int] = time.monotonic_ns,
        api_base: str = "http://127.0.0.1:8080",
        grace_s: float = DEFAULT_GRACE_S,
    ) -> None:
        self.root = Path(root) if root is not None else None
        self.events = EventQueue()
        backend = JsonDirectoryBackend(self.root / "store") if self.root else MemoryBackend()
        self.repository = Repository(self.events, backend)
        self.contexts = ContextStore(self.root / "contexts" if self.root else None)
        self.engine = engine if engine is not None else SimulatedEngine()
        self.clock = clock
        self.trace_log: list[tuple[str, str, str]] = []
        self.orchestrator = Orchestrator(
            self.repository, self.contexts, self.engine, clock=clock, api_base=api_base, grace_s=grace_s, trace=self.trace
        )
        self.fault_hook: Optional[Callable[[str], None]] = None
        self._import_lock = threading.Lock()
        for summary in self.repository.list_submodels():
            try:
                spec = parse_spec(self.repository.lookup(summary.id))
            except AasError as exc:
                log.warning("stored submodel %s is not a valid spec: %s", summary.id, exc)
                continue
            if spec is not None:
                self.orchestrator.specs[spec.submodel_id] = spec

    def trace(self, component: str, op: str, detail: str) -> None:
        self.trace_log.append((component, op, detail))

    def _fault(self, step: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(step)

    # -- import ------------------------------------------------------------------

    def import_package(self, data: bytes) -> ImportReport:
        with self._import_lock:
            self._fault("parse")
            pkg = read_package(data)
            self._fault("validate")
            findings = validate_package(pkg)
            if not findings.ok:
                raise ValidationFailed(findings)
            specs = [s for s in (parse_spec(sm) for sm in pkg.submodels) if s is not None]
            self._check_conflicts(pkg, specs)
            report = ImportReport(findings=findings)
            with self.orchestrator.hold():
                self._register(pkg, report)
                for spec in specs:
                    self.orchestrator.register_spec(spec)
                    report.specs_recognized.append(spec.service_id)
        self.orchestrator.settle()
        imported = set(report.submodels)
        for inst in list(self.orchestrator.instances.values()):
            if (
                inst.cause.kind is EventKind.IMPORT
                and inst.cause.subject is not None
                and inst.cause.subject.submodel_id in imported
                and ExecutionTrigger.ON_INITIALIZE in inst.spec.execution_triggers
            ):
                report.activations.append((inst.spec.service_id, inst.instance_id))
        return report

    def _check_conflicts(self, pkg: AasxPackage, specs: list[ServiceExecutionSpec]) -> None:
        conflicts = [sm.id for sm in pkg.submodels if self.repository.contains(sm.id)]
        conflicts += [sh.id for sh in pkg.shells if self.repository.contains(sh.id)]
        for spec in specs:
            existing = self.orchestrator.spec_for_service(spec.service_id)
            if existing is not None and existing.submodel_id != spec.submodel_id:
                conflicts.append(f"service:{spec.service_id}")
        if conflicts:
            raise DuplicateId(conflicts)

    def _register(self, pkg: AasxPackage, report: ImportReport) -> None:
        created_sm: list[str] = []
        created_sh: list[str] = []
        stored: list[tuple[str, str]] = []
        try:
            for sm in pkg.submodels:
                self._fault(f"register-submodel:{sm.id}")
                self.repository.create_submodel(sm)
                created_sm.append(sm.id)
                self.trace("manager", "create_submodel", sm.id)
            for shell in pkg.shells:
                self._fault(f"register-shell:{shell.id}")
                self.repository.create_shell(shell)
                created_sh.append(shell.id)
                self.trace("manager", "create_shell", shell.id)
            for ctx in pkg.service_contexts:
                self._fault(f"store-context:{ctx.service_id}")
                known = {c.content_hash for c in self.contexts.list_versions(ctx.service_id)}
                self.contexts.store(ctx)
                if ctx.content_hash not in known:
                    stored.append((ctx.service_id, ctx.content_hash))
                self.trace("store", "store_context", ctx.service_id)
            self._fault("handoff")
        except BaseException:
            for sid, digest in reversed(stored):
                self.contexts.discard(sid, digest)
            for shell_id in reversed(created_sh):
                self.repository.discard_shell(shell_id)
            for sm_id in reversed(created_sm):
                self.repository.discard_submodel(sm_id)
            created = set(created_sm)
            self.events.retract(
                lambda e: e.kind is EventKind.IMPORT and e.subject is not None and e.subject.submodel_id in created
            )
            raise
        report.submodels = created_sm
        report.shells = created_sh
        report.contexts_stored = [(c.service_id, c.content_hash) for c in pkg.service_contexts]

    # -- operations used by the API ------------------------------------------------

    def settle(self) -> list[Transition]:
        return self.orchestrator.settle()

    def tick(self, now: Optional[int] = None) -> list[Transition]:
        return self.orchestrator.supervision_tick(now)

    def demand(self, service_id: str) -> DemandReceipt:
        spec = self.orchestrator.spec_for_service(service_id)
        if spec is None:
            raise UnknownService(f"no registered service {service_id!r}")
        if ExecutionTrigger.ON_DEMAND not in spec.execution_triggers:
            raise TriggerNotEnabled(f"service {service_id!r} has no onDemand trigger")
        event = self.events.emit(EventKind.DEMAND, ElementReference(spec.submodel_id), {"service_id": service_id})
        self.settle()
        for inst in self.orchestrator.instances.values():
            if inst.cause.seq == event.seq:
                return DemandReceipt(service_id, event.seq, inst.instance_id)
        return DemandReceipt(service_id, event.seq, None)

    def stop_instance(self, instance_id: str) -> Optional[ServiceInstance]:
        """Terminate with ``OperatorStop`` on the loop; returns None if the loop is busy elsewhere."""
        inst = self.orchestrator.instances.get(instance_id)
        if inst is None:
            raise UnknownInstance(f"no instance {instance_id}")
        if not inst.active:
            raise AlreadyTerminated(f"instance {instance_id} is already {inst.reason}")
        done: list[ServiceInstance] = []
        errors: list[BaseException] = []

        def command():
            try:
                done.append(self.orchestrator.terminate(instance_id))
            except AasError as exc:
                errors.append(exc)

        self.events.post(command)
        self.settle()
        if errors:
            raise errors[0]
        return done[0] if done else None

    def delete_submodel(self, submodel_id: str) -> None:
        self.repository.delete_submodel(submodel_id)
        self.settle()

    def shutdown(self) -> list[Transition]:
        return self.orchestrator.shutdown()
