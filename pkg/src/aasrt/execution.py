"""Service Execution Submodel: template, parsing, and trigger evaluation.

The two evaluators are pure functions of their arguments. The orchestrator
owns all state (instance table, failure counters) and applies the actions
they return.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Union

from .core import (
    Collection,
    ElementReference,
    Property,
    ReferenceElement,
    Submodel,
    ValueType,
)
from .errors import MalformedSpec
from .events import EventKind, LifecycleEvent

TEMPLATE_SEMANTIC_ID = "urn:aasrt:submodel-template:service-execution:1.0"

_SERVICE_ID = re.compile(r"^[A-Za-z][A-Za-z0-9_\-]{0,127}$")
_ENV_NAME = re.compile(r"^[A-Z][A-Z0-9_]*$")
_SHA256 = re.compile(r"^[0-9a-f]{64}$")


def is_service_id(value: object) -> bool:
    return isinstance(value, str) and bool(_SERVICE_ID.match(value))


class ExecutionTrigger(str, Enum):
    ON_INITIALIZE = "onInitialize"
    ON_UPDATE = "onUpdate"
    ON_ACCESS = "onAccess"
    ON_DEMAND = "onDemand"


class TerminationTrigger(str, Enum):
    ON_TIMEOUT = "onTimeout"
    ON_HEALTH_CHECK_FAIL = "onHealthCheckFail"


class ReactivationPolicy(str, Enum):
    RESTART = "restart"
    QUEUE_ONE = "queue-one"
    IGNORE_WHILE_RUNNING = "ignore-while-running"


class InstanceState(str, Enum):
    REGISTERED = "Registered"
    BUILDING = "Building"
    RUNNING = "Running"
    TERMINATED = "Terminated"


class TerminationKind(str, Enum):
    TIMEOUT = "Timeout"
    HEALTH_CHECK_FAIL = "HealthCheckFail"
    COMPLETED = "Completed"
    BUILD_FAILED = "BuildFailed"
    SOURCE_DELETED = "SourceDeleted"
    SUPERSEDED = "Superseded"
    OPERATOR_STOP = "OperatorStop"


@dataclass(frozen=True)
class TerminationReason:
    kind: TerminationKind
    exit_code: Optional[int] = None

    def __str__(self) -> str:
        if self.kind is TerminationKind.COMPLETED:
            return f"Completed({self.exit_code})"
        return self.kind.value

    @classmethod
    def completed(cls, exit_code: int) -> "TerminationReason":
        return cls(TerminationKind.COMPLETED, exit_code)


TIMEOUT = TerminationReason(TerminationKind.TIMEOUT)
HEALTH_CHECK_FAIL = TerminationReason(TerminationKind.HEALTH_CHECK_FAIL)
BUILD_FAILED = TerminationReason(TerminationKind.BUILD_FAILED)
SOURCE_DELETED = TerminationReason(TerminationKind.SOURCE_DELETED)
SUPERSEDED = TerminationReason(TerminationKind.SUPERSEDED)
OPERATOR_STOP = TerminationReason(TerminationKind.OPERATOR_STOP)


# -- durations ----------------------------------------------------------------

NS_PER_S = 1_000_000_000
_UNITS = {"ns": 1, "us": 1_000, "ms": 1_000_000, "s": NS_PER_S, "m": 60 * NS_PER_S, "h": 3600 * NS_PER_S}
_SIMPLE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ns|us|ms|s|m|h)\s*$")
_ISO = re.compile(r"^P(?:T(?:(\d+(?:\.\d+)?)H)?(?:(\d+(?:\.\d+)?)M)?(?:(\d+(?:\.\d+)?)S)?)$")


def parse_duration(text: str) -> int:
    """Parse ``"5s"``, ``"100ms"``, ``"1.5m"`` or ISO-8601 ``"PT5S"`` into nanoseconds."""
    from decimal import Decimal

    m = _SIMPLE.match(text)
    if m:
        ns = Decimal(m.group(1)) * _UNITS[m.group(2)]
    else:
        m = _ISO.match(text.strip())
        if not m or not any(m.groups()):
            raise ValueError(f"invalid duration {text!r}")
        h, mi, s = (Decimal(g) if g else Decimal(0) for g in m.groups())
        ns = (h * 3600 + mi * 60 + s) * NS_PER_S
    if ns != ns.to_integral_value():
        raise ValueError(f"duration {text!r} is finer than 1 ns")
    return int(ns)


def format_duration(ns: int) -> str:
    for unit in ("h", "m", "s", "ms", "us"):
        if ns % _UNITS[unit] == 0 and ns:
            return f"{ns // _UNITS[unit]}{unit}"
    return f"{ns}ns"


# -- spec ---------------------------------------------------------------------


@dataclass(frozen=True)
class ContextRef:
    """Either a packaged build context (service id + optional pinned hash) or an external image."""

    service_id: Optional[str] = None
    content_hash: Optional[str] = None
    image: Optional[str] = None

    @property
    def is_external(self) -> bool:
        return self.image is not None


@dataclass(frozen=True)
class HealthPolicy:
    interval_ns: int
    max_failures: int


@dataclass(frozen=True)
class ServiceExecutionSpec:
    service_id: str
    context: ContextRef
    execution_triggers: frozenset
    submodel_id: str
    termination_triggers: frozenset = frozenset()
    inputs: tuple[tuple[str, ElementReference], ...] = ()
    outputs: tuple[tuple[str, ElementReference], ...] = ()
    env_extra: tuple[tuple[str, str], ...] = ()
    timeout_ns: Optional[int] = None
    health: Optional[HealthPolicy] = None
    policy: ReactivationPolicy = ReactivationPolicy.RESTART

    @property
    def env(self) -> dict[str, str]:
        return dict(self.env_extra)

    @property
    def input_submodels(self) -> frozenset:
        return frozenset(ref.submodel_id for _, ref in self.inputs)

    def to_dict(self) -> dict:
        from .core import canonical_path

        return {
            "serviceId": self.service_id,
            "submodel": self.submodel_id,
            "context": {k: v for k, v in vars(self.context).items() if v is not None},
            "executionTriggers": sorted(t.value for t in self.execution_triggers),
            "terminationTriggers": sorted(t.value for t in self.termination_triggers),
            "inputs": {n: canonical_path(r) for n, r in self.inputs},
            "outputs": {n: canonical_path(r) for n, r in self.outputs},
            "environment": self.env,
            "timeout": format_duration(self.timeout_ns) if self.timeout_ns is not None else None,
            "health": (
                {"interval": format_duration(self.health.interval_ns), "maxFailures": self.health.max_failures}
                if self.health
                else None
            ),
            "policy": self.policy.value,
        }


def _string_prop(el, what: str, problems: list[str]) -> Optional[str]:
    if el is None:
        return None
    if not isinstance(el, Property) or el.value_type is not ValueType.STRING:
        problems.append(f"{what} must be a string Property")
        return None
    return el.value


def _collection(sm_or_coll, id_short: str, problems: list[str], required: bool = False) -> tuple:
    el = sm_or_coll.get(id_short)
    if el is None:
        if required:
            problems.append(f"{id_short} collection is missing")
        return ()
    if not isinstance(el, Collection):
        problems.append(f"{id_short} must be a collection")
        return ()
    return el.children


def _triggers(children: tuple, enum, what: str, problems: list[str]) -> frozenset:
    out = set()
    for el in children:
        value = _string_prop(el, f"{what}.{el.id_short}", problems)
        if value is None:
            continue
        try:
            out.add(enum(value))
        except ValueError:
            allowed = ", ".join(e.value for e in enum)
            problems.append(f"{what}.{el.id_short}: unknown trigger {value!r} (allowed: {allowed})")
    return frozenset(out)


def _bindings(children: tuple, what: str, problems: list[str]) -> tuple:
    out = []
    for el in children:
        if not isinstance(el, ReferenceElement):
            problems.append(f"{what}.{el.id_short} must be a ReferenceElement")
            continue
        if not _ENV_NAME.match(el.id_short):
            problems.append(f"{what}.{el.id_short}: binding names must be uppercase letters, digits and '_'")
            continue
        out.append((el.id_short, el.target))
    return tuple(out)


def parse_spec(sm: Submodel) -> Optional[ServiceExecutionSpec]:
    """Return the spec carried by ``sm``, or ``None`` for ordinary submodels.

    A submodel is a candidate when its semanticId is the template IRI; a
    candidate that breaks the template raises :class:`MalformedSpec` listing
    every violation found.
    """
    if sm.semantic_id != TEMPLATE_SEMANTIC_ID:
        return None
    problems: list[str] = []

    service_id = _string_prop(sm.get("ServiceId"), "ServiceId", problems)
    if service_id is None and sm.get("ServiceId") is None:
        problems.append("ServiceId is missing")
    elif service_id is not None and not is_service_id(service_id):
        problems.append(f"ServiceId {service_id!r} must be a letter followed by letters, digits, '_' or '-'")

    context = ContextRef()
    ctx_children = _collection(sm, "Context", problems, required=True)
    if ctx_children:
        ctx = {el.id_short: el for el in ctx_children}
        unknown = sorted(set(ctx) - {"ServiceRef", "ContentHash", "Image"})
        if unknown:
            problems.append(f"Context has unknown entries {unknown}")
        ref = _string_prop(ctx.get("ServiceRef"), "Context.ServiceRef", problems)
        digest = _string_prop(ctx.get("ContentHash"), "Context.ContentHash", problems)
        image = _string_prop(ctx.get("Image"), "Context.Image", problems)
        if (ref is None) == (image is None):
            problems.append("Context needs exactly one of ServiceRef or Image")
        if digest is not None and (image is not None or not _SHA256.match(digest)):
            problems.append("Context.ContentHash must be a lowercase SHA-256 hex digest next to ServiceRef")
        if ref is not None and not is_service_id(ref):
            problems.append(f"Context.ServiceRef {ref!r} is not a valid service id")
        context = ContextRef(ref, digest, image)
    elif sm.get("Context") is not None and isinstance(sm.get("Context"), Collection):
        problems.append("Context collection is empty")

    execution = _triggers(_collection(sm, "ExecutionTriggers", problems, required=True), ExecutionTrigger, "ExecutionTriggers", problems)
    if not execution:
        problems.append("at least one execution trigger is required")
    termination = _triggers(_collection(sm, "TerminationTriggers", problems), TerminationTrigger, "TerminationTriggers", problems)

    inputs = _bindings(_collection(sm, "Inputs", problems), "Inputs", problems)
    outputs = _bindings(_collection(sm, "Outputs", problems), "Outputs", problems)

    env = []
    for el in _collection(sm, "Environment", problems):
        value = _string_prop(el, f"Environment.{el.id_short}", problems)
        if value is not None:
            if el.id_short.startswith("AAS_"):
                problems.append(f"Environment.{el.id_short}: the AAS_ prefix is reserved for injected variables")
            env.append((el.id_short, value))

    timeout_ns = None
    timeout_text = _string_prop(sm.get("Timeout"), "Timeout", problems)
    if timeout_text is not None:
        try:
            timeout_ns = parse_duration(timeout_text)
            if timeout_ns <= 0:
                problems.append("Timeout must be positive")
        except ValueError as exc:
            problems.append(f"Timeout: {exc}")
    if (timeout_text is not None) != (TerminationTrigger.ON_TIMEOUT in termination):
        problems.append("Timeout must be present exactly when onTimeout is a termination trigger")

    health = None
    health_el = sm.get("HealthCheck")
    if health_el is not None:
        hc = {el.id_short: el for el in _collection(sm, "HealthCheck", problems)}
        interval_text = _string_prop(hc.get("Interval"), "HealthCheck.Interval", problems)
        max_el = hc.get("MaxFailures")
        interval_ns = None
        if interval_text is None:
            problems.append("HealthCheck.Interval is required")
        else:
            try:
                interval_ns = parse_duration(interval_text)
                if interval_ns <= 0:
                    problems.append("HealthCheck.Interval must be positive")
            except ValueError as exc:
                problems.append(f"HealthCheck.Interval: {exc}")
        if not isinstance(max_el, Property) or max_el.value_type is not ValueType.INTEGER or max_el.value < 1:
            problems.append("HealthCheck.MaxFailures must be a positive integer Property")
        elif interval_ns:
            health = HealthPolicy(interval_ns, max_el.value)
    if (health_el is not None) != (TerminationTrigger.ON_HEALTH_CHECK_FAIL in termination):
        problems.append("HealthCheck must be present exactly when onHealthCheckFail is a termination trigger")

    policy = ReactivationPolicy.RESTART
    policy_text = _string_prop(sm.get("ReactivationPolicy"), "ReactivationPolicy", problems)
    if policy_text is not None:
        try:
            policy = ReactivationPolicy(policy_text)
        except ValueError:
            problems.append(f"ReactivationPolicy {policy_text!r} is not one of restart, queue-one, ignore-while-running")

    names = [n for n, _ in inputs] + [n for n, _ in outputs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        problems.append(f"input/output names must be unique: {dupes}")

    if problems:
        raise MalformedSpec(sm.id, problems)
    return ServiceExecutionSpec(
        service_id=service_id,
        context=context,
        execution_triggers=execution,
        submodel_id=sm.id,
        termination_triggers=termination,
        inputs=inputs,
        outputs=outputs,
        env_extra=tuple(env),
        timeout_ns=timeout_ns,
        health=health,
        policy=policy,
    )


def build_spec_submodel(
    submodel_id: str,
    id_short: str,
    service_id: str,
    execution_triggers: Iterable[Union[ExecutionTrigger, str]],
    *,
    service_ref: Optional[str] = None,
    content_hash: Optional[str] = None,
    image: Optional[str] = None,
    termination_triggers: Iterable[Union[TerminationTrigger, str]] = (),
    inputs: Mapping[str, ElementReference] = {},
    outputs: Mapping[str, ElementReference] = {},
    env: Mapping[str, str] = {},
    timeout: Optional[str] = None,
    health_interval: Optional[str] = None,
    max_failures: Optional[int] = None,
    policy: Optional[str] = None,
) -> Submodel:
    """Lay out a Service Execution Submodel following the template."""
    context: list = []
    if image is not None:
        context.append(Property("Image", ValueType.STRING, image))
    else:
        context.append(Property("ServiceRef", ValueType.STRING, service_ref or service_id))
        if content_hash is not None:
            context.append(Property("ContentHash", ValueType.STRING, content_hash))
    elements: list = [
        Property("ServiceId", ValueType.STRING, service_id),
        Collection("Context", tuple(context)),
        Collection(
            "ExecutionTriggers",
            tuple(Property(f"Trigger{i}", ValueType.STRING, ExecutionTrigger(t).value) for i, t in enumerate(execution_triggers)),
        ),
    ]
    term = [TerminationTrigger(t) for t in termination_triggers]
    if term:
        elements.append(
            Collection("TerminationTriggers", tuple(Property(f"Trigger{i}", ValueType.STRING, t.value) for i, t in enumerate(term)))
        )
    if inputs:
        elements.append(Collection("Inputs", tuple(ReferenceElement(n, r) for n, r in inputs.items())))
    if outputs:
        elements.append(Collection("Outputs", tuple(ReferenceElement(n, r) for n, r in outputs.items())))
    if env:
        elements.append(Collection("Environment", tuple(Property(k, ValueType.STRING, v) for k, v in env.items())))
    if timeout is not None:
        elements.append(Property("Timeout", ValueType.STRING, timeout))
    if health_interval is not None or max_failures is not None:
        hc = []
        if health_interval is not None:
            hc.append(Property("Interval", ValueType.STRING, health_interval))
        if max_failures is not None:
            hc.append(Property("MaxFailures", ValueType.INTEGER, max_failures))
        elements.append(Collection("HealthCheck", tuple(hc)))
    if policy is not None:
        elements.append(Property("ReactivationPolicy", ValueType.STRING, policy))
    return Submodel(submodel_id, id_short, tuple(elements), TEMPLATE_SEMANTIC_ID)


# -- actions ----------------------------------------------------------------------


@dataclass(frozen=True)
class Activate:
    spec: ServiceExecutionSpec
    cause: LifecycleEvent


@dataclass(frozen=True)
class Terminate:
    instance_id: str
    reason: TerminationReason


@dataclass(frozen=True)
class NoAction:
    subject: str = ""


ServiceAction = Union[Activate, Terminate, NoAction]


def should_activate(event: LifecycleEvent, spec: ServiceExecutionSpec) -> bool:
    triggers = spec.execution_triggers
    subject = event.subject
    if event.kind is EventKind.IMPORT:
        return (
            ExecutionTrigger.ON_INITIALIZE in triggers
            and subject is not None
            and subject.submodel_id == spec.submodel_id
        )
    if event.kind is EventKind.UPDATE:
        return (
            ExecutionTrigger.ON_UPDATE in triggers
            and subject is not None
            and any(subject.overlaps(ref) for _, ref in spec.inputs)
        )
    if event.kind is EventKind.ACCESS:
        return (
            ExecutionTrigger.ON_ACCESS in triggers
            and subject is not None
            and subject.submodel_id in spec.input_submodels
        )
    if event.kind is EventKind.DEMAND:
        return ExecutionTrigger.ON_DEMAND in triggers and event.payload.get("service_id") == spec.service_id
    return False


def evaluate_execution_triggers(event: LifecycleEvent, specs: Sequence[ServiceExecutionSpec]) -> list[ServiceAction]:
    """One action per spec, in registration order: Activate or NoAction.

    Triggers combine with OR. Import activates specs carried by the imported
    submodel; Update activates when the changed reference overlaps an input;
    Access activates when the read submodel holds an input; Demand activates
    the named service only.
    """
    if event.kind not in (EventKind.IMPORT, EventKind.UPDATE, EventKind.ACCESS, EventKind.DEMAND):
        return [NoAction(spec.service_id) for spec in specs]
    return [Activate(spec, event) if should_activate(event, spec) else NoAction(spec.service_id) for spec in specs]


def next_failure_count(current: int, healthy: bool) -> int:
    return 0 if healthy else current + 1


def evaluate_termination_triggers(event: LifecycleEvent, instances: Iterable) -> list[ServiceAction]:
    """Decide terminations for a Tick or HealthReport.

    ``instances`` are objects with ``instance_id``, ``spec``, ``state``,
    ``started_at`` (ns) and ``consecutive_health_failures``. Only Running
    instances are considered. Timeouts are inclusive: ``now - started_at >=
    timeout`` terminates.
    """
    running = [i for i in instances if i.state is InstanceState.RUNNING]
    if event.kind is EventKind.TICK:
        now = event.payload["now"]
        actions: list[ServiceAction] = []
        for inst in running:
            spec = inst.spec
            if (
                TerminationTrigger.ON_TIMEOUT in spec.termination_triggers
                and spec.timeout_ns is not None
                and now - inst.started_at >= spec.timeout_ns
            ):
                actions.append(Terminate(inst.instance_id, TIMEOUT))
            else:
                actions.append(NoAction(inst.instance_id))
        return actions
    if event.kind is EventKind.HEALTH_REPORT:
        target = event.payload["instance_id"]
        for inst in running:
            if inst.instance_id != target:
                continue
            spec = inst.spec
            failures = next_failure_count(inst.consecutive_health_failures, bool(event.payload["healthy"]))
            if (
                TerminationTrigger.ON_HEALTH_CHECK_FAIL in spec.termination_triggers
                and spec.health is not None
                and failures >= spec.health.max_failures
            ):
                return [Terminate(inst.instance_id, HEALTH_CHECK_FAIL)]
            return [NoAction(inst.instance_id)]
        return []
    return []
