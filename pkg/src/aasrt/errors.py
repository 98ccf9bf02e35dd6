"""Exception taxonomy shared by every layer of the runtime.

Each error carries a stable ``code`` string; the HTTP layer and the CLI
report that code verbatim so clients can branch on it.
"""
from __future__ import annotations

from typing import Sequence


class AasError(Exception):
    code = "AasError"

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code)
        self.message = message or self.code

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


# -- aas-core / manager ------------------------------------------------------


class InvalidIdentifier(AasError):
    code = "InvalidIdentifier"


class InvalidElement(AasError):
    code = "InvalidElement"


class UnknownSubmodel(AasError):
    code = "UnknownSubmodel"

    def __init__(self, submodel_id: str) -> None:
        super().__init__(f"no submodel with id {submodel_id!r}")
        self.submodel_id = submodel_id


class UnknownShell(AasError):
    code = "UnknownShell"

    def __init__(self, shell_id: str) -> None:
        super().__init__(f"no shell with id {shell_id!r}")
        self.shell_id = shell_id


class PathNotFound(AasError):
    """Raised when an element path cannot be walked to its end.

    ``resolved`` is the deepest prefix of the path that did resolve.
    """

    code = "PathNotFound"

    def __init__(self, submodel_id: str, path: Sequence[str], resolved: Sequence[str]) -> None:
        self.submodel_id = submodel_id
        self.path = tuple(path)
        self.resolved = tuple(resolved)
        missing = self.path[len(self.resolved)] if len(self.path) > len(self.resolved) else ""
        super().__init__(
            f"{'.'.join(self.path)!r} not found in {submodel_id!r}; "
            f"resolved up to {'.'.join(self.resolved)!r}, missing {missing!r}"
        )

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["resolved"] = ".".join(self.resolved)
        return d


class DuplicateId(AasError):
    code = "DuplicateId"

    def __init__(self, ids: Sequence[str]) -> None:
        self.ids = list(ids)
        super().__init__("identifier(s) already present: " + ", ".join(self.ids))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["conflicts"] = self.ids
        return d


class TypeMismatch(AasError):
    code = "TypeMismatch"


# -- aasx-package -------------------------------------------------------------


class PackageError(AasError):
    code = "PackageError"


class NotAZip(PackageError):
    code = "NotAZip"


class MissingManifest(PackageError):
    code = "MissingManifest"


class MalformedManifest(PackageError):
    code = "MalformedManifest"

    def __init__(self, message: str, line: int | None = None, column: int | None = None) -> None:
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(line=self.line, column=self.column)
        return d


class MalformedSubmodel(PackageError):
    code = "MalformedSubmodel"

    def __init__(self, zip_path: str, message: str) -> None:
        self.zip_path = zip_path
        super().__init__(f"{zip_path}: {message}")

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["path"] = self.zip_path
        return d


class DanglingManifestEntry(PackageError):
    code = "DanglingManifestEntry"

    def __init__(self, zip_path: str) -> None:
        self.zip_path = zip_path
        super().__init__(f"manifest names {zip_path!r} but the archive has no such entry")


class PathTraversal(PackageError):
    code = "PathTraversal"

    def __init__(self, zip_path: str) -> None:
        self.zip_path = zip_path
        super().__init__(f"entry {zip_path!r} escapes the archive root")


class InvariantViolation(PackageError):
    code = "InvariantViolation"

    def __init__(self, invariant: str, entry: str) -> None:
        self.invariant = invariant
        self.entry = entry
        super().__init__(f"{invariant}: {entry}")


# -- service execution ----------------------------------------------------------


class MalformedSpec(AasError):
    code = "MalformedSpec"

    def __init__(self, submodel_id: str, violations: Sequence[str]) -> None:
        self.submodel_id = submodel_id
        self.violations = list(violations)
        super().__init__(f"{submodel_id}: " + "; ".join(self.violations))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["violations"] = self.violations
        return d


# -- context store / orchestrator / engine -----------------------------------


class UnknownContext(AasError):
    code = "UnknownContext"


class StorageFailure(AasError):
    code = "IoFailure"


class UnknownInstance(AasError):
    code = "UnknownInstance"


class AlreadyTerminated(AasError):
    code = "AlreadyTerminated"


class UnknownService(AasError):
    code = "UnknownService"


class TriggerNotEnabled(AasError):
    code = "TriggerNotEnabled"


class EngineError(AasError):
    code = "EngineError"


class EngineUnavailable(EngineError):
    code = "EngineUnavailable"


class BuildFailed(EngineError):
    code = "BuildFailed"


class RunFailed(EngineError):
    code = "RunFailed"


class UnregisteredBehavior(EngineError):
    code = "UnregisteredBehavior"


class LoopBusy(AasError):
    code = "LoopBusy"


class ConfigError(AasError):
    code = "ConfigError"
