"""Reading, validating and writing AASX packages.

Layout convention::

    aasx/manifest.xml                      the manifest (required)
    aasx/shells/*.xml|json                 shell documents
    aasx/submodels/*.xml|json              submodel documents
    aasx/services/<service_id>/Containerfile
    aasx/services/<service_id>/...         remaining build context files

Anything else is kept as a supplementary file. OPC ``_rels/`` parts and
``[Content_Types].xml`` are tolerated and dropped.
"""
from __future__ import annotations

import hashlib
import io
import re
import struct
import zipfile
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Union
from xml.sax.saxutils import quoteattr

from . import codec
from .core import AssetAdministrationShell, FileElement, Submodel, iter_elements
from .errors import (
    AasError,
    DanglingManifestEntry,
    InvariantViolation,
    MalformedManifest,
    MalformedSpec,
    MalformedSubmodel,
    MissingManifest,
    NotAZip,
    PathTraversal,
)
from .execution import is_service_id, parse_spec

MANIFEST_PATH = "aasx/manifest.xml"
SHELLS_DIR = "aasx/shells/"
SUBMODELS_DIR = "aasx/submodels/"
SERVICES_DIR = "aasx/services/"
CONTAINERFILE = "Containerfile"
SPEC_VERSION = "1.0"
MEDIA_TYPE = "application/asset-administration-shell-package"

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_COMPRESS_LEVEL = 9
_SEMVER = re.compile(
    r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)"
    r"(?:-[0-9A-Za-z\-]+(?:\.[0-9A-Za-z\-]+)*)?(?:\+[0-9A-Za-z\-]+(?:\.[0-9A-Za-z\-]+)*)?$"
)
_IGNORED = re.compile(r"^(?:\[Content_Types\]\.xml|(?:.*/)?_rels/.*)$")


def is_semver(value: str) -> bool:
    return bool(_SEMVER.match(value))


def normalize_zip_path(name: str) -> str:
    """Validate an archive member name; raise :class:`PathTraversal` if it could escape."""
    if (
        not name
        or "\\" in name
        or "\x00" in name
        or name.startswith("/")
        or re.match(r"^[A-Za-z]:", name)
        or any(seg == ".." for seg in name.split("/"))
    ):
        raise PathTraversal(name)
    return name


def context_digest(containerfile: bytes, files: Iterable[tuple[str, bytes]]) -> str:
    """SHA-256 over sorted, length-prefixed ``(path, data)`` records.

    The Containerfile enters as the record named ``Containerfile``. No
    timestamps or modes take part, so the digest only depends on content.
    """
    h = hashlib.sha256()
    records = sorted([(CONTAINERFILE, containerfile), *files], key=lambda r: r[0].encode("utf-8"))
    for path, data in records:
        name = path.encode("utf-8")
        h.update(struct.pack(">Q", len(name)))
        h.update(name)
        h.update(struct.pack(">Q", len(data)))
        h.update(data)
    return h.hexdigest()


@dataclass(frozen=True)
class ServiceContextEntry:
    service_id: str
    declared_version: str
    containerfile: bytes
    files: tuple[tuple[str, bytes], ...] = ()
    content_hash: str = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "files", tuple(sorted(self.files, key=lambda f: f[0])))
        object.__setattr__(self, "content_hash", context_digest(self.containerfile, self.files))

    @property
    def context_dir(self) -> str:
        return f"{SERVICES_DIR}{self.service_id}/"

    def tree(self) -> dict[str, bytes]:
        """The build context as ``{relative path: bytes}``."""
        out = {CONTAINERFILE: self.containerfile}
        out.update(self.files)
        return out


@dataclass(frozen=True)
class ServiceManifestEntry:
    service_id: str
    context_dir: str
    version: str


@dataclass(frozen=True)
class PackageManifest:
    spec_version: str = SPEC_VERSION
    shell_entries: tuple[str, ...] = ()
    submodel_entries: tuple[str, ...] = ()
    service_entries: tuple[ServiceManifestEntry, ...] = ()

    def to_xml(self) -> bytes:
        out = ['<?xml version="1.0" encoding="UTF-8"?>', f"<manifest specVersion={quoteattr(self.spec_version)}>"]
        out += [f"  <shell path={quoteattr(p)}/>" for p in self.shell_entries]
        out += [f"  <submodel path={quoteattr(p)}/>" for p in self.submodel_entries]
        out += [
            f"  <service id={quoteattr(s.service_id)} version={quoteattr(s.version)} contextDir={quoteattr(s.context_dir)}/>"
            for s in self.service_entries
        ]
        out.append("</manifest>")
        return ("\n".join(out) + "\n").encode("utf-8")

    @classmethod
    def from_xml(cls, data: bytes) -> "PackageManifest":
        try:
            root = codec.parse_xml(data)
        except codec.DocumentError as exc:
            raise MalformedManifest(exc.message, exc.line, exc.column) from None
        if root.tag != "manifest":
            raise MalformedManifest(f"root element must be <manifest>, found <{root.tag}>", root.line, root.column)
        shells, submodels, services = [], [], []
        try:
            root.only_attributes("specVersion")
            version = root.require("specVersion")
            for node in root.children:
                if node.tag in ("shell", "submodel"):
                    node.only_attributes("path")
                    (shells if node.tag == "shell" else submodels).append(node.require("path"))
                elif node.tag == "service":
                    node.only_attributes("id", "version", "contextDir")
                    sid, ver, ctx = node.require("id"), node.require("version"), node.require("contextDir")
                    if not is_service_id(sid):
                        raise codec.DocumentError(f"invalid service id {sid!r}", node.line, node.column)
                    if not is_semver(ver):
                        raise codec.DocumentError(f"service version {ver!r} is not semver", node.line, node.column)
                    if ctx != f"{SERVICES_DIR}{sid}/":
                        raise codec.DocumentError(
                            f"contextDir must be {SERVICES_DIR}{sid}/, found {ctx!r}", node.line, node.column
                        )
                    services.append(ServiceManifestEntry(sid, ctx, ver))
                else:
                    raise codec.DocumentError(f"unknown element <{node.tag}>", node.line, node.column)
        except codec.DocumentError as exc:
            raise MalformedManifest(exc.message, exc.line, exc.column) from None
        if root.text.strip():
            raise MalformedManifest("unexpected text content", root.line, root.column)
        return cls(version, tuple(shells), tuple(submodels), tuple(services))


@dataclass(frozen=True)
class AasxPackage:
    manifest: PackageManifest
    submodel_docs: tuple[tuple[str, Submodel], ...] = ()
    shell_docs: tuple[tuple[str, AssetAdministrationShell], ...] = ()
    service_contexts: tuple[ServiceContextEntry, ...] = ()
    supplementary_files: tuple[tuple[str, bytes], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "submodel_docs", tuple(self.submodel_docs))
        object.__setattr__(self, "shell_docs", tuple(self.shell_docs))
        object.__setattr__(self, "service_contexts", tuple(self.service_contexts))
        object.__setattr__(self, "supplementary_files", tuple(sorted(self.supplementary_files, key=lambda f: f[0])))

    @property
    def submodels(self) -> list[Submodel]:
        return [sm for _, sm in self.submodel_docs]

    @property
    def shells(self) -> list[AssetAdministrationShell]:
        return [s for _, s in self.shell_docs]

    def context(self, service_id: str) -> Optional[ServiceContextEntry]:
        for ctx in self.service_contexts:
            if ctx.service_id == service_id:
                return ctx
        return None

    @classmethod
    def build(
        cls,
        submodels: Iterable[Submodel] = (),
        shells: Iterable[AssetAdministrationShell] = (),
        contexts: Iterable[ServiceContextEntry] = (),
        supplementary: Iterable[tuple[str, bytes]] = (),
        encoding: str = "xml",
    ) -> "AasxPackage":
        """Assemble a package with conventional paths derived from idShorts.

        idShorts need not be unique across submodels, so repeats get a
        numeric suffix (``Spec.xml``, ``Spec-2.xml``).
        """
        sm_docs = _named(SUBMODELS_DIR, submodels, encoding)
        sh_docs = _named(SHELLS_DIR, shells, encoding)
        contexts = tuple(contexts)
        manifest = PackageManifest(
            SPEC_VERSION,
            tuple(p for p, _ in sh_docs),
            tuple(p for p, _ in sm_docs),
            tuple(ServiceManifestEntry(c.service_id, c.context_dir, c.declared_version) for c in contexts),
        )
        return cls(manifest, sm_docs, sh_docs, contexts, tuple(supplementary))


def _named(directory: str, docs: Iterable, encoding: str) -> tuple:
    seen: dict[str, int] = {}
    out = []
    for doc in docs:
        n = seen[doc.id_short] = seen.get(doc.id_short, 0) + 1
        stem = doc.id_short if n == 1 else f"{doc.id_short}-{n}"
        out.append((f"{directory}{stem}.{encoding}", doc))
    return tuple(out)


# -- reading ------------------------------------------------------------------

_ZIP_FAILURES = (
    zipfile.BadZipFile,
    zipfile.LargeZipFile,
    zlib.error,
    EOFError,
    ValueError,
    NotImplementedError,
    OSError,
    RuntimeError,
    struct.error,
    UnicodeDecodeError,
    IndexError,
    KeyError,
    OverflowError,
    TypeError,
)


def _read_members(data: bytes) -> dict[str, bytes]:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except _ZIP_FAILURES as exc:
        raise NotAZip(f"not a ZIP archive: {exc}") from None
    members: dict[str, bytes] = {}
    with zf:
        try:
            infos = zf.infolist()
        except _ZIP_FAILURES as exc:
            raise NotAZip(f"corrupt central directory: {exc}") from None
        for info in infos:
            name = normalize_zip_path(info.filename)
            if name.endswith("/"):
                continue
            if name in members:
                raise InvariantViolation("duplicate archive entry", name)
            try:
                members[name] = zf.read(info)
            except _ZIP_FAILURES as exc:
                raise NotAZip(f"corrupt entry {name!r}: {exc}") from None
    return members


def read_package(source: Union[bytes, bytearray, BinaryIO]) -> AasxPackage:
    """Parse an AASX archive. Nothing partial is returned: any problem raises."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    else:
        try:
            data = source.read()
        except (OSError, ValueError) as exc:
            raise NotAZip(f"unreadable stream: {exc}") from None
    return package_from_members(_read_members(data))


def package_from_members(members: dict[str, bytes]) -> AasxPackage:
    """Build a package from already extracted ``{archive path: bytes}`` entries."""
    if MANIFEST_PATH not in members:
        raise MissingManifest(f"archive has no {MANIFEST_PATH}")
    manifest = PackageManifest.from_xml(members[MANIFEST_PATH])

    claimed = {MANIFEST_PATH}
    for path in manifest.shell_entries + manifest.submodel_entries:
        normalize_zip_path(path)
        if path not in members:
            raise DanglingManifestEntry(path)
        if path in claimed:
            raise MalformedManifest(f"path {path!r} listed twice")
        claimed.add(path)

    shell_docs = []
    for path in manifest.shell_entries:
        try:
            shell_docs.append((path, codec.decode_shell(members[path], path)))
        except codec.DocumentError as exc:
            raise MalformedSubmodel(path, _with_position(exc)) from None
    submodel_docs = []
    for path in manifest.submodel_entries:
        try:
            submodel_docs.append((path, codec.decode_submodel(members[path], path)))
        except codec.DocumentError as exc:
            raise MalformedSubmodel(path, _with_position(exc)) from None

    contexts = []
    seen_services: set[str] = set()
    for entry in manifest.service_entries:
        if entry.service_id in seen_services:
            raise MalformedManifest(f"service id {entry.service_id!r} listed twice")
        seen_services.add(entry.service_id)
        cf_path = entry.context_dir + CONTAINERFILE
        if cf_path not in members:
            raise DanglingManifestEntry(cf_path)
        files = []
        for name in members:
            if name.startswith(entry.context_dir):
                claimed.add(name)
                if name != cf_path:
                    files.append((name[len(entry.context_dir):], members[name]))
        try:
            contexts.append(ServiceContextEntry(entry.service_id, entry.version, members[cf_path], tuple(files)))
        except AasError as exc:
            raise InvariantViolation(str(exc), cf_path) from None
        if not members[cf_path]:
            raise InvariantViolation("empty Containerfile", cf_path)

    supplementary = tuple(
        (name, members[name]) for name in members if name not in claimed and not _IGNORED.match(name)
    )
    return AasxPackage(manifest, tuple(submodel_docs), tuple(shell_docs), tuple(contexts), supplementary)


def _with_position(exc: codec.DocumentError) -> str:
    if exc.line is not None:
        return f"{exc.message} (line {exc.line}, column {exc.column})"
    return exc.message


# -- writing --------------------------------------------------------------------


def _entries(pkg: AasxPackage) -> dict[str, bytes]:
    entries: dict[str, bytes] = {}

    def put(path: str, data: bytes) -> None:
        try:
            normalize_zip_path(path)
        except PathTraversal:
            raise InvariantViolation("zip paths must be relative without '..'", path) from None
        if path.endswith("/"):
            raise InvariantViolation("zip path names a directory", path)
        if path in entries:
            raise InvariantViolation("two parts share one archive path", path)
        entries[path] = data

    m = pkg.manifest
    if tuple(p for p, _ in pkg.shell_docs) != m.shell_entries:
        raise InvariantViolation("manifest shell entries differ from shell documents", ",".join(m.shell_entries))
    if tuple(p for p, _ in pkg.submodel_docs) != m.submodel_entries:
        raise InvariantViolation("manifest submodel entries differ from submodel documents", ",".join(m.submodel_entries))
    ids = [c.service_id for c in pkg.service_contexts]
    for sid in ids:
        if ids.count(sid) > 1:
            raise InvariantViolation("service ids must be unique within a package", sid)
    expected = tuple(ServiceManifestEntry(c.service_id, c.context_dir, c.declared_version) for c in pkg.service_contexts)
    if expected != m.service_entries:
        raise InvariantViolation("manifest service entries differ from service contexts", ",".join(ids))

    put(MANIFEST_PATH, m.to_xml())
    for path, shell in pkg.shell_docs:
        if not path.lower().endswith((".xml", ".json")):
            raise InvariantViolation("documents must end in .xml or .json", path)
        put(path, codec.encode_shell(shell, path))
    for path, sm in pkg.submodel_docs:
        if not path.lower().endswith((".xml", ".json")):
            raise InvariantViolation("documents must end in .xml or .json", path)
        put(path, codec.encode_submodel(sm, path))
    for ctx in pkg.service_contexts:
        if not is_service_id(ctx.service_id):
            raise InvariantViolation("invalid service id", ctx.service_id)
        if not is_semver(ctx.declared_version):
            raise InvariantViolation("declared version must be semver", ctx.service_id)
        if not ctx.containerfile:
            raise InvariantViolation("Containerfile must be non-empty", ctx.context_dir + CONTAINERFILE)
        put(ctx.context_dir + CONTAINERFILE, ctx.containerfile)
        for rel, data in ctx.files:
            if rel == CONTAINERFILE:
                raise InvariantViolation("context file shadows the Containerfile", ctx.context_dir + rel)
            put(ctx.context_dir + rel, data)
    for path, data in pkg.supplementary_files:
        if path == MANIFEST_PATH or _IGNORED.match(path) or any(path.startswith(c.context_dir) for c in pkg.service_contexts):
            raise InvariantViolation("supplementary file collides with a reserved path", path)
        put(path, data)
    return entries


def write_package(pkg: AasxPackage) -> bytes:
    """Serialize ``pkg`` deterministically.

    Manifest first, then entries in lexicographic order, fixed timestamps and
    modes, DEFLATE level 9. Equal packages give byte-identical archives.
    """
    entries = _entries(pkg)
    order = [MANIFEST_PATH] + sorted(p for p in entries if p != MANIFEST_PATH)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for path in order:
            info = zipfile.ZipInfo(path, date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.create_system = 3
            info.external_attr = 0o100644 << 16
            zf.writestr(info, entries[path], compresslevel=_COMPRESS_LEVEL)
    return buf.getvalue()


# -- validation -------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    severity: str
    code: str
    path: str
    message: str

    def to_dict(self) -> dict:
        return {"severity": self.severity, "code": self.code, "path": self.path, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "error"]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "errors": len(self.errors),
            "warnings": len(self.warnings),
            "findings": [f.to_dict() for f in self.findings],
        }


def validate_package(pkg: AasxPackage) -> ValidationReport:
    findings: list[Finding] = []

    def error(code: str, path: str, message: str) -> None:
        findings.append(Finding("error", code, path, message))

    try:
        _entries(pkg)
    except InvariantViolation as exc:
        error(exc.code, exc.entry, exc.invariant)

    seen: dict[str, str] = {}
    for path, sm in pkg.submodel_docs:
        if sm.id in seen:
            error("DuplicateId", path, f"submodel id {sm.id!r} also defined in {seen[sm.id]}")
        seen[sm.id] = path
    for path, shell in pkg.shell_docs:
        if shell.id in seen:
            error("DuplicateId", path, f"shell id {shell.id!r} also defined in {seen[shell.id]}")
        seen[shell.id] = path

    supplementary = {p for p, _ in pkg.supplementary_files}
    for path, sm in pkg.submodel_docs:
        for el_path, el in iter_elements(sm.elements):
            if isinstance(el, FileElement) and el.path not in supplementary:
                findings.append(
                    Finding("warning", "MissingFile", path, f"{'.'.join(el_path)} points at {el.path!r}, not in the package")
                )

    referenced: set[str] = set()
    for path, sm in pkg.submodel_docs:
        try:
            spec = parse_spec(sm)
        except MalformedSpec as exc:
            for v in exc.violations:
                error("MalformedSpec", path, v)
            continue
        if spec is None or spec.context.is_external:
            continue
        ctx_id = spec.context.service_id
        referenced.add(ctx_id)
        ctx = pkg.context(ctx_id)
        if ctx is None:
            error("MissingContext", path, f"service {spec.service_id!r} names context {ctx_id!r}, absent from the package")
        elif spec.context.content_hash is not None and spec.context.content_hash != ctx.content_hash:
            error(
                "ContextHashMismatch",
                path,
                f"context {ctx_id!r} hashes to {ctx.content_hash}, spec pins {spec.context.content_hash}",
            )
    for ctx in pkg.service_contexts:
        if ctx.service_id not in referenced:
            findings.append(
                Finding("warning", "OrphanContext", ctx.context_dir, f"no Service Execution Submodel uses context {ctx.service_id!r}")
            )
    return ValidationReport(tuple(findings))
