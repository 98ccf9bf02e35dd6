"""The implemented subset of the AAS metamodel.

Shells, submodels, four submodel element variants and references. All
values are frozen dataclasses with tuple children, so they can be shared
across threads; "mutation" always returns a new value.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Union
from urllib.parse import quote, unquote

from .errors import (
    InvalidElement,
    InvalidIdentifier,
    PathNotFound,
    TypeMismatch,
    UnknownSubmodel,
)

MAX_COLLECTION_DEPTH = 16

_IRI = re.compile(r"^[A-Za-z][A-Za-z0-9+.\-]*:[^\s]+$")
_ID_SHORT = re.compile(r"^[A-Za-z][A-Za-z0-9_]{0,127}$")

Scalar = Union[str, int, float, bool]


def is_iri(value: object) -> bool:
    return isinstance(value, str) and bool(_IRI.match(value))


def is_id_short(value: object) -> bool:
    return isinstance(value, str) and bool(_ID_SHORT.match(value))


def check_iri(value: object, what: str = "id") -> str:
    if not is_iri(value):
        raise InvalidIdentifier(f"{what} {value!r} is not an IRI (scheme:rest)")
    return value  # type: ignore[return-value]


def check_id_short(value: object, what: str = "idShort") -> str:
    if not is_id_short(value):
        raise InvalidIdentifier(f"{what} {value!r} must be a letter followed by up to 127 letters/digits/_")
    return value  # type: ignore[return-value]


class ValueType(str, Enum):
    STRING = "string"
    INTEGER = "integer"
    DOUBLE = "double"
    BOOLEAN = "boolean"


def parse_value(value_type: ValueType, raw: object) -> Scalar:
    """Coerce ``raw`` to ``value_type`` or raise :class:`TypeMismatch`.

    Strings are parsed; native Python scalars are accepted when they are
    losslessly of the declared type (``bool`` is never a number).
    """
    vt = ValueType(value_type)
    if vt is ValueType.STRING:
        if isinstance(raw, str):
            return raw
        raise TypeMismatch(f"expected string, got {raw!r}")
    if vt is ValueType.BOOLEAN:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.strip().lower() in ("true", "false"):
            return raw.strip().lower() == "true"
        raise TypeMismatch(f"expected boolean, got {raw!r}")
    if isinstance(raw, bool):
        raise TypeMismatch(f"expected {vt.value}, got boolean {raw!r}")
    if vt is ValueType.INTEGER:
        if isinstance(raw, int):
            return raw
        if isinstance(raw, float) and raw.is_integer():
            return int(raw)
        if isinstance(raw, str):
            try:
                return int(raw.strip())
            except ValueError:
                pass
        raise TypeMismatch(f"expected integer, got {raw!r}")
    if isinstance(raw, (int, float)):
        return float(raw)
    if isinstance(raw, str):
        try:
            return float(raw.strip())
        except ValueError:
            pass
    raise TypeMismatch(f"expected double, got {raw!r}")


def format_value(value_type: ValueType, value: Scalar) -> str:
    vt = ValueType(value_type)
    if vt is ValueType.BOOLEAN:
        return "true" if value else "false"
    if vt is ValueType.DOUBLE:
        return repr(float(value))
    return str(value)


def values_equal(a: Scalar, b: Scalar) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return type(a) is type(b) and a == b


# -- elements -----------------------------------------------------------------


@dataclass(frozen=True)
class ElementReference:
    """Points at a whole submodel (empty path) or one element inside it."""

    submodel_id: str
    element_path: tuple[str, ...] = ()
    aas_id: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.submodel_id, str) or not self.submodel_id:
            raise InvalidIdentifier("reference submodel_id must be non-empty")
        check_iri(self.submodel_id, "submodel_id")
        if self.aas_id is not None:
            check_iri(self.aas_id, "aas_id")
        object.__setattr__(self, "element_path", tuple(self.element_path))
        for seg in self.element_path:
            check_id_short(seg, "path segment")

    def child(self, *segments: str) -> "ElementReference":
        return replace(self, element_path=self.element_path + tuple(segments))

    @property
    def whole_submodel(self) -> "ElementReference":
        return ElementReference(self.submodel_id, (), self.aas_id)

    def overlaps(self, other: "ElementReference") -> bool:
        """True when one reference equals, contains, or is contained in the other."""
        if self.submodel_id != other.submodel_id:
            return False
        n = min(len(self.element_path), len(other.element_path))
        return self.element_path[:n] == other.element_path[:n]

    def __str__(self) -> str:
        return canonical_path(self)


@dataclass(frozen=True)
class Property:
    id_short: str
    value_type: ValueType
    value: Scalar

    def __post_init__(self) -> None:
        check_id_short(self.id_short)
        object.__setattr__(self, "value_type", ValueType(self.value_type))
        object.__setattr__(self, "value", parse_value(self.value_type, self.value))


@dataclass(frozen=True)
class ReferenceElement:
    id_short: str
    target: ElementReference

    def __post_init__(self) -> None:
        check_id_short(self.id_short)
        if not isinstance(self.target, ElementReference):
            raise InvalidElement(f"{self.id_short}: target must be an ElementReference")


def check_relative_path(path: str) -> str:
    if not path or path.startswith("/") or "\\" in path or re.match(r"^[A-Za-z]:", path):
        raise InvalidElement(f"path {path!r} must be relative")
    if any(seg in ("..", "") for seg in path.split("/")):
        raise InvalidElement(f"path {path!r} must not contain '..' or empty segments")
    return path


@dataclass(frozen=True)
class FileElement:
    id_short: str
    content_type: str
    path: str

    def __post_init__(self) -> None:
        check_id_short(self.id_short)
        check_relative_path(self.path)


@dataclass(frozen=True)
class Collection:
    id_short: str
    children: tuple["SubmodelElement", ...] = ()

    def __post_init__(self) -> None:
        check_id_short(self.id_short)
        object.__setattr__(self, "children", tuple(self.children))
        _check_siblings(self.children, self.id_short)
        if collection_depth(self) > MAX_COLLECTION_DEPTH:
            raise InvalidElement(f"{self.id_short}: collection nesting deeper than {MAX_COLLECTION_DEPTH}")

    def get(self, id_short: str) -> Optional["SubmodelElement"]:
        return _find(self.children, id_short)


SubmodelElement = Union[Property, ReferenceElement, FileElement, Collection]
ELEMENT_TYPES = (Property, ReferenceElement, FileElement, Collection)


def collection_depth(element: SubmodelElement) -> int:
    if not isinstance(element, Collection):
        return 0
    return 1 + max((collection_depth(c) for c in element.children), default=0)


def _check_siblings(elements: tuple, owner: str) -> None:
    seen: set[str] = set()
    for el in elements:
        if not isinstance(el, ELEMENT_TYPES):
            raise InvalidElement(f"{owner}: {el!r} is not a submodel element")
        if el.id_short in seen:
            raise InvalidElement(f"{owner}: duplicate idShort {el.id_short!r}")
        seen.add(el.id_short)


def _find(elements: tuple, id_short: str) -> Optional[SubmodelElement]:
    for el in elements:
        if el.id_short == id_short:
            return el
    return None


@dataclass(frozen=True)
class Submodel:
    id: str
    id_short: str
    elements: tuple[SubmodelElement, ...] = ()
    semantic_id: Optional[str] = None
    version: int = 1

    def __post_init__(self) -> None:
        check_iri(self.id, "submodel id")
        check_id_short(self.id_short)
        if self.semantic_id is not None:
            check_iri(self.semantic_id, "semanticId")
        object.__setattr__(self, "elements", tuple(self.elements))
        _check_siblings(self.elements, self.id_short)
        if self.version < 1:
            raise InvalidElement("submodel version starts at 1")

    def get(self, id_short: str) -> Optional[SubmodelElement]:
        return _find(self.elements, id_short)

    @property
    def ref(self) -> ElementReference:
        return ElementReference(self.id)


@dataclass(frozen=True)
class AssetAdministrationShell:
    id: str
    id_short: str
    submodel_refs: tuple[ElementReference, ...] = field(default=())

    def __post_init__(self) -> None:
        check_iri(self.id, "shell id")
        check_id_short(self.id_short)
        object.__setattr__(self, "submodel_refs", tuple(self.submodel_refs))
        targets = [r.submodel_id for r in self.submodel_refs]
        if len(set(targets)) != len(targets):
            raise InvalidElement(f"{self.id_short}: duplicate submodel references")


# -- navigation -----------------------------------------------------------------

SubmodelLookup = Callable[[str], Optional[Submodel]]


def resolve_reference(ref: ElementReference, lookup: SubmodelLookup) -> Union[Submodel, SubmodelElement]:
    sm = lookup(ref.submodel_id)
    if sm is None:
        raise UnknownSubmodel(ref.submodel_id)
    return find_element(sm, ref.element_path)


def find_element(sm: Submodel, path: tuple[str, ...]) -> Union[Submodel, SubmodelElement]:
    node: Union[Submodel, SubmodelElement] = sm
    for depth, seg in enumerate(path):
        if isinstance(node, Submodel):
            nxt = node.get(seg)
        elif isinstance(node, Collection):
            nxt = node.get(seg)
        else:
            nxt = None
        if nxt is None:
            raise PathNotFound(sm.id, path, path[:depth])
        node = nxt
    return node


def _replace_in(elements: tuple, path: tuple[str, ...], fn: Callable[[SubmodelElement], Optional[SubmodelElement]]) -> tuple:
    head, rest = path[0], path[1:]
    out = []
    for el in elements:
        if el.id_short != head:
            out.append(el)
            continue
        if rest:
            if not isinstance(el, Collection):
                raise KeyError(head)
            out.append(replace(el, children=_replace_in(el.children, rest, fn)))
        else:
            new = fn(el)
            if new is not None:
                out.append(new)
    return tuple(out)


def replace_element(sm: Submodel, path: tuple[str, ...], new: Optional[SubmodelElement]) -> Submodel:
    """Return ``sm`` with the element at ``path`` replaced (or removed when ``new`` is None)."""
    find_element(sm, path)
    if not path:
        raise InvalidElement("cannot replace the submodel root")
    return replace(sm, elements=_replace_in(sm.elements, path, lambda _el: new))


def insert_element(sm: Submodel, parent_path: tuple[str, ...], element: SubmodelElement) -> Submodel:
    """Append ``element`` to the submodel root or to the collection at ``parent_path``."""
    parent = find_element(sm, parent_path)
    if isinstance(parent, Submodel):
        return replace(sm, elements=sm.elements + (element,))
    if not isinstance(parent, Collection):
        raise InvalidElement(f"{'.'.join(parent_path)} is not a collection")
    return replace_element(sm, parent_path, replace(parent, children=parent.children + (element,)))


def iter_elements(elements, prefix: tuple[str, ...] = ()):
    """Yield ``(path, element)`` depth-first for every element."""
    for el in elements:
        path = prefix + (el.id_short,)
        yield path, el
        if isinstance(el, Collection):
            yield from iter_elements(el.children, path)


# -- canonical paths --------------------------------------------------------------

_ID_SAFE = ":@!$&'()*+,;=-_~"


def _encode_id(value: str) -> str:
    return quote(value, safe=_ID_SAFE)


def canonical_path(ref: ElementReference) -> str:
    """Render ``ref`` as ``submodels/<id>[/submodel-elements/<a.b.c>]``.

    Identifiers are percent-encoded except for ':' and sub-delimiters, so
    IRIs containing '/' stay unambiguous. A reference that names its shell
    gets a ``shells/<aas_id>/`` prefix.
    """
    out = f"submodels/{_encode_id(ref.submodel_id)}"
    if ref.aas_id is not None:
        out = f"shells/{_encode_id(ref.aas_id)}/" + out
    if ref.element_path:
        out += "/submodel-elements/" + ".".join(ref.element_path)
    return out


def parse_canonical_path(text: str) -> ElementReference:
    """Inverse of :func:`canonical_path`; leading/trailing '/' are ignored."""
    parts = text.strip("/").split("/")
    aas_id = None
    if len(parts) >= 2 and parts[0] == "shells":
        aas_id = unquote(parts[1])
        parts = parts[2:]
    if len(parts) not in (2, 4) or parts[0] != "submodels" or not parts[1]:
        raise InvalidIdentifier(f"not a canonical element path: {text!r}")
    element_path: tuple[str, ...] = ()
    if len(parts) == 4:
        if parts[2] != "submodel-elements" or not parts[3]:
            raise InvalidIdentifier(f"not a canonical element path: {text!r}")
        element_path = tuple(parts[3].split("."))
    return ElementReference(unquote(parts[1]), element_path, aas_id)
