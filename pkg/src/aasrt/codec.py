"""JSON and XML encodings of shells and submodels.

JSON is used by the HTTP API and the persistence layer; XML is the
default document encoding inside AASX packages. Both are lossless over the
implemented metamodel subset. The XML reader is built on expat so errors
can report line and column.
"""
from __future__ import annotations

import json
import xml.parsers.expat
from dataclasses import dataclass, field
from typing import Any, Optional
from xml.sax.saxutils import escape, quoteattr

from .core import (
    AssetAdministrationShell,
    Collection,
    ElementReference,
    FileElement,
    Property,
    ReferenceElement,
    Submodel,
    SubmodelElement,
    ValueType,
    format_value,
)
from .errors import AasError

# -- JSON ---------------------------------------------------------------------


def reference_to_dict(ref: ElementReference) -> dict:
    d: dict[str, Any] = {"submodel": ref.submodel_id, "path": list(ref.element_path)}
    if ref.aas_id is not None:
        d["aas"] = ref.aas_id
    return d


def reference_from_dict(d: dict) -> ElementReference:
    path = d.get("path", [])
    if isinstance(path, str):
        path = path.split(".") if path else []
    return ElementReference(d["submodel"], tuple(path), d.get("aas"))


def element_to_dict(el: SubmodelElement) -> dict:
    if isinstance(el, Property):
        return {"modelType": "Property", "idShort": el.id_short, "valueType": el.value_type.value, "value": el.value}
    if isinstance(el, ReferenceElement):
        return {"modelType": "ReferenceElement", "idShort": el.id_short, "value": reference_to_dict(el.target)}
    if isinstance(el, FileElement):
        return {"modelType": "File", "idShort": el.id_short, "contentType": el.content_type, "value": el.path}
    return {
        "modelType": "SubmodelElementCollection",
        "idShort": el.id_short,
        "value": [element_to_dict(c) for c in el.children],
    }


def element_from_dict(d: dict) -> SubmodelElement:
    kind = d.get("modelType")
    if kind == "Property":
        return Property(d["idShort"], ValueType(d["valueType"]), d["value"])
    if kind == "ReferenceElement":
        return ReferenceElement(d["idShort"], reference_from_dict(d["value"]))
    if kind == "File":
        return FileElement(d["idShort"], d["contentType"], d["value"])
    if kind == "SubmodelElementCollection":
        return Collection(d["idShort"], tuple(element_from_dict(c) for c in d.get("value", [])))
    raise ValueError(f"unknown modelType {kind!r}")


def submodel_to_dict(sm: Submodel, with_version: bool = True) -> dict:
    d: dict[str, Any] = {"modelType": "Submodel", "id": sm.id, "idShort": sm.id_short}
    if sm.semantic_id is not None:
        d["semanticId"] = sm.semantic_id
    if with_version:
        d["version"] = sm.version
    d["submodelElements"] = [element_to_dict(e) for e in sm.elements]
    return d


def submodel_from_dict(d: dict) -> Submodel:
    if d.get("modelType", "Submodel") != "Submodel":
        raise ValueError("modelType must be Submodel")
    return Submodel(
        id=d["id"],
        id_short=d["idShort"],
        elements=tuple(element_from_dict(e) for e in d.get("submodelElements", [])),
        semantic_id=d.get("semanticId"),
        version=int(d.get("version", 1)),
    )


def shell_to_dict(shell: AssetAdministrationShell) -> dict:
    return {
        "modelType": "AssetAdministrationShell",
        "id": shell.id,
        "idShort": shell.id_short,
        "submodels": [reference_to_dict(r) for r in shell.submodel_refs],
    }


def shell_from_dict(d: dict) -> AssetAdministrationShell:
    return AssetAdministrationShell(
        d["id"], d["idShort"], tuple(reference_from_dict(r) for r in d.get("submodels", []))
    )


def dumps(obj: dict) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


class DocumentError(AasError):
    """A document failed to parse; ``line``/``column`` are set for XML syntax errors."""

    code = "DocumentError"

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None) -> None:
        super().__init__(message)
        self.line = line
        self.column = column


def _json_document(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        raise DocumentError(f"invalid JSON: {exc}", line, col) from None
    if not isinstance(obj, dict):
        raise DocumentError("JSON document must be an object")
    return obj


def submodel_from_json(data: bytes) -> Submodel:
    try:
        return submodel_from_dict(_json_document(data))
    except DocumentError:
        raise
    except (AasError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DocumentError(f"invalid submodel document: {exc!s}") from None


def shell_from_json(data: bytes) -> AssetAdministrationShell:
    try:
        return shell_from_dict(_json_document(data))
    except DocumentError:
        raise
    except (AasError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DocumentError(f"invalid shell document: {exc!s}") from None


# -- XML ----------------------------------------------------------------------


@dataclass
class XmlNode:
    tag: str
    attrib: dict[str, str]
    line: int
    column: int
    children: list["XmlNode"] = field(default_factory=list)
    text: str = ""

    def require(self, name: str) -> str:
        if name not in self.attrib:
            raise DocumentError(f"<{self.tag}> lacks attribute {name!r}", self.line, self.column)
        return self.attrib[name]

    def only_attributes(self, *allowed: str) -> None:
        extra = sorted(set(self.attrib) - set(allowed))
        if extra:
            raise DocumentError(f"<{self.tag}> has unexpected attribute(s) {extra}", self.line, self.column)


def parse_xml(data: bytes) -> XmlNode:
    """Parse ``data`` into an :class:`XmlNode` tree; DTDs are refused."""
    parser = xml.parsers.expat.ParserCreate()
    stack: list[XmlNode] = []
    root: list[XmlNode] = []

    def start(tag, attrib):
        node = XmlNode(tag, dict(attrib), parser.CurrentLineNumber, parser.CurrentColumnNumber + 1)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(_tag):
        stack.pop()

    def chars(text):
        if stack:
            stack[-1].text += text

    def doctype(*_args):
        raise DocumentError("DTDs are not allowed", parser.CurrentLineNumber, parser.CurrentColumnNumber + 1)

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    parser.StartDoctypeDeclHandler = doctype
    try:
        parser.Parse(data, True)
    except xml.parsers.expat.ExpatError as exc:
        raise DocumentError(f"XML syntax error: {xml.parsers.expat.ErrorString(exc.code)}", exc.lineno, exc.offset + 1) from None
    if not root:
        raise DocumentError("empty XML document")
    return root[0]


def _ref_attrs(ref: ElementReference) -> str:
    out = f" submodel={quoteattr(ref.submodel_id)}"
    if ref.aas_id is not None:
        out += f" aas={quoteattr(ref.aas_id)}"
    if ref.element_path:
        out += f" path={quoteattr('.'.join(ref.element_path))}"
    return out


def _ref_from_node(node: XmlNode) -> ElementReference:
    path = node.attrib.get("path", "")
    return ElementReference(node.require("submodel"), tuple(path.split(".")) if path else (), node.attrib.get("aas"))


def _element_xml(el: SubmodelElement, indent: str, out: list[str]) -> None:
    ids = quoteattr(el.id_short)
    if isinstance(el, Property):
        text = escape(format_value(el.value_type, el.value), {"\r": "&#13;"})
        out.append(f"{indent}<property idShort={ids} valueType={quoteattr(el.value_type.value)}>{text}</property>")
    elif isinstance(el, ReferenceElement):
        out.append(f"{indent}<referenceElement idShort={ids}{_ref_attrs(el.target)}/>")
    elif isinstance(el, FileElement):
        out.append(f"{indent}<file idShort={ids} contentType={quoteattr(el.content_type)} path={quoteattr(el.path)}/>")
    elif not el.children:
        out.append(f"{indent}<collection idShort={ids}/>")
    else:
        out.append(f"{indent}<collection idShort={ids}>")
        for child in el.children:
            _element_xml(child, indent + "  ", out)
        out.append(f"{indent}</collection>")


def submodel_to_xml(sm: Submodel) -> bytes:
    attrs = f"id={quoteattr(sm.id)} idShort={quoteattr(sm.id_short)}"
    if sm.semantic_id is not None:
        attrs += f" semanticId={quoteattr(sm.semantic_id)}"
    out = ['<?xml version="1.0" encoding="UTF-8"?>', f"<submodel {attrs}>"]
    for el in sm.elements:
        _element_xml(el, "  ", out)
    out.append("</submodel>")
    return ("\n".join(out) + "\n").encode("utf-8")


def _element_from_node(node: XmlNode) -> SubmodelElement:
    try:
        if node.tag == "property":
            node.only_attributes("idShort", "valueType")
            return Property(node.require("idShort"), ValueType(node.require("valueType")), node.text)
        if node.tag == "referenceElement":
            node.only_attributes("idShort", "submodel", "aas", "path")
            return ReferenceElement(node.require("idShort"), _ref_from_node(node))
        if node.tag == "file":
            node.only_attributes("idShort", "contentType", "path")
            return FileElement(node.require("idShort"), node.require("contentType"), node.require("path"))
        if node.tag == "collection":
            node.only_attributes("idShort")
            return Collection(node.require("idShort"), tuple(_element_from_node(c) for c in node.children))
    except DocumentError:
        raise
    except (AasError, ValueError) as exc:
        raise DocumentError(f"<{node.tag}>: {exc!s}", node.line, node.column) from None
    raise DocumentError(f"unknown element <{node.tag}>", node.line, node.column)


def submodel_from_xml(data: bytes) -> Submodel:
    root = parse_xml(data)
    if root.tag != "submodel":
        raise DocumentError(f"root must be <submodel>, found <{root.tag}>", root.line, root.column)
    root.only_attributes("id", "idShort", "semanticId")
    elements = tuple(_element_from_node(c) for c in root.children)
    try:
        return Submodel(root.require("id"), root.require("idShort"), elements, root.attrib.get("semanticId"))
    except DocumentError:
        raise
    except AasError as exc:
        raise DocumentError(str(exc), root.line, root.column) from None


def shell_to_xml(shell: AssetAdministrationShell) -> bytes:
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f"<shell id={quoteattr(shell.id)} idShort={quoteattr(shell.id_short)}>",
    ]
    for ref in shell.submodel_refs:
        out.append(f"  <submodelRef{_ref_attrs(ref)}/>")
    out.append("</shell>")
    return ("\n".join(out) + "\n").encode("utf-8")


def shell_from_xml(data: bytes) -> AssetAdministrationShell:
    root = parse_xml(data)
    if root.tag != "shell":
        raise DocumentError(f"root must be <shell>, found <{root.tag}>", root.line, root.column)
    root.only_attributes("id", "idShort")
    refs = []
    for child in root.children:
        if child.tag != "submodelRef":
            raise DocumentError(f"unknown element <{child.tag}>", child.line, child.column)
        child.only_attributes("submodel", "aas", "path")
        try:
            refs.append(_ref_from_node(child))
        except AasError as exc:
            if isinstance(exc, DocumentError):
                raise
            raise DocumentError(str(exc), child.line, child.column) from None
    try:
        return AssetAdministrationShell(root.require("id"), root.require("idShort"), tuple(refs))
    except DocumentError:
        raise
    except AasError as exc:
        raise DocumentError(str(exc), root.line, root.column) from None


# -- dispatch by file extension ------------------------------------------------


def encode_submodel(sm: Submodel, path: str) -> bytes:
    if path.lower().endswith(".json"):
        return dumps(submodel_to_dict(sm, with_version=False))
    return submodel_to_xml(sm)


def decode_submodel(data: bytes, path: str) -> Submodel:
    if path.lower().endswith(".json"):
        return submodel_from_json(data)
    if path.lower().endswith(".xml"):
        return submodel_from_xml(data)
    raise DocumentError("submodel documents must end in .xml or .json")


def encode_shell(shell: AssetAdministrationShell, path: str) -> bytes:
    if path.lower().endswith(".json"):
        return dumps(shell_to_dict(shell))
    return shell_to_xml(shell)


def decode_shell(data: bytes, path: str) -> AssetAdministrationShell:
    if path.lower().endswith(".json"):
        return shell_from_json(data)
    if path.lower().endswith(".xml"):
        return shell_from_xml(data)
    raise DocumentError("shell documents must end in .xml or .json")
