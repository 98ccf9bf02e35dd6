import pytest
from hypothesis import given, strategies as st

from aasrt import codec
from aasrt.core import (
    AssetAdministrationShell,
    Collection,
    ElementReference,
    FileElement,
    Property,
    ReferenceElement,
    Submodel,
    ValueType,
)

names = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,10}", fullmatch=True)
text_values = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"), max_size=20)
text_values = text_values.filter(lambda s: all(c in "\t\n\r" or ord(c) >= 0x20 for c in s))


def properties(name):
    return st.one_of(
        st.builds(Property, st.just(name), st.just(ValueType.STRING), text_values),
        st.builds(Property, st.just(name), st.just(ValueType.INTEGER), st.integers(-(2**63), 2**63)),
        st.builds(Property, st.just(name), st.just(ValueType.DOUBLE), st.floats(allow_nan=False)),
        st.builds(Property, st.just(name), st.just(ValueType.BOOLEAN), st.booleans()),
        st.builds(FileElement, st.just(name), st.just("text/plain"), st.from_regex(r"[a-z]{1,8}(/[a-z]{1,8}){0,2}\.txt", fullmatch=True)),
        st.builds(
            ReferenceElement,
            st.just(name),
            st.builds(ElementReference, st.just("urn:x:target"), st.lists(names, max_size=3).map(tuple)),
        ),
    )


def unique_children(depth):
    @st.composite
    def build(draw):
        keys = draw(st.lists(names, max_size=4, unique=True))
        out = []
        for k in keys:
            if depth > 0 and draw(st.booleans()):
                out.append(Collection(k, draw(unique_children(depth - 1))))
            else:
                out.append(draw(properties(k)))
        return tuple(out)

    return build()


submodels = st.builds(
    Submodel,
    st.from_regex(r"urn:sm:[a-z0-9/]{1,10}", fullmatch=True),
    names,
    unique_children(2),
    st.none() | st.just("urn:sem:x"),
)


@given(submodels)
def test_xml_round_trip(sm):
    assert codec.submodel_from_xml(codec.submodel_to_xml(sm)) == sm


@given(submodels)
def test_json_round_trip(sm):
    assert codec.submodel_from_json(codec.dumps(codec.submodel_to_dict(sm))) == sm


def test_shell_round_trip():
    shell = AssetAdministrationShell("urn:x:aas", "Aas", (ElementReference("urn:x:a"), ElementReference("urn:x:b")))
    assert codec.shell_from_xml(codec.shell_to_xml(shell)) == shell
    assert codec.decode_shell(codec.encode_shell(shell, "a.json"), "a.json") == shell


def test_xml_syntax_error_has_position():
    with pytest.raises(codec.DocumentError) as err:
        codec.submodel_from_xml(b'<?xml version="1.0"?>\n<submodel id="urn:x" idShort="S">\n  <property\n</submodel>')
    assert err.value.line is not None and err.value.line >= 3


def test_dtd_refused():
    doc = b'<?xml version="1.0"?><!DOCTYPE s [<!ENTITY e "boom">]><submodel id="urn:x" idShort="S"/>'
    with pytest.raises(codec.DocumentError, match="DTD"):
        codec.submodel_from_xml(doc)


def test_bad_value_is_document_error():
    doc = b'<submodel id="urn:x" idShort="S"><property idShort="X" valueType="double">abc</property></submodel>'
    with pytest.raises(codec.DocumentError):
        codec.submodel_from_xml(doc)


def test_json_error_has_position():
    with pytest.raises(codec.DocumentError) as err:
        codec.submodel_from_json(b'{"id": "urn:x",\n "idShort": }')
    assert err.value.line == 2


def test_format_chosen_by_extension():
    sm = Submodel("urn:x", "S", (Property("A", ValueType.INTEGER, 1),))
    assert codec.encode_submodel(sm, "a.json").lstrip().startswith(b"{")
    assert codec.encode_submodel(sm, "a.xml").startswith(b"<?xml")
    with pytest.raises(codec.DocumentError):
        codec.decode_submodel(b"", "a.txt")
