import hashlib
import io
import struct
import zipfile

import pytest
from hypothesis import given, strategies as st

from aasrt.aasx import (
    AasxPackage,
    MANIFEST_PATH,
    PackageManifest,
    ServiceContextEntry,
    ServiceManifestEntry,
    context_digest,
    read_package,
    validate_package,
    write_package,
)
from aasrt.casestudy import build_case_study_package
from aasrt.core import FileElement, Property, Submodel, ValueType
from aasrt.errors import (
    DanglingManifestEntry,
    InvariantViolation,
    MalformedManifest,
    MalformedSubmodel,
    MissingManifest,
    NotAZip,
    PathTraversal,
)
from helpers import context, package, spec_submodel

MINIMAL_MANIFEST = b'<?xml version="1.0"?>\n<manifest specVersion="1.0"><submodel path="aasx/submodels/a.xml"/></manifest>'
MINIMAL_SM = b'<submodel id="urn:x:a" idShort="A"><property idShort="P" valueType="integer">1</property></submodel>'


def zip_of(entries):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in entries:
            zf.writestr(name, data)
    return buf.getvalue()


def reference_digest(tree):
    """Independent re-statement of the context digest: sorted, length-prefixed records."""
    h = hashlib.sha256()
    for path in sorted(tree, key=lambda p: p.encode("utf-8")):
        p = path.encode("utf-8")
        h.update(struct.pack(">Q", len(p)) + p + struct.pack(">Q", len(tree[path])) + tree[path])
    return h.hexdigest()


def test_minimal_package():
    pkg = read_package(zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", MINIMAL_SM)]))
    assert len(pkg.submodels) == 1 and pkg.service_contexts == ()
    assert pkg.submodels[0].get("P").value == 1


def test_case_study_package_reads():
    pkg = read_package(write_package(build_case_study_package()))
    assert len(pkg.submodels) == 3
    assert [c.service_id for c in pkg.service_contexts] == ["geometry-correction"]


def test_opc_parts_ignored():
    data = zip_of(
        [
            ("[Content_Types].xml", b"<Types/>"),
            ("_rels/.rels", b"<Relationships/>"),
            (MANIFEST_PATH, MINIMAL_MANIFEST),
            ("aasx/submodels/a.xml", MINIMAL_SM),
            ("aasx/docs/readme.txt", b"hi"),
        ]
    )
    pkg = read_package(data)
    assert pkg.supplementary_files == (("aasx/docs/readme.txt", b"hi"),)


@pytest.mark.parametrize(
    "data, error",
    [
        (b"not a zip", NotAZip),
        (b"", NotAZip),
        (zip_of([("aasx/submodels/a.xml", MINIMAL_SM)]), MissingManifest),
        (zip_of([(MANIFEST_PATH, b"<manifest")]), MalformedManifest),
        (zip_of([(MANIFEST_PATH, b'<manifest specVersion="1.0"><bogus/></manifest>')]), MalformedManifest),
        (zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST)]), DanglingManifestEntry),
        (zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", b"<submodel/>")]), MalformedSubmodel),
        (zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", MINIMAL_SM), ("../evil", b"x")]), PathTraversal),
        (zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", MINIMAL_SM), ("/abs", b"x")]), PathTraversal),
    ],
)
def test_read_errors(data, error):
    with pytest.raises(error):
        read_package(data)


def test_malformed_manifest_has_position():
    with pytest.raises(MalformedManifest) as err:
        read_package(zip_of([(MANIFEST_PATH, b'<?xml version="1.0"?>\n<manifest specVersion="1.0">\n<shell>\n</manifest>')]))
    assert err.value.line == 4


def test_malformed_submodel_names_path():
    with pytest.raises(MalformedSubmodel) as err:
        read_package(zip_of([(MANIFEST_PATH, MINIMAL_MANIFEST), ("aasx/submodels/a.xml", b"<submodel id='bad' idShort='A'/>")]))
    assert err.value.zip_path == "aasx/submodels/a.xml"


def test_write_is_deterministic_and_round_trips():
    pkg = build_case_study_package()
    a, b = write_package(pkg), write_package(pkg)
    assert a == b
    again = read_package(a)
    assert again == pkg
    assert write_package(again) == a


def test_manifest_first_then_sorted():
    names = zipfile.ZipFile(io.BytesIO(write_package(build_case_study_package()))).namelist()
    assert names[0] == MANIFEST_PATH
    assert names[1:] == sorted(names[1:])


def test_duplicate_service_ids_rejected():
    ctx = context("svc")
    manifest = PackageManifest("1.0", (), (), (ServiceManifestEntry("svc", ctx.context_dir, "1.0.0"),) * 2)
    with pytest.raises(InvariantViolation):
        write_package(AasxPackage(manifest, (), (), (ctx, ctx)))


def test_empty_containerfile_rejected():
    pkg = package(contexts=[ServiceContextEntry("svc", "1.0.0", b"")])
    with pytest.raises(InvariantViolation):
        write_package(pkg)


def test_context_digest_matches_reference():
    ctx = ServiceContextEntry("svc", "1.0.0", b"FROM x\n", (("b.txt", b"2"), ("a/c.txt", b"1")))
    assert ctx.content_hash == reference_digest(ctx.tree())


@given(st.dictionaries(st.from_regex(r"[a-z]{1,6}(/[a-z]{1,6})?\.txt", fullmatch=True), st.binary(max_size=40), max_size=6), st.randoms())
def test_context_digest_ignores_order(files, rnd):
    items = list(files.items())
    shuffled = items[:]
    rnd.shuffle(shuffled)
    assert context_digest(b"FROM x\n", items) == context_digest(b"FROM x\n", shuffled)
    assert context_digest(b"FROM x\n", items) == reference_digest({"Containerfile": b"FROM x\n", **files})


def test_digest_differs_on_one_byte():
    assert context("svc", extra=b"a").content_hash != context("svc", extra=b"b").content_hash


def test_validate_case_study_clean():
    report = validate_package(build_case_study_package())
    assert report.errors == [] and report.warnings == []


def test_validate_orphan_context_warning():
    report = validate_package(package(Submodel("urn:x:a", "A"), contexts=[context("x")]))
    assert report.ok
    assert [f.code for f in report.warnings] == ["OrphanContext"]


def test_validate_missing_context_error():
    report = validate_package(package(spec_submodel("y", ["onDemand"], inputs={})))
    assert [f.code for f in report.errors] == ["MissingContext"]


def test_validate_hash_mismatch():
    sm = spec_submodel("svc", ["onDemand"], inputs={}, content_hash="0" * 64)
    report = validate_package(package(sm, contexts=[context("svc")]))
    assert [f.code for f in report.errors] == ["ContextHashMismatch"]


def test_validate_malformed_spec_lists_violations():
    sm = spec_submodel("svc", ["onDemand"], inputs={}, timeout="5s")
    report = validate_package(package(sm, contexts=[context("svc")]))
    assert any(f.code == "MalformedSpec" and "Timeout" in f.message for f in report.errors)


def test_validate_missing_file_warning():
    sm = Submodel("urn:x:a", "A", (FileElement("Doc", "text/plain", "aasx/docs/none.txt"),))
    report = validate_package(package(sm))
    assert [f.code for f in report.warnings] == ["MissingFile"]


def test_json_documents_supported():
    sm = Submodel("urn:x:a", "A", (Property("P", ValueType.DOUBLE, 1.5),))
    pkg = AasxPackage.build([sm], encoding="json")
    assert read_package(write_package(pkg)).submodels == [sm]


def test_reads_from_stream():
    data = write_package(build_case_study_package())
    assert read_package(io.BytesIO(data)) == read_package(data)
