import threading

import pytest
from hypothesis import given, strategies as st

from aasrt.core import AssetAdministrationShell, ElementReference, Property, ValueType, find_element
from aasrt.errors import DuplicateId, PathNotFound, TypeMismatch, UnknownShell, UnknownSubmodel
from aasrt.events import EventKind, EventQueue
from aasrt.manager import Repository, replay
from aasrt.storage import JsonDirectoryBackend, MemoryBackend
from helpers import DATA_ID, DATA_X, data_submodel


def kinds(repo):
    return [e.kind for e in repo.events.history]


def test_create_and_get():
    repo = Repository()
    repo.create_submodel(data_submodel())
    assert repo.get_submodel(DATA_ID).version == 1
    assert kinds(repo) == [EventKind.IMPORT]
    with pytest.raises(DuplicateId):
        repo.create_submodel(data_submodel())
    assert kinds(repo) == [EventKind.IMPORT]


def test_access_events_only_when_recorded():
    repo = Repository()
    repo.create_submodel(data_submodel())
    repo.get_submodel(DATA_ID, record_access=False)
    repo.lookup(DATA_ID)
    assert kinds(repo) == [EventKind.IMPORT]
    repo.get_submodel(DATA_ID, record_access=True)
    assert kinds(repo) == [EventKind.IMPORT, EventKind.ACCESS]
    with pytest.raises(UnknownSubmodel):
        repo.get_submodel("urn:x:missing")


def test_update_element():
    repo = Repository()
    repo.create_submodel(data_submodel(x=99.0))
    assert repo.update_element(DATA_X, 100.0) == 2
    ev = repo.events.history[-1]
    assert ev.kind is EventKind.UPDATE and ev.subject == DATA_X
    assert (ev.payload["old"], ev.payload["new"]) == (99.0, 100.0)
    # equal value: nothing happens
    assert repo.update_element(DATA_X, 100.0) == 2
    assert len(repo.events.history) == 2
    with pytest.raises(TypeMismatch):
        repo.update_element(DATA_X, "abc")
    with pytest.raises(PathNotFound):
        repo.update_element(ElementReference(DATA_ID, ("Nope",)), 1.0)
    with pytest.raises(TypeMismatch):
        repo.update_element(ElementReference(DATA_ID, ("Position",)), 1.0)
    assert repo.get_submodel(DATA_ID).version == 2


def test_structural_changes_emit_update():
    repo = Repository()
    repo.create_submodel(data_submodel())
    repo.add_element(DATA_ID, ("Position",), Property("Z", ValueType.DOUBLE, 0.0))
    repo.remove_element(ElementReference(DATA_ID, ("Label",)))
    changes = [(e.payload["change"], e.payload["op"]) for e in repo.events.history if e.kind is EventKind.UPDATE]
    assert changes == [("structure", "add"), ("structure", "remove")]
    assert repo.get_submodel(DATA_ID).version == 3


def test_delete_and_listener():
    repo = Repository()
    seen = []
    repo.on_delete(seen.append)
    repo.create_submodel(data_submodel())
    repo.delete_submodel(DATA_ID)
    assert seen == [DATA_ID]
    with pytest.raises(UnknownSubmodel):
        repo.get_submodel(DATA_ID)
    with pytest.raises(UnknownSubmodel):
        repo.delete_submodel(DATA_ID)


def test_dangling_shell_refs():
    repo = Repository()
    repo.create_submodel(data_submodel())
    repo.create_shell(AssetAdministrationShell("urn:x:aas", "Aas", (ElementReference(DATA_ID),)))
    assert repo.dangling_refs("urn:x:aas") == []
    repo.delete_submodel(DATA_ID)
    assert repo.dangling_refs("urn:x:aas") == [ElementReference(DATA_ID)]
    repo.delete_shell("urn:x:aas")
    with pytest.raises(UnknownShell):
        repo.get_shell("urn:x:aas")


def test_listing_sorted_without_events():
    repo = Repository()
    assert repo.list_submodels() == []
    for i in (3, 1, 2):
        repo.create_submodel(data_submodel(f"urn:x:{i}"))
    mark = len(repo.events.history)
    assert [s.id for s in repo.list_submodels()] == ["urn:x:1", "urn:x:2", "urn:x:3"]
    assert len(repo.events.history) == mark


def test_concurrent_updates_serialize():
    repo = Repository()
    repo.create_submodel(data_submodel())
    n, per = 8, 50

    def worker(k):
        for i in range(per):
            repo.update_element(DATA_X, float(k * 1000 + i + 1))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    updates = [e for e in repo.events.history if e.kind is EventKind.UPDATE]
    assert repo.get_submodel(DATA_ID).version == 1 + len(updates) == 1 + n * per
    seqs = [e.seq for e in repo.events.history]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)


def test_persistence_round_trip(tmp_path):
    repo = Repository(EventQueue(), JsonDirectoryBackend(tmp_path))
    repo.create_submodel(data_submodel())
    repo.update_element(DATA_X, 5.0)
    repo.create_shell(AssetAdministrationShell("urn:x:aas/1", "Aas", (ElementReference(DATA_ID),)))
    assert (tmp_path / "submodels" / "urn%3Atest%3Adata.json").exists()
    assert (tmp_path / "shells" / "urn%3Ax%3Aaas%2F1.json").exists()
    reloaded = Repository(EventQueue(), JsonDirectoryBackend(tmp_path))
    assert reloaded.state() == repo.state()


values = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6)


@given(st.lists(st.tuples(st.sampled_from(["X", "Y"]), values), max_size=30))
def test_replay_reconstructs_state(writes):
    repo = Repository(EventQueue(), MemoryBackend())
    repo.create_submodel(data_submodel())
    for axis, v in writes:
        repo.update_element(ElementReference(DATA_ID, ("Position", axis)), v)
        repo.get_submodel(DATA_ID, record_access=True)
    rebuilt = replay(repo.events.history)
    assert rebuilt.state() == repo.state()
    effective = sum(1 for e in repo.events.history if e.kind is EventKind.UPDATE)
    assert repo.get_submodel(DATA_ID).version == 1 + effective
    assert find_element(repo.lookup(DATA_ID), ("Position", "X")) == find_element(rebuilt.lookup(DATA_ID), ("Position", "X"))
