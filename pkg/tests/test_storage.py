import random

import pytest

from fedrepo.storage import DigestMismatch, LocalStore, ResourceLimit
from fedrepo.wire import Name, make_metadata, segment_file

GB = 10**9


def _n(text):
    return Name.parse(text)


FILE_A = _n("/genomics/fileA")
NODE_B = _n("/repo/node-b")


def _file(name=FILE_A, size=128, seed=0, copies=3, segment_size=8000):
    content = random.Random(seed).randbytes(size)
    meta = make_metadata(name, content, NODE_B, copies=copies, segment_size=segment_size)
    segments, _ = segment_file(content, segment_size)
    return meta, segments, content


def test_put_small_file_into_empty_store():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file()
    store.put_file(meta, segments, now=1.0)
    assert store.used_bytes == 128
    assert store.has_file(FILE_A)
    store.verify_accounting()


def test_put_rejects_when_space_insufficient():
    store = LocalStore(1000, reserved_bytes=100)
    meta, segments, _ = _file(size=950)
    with pytest.raises(ResourceLimit):
        store.put_file(meta, segments, now=0.0)
    assert store.used_bytes == 0 and not store.has_file(FILE_A)
    store.verify_accounting()


def test_corrupted_segment_rejected_atomically():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file(size=20000)
    corrupted = segments[:]
    corrupted[1] = bytes([corrupted[1][0] ^ 0xFF]) + corrupted[1][1:]
    with pytest.raises(DigestMismatch):
        store.put_file(meta, corrupted, now=0.0)
    assert store.used_bytes == 0
    store.verify_accounting()


def test_get_segment_and_final_index():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file()
    store.put_file(meta, segments, now=0.0)
    blob, final_idx = store.get_segment(FILE_A, 0, now=1.0)
    assert blob == segments[0] and final_idx == 0
    assert store.get_segment(FILE_A, 1, now=1.0) is None
    assert store.get_segment(_n("/nope"), 0, now=1.0) is None


def test_reassembly_matches_digest():
    store = LocalStore(10 * GB)
    meta, segments, content = _file(size=25000, seed=3)
    store.put_file(meta, segments, now=0.0)
    out = b"".join(
        store.get_segment(FILE_A, i, now=1.0)[0] for i in range(meta.segment_count))
    assert out == content
    from fedrepo.wire import digest_bytes
    assert digest_bytes(out) == meta.digest


def test_access_touches_last_access():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file()
    store.put_file(meta, segments, now=0.0)
    store.get_segment(FILE_A, 0, now=42.0)
    assert store.last_access(FILE_A) == 42.0


def test_remove_restores_accounting():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file(size=9000)
    store.put_file(meta, segments, now=0.0)
    assert store.remove_file(FILE_A)
    assert store.used_bytes == 0
    assert not store.remove_file(FILE_A)
    store.verify_accounting()


def test_reserved_region_guards():
    store = LocalStore(1000, reserved_bytes=200)
    store.reserve(150)
    with pytest.raises(ResourceLimit):
        store.reserve(100)
    store.release(150)
    store.reserve(200)
    store.verify_accounting()


def test_committed_data_never_uses_reserved_region():
    store = LocalStore(1000, reserved_bytes=200)
    meta, segments, _ = _file(size=801)
    with pytest.raises(ResourceLimit):
        store.put_file(meta, segments, now=0.0)
    meta2, segments2, _ = _file(size=800, seed=1)
    store.put_file(meta2, segments2, now=0.0)
    store.verify_accounting()


def test_gc_respects_ttl_boundary():
    day = 86400.0
    store = LocalStore(10 * GB)
    meta, segments, _ = _file()
    store.put_file(meta, segments, now=0.0)
    assert store.expired(now=29 * day, gc_ttl=30 * day) == []
    assert store.expired(now=31 * day, gc_ttl=30 * day) == [FILE_A]
    evicted = store.gc_sweep(now=31 * day, gc_ttl=30 * day, may_evict=lambda n: True)
    assert evicted == [FILE_A] and not store.has_file(FILE_A)


def test_gc_policy_can_retain():
    store = LocalStore(10 * GB)
    meta, segments, _ = _file()
    store.put_file(meta, segments, now=0.0)
    evicted = store.gc_sweep(now=10_000_000.0, gc_ttl=60.0, may_evict=lambda n: False)
    assert evicted == [] and store.has_file(FILE_A)


def test_accounting_invariant_under_random_ops():
    rng = random.Random(17)
    store = LocalStore(200_000, reserved_bytes=20_000)
    names = [_n(f"/bulk/f{i}") for i in range(12)]
    for step in range(300):
        name = rng.choice(names)
        if rng.random() < 0.6:
            meta, segments, _ = _file(name=name, size=rng.randint(1, 30_000), seed=step)
            try:
                store.put_file(meta, segments, now=float(step))
            except ResourceLimit:
                pass
        else:
            store.remove_file(name)
        store.verify_accounting()


def test_directory_roundtrip_with_awkward_names(tmp_path):
    store = LocalStore(10 * GB)
    weird = _n("/data/with space/and%percent/file")
    for name, size in [(FILE_A, 128), (weird, 17000)]:
        meta, segments, _ = _file(name=name, size=size, seed=size)
        store.put_file(meta, segments, now=5.0)
    store.save_dir(tmp_path / "store")

    restored = LocalStore(10 * GB)
    restored.load_dir(tmp_path / "store")
    assert restored.file_names() == store.file_names()
    assert restored.used_bytes == store.used_bytes
    assert restored.read_file(weird, now=6.0) == store.read_file(weird, now=6.0)
    restored.verify_accounting()
