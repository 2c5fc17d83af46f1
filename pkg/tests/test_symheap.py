import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import leaked_segments
from posh import layout as L
from posh.config import Config
from posh.symheap import (
    DEFAULT_ALIGN,
    MIN_BLOCK,
    Allocator,
    AttachTimeout,
    HeapError,
    OutOfMemory,
    SafeModeError,
    Segment,
    SegmentCollision,
    SymAddr,
    SymmetricHeap,
    shm_path,
)

CAP = 1 << 20


@pytest.fixture
def segment():
    name = f"posh-unit{os.getpid()}-{random.randrange(10**9)}-0"
    seg = Segment.create(name, 0, 1, CAP)
    yield seg
    seg.close()
    seg.unlink()


def fresh_alloc(seg):
    return Allocator(seg, L.HEADER_SIZE, CAP, init=True)


# random scripts: ("alloc", size, align) | ("free", index into live list)
script = st.lists(
    st.one_of(
        st.tuples(st.just("alloc"), st.integers(1, 20000), st.sampled_from([16, 32, 64, 256, 4096])),
        st.tuples(st.just("free"), st.integers(0, 1000), st.just(0)),
    ),
    max_size=60,
)


def run_script(alloc, ops):
    live, trace = [], []
    for kind, a, b in ops:
        if kind == "alloc":
            try:
                off = alloc.alloc(a, b)
            except OutOfMemory:
                trace.append(None)
                continue
            live.append((off, a, b))
            trace.append(off)
        elif live:
            off, _, _ = live.pop(a % len(live))
            alloc.free(off)
            trace.append(-off)
    return live, trace


@settings(max_examples=60, deadline=None)
@given(script)
def test_allocator_invariants_and_determinism(ops):
    segs = [Segment.create(f"posh-hyp{os.getpid()}-{random.randrange(10**9)}-{i}", 0, 1, CAP) for i in range(2)]
    try:
        results = []
        for seg in segs:
            alloc = fresh_alloc(seg)
            live, trace = run_script(alloc, ops)
            for off, size, align in live:
                assert off % align == 0
                assert L.HEADER_SIZE <= off and off + size <= CAP
            spans = sorted((off, off + size) for off, size, _ in live)
            for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
                assert a1 <= b0
            # blocks tile the arena exactly
            blocks = list(alloc.blocks())
            assert blocks[0][0] == L.HEADER_SIZE
            assert sum(size for _, size, _ in blocks) == CAP - L.HEADER_SIZE
            assert alloc.live_blocks() == len(live)
            for off, _, _ in live:
                alloc.free(off)
            assert [(h, s, u) for h, s, u in alloc.blocks()] == [(L.HEADER_SIZE, CAP - L.HEADER_SIZE, False)]
            results.append((trace, alloc.digest()))
        assert results[0] == results[1]
    finally:
        for seg in segs:
            seg.close()
            seg.unlink()


def test_first_fit_reuses_lowest_hole(segment):
    alloc = fresh_alloc(segment)
    a = alloc.alloc(100)
    b = alloc.alloc(100)
    c = alloc.alloc(100)
    assert a < b < c and a % DEFAULT_ALIGN == 0
    alloc.free(b)
    assert alloc.alloc(50) == b
    alloc.free(a)
    alloc.free(c)
    assert alloc.live_blocks() == 1


def test_double_free_and_bogus_free(segment):
    alloc = fresh_alloc(segment)
    a = alloc.alloc(64)
    alloc.free(a)
    with pytest.raises(HeapError):
        alloc.free(a)
    with pytest.raises(HeapError):
        alloc.free(a + 8)


def test_out_of_memory(segment):
    alloc = fresh_alloc(segment)
    with pytest.raises(OutOfMemory):
        alloc.alloc(CAP)
    big = alloc.alloc(CAP - L.HEADER_SIZE - 4096)
    assert big >= L.HEADER_SIZE
    assert MIN_BLOCK >= 2 * 16


def test_symaddr():
    a = SymAddr(0x4010)
    assert int(a + 16) == 0x4020 and a + 16 > a
    assert "0x4010" in repr(a)
    with pytest.raises((ValueError, TypeError)):
        SymAddr(-1)


def test_solo_heap_basics(solo):
    heap = solo.heap
    assert heap.usable_bytes == heap.capacity - L.HEADER_SIZE
    a = solo.shmalloc(100)
    assert int(a) >= L.HEADER_SIZE and int(a) % DEFAULT_ALIGN == 0
    b = solo.shmemalign(4096, 10)
    assert int(b) % 4096 == 0
    assert heap.translate(a, 0) == heap.segment.base + int(a)
    assert heap.local_address(b) == heap.segment.base + int(b)
    solo.shfree(a)
    assert solo.shmalloc(50) == a
    with pytest.raises(HeapError):
        solo.shmalloc(0)
    with pytest.raises(HeapError):
        solo.shmemalign(24, 8)
    with pytest.raises(OutOfMemory):
        solo.shmalloc(heap.capacity)
    with pytest.raises(HeapError):
        solo.shfree(SymAddr(int(b) + 16))


def test_one_heap_per_process(solo):
    with pytest.raises(HeapError, match="already"):
        SymmetricHeap(Config(jobid="second", heap_size=1 << 20))


def test_heap_size_validation():
    with pytest.raises(HeapError):
        SymmetricHeap(Config(jobid=f"tiny{os.getpid()}", heap_size=4096))
    with pytest.raises(HeapError):
        SymmetricHeap(Config(jobid=f"odd{os.getpid()}", heap_size=(1 << 20) + 1))


def test_static_registration(solo):
    x = solo.register_static("x", 64)
    y = solo.register_static("y", 8, alignment=256)
    assert int(y) % 256 == 0 and solo.static("x") == x
    assert [e.label for e in solo.heap.statics] == ["x", "y"]
    with pytest.raises(HeapError):
        solo.register_static("x", 8)
    with pytest.raises(HeapError):
        solo.shfree(x)
    solo.shmalloc(8)
    with pytest.raises(HeapError, match="before the first"):
        solo.register_static("late", 8)
    with pytest.raises(HeapError):
        solo.static("nope")


@pytest.mark.solo(safe=True)
def test_safe_mode_range_checks(solo):
    a = solo.shmalloc(32)
    with pytest.raises(SafeModeError):
        solo.heap.translate(SymAddr(solo.heap.capacity), 0)
    with pytest.raises(SafeModeError):
        solo.heap.check_range(1, int(a), 8)
    with pytest.raises(SafeModeError):
        solo.heap.check_range(0, 0, 8)  # header is not user memory
    with pytest.raises(SafeModeError):
        solo.put(0, a + (solo.heap.capacity - int(a) - 4), b"12345678")
    solo.shfree(a)
    with pytest.raises(SafeModeError):
        solo.shfree(a)


def test_attach_timeout_cleans_up():
    jobid = f"lonely{os.getpid()}"
    cfg = Config(rank=0, npes=2, jobid=jobid, heap_size=1 << 20, attach_timeout=0.3)
    with pytest.raises(AttachTimeout):
        SymmetricHeap(cfg)
    assert leaked_segments(jobid) == []


def test_segment_collision_with_live_owner(segment):
    with pytest.raises(SegmentCollision):
        Segment.create(segment.name, 0, 1, CAP)


def test_stale_segment_is_replaced():
    name = f"posh-stale{os.getpid()}-0"
    seg = Segment.create(name, 0, 1, CAP)
    # pretend the owner died: pid numbers above pid_max never exist
    import struct

    struct.pack_into("<q", seg.mm, L.H_OWNER_PID, 2**31 - 7)
    seg.close()
    seg2 = Segment.create(name, 0, 1, CAP)
    assert seg2.word(L.H_OWNER_PID) == os.getpid()
    seg2.close()
    seg2.unlink()
    assert not os.path.exists(shm_path(name))


def test_open_missing_or_unready():
    assert Segment.open("posh-nothere-0", 0) is None
    name = f"posh-unready{os.getpid()}-0"
    seg = Segment.create(name, 0, 1, CAP)
    try:
        assert Segment.open(name, 0) is None
        seg.mark_ready()
        peer = Segment.open(name, 0)
        assert peer is not None and peer.capacity == CAP
        peer.close()
    finally:
        seg.close()
        seg.unlink()


def test_multi_pe_symmetry_small(job):
    res = job("symmetry", 3, {"scripts": 10, "ops": 30, "seed": 5})
    assert res.code == 0, res
    assert res.results[0]["offsets"] == res.results[1]["offsets"] == res.results[2]["offsets"]
    assert all(r["overlaps"] == 0 for r in res.results.values())


@pytest.mark.parametrize("what", ["alloc", "free"])
def test_safe_mode_detects_asymmetric_calls(job, what):
    res = job("safe_mismatch", 3, {"what": what}, safe=True)
    assert res.code != 0
    assert res.results and all(r["error"] == "SafeModeError" for r in res.results.values())
