import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posh.config import ConfigError, DefaultChoiceWarning
from posh.datamover import ELEMENT_TYPES, STRATEGIES, element_type, get_strategy
from posh.symheap import SafeModeError


def test_strategy_lookup():
    assert set(STRATEGIES) == {"default", "byteloop", "wideblock"}
    assert get_strategy("wideblock").id == "wideblock"
    with pytest.warns(DefaultChoiceWarning):
        assert get_strategy(None).id == "default"
    with pytest.raises(ConfigError):
        get_strategy("memmove9000")


@settings(max_examples=200, deadline=None)
@given(
    size=st.integers(0, 3000),
    src_off=st.integers(0, 64),
    dst_off=st.integers(0, 64),
    data=st.randoms(use_true_random=False),
)
def test_strategies_agree_with_slice_copy(size, src_off, dst_off, data):
    src = bytearray(data.randbytes(size + src_off + 8))
    fill = data.randbytes(size + dst_off + 8)
    expect = bytearray(fill)
    expect[dst_off:dst_off + size] = src[src_off:src_off + size]
    for s in STRATEGIES.values():
        dst = bytearray(fill)
        s.copy(dst, dst_off, src, src_off, size)
        assert dst == expect, s.id


def test_copy_bounds_and_overlap():
    buf = bytearray(64)
    for s in STRATEGIES.values():
        with pytest.raises(IndexError):
            s.copy(buf, 60, bytearray(8), 0, 8)
        with pytest.raises(IndexError):
            s.copy(bytearray(8), 0, buf, 62, 8)
        with pytest.raises(ValueError):
            s.copy(buf, 0, buf, 4, 16)
        with pytest.raises(TypeError):
            s.copy(b"readonly", 0, buf, 0, 4)
        s.copy(buf, 0, buf, 32, 16)  # disjoint ranges of one buffer are fine


def test_large_copy_releases_gil_and_is_exact():
    src = bytearray(random.Random(1).randbytes(3 << 20))
    for s in STRATEGIES.values():
        dst = bytearray(len(src) + 3)
        s.copy(dst, 3, src, 0, len(src))
        assert dst[3:] == src


def test_element_types():
    assert len(ELEMENT_TYPES) == 7
    assert element_type("int").itemsize == 4
    assert element_type("double") == np.float64
    assert element_type("<i2") == np.int16


@pytest.mark.parametrize("strategy", sorted(STRATEGIES))
def test_put_get_local_round_trip(solo, strategy):
    solo.select_copy_strategy(strategy)
    a = solo.shmalloc(5000)
    payload = random.Random(strategy).randbytes(4999)
    solo.put(0, a + 1, payload)
    assert solo.get_bytes(0, a + 1, 4999) == payload
    out = np.zeros(10, np.int32)
    solo.put(0, a, np.arange(10, dtype=np.int32))
    solo.get(out, 0, a)
    assert list(out) == list(range(10))
    solo.put(0, a, b"")  # zero-length moves are no-ops
    assert solo.get(bytearray(), 0, a) == bytearray()


def test_typed_entry_points_local(solo):
    a = solo.shmalloc(64)
    solo.int_p(a, -5, 0)
    assert solo.int_g(a, 0) == -5 and isinstance(solo.int_g(a, 0), np.intc)
    solo.double_p(a + 8, 2.5, 0)
    assert solo.double_g(a + 8, 0) == 2.5
    solo.longdouble_p(a + 16, np.longdouble(1) / 3, 0)
    assert solo.longdouble_g(a + 16, 0) == np.longdouble(1) / 3
    view = solo.array("short", a + 48, 4)
    view[:] = [1, 2, 3, 4]
    assert solo.short_g(a + 52, 0) == 3
    del view
    with pytest.raises(AttributeError):
        solo.nonsense_g


@pytest.mark.solo(safe=True)
def test_safe_mode_element_checks(solo):
    a = solo.shmalloc(64)
    with pytest.raises(SafeModeError, match="aligned"):
        solo.long_p(a + 4, 1, 0)
    with pytest.raises(SafeModeError):
        solo.int_g(a, 3)
    with pytest.raises(SafeModeError):
        solo.get(bytearray(8), 0, a + (solo.heap.capacity - int(a)))


def test_non_contiguous_rejected(solo):
    a = solo.shmalloc(64)
    with pytest.raises(ValueError):
        solo.put(0, a, np.arange(20, dtype=np.int32)[::2])


def test_typed_round_trip_across_pes(job):
    res = job("elems", 3, {"count": 40})
    assert res.code == 0, res
    assert all(r["bad"] == [] for r in res.results.values()), res.results
