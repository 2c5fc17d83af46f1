"""Cross-process synchronization over words in the shared segments.

Everything here is built from the native atomics: a spin lock on a single
word, a table of named locks in rank 0's header, integer read-modify-write
operations on symmetric addresses, and the dissemination barrier whose
counters live in every header.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass

from . import _native
from . import layout as L
from .config import PoshError

log = logging.getLogger(__name__)

atomic_load = _native.atomic_load
atomic_store = _native.atomic_store
atomic_fetch_add = _native.atomic_fetch_add
atomic_exchange = _native.atomic_exchange
atomic_compare_exchange = _native.atomic_compare_exchange


class SyncError(PoshError):
    pass


class WaitTimeout(SyncError):
    pass


class Backoff:
    """Yield a few times, then sleep with exponential growth up to ``cap``.

    Yielding first keeps handoffs fast when peers are runnable; sleeping
    afterwards keeps a single-core host from being eaten by spinners.
    """

    __slots__ = ("spins", "delay", "cap", "_n")

    def __init__(self, spins=16, delay=20e-6, cap=1e-3):
        self.spins = spins
        self.delay = delay
        self.cap = cap
        self._n = 0

    def __call__(self):
        if self._n < self.spins:
            self._n += 1
            os.sched_yield()
            return
        time.sleep(self.delay)
        self.delay = min(self.delay * 2, self.cap)

    def reset(self):
        self._n = 0


def wait_until(pred, timeout=None, watchdog=None, what="condition", check=None):
    """Block until ``pred()`` is true.

    ``watchdog`` (debug mode) logs once if the wait exceeds that many
    seconds; ``check`` is called on every slow-path iteration and may raise.
    """
    if pred():
        return
    backoff = Backoff()
    start = time.monotonic()
    warned = False
    while not pred():
        if check is not None:
            check()
        if timeout is not None or watchdog is not None:
            waited = time.monotonic() - start
            if timeout is not None and waited > timeout:
                raise WaitTimeout(f"timed out after {timeout:.3f}s waiting for {what}")
            if watchdog is not None and not warned and waited > watchdog:
                log.warning("pid %d still waiting for %s after %.1fs", os.getpid(), what, waited)
                warned = True
        backoff()


class WordLock:
    """Non-reentrant spin lock on one 8-byte word: 0 free, ``rank + 1`` held."""

    def __init__(self, buf, offset, rank, name="lock"):
        self.buf = buf
        self.offset = offset
        self.token = rank + 1
        self.name = name

    def acquire(self):
        prev = atomic_compare_exchange(self.buf, self.offset, 0, self.token)
        if prev == 0:
            return
        if prev == self.token:
            raise SyncError(f"{self.name}: already held by this PE (locks are not reentrant)")
        backoff = Backoff(spins=4, delay=5e-6, cap=5e-4)
        while True:
            backoff()
            if atomic_compare_exchange(self.buf, self.offset, 0, self.token) == 0:
                return

    def try_acquire(self) -> bool:
        prev = atomic_compare_exchange(self.buf, self.offset, 0, self.token)
        if prev == self.token:
            raise SyncError(f"{self.name}: already held by this PE (locks are not reentrant)")
        return prev == 0

    def release(self):
        prev = atomic_compare_exchange(self.buf, self.offset, self.token, 0)
        if prev != self.token:
            raise SyncError(
                f"{self.name}: release by non-holder (held by "
                f"{'nobody' if prev == 0 else f'PE {prev - 1}'})"
            )

    def holder(self):
        """Rank of the current holder, or None."""
        word = atomic_load(self.buf, self.offset)
        return None if word == 0 else word - 1

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False


def key_hash(key: str) -> int:
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    # top bit cleared so the value fits a signed 64-bit word; never zero
    return (int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF) or 1


class LockTable:
    """Named mutexes living in rank 0's header.

    Every PE derives the same slot from the same name, so equal names give
    mutual exclusion across the job.  Slots are claimed with a CAS on the
    key-hash word and are never recycled.
    """

    def __init__(self, home_buf, rank):
        self.buf = home_buf
        self.rank = rank
        self._slots = {}

    def _slot(self, key: str) -> int:
        slot = self._slots.get(key)
        if slot is not None:
            return slot
        h = key_hash(key)
        start = h % L.LOCK_SLOTS
        for i in range(L.LOCK_SLOTS):
            idx = (start + i) % L.LOCK_SLOTS
            off = L.H_LOCKS + idx * L.LOCK_SLOT_SIZE
            prev = atomic_compare_exchange(self.buf, off, 0, h)
            if prev in (0, h):
                self._slots[key] = off + L.WORD
                return off + L.WORD
        raise SyncError(f"named lock table full ({L.LOCK_SLOTS} keys)")

    def lock(self, key: str) -> WordLock:
        return WordLock(self.buf, self._slot(key), self.rank, name=f"lock {key!r}")


# ---------------------------------------------------------------------------
# integer read-modify-write


@dataclass(frozen=True)
class AtomicOp:
    """Descriptor for one integer read-modify-write."""

    kind: str
    value: int = 0
    expected: int = 0
    width: int = 8

    KINDS = ("swap", "cswap", "fadd", "finc", "fetch")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unsupported atomic op {self.kind!r}")
        if self.width not in (4, 8):
            raise ValueError(f"unsupported atomic width {self.width}")

    @classmethod
    def swap(cls, value, width=8):
        return cls("swap", value=value, width=width)

    @classmethod
    def compare_swap(cls, expected, value, width=8):
        return cls("cswap", value=value, expected=expected, width=width)

    @classmethod
    def fetch_add(cls, value, width=8):
        return cls("fadd", value=value, width=width)

    @classmethod
    def fetch_inc(cls, width=8):
        return cls("finc", width=width)


def apply_op(buf, offset: int, op: AtomicOp) -> int:
    """Run ``op`` atomically at ``offset`` of ``buf`` and return the prior value."""
    if offset % op.width:
        raise SyncError(f"offset {offset} not aligned for a {op.width}-byte atomic")
    kind = op.kind
    if kind == "fadd":
        return atomic_fetch_add(buf, offset, op.value, op.width)
    if kind == "finc":
        return atomic_fetch_add(buf, offset, 1, op.width)
    if kind == "swap":
        return atomic_exchange(buf, offset, op.value, op.width)
    if kind == "cswap":
        return atomic_compare_exchange(buf, offset, op.expected, op.value, op.width)
    return atomic_load(buf, offset, op.width)


# ---------------------------------------------------------------------------
# barrier


def barrier_rounds(npes: int) -> int:
    return max(0, (npes - 1).bit_length())


def dissemination_barrier(bufs, rank: int, epoch: int, watchdog=None):
    """Barrier number ``epoch`` (1-based) across the segments in ``bufs``.

    Round k: bump the round-k counter of PE ``rank + 2**k`` and wait for our
    own round-k counter to reach ``epoch``.  Counters only grow, so a fast
    PE already signalling the next barrier cannot be confused with this one
    (the sense bit of a sense-reversing barrier, unrolled into a count).
    """
    npes = len(bufs)
    own = bufs[rank]
    for k in range(barrier_rounds(npes)):
        partner = (rank + (1 << k)) % npes
        cell = L.H_BARRIER + k * L.WORD
        atomic_fetch_add(bufs[partner], cell, 1)
        wait_until(
            lambda: atomic_load(own, cell) >= epoch,
            watchdog=watchdog,
            what=f"barrier {epoch} round {k}",
        )
