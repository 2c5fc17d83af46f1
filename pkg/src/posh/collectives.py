"""Barrier, broadcast and reduction over one-sided transfers.

Every PE has a collective descriptor at a fixed offset of its segment.  A
collective is a sequence of communication phases ("epochs", numbered the
same way on every PE because every PE runs the same sequence of
collectives).  In each phase a PE publishes where incoming data should
land, pushes its own data to its peers, waits until it received what it
expects and until every peer it deposited a pointer with has consumed it,
then resets its descriptor.

A push may reach a peer that has not entered the phase yet.  The pusher
then initializes the peer's descriptor itself and only leaves a handle to
its own source buffer; the peer copies the data when it enters and bumps
the pusher's access counter.  When several pushers accumulate into a peer
that is still outside the call, the second one allocates a temporary in
the peer's staging area, so the peer's symmetric heap is never touched.
Staging allocations are released before the owning PE leaves the phase.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import layout as L
from . import sync
from .config import BROADCAST_ALGOS, REDUCE_ALGOS, ConfigError, PoshError
from .datamover import DataMover, element_type
from .symheap import SafeModeError, SymAddr, SymmetricHeap

log = logging.getLogger(__name__)

CT_NONE, CT_BARRIER, CT_BROADCAST, CT_REDUCE = 0, 1, 2, 3
CTYPE_NAMES = {CT_NONE: "none", CT_BARRIER: "barrier", CT_BROADCAST: "broadcast", CT_REDUCE: "reduce"}

# what the descriptor's buffer handle currently points at
ST_NONE, ST_LANDING, ST_PENDING, ST_STAGED = 0, 1, 2, 3

STAGING = object()  # landing marker: allocate a temporary in own staging area
STAGING_ALIGN = 64

REDUCE_OPS = {"sum": np.add, "min": np.minimum, "max": np.maximum}

_HANDLE_BITS = 48
_HANDLE_MASK = (1 << _HANDLE_BITS) - 1


class CollectiveError(PoshError):
    pass


class CollectiveMismatch(SafeModeError):
    """Peers disagree on the collective type or buffer size."""


class StagingExhausted(CollectiveError):
    pass


def encode_handle(pe: int, offset: int) -> int:
    return ((pe + 1) << _HANDLE_BITS) | offset


def decode_handle(handle: int) -> tuple[int, int]:
    return (handle >> _HANDLE_BITS) - 1, handle & _HANDLE_MASK


@dataclass(frozen=True)
class Descriptor:
    buf: int
    counter: int
    ctype: int
    in_progress: bool
    size: int
    epoch: int
    done_epoch: int
    state: int
    arrivals: int
    owner_entered: bool

    @classmethod
    def read(cls, buf) -> "Descriptor":
        w = lambda off: sync.atomic_load(buf, off)  # noqa: E731
        return cls(
            buf=w(L.D_BUF),
            counter=w(L.D_COUNTER),
            ctype=w(L.D_CTYPE),
            in_progress=bool(w(L.D_IN_PROGRESS)),
            size=w(L.D_SIZE),
            epoch=w(L.D_EPOCH),
            done_epoch=w(L.D_DONE_EPOCH),
            state=w(L.D_STATE),
            arrivals=w(L.D_ARRIVALS),
            owner_entered=bool(w(L.D_OWNER_ENTERED)),
        )

    def is_reset(self) -> bool:
        return (
            self.ctype == CT_NONE
            and not self.in_progress
            and self.counter == 0
            and self.buf == 0
            and self.state == ST_NONE
            and self.arrivals == 0
        )


def staging_watermark(buf) -> tuple[int, int]:
    """(top, live allocations) of a segment's staging area."""
    return sync.atomic_load(buf, L.H_STAGING_TOP), sync.atomic_load(buf, L.H_STAGING_LIVE)


def binomial_children(vrank: int, npes: int) -> list[int]:
    """Children of relative rank ``vrank``, largest subtree first."""
    kids = []
    k = vrank.bit_length()
    while vrank + (1 << k) < npes:
        kids.append(vrank + (1 << k))
        k += 1
    return kids[::-1]


def binomial_parent(vrank: int) -> int:
    return vrank - (1 << (vrank.bit_length() - 1))


class Collectives:
    def __init__(
        self,
        heap: SymmetricHeap,
        mover: DataMover,
        broadcast_algo: str,
        reduce_algo: str,
    ):
        self.heap = heap
        self.mover = mover
        self.rank = heap.rank
        self.npes = heap.npes
        self.bufs = heap.bufs
        self.own = heap.bufs[heap.rank]
        self.capacity = heap.capacity
        self.safe = heap.safe
        self.watchdog = 10.0 if heap.debug else None
        self._locks = [
            sync.WordLock(b, L.D_LOCK, self.rank, name=f"descriptor lock of PE {r}")
            for r, b in enumerate(self.bufs)
        ]
        self._epoch = 0
        self._in_coll = False
        self._ctype = CT_NONE
        self._size = 0
        self.stats = Counter()
        if broadcast_algo not in BROADCAST_ALGOS:
            raise ConfigError(f"unknown broadcast algorithm {broadcast_algo!r}")
        if reduce_algo not in REDUCE_ALGOS:
            raise ConfigError(f"unknown reduce algorithm {reduce_algo!r}")
        self.broadcast_algo = broadcast_algo
        self.reduce_algo = reduce_algo
        self._bcast_impl = {
            "binomial-tree": self._bcast_binomial,
            "linear-put": self._bcast_linear,
        }[broadcast_algo]
        self._reduce_impl = {
            "linear-gather": self._reduce_linear,
            "recursive-doubling": self._reduce_doubling,
        }[reduce_algo]

    # -- public operations ---------------------------------------------------

    def barrier_all(self):
        self.heap.barrier()

    def broadcast(self, root: int, data: SymAddr, nbytes: int):
        """Copy ``nbytes`` at ``data`` on ``root`` into ``data`` on every PE."""
        if not 0 <= root < self.npes:
            raise CollectiveError(f"root {root} outside 0..{self.npes - 1}")
        if self.safe:
            self.heap.check_range(self.rank, int(data), nbytes)
        with self._collective(CT_BROADCAST, nbytes):
            if self.npes > 1 and nbytes > 0:
                self._bcast_impl(root, int(data), nbytes)

    def reduce(self, op: str, elem_type, src: SymAddr, dst: SymAddr, nelems: int):
        """Element-wise ``op`` over every PE's ``src``; result in every PE's ``dst``."""
        try:
            ufunc = REDUCE_OPS[op]
        except KeyError:
            raise CollectiveError(f"unsupported reduction {op!r}") from None
        dt = element_type(elem_type)
        nbytes = dt.itemsize * nelems
        if self.safe:
            self.heap.check_range(self.rank, int(src), nbytes)
            self.heap.check_range(self.rank, int(dst), nbytes)
        with self._collective(CT_REDUCE, nbytes):
            if nelems == 0:
                return
            if int(src) != int(dst):
                self.mover._copy(self.own, int(dst), self.own, int(src), nbytes)
            if self.npes > 1:
                self._reduce_impl(ufunc, dt, nelems, int(src), int(dst), nbytes)

    def descriptor(self, pe: int | None = None) -> Descriptor:
        return Descriptor.read(self.bufs[self.rank if pe is None else pe])

    # -- staging --------------------------------------------------------------

    def temp_alloc(self, pe: int, nbytes: int) -> int:
        """Temporary allocation in PE ``pe``'s staging area (collectives only)."""
        if not self._in_coll:
            raise CollectiveError("temporary staging allocation outside a collective")
        with self._locks[pe]:
            return self._temp_alloc_locked(self.bufs[pe], nbytes)

    def temp_free(self, pe: int, offset: int):
        if not self._in_coll:
            raise CollectiveError("temporary staging free outside a collective")
        with self._locks[pe]:
            self._temp_free_locked(self.bufs[pe])

    def _temp_alloc_locked(self, buf, nbytes):
        # caller holds the descriptor lock of the segment owning ``buf``
        top, live = staging_watermark(buf)
        size = (nbytes + STAGING_ALIGN - 1) // STAGING_ALIGN * STAGING_ALIGN
        if top + size > L.STAGING_SIZE:
            raise StagingExhausted(
                f"staging area exhausted: {nbytes} bytes requested, {L.STAGING_SIZE - top} free"
            )
        sync.atomic_store(buf, L.H_STAGING_TOP, top + size)
        sync.atomic_store(buf, L.H_STAGING_LIVE, live + 1)
        self.stats["temp_alloc"] += 1
        return self.capacity + top

    def _temp_free_locked(self, buf):
        live = sync.atomic_load(buf, L.H_STAGING_LIVE) - 1
        if live < 0:
            raise CollectiveError("staging free without a matching allocation")
        sync.atomic_store(buf, L.H_STAGING_LIVE, live)
        if live == 0:
            sync.atomic_store(buf, L.H_STAGING_TOP, 0)

    # -- protocol -------------------------------------------------------------

    class _Scope:
        def __init__(self, coll, ctype, nbytes):
            self.coll = coll
            self.ctype = ctype
            self.nbytes = nbytes

        def __enter__(self):
            c = self.coll
            if c._in_coll:
                raise SafeModeError(
                    f"PE {c.rank} entered a {CTYPE_NAMES[self.ctype]} while already in a "
                    f"{CTYPE_NAMES[c._ctype]}"
                )
            c._in_coll = True
            c._ctype = self.ctype
            c._size = self.nbytes

        def __exit__(self, *exc):
            c = self.coll
            c._in_coll = False
            c._ctype = CT_NONE
            return False

    def _collective(self, ctype, nbytes):
        return self._Scope(self, ctype, nbytes)

    def _apply(self, acc, dst_buf, dst_off, src_buf, src_off, nbytes):
        if acc is None:
            self.mover._copy(dst_buf, dst_off, src_buf, src_off, nbytes)
        else:
            ufunc, dt, n = acc
            a = np.frombuffer(dst_buf, dt, n, dst_off)
            b = np.frombuffer(src_buf, dt, n, src_off)
            ufunc(a, b, out=a)
            del a, b

    def _mismatch(self, who, desc):
        if desc.ctype != self._ctype:
            raise CollectiveMismatch(
                f"PE {self.rank} is in a {CTYPE_NAMES[self._ctype]} but PE {who} is in a "
                f"{CTYPE_NAMES.get(desc.ctype, desc.ctype)}"
            )
        if desc.size != self._size:
            raise CollectiveMismatch(
                f"PE {self.rank} moves {self._size} bytes but PE {who} expects {desc.size}"
            )

    def _enter(self, e, expect, landing, acc):
        """Open phase ``e`` on the own descriptor; returns the landing offset."""
        buf = self.own
        lock = self._locks[self.rank]
        lock.acquire()
        try:
            d = Descriptor.read(buf)
            if landing is STAGING:
                landing = self._temp_alloc_locked(buf, self._size) if expect else None
            if d.in_progress and d.epoch == e:
                # a peer reached us first and initialized our descriptor
                self.stats["early_arrival"] += 1
                if self.safe:
                    self._mismatch(decode_handle(d.buf)[0], d)
                if landing is None:
                    raise CollectiveError(f"PE {self.rank} received data it does not expect")
                pe, off = decode_handle(d.buf)
                if d.state == ST_PENDING:
                    self._apply(acc, buf, landing, self.bufs[pe], off, self._size)
                    sync.atomic_fetch_add(self.bufs[pe], L.D_COUNTER, 1)
                elif d.state == ST_STAGED:
                    self._apply(acc, buf, landing, buf, off, self._size)
                    self._temp_free_locked(buf)
                else:
                    raise CollectiveError(f"corrupt descriptor state {d.state} on PE {self.rank}")
            else:
                if d.in_progress:
                    raise CollectiveError(
                        f"PE {self.rank} descriptor still in epoch {d.epoch} at entry of {e}"
                    )
                sync.atomic_store(buf, L.D_EPOCH, e)
                sync.atomic_store(buf, L.D_CTYPE, self._ctype)
                sync.atomic_store(buf, L.D_SIZE, self._size)
                sync.atomic_store(buf, L.D_COUNTER, 0)
                sync.atomic_store(buf, L.D_ARRIVALS, 0)
            if landing is not None:
                sync.atomic_store(buf, L.D_BUF, encode_handle(self.rank, landing))
                sync.atomic_store(buf, L.D_STATE, ST_LANDING)
            else:
                sync.atomic_store(buf, L.D_BUF, 0)
                sync.atomic_store(buf, L.D_STATE, ST_NONE)
            sync.atomic_store(buf, L.D_OWNER_ENTERED, 1)
            sync.atomic_store(buf, L.D_IN_PROGRESS, 1)
        finally:
            lock.release()
        return landing

    def _deliver(self, target, e, src_off, acc) -> int:
        """Push own data at ``src_off`` to ``target`` for phase ``e``.

        Returns 1 if only a handle was deposited (the target will read our
        buffer later and we must wait for it), else 0.
        """
        tbuf = self.bufs[target]
        lock = self._locks[target]
        nbytes = self._size
        backoff = sync.Backoff()
        while True:
            lock.acquire()
            try:
                d = Descriptor.read(tbuf)
                if d.in_progress and d.epoch == e:
                    if self.safe:
                        self._mismatch(target, d)
                    pe, off = decode_handle(d.buf)
                    if d.state == ST_LANDING:
                        self._apply(acc, tbuf, off, self.own, src_off, nbytes)
                        sync.atomic_fetch_add(tbuf, L.D_ARRIVALS, 1)
                        self.stats["direct"] += 1
                        return 0
                    if acc is None:
                        raise CollectiveError(
                            f"second copy into PE {target} in epoch {e} (state {d.state})"
                        )
                    if d.state == ST_PENDING:
                        # target still outside the call: stage the first
                        # contribution in its heap and release that pusher
                        tmp = self._temp_alloc_locked(tbuf, nbytes)
                        self.mover._copy(tbuf, tmp, self.bufs[pe], off, nbytes)
                        sync.atomic_fetch_add(self.bufs[pe], L.D_COUNTER, 1)
                        self._apply(acc, tbuf, tmp, self.own, src_off, nbytes)
                        sync.atomic_store(tbuf, L.D_BUF, encode_handle(target, tmp))
                        sync.atomic_store(tbuf, L.D_STATE, ST_STAGED)
                    elif d.state == ST_STAGED:
                        self._apply(acc, tbuf, off, self.own, src_off, nbytes)
                    else:
                        raise CollectiveError(f"corrupt descriptor state {d.state} on PE {target}")
                    sync.atomic_fetch_add(tbuf, L.D_ARRIVALS, 1)
                    self.stats["staged"] += 1
                    return 0
                if not d.in_progress and d.done_epoch == e - 1:
                    sync.atomic_store(tbuf, L.D_EPOCH, e)
                    sync.atomic_store(tbuf, L.D_CTYPE, self._ctype)
                    sync.atomic_store(tbuf, L.D_SIZE, nbytes)
                    sync.atomic_store(tbuf, L.D_COUNTER, 0)
                    sync.atomic_store(tbuf, L.D_OWNER_ENTERED, 0)
                    sync.atomic_store(tbuf, L.D_BUF, encode_handle(self.rank, src_off))
                    sync.atomic_store(tbuf, L.D_STATE, ST_PENDING)
                    sync.atomic_store(tbuf, L.D_ARRIVALS, 1)
                    sync.atomic_store(tbuf, L.D_PUSHER, self.rank)
                    sync.atomic_store(tbuf, L.D_IN_PROGRESS, 1)
                    self.stats["deposit"] += 1
                    return 1
            finally:
                lock.release()
            # target is still busy with an earlier phase
            if self.safe:
                self._scan_peers(e)
            backoff()

    def _scan_peers(self, e):
        """Safe mode: look for a peer that entered the same phase of another collective."""
        for r, buf in enumerate(self.bufs):
            if r == self.rank:
                continue
            d = Descriptor.read(buf)
            if d.in_progress and d.owner_entered and d.epoch == e:
                self._mismatch(r, d)

    def _wait(self, e, expect, quota):
        own = self.own
        sync.wait_until(
            lambda: sync.atomic_load(own, L.D_ARRIVALS) >= expect
            and sync.atomic_load(own, L.D_COUNTER) >= quota,
            watchdog=self.watchdog,
            what=f"collective epoch {e} ({expect} arrivals, {quota} accesses)",
            check=(lambda: self._scan_peers(e)) if self.safe else None,
        )
        arrivals = sync.atomic_load(own, L.D_ARRIVALS)
        counter = sync.atomic_load(own, L.D_COUNTER)
        if arrivals != expect or counter != quota:
            raise CollectiveError(
                f"PE {self.rank} epoch {e}: {arrivals} arrivals / {counter} accesses, "
                f"expected {expect} / {quota}"
            )

    def _reset(self, e):
        buf = self.own
        with self._locks[self.rank]:
            for off in (
                L.D_BUF,
                L.D_COUNTER,
                L.D_CTYPE,
                L.D_SIZE,
                L.D_STATE,
                L.D_ARRIVALS,
                L.D_OWNER_ENTERED,
                L.D_PUSHER,
            ):
                sync.atomic_store(buf, off, 0)
            sync.atomic_store(buf, L.D_DONE_EPOCH, e)
            sync.atomic_store(buf, L.D_IN_PROGRESS, 0)

    def _phase(self, *, expect=0, landing=None, sends=(), acc=None, recv_first=False, finish=None):
        """Run one communication phase.

        ``sends`` is a list of (target, own source offset); ``acc`` selects
        accumulate-on-delivery (ufunc, dtype, count) instead of copying;
        ``finish(landing)`` runs once everything arrived and was consumed.
        """
        self._epoch += 1
        e = self._epoch
        land = self._enter(e, expect, landing, acc)
        quota = 0
        if recv_first and expect:
            self._wait(e, expect, 0)
        for target, src_off in sends:
            quota += self._deliver(target, e, src_off, acc)
        self._wait(e, expect, quota)
        if finish is not None and land is not None:
            finish(land)
        if landing is STAGING and land is not None:
            with self._locks[self.rank]:
                self._temp_free_locked(self.own)
        self._reset(e)

    # -- algorithms -----------------------------------------------------------

    def _bcast_linear(self, root, off, nbytes):
        if self.rank == root:
            targets = [(root + i) % self.npes for i in range(1, self.npes)]
            self._phase(sends=[(t, off) for t in targets])
        else:
            self._phase(expect=1, landing=off)

    def _bcast_binomial(self, root, off, nbytes):
        v = (self.rank - root) % self.npes
        kids = [((c + root) % self.npes, off) for c in binomial_children(v, self.npes)]
        if v == 0:
            self._phase(sends=kids)
        else:
            self._phase(expect=1, landing=off, sends=kids, recv_first=True)

    def _reduce_linear(self, ufunc, dt, n, src, dst, nbytes):
        acc = (ufunc, dt, n)
        if self.rank == 0:
            self._phase(expect=self.npes - 1, landing=dst, acc=acc)
        else:
            self._phase(sends=[(0, src)], acc=acc)
        self._bcast_impl(0, dst, nbytes)

    def _reduce_doubling(self, ufunc, dt, n, src, dst, nbytes):
        r, npes = self.rank, self.npes
        p2 = 1 << (npes.bit_length() - 1)
        rem = npes - p2

        def merge(land):
            a = np.frombuffer(self.own, dt, n, dst)
            b = np.frombuffer(self.own, dt, n, land)
            ufunc(a, b, out=a)
            del a, b

        # fold the ranks beyond the largest power of two into the low ranks
        if r >= p2:
            self._phase(sends=[(r - p2, dst)])
        elif r < rem:
            self._phase(expect=1, landing=STAGING, finish=merge)
        else:
            self._phase()
        mask = 1
        while mask < p2:
            if r < p2:
                partner = r ^ mask
                self._phase(expect=1, landing=STAGING, sends=[(partner, dst)], finish=merge)
            else:
                self._phase()
            mask <<= 1
        if r < rem:
            self._phase(sends=[(r + p2, dst)])
        elif r >= p2:
            self._phase(expect=1, landing=dst)
        else:
            self._phase()
