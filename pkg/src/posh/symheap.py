"""Symmetric heaps backed by named POSIX shared-memory segments.

Each PE owns one segment named ``posh-<jobid>-<rank>`` and maps every
peer's segment at startup.  Objects are identified by their offset from
the segment base (:class:`SymAddr`); because allocation is collective and
the allocator is deterministic, the k-th allocation lands at the same
offset on every PE, so a peer's copy of an object is simply
``peer_base + offset``.
"""

from __future__ import annotations

import ctypes
import hashlib
import logging
import mmap
import os
import struct
import sys
import time
from collections import OrderedDict
from dataclasses import dataclass

from . import layout as L
from . import sync
from .config import Config, PoshError, segment_name

log = logging.getLogger(__name__)

SHM_DIR = "/dev/shm"

DEFAULT_ALIGN = 16
BLOCK_HEADER = 16
MIN_BLOCK = 32
USED = 1

# safe-mode argument exchange for collective allocation calls
H_REQ_KIND = 112
H_REQ_A = 120
H_REQ_B = 128
REQ_ALLOC, REQ_ALIGN, REQ_FREE, REQ_STATIC = 1, 2, 3, 4

_word = struct.Struct("<q")
_pair = struct.Struct("<qq")


class HeapError(PoshError):
    pass


class OutOfMemory(HeapError):
    pass


class SafeModeError(PoshError):
    """A usage error detected by a safe-mode run-time check."""


class AttachTimeout(HeapError):
    pass


class SegmentCollision(HeapError):
    pass


@dataclass(frozen=True, order=True)
class SymAddr:
    """Offset of a symmetric object from its heap's base."""

    offset: int

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError("negative symmetric offset")

    def __add__(self, nbytes: int) -> "SymAddr":
        return SymAddr(self.offset + int(nbytes))

    def __int__(self):
        return self.offset

    def __repr__(self):
        return f"SymAddr({self.offset:#x})"


def _round_up(n, align):
    return (n + align - 1) // align * align


def shm_path(name: str) -> str:
    return os.path.join(SHM_DIR, name)


def _pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class Segment:
    """One mapped shared-memory object (own or peer)."""

    def __init__(self, name, mm, rank, capacity):
        self.name = name
        self.mm = mm
        self.rank = rank
        self.capacity = capacity
        self.size = len(mm)
        anchor = ctypes.c_char.from_buffer(mm)
        self.base = ctypes.addressof(anchor)
        del anchor

    @classmethod
    def create(cls, name, rank, npes, capacity) -> "Segment":
        path = shm_path(name)
        size = capacity + L.STAGING_SIZE
        for _ in range(2):
            try:
                fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
                break
            except FileExistsError:
                owner = _read_owner(path)
                if _pid_alive(owner):
                    raise SegmentCollision(
                        f"segment {name} already exists and its owner (pid {owner}) is alive"
                    ) from None
                log.info("removing stale segment %s (owner pid %s is gone)", name, owner)
                _unlink_quiet(path)
        else:
            raise SegmentCollision(f"could not create segment {name}")
        try:
            os.ftruncate(fd, size)
            mm = mmap.mmap(fd, size, mmap.MAP_SHARED, mmap.PROT_READ | mmap.PROT_WRITE)
        except BaseException:
            os.close(fd)
            _unlink_quiet(path)
            raise
        os.close(fd)
        seg = cls(name, mm, rank, capacity)
        for off, value in (
            (L.H_ABI, L.ABI_TAG),
            (L.H_CAPACITY, capacity),
            (L.H_OWNER_PID, os.getpid()),
            (L.H_RANK, rank),
            (L.H_NPES, npes),
        ):
            _word.pack_into(mm, off, value)
        _word.pack_into(mm, L.H_MAGIC, L.MAGIC)
        return seg

    @classmethod
    def open(cls, name, rank) -> "Segment | None":
        """Map an existing segment, or None if it is absent or not yet ready."""
        path = shm_path(name)
        try:
            fd = os.open(path, os.O_RDWR)
        except FileNotFoundError:
            return None
        try:
            size = os.fstat(fd).st_size
            if size < L.HEADER_SIZE + L.STAGING_SIZE:
                return None
            mm = mmap.mmap(fd, size, mmap.MAP_SHARED, mmap.PROT_READ | mmap.PROT_WRITE)
        finally:
            os.close(fd)
        if (
            _word.unpack_from(mm, L.H_MAGIC)[0] != L.MAGIC
            or sync.atomic_load(mm, L.H_READY) != 1
        ):
            mm.close()
            return None
        abi = _word.unpack_from(mm, L.H_ABI)[0]
        if abi != L.ABI_TAG:
            mm.close()
            raise HeapError(
                f"segment {name} was created with ABI tag {abi:#x}, this PE is {L.ABI_TAG:#x}"
            )
        capacity = _word.unpack_from(mm, L.H_CAPACITY)[0]
        return cls(name, mm, rank, capacity)

    def word(self, off):
        return sync.atomic_load(self.mm, off)

    def set_word(self, off, value):
        sync.atomic_store(self.mm, off, value)

    def mark_ready(self):
        sync.atomic_store(self.mm, L.H_READY, 1)

    def close(self):
        try:
            self.mm.close()
        except BufferError:
            # a numpy view still references the mapping; the GC will unmap it
            log.debug("segment %s still has exported views at close", self.name)

    def unlink(self):
        _unlink_quiet(shm_path(self.name))


def _read_owner(path) -> int:
    try:
        with open(path, "rb") as f:
            f.seek(L.H_OWNER_PID)
            raw = f.read(8)
    except OSError:
        return 0
    return _word.unpack(raw)[0] if len(raw) == 8 else 0


def _unlink_quiet(path):
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass


def unlink_job_segments(jobid: str) -> list[str]:
    """Remove every segment belonging to ``jobid``; returns the removed names."""
    prefix = segment_name(jobid, "")
    removed = []
    try:
        names = os.listdir(SHM_DIR)
    except FileNotFoundError:
        return removed
    for name in names:
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            _unlink_quiet(shm_path(name))
            removed.append(name)
    return removed


def job_segments(jobid: str) -> list[str]:
    prefix = segment_name(jobid, "")
    try:
        return sorted(
            n for n in os.listdir(SHM_DIR) if n.startswith(prefix) and n[len(prefix):].isdigit()
        )
    except FileNotFoundError:
        return []


def release_hold(jobid: str, rank: int):
    """Clear the debug-hold flag of a PE spinning in its init."""
    seg = Segment.open(segment_name(jobid, rank), rank)
    if seg is None:
        raise HeapError(f"no live segment for job {jobid} rank {rank}")
    seg.set_word(L.H_HOLD, 0)
    seg.close()


class Allocator:
    """First-fit boundary-tag allocator whose state lives in the segment.

    Block header (16 bytes): ``size | USED`` then the previous block's size.
    Blocks tile ``[start, end)`` exactly.  Identical call sequences produce
    identical layouts, which is the whole point.
    """

    def __init__(self, seg: Segment, start: int, end: int, init=False):
        self.mm = seg.mm
        self.start = start
        self.end = end
        if init:
            self._write(start, end - start, False, 0)
            _word.pack_into(self.mm, L.H_ALLOC_START, start)
            _word.pack_into(self.mm, L.H_ALLOC_END, end)
            _word.pack_into(self.mm, L.H_ALLOC_BLOCKS, 0)

    def _read(self, h):
        tag, prev = _pair.unpack_from(self.mm, h)
        return tag & ~USED, bool(tag & USED), prev

    def _write(self, h, size, used, prev):
        _pair.pack_into(self.mm, h, size | (USED if used else 0), prev)

    def _set_prev(self, h, prev):
        if h < self.end:
            _word.pack_into(self.mm, h + 8, prev)

    def _bump_count(self, delta):
        n = _word.unpack_from(self.mm, L.H_ALLOC_BLOCKS)[0]
        _word.pack_into(self.mm, L.H_ALLOC_BLOCKS, n + delta)

    def blocks(self):
        h = self.start
        while h < self.end:
            size, used, _ = self._read(h)
            if size < MIN_BLOCK or h + size > self.end:
                raise HeapError(f"corrupt allocator block at {h:#x}")
            yield h, size, used
            h += size

    def alloc(self, nbytes: int, align: int = DEFAULT_ALIGN) -> int:
        need = _round_up(max(nbytes, 1), DEFAULT_ALIGN) + BLOCK_HEADER
        for h, size, used in self.blocks():
            if used:
                continue
            payload = _round_up(h + BLOCK_HEADER, align)
            while payload - BLOCK_HEADER != h and payload - BLOCK_HEADER - h < MIN_BLOCK:
                payload += align
            bh = payload - BLOCK_HEADER
            if bh + need > h + size:
                continue
            _, _, prev = self._read(h)
            end = h + size
            if bh > h:
                self._write(h, bh - h, False, prev)
                prev = bh - h
            rest = end - (bh + need)
            if rest >= MIN_BLOCK:
                self._write(bh, need, True, prev)
                self._write(bh + need, rest, False, need)
                self._set_prev(end, rest)
            else:
                self._write(bh, end - bh, True, prev)
                self._set_prev(end, end - bh)
            self._bump_count(1)
            return payload
        raise OutOfMemory(f"symmetric heap exhausted allocating {nbytes} bytes (align {align})")

    def is_block(self, payload: int) -> bool:
        return any(h + BLOCK_HEADER == payload for h, _, _ in self.blocks())

    def free(self, payload: int):
        h = payload - BLOCK_HEADER
        if h < self.start or h >= self.end:
            raise HeapError(f"free of {payload:#x} outside the heap")
        size, used, prev = self._read(h)
        if not used:
            raise HeapError(f"double free of {payload:#x}")
        nxt = h + size
        if nxt < self.end:
            nsize, nused, _ = self._read(nxt)
            if not nused:
                size += nsize
        if prev and h - prev >= self.start:
            psize, pused, pprev = self._read(h - prev)
            if not pused:
                h, size, prev = h - prev, psize + size, pprev
        self._write(h, size, False, prev)
        self._set_prev(h + size, size)
        self._bump_count(-1)

    def block_size(self, payload: int) -> int:
        h = payload - BLOCK_HEADER
        size, _, _ = self._read(h)
        return size - BLOCK_HEADER

    def live_blocks(self) -> int:
        return _word.unpack_from(self.mm, L.H_ALLOC_BLOCKS)[0]

    def digest(self) -> str:
        """Hash of the block layout, comparable across PEs."""
        h = hashlib.sha256()
        for block in self.blocks():
            h.update(_pair.pack(block[0], block[1] | int(block[2])))
        return h.hexdigest()


@dataclass(frozen=True)
class StaticEntry:
    label: str
    size: int
    alignment: int
    addr: SymAddr


_active = None


class SymmetricHeap:
    """The local PE's view: its own segment, the table of peers, allocation."""

    def __init__(self, cfg: Config):
        global _active
        if _active is not None:
            raise HeapError("symmetric heap already initialized in this process")
        if cfg.heap_size < L.HEADER_SIZE + L.PAGE:
            raise HeapError(
                f"heap capacity {cfg.heap_size} below minimum {L.HEADER_SIZE + L.PAGE}"
            )
        if cfg.heap_size % L.PAGE:
            raise HeapError(f"heap capacity {cfg.heap_size} is not a multiple of {L.PAGE}")
        self.cfg = cfg
        self.rank = cfg.rank
        self.npes = cfg.npes
        self.capacity = cfg.heap_size
        self.safe = cfg.safe
        self.debug = cfg.debug
        self.jobid = cfg.jobid
        self._barrier_epoch = 0
        self._init_epoch = True
        self._statics: OrderedDict[str, StaticEntry] = OrderedDict()
        self.closed = False

        self.segment = Segment.create(
            segment_name(cfg.jobid, cfg.rank), cfg.rank, cfg.npes, cfg.heap_size
        )
        try:
            self.allocator = Allocator(self.segment, L.HEADER_SIZE, self.capacity, init=True)
            self.alloc_lock = sync.WordLock(
                self.segment.mm, L.H_ALLOC_LOCK, self.rank, name="allocator lock"
            )
            self.segment.mark_ready()
            if cfg.debug_hold_rank == cfg.rank:
                self._debug_hold()
            self.table = [None] * self.npes
            for r in range(self.npes):
                self.attach_remote(r)
            self.bufs = [seg.mm for seg in self.table]
            self.locks = sync.LockTable(self.bufs[0], self.rank)
            _active = self
            self.barrier()
        except BaseException:
            _active = None
            self._teardown()
            raise

    # -- init helpers -------------------------------------------------------

    def _debug_hold(self):
        self.segment.set_word(L.H_HOLD, 1)
        print(
            f"posh: rank {self.rank} pid {os.getpid()} held for debugger; "
            f"run `posh-release {self.jobid} {self.rank}` to continue",
            file=sys.stderr,
            flush=True,
        )
        sync.wait_until(lambda: self.segment.word(L.H_HOLD) == 0, what="debug hold release")

    def attach_remote(self, rank: int) -> Segment:
        """Map PE ``rank``'s segment, waiting for it to appear if needed.

        Attachments are cached in the rank table; a second call returns the
        same object and the own rank never opens anything.
        """
        if not 0 <= rank < self.npes:
            raise HeapError(f"rank {rank} outside 0..{self.npes - 1}")
        seg = self.table[rank]
        if seg is not None:
            return seg
        if rank == self.rank:
            seg = self.segment
        else:
            name = segment_name(self.jobid, rank)
            deadline = time.monotonic() + self.cfg.attach_timeout
            delay = 0.001
            while True:
                seg = Segment.open(name, rank)
                if seg is not None:
                    break
                if time.monotonic() >= deadline:
                    raise AttachTimeout(
                        f"PE {rank} never created segment {name} "
                        f"(waited {self.cfg.attach_timeout:g}s)"
                    )
                time.sleep(min(delay, max(0.0, deadline - time.monotonic())))
                delay = min(delay * 2, 0.1)
            if seg.capacity != self.capacity:
                seg.close()
                raise HeapError(
                    f"PE {rank} heap capacity {seg.capacity} differs from ours ({self.capacity})"
                )
        self.table[rank] = seg
        return seg

    # -- barrier ------------------------------------------------------------

    def barrier(self):
        self._barrier_epoch += 1
        sync.dissemination_barrier(
            self.bufs, self.rank, self._barrier_epoch, watchdog=10.0 if self.debug else None
        )

    # -- collective allocation ---------------------------------------------

    def _check_symmetric(self, kind, a, b):
        """Safe mode: verify every PE passed the same arguments."""
        seg = self.segment
        seg.set_word(H_REQ_KIND, kind)
        seg.set_word(H_REQ_A, a)
        seg.set_word(H_REQ_B, b)
        self.barrier()
        mine = (kind, a, b)
        for r, buf in enumerate(self.bufs):
            theirs = tuple(sync.atomic_load(buf, off) for off in (H_REQ_KIND, H_REQ_A, H_REQ_B))
            if theirs != mine:
                raise SafeModeError(
                    f"symmetric call mismatch: PE {self.rank} passed {mine}, PE {r} passed {theirs}"
                )

    def _alloc(self, size, align, kind):
        if size <= 0:
            raise HeapError(f"symmetric allocation size must be positive, got {size}")
        if align <= 0 or align & (align - 1):
            raise HeapError(f"alignment {align} is not a power of two")
        if self.safe:
            self._check_symmetric(kind, size, align)
        with self.alloc_lock:
            off = self.allocator.alloc(size, max(align, DEFAULT_ALIGN))
        self.barrier()
        return SymAddr(off)

    def shmalloc(self, size: int) -> SymAddr:
        """Collective allocation of ``size`` bytes; barrier-terminated."""
        self._init_epoch = False
        return self._alloc(size, DEFAULT_ALIGN, REQ_ALLOC)

    def shmemalign(self, alignment: int, size: int) -> SymAddr:
        self._init_epoch = False
        return self._alloc(size, alignment, REQ_ALIGN)

    def shfree(self, addr: SymAddr):
        off = int(addr)
        if self.safe:
            self._check_symmetric(REQ_FREE, off, 0)
            with self.alloc_lock:
                if not self.allocator.is_block(off):
                    raise SafeModeError(f"shfree of {addr!r}, which is not an allocated block")
        if any(e.addr.offset == off for e in self._statics.values()):
            raise HeapError(f"{addr!r} is a registered static object; it is released at finalize")
        with self.alloc_lock:
            try:
                self.allocator.free(off)
            except HeapError as exc:
                if self.safe:
                    raise SafeModeError(str(exc)) from None
                raise
        self.barrier()

    def register_static(self, label: str, size: int, alignment: int = DEFAULT_ALIGN) -> SymAddr:
        """Place a global object on the heap during startup.

        Must run before the first ordinary allocation, identically on all
        PEs.  The object is released automatically by :meth:`finalize`.
        """
        if not self._init_epoch:
            raise HeapError("register_static is only allowed before the first shmalloc")
        if label in self._statics:
            raise HeapError(f"static object {label!r} already registered")
        addr = self._alloc(size, alignment, REQ_STATIC)
        self._statics[label] = StaticEntry(label, size, alignment, addr)
        return addr

    def lookup_static(self, label: str) -> SymAddr:
        try:
            return self._statics[label].addr
        except KeyError:
            raise HeapError(f"no static object named {label!r}") from None

    @property
    def statics(self):
        return list(self._statics.values())

    # -- addressing ---------------------------------------------------------

    def translate(self, addr: SymAddr, target: int) -> int:
        """Process-local address of ``addr`` inside PE ``target``'s mapping."""
        off = int(addr)
        if self.safe and not 0 <= off < self.capacity:
            raise SafeModeError(f"{addr!r} outside heap capacity {self.capacity}")
        return self.table[target].base + off

    def local_address(self, addr: SymAddr) -> int:
        return self.segment.base + int(addr)

    def check_range(self, target: int, off: int, nbytes: int):
        if not 0 <= target < self.npes:
            raise SafeModeError(f"PE {target} outside 0..{self.npes - 1}")
        if off < L.HEADER_SIZE or off + nbytes > self.capacity:
            raise SafeModeError(
                f"access [{off:#x}, {off + nbytes:#x}) outside PE {target}'s heap "
                f"[{L.HEADER_SIZE:#x}, {self.capacity:#x})"
            )

    @property
    def usable_bytes(self) -> int:
        return self.capacity - L.HEADER_SIZE

    def allocator_digest(self) -> str:
        with self.alloc_lock:
            return self.allocator.digest()

    # -- teardown -----------------------------------------------------------

    def _teardown(self):
        for seg in getattr(self, "table", None) or ():
            if seg is not None and seg is not self.segment:
                seg.close()
        seg = getattr(self, "segment", None)
        if seg is not None:
            seg.close()
            seg.unlink()

    def abort(self):
        """Drop mappings and our segment without synchronizing with peers."""
        global _active
        if self.closed:
            return
        self.closed = True
        self.bufs = []
        self.locks = None
        self._teardown()
        _active = None

    def finalize(self):
        global _active
        if self.closed:
            return
        self.barrier()
        with self.alloc_lock:
            for entry in reversed(self._statics.values()):
                self.allocator.free(entry.addr.offset)
        self._statics.clear()
        self.closed = True
        self.bufs = []
        self.locks = None
        self._teardown()
        _active = None
