"""The per-PE runtime object most programs use.

    with posh.init() as pe:
        buf = pe.shmalloc(64)
        pe.put((pe.rank + 1) % pe.npes, buf, b"hello")
        pe.barrier_all()
"""

from __future__ import annotations

from contextlib import contextmanager

from . import sync
from .collectives import Collectives
from .config import Config
from .datamover import DataMover
from .symheap import HeapError, SymAddr, SymmetricHeap


class Runtime:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.heap = SymmetricHeap(cfg)
        try:
            self.mover = DataMover(self.heap, cfg.copy_strategy)
            self.coll = Collectives(self.heap, self.mover, cfg.broadcast_algo, cfg.reduce_algo)
        except BaseException:
            self.heap.abort()
            raise
        self.rank = cfg.rank
        self.npes = cfg.npes
        self._locks = {}

    # symmetric memory
    def shmalloc(self, size: int) -> SymAddr:
        return self.heap.shmalloc(size)

    def shmemalign(self, alignment: int, size: int) -> SymAddr:
        return self.heap.shmemalign(alignment, size)

    def shfree(self, addr: SymAddr):
        self.heap.shfree(addr)

    def register_static(self, label, size, alignment=16) -> SymAddr:
        return self.heap.register_static(label, size, alignment)

    def static(self, label) -> SymAddr:
        return self.heap.lookup_static(label)

    def translate(self, addr: SymAddr, target: int) -> int:
        return self.heap.translate(addr, target)

    # data movement
    def put(self, target, dest, src, nbytes=None):
        self.mover.put(target, dest, src, nbytes)

    def get(self, dest, target, src, nbytes=None):
        return self.mover.get(dest, target, src, nbytes)

    def get_bytes(self, target, src, nbytes) -> bytes:
        return self.mover.get_bytes(target, src, nbytes)

    def put_elem(self, t, target, dest, value):
        self.mover.put_elem(t, target, dest, value)

    def get_elem(self, t, target, src):
        return self.mover.get_elem(t, target, src)

    def array(self, t, addr, count, pe=None):
        return self.mover.array(t, self.rank if pe is None else pe, addr, count)

    def select_copy_strategy(self, strategy_id):
        return self.mover.select_copy_strategy(strategy_id)

    def __getattr__(self, name):
        # typed single-element entry points: int_g, double_p, ...
        if name.endswith(("_g", "_p")):
            return getattr(self.mover, name)
        raise AttributeError(name)

    # collectives
    def barrier_all(self):
        self.coll.barrier_all()

    def broadcast(self, root, data, nbytes):
        self.coll.broadcast(root, data, nbytes)

    def reduce(self, op, elem_type, src, dst, nelems):
        self.coll.reduce(op, elem_type, src, dst, nelems)

    # locks and atomics
    def lock(self, key) -> sync.WordLock:
        """Job-wide named mutex; ``key`` is a string or a SymAddr."""
        if isinstance(key, SymAddr):
            key = f"sym:{key.offset}"
        lk = self._locks.get(key)
        if lk is None:
            lk = self._locks[key] = self.heap.locks.lock(key)
        return lk

    def lock_acquire(self, key):
        self.lock(key).acquire()

    def lock_release(self, key):
        self.lock(key).release()

    def lock_test(self, key) -> bool:
        return self.lock(key).try_acquire()

    def atomic_apply(self, target: int, addr: SymAddr, op: sync.AtomicOp) -> int:
        off = int(addr)
        if self.heap.safe:
            self.heap.check_range(target, off, op.width)
        return sync.apply_op(self.heap.bufs[target], off, op)

    def fetch_add(self, target, addr, value, width=8):
        return self.atomic_apply(target, addr, sync.AtomicOp.fetch_add(value, width))

    def fetch_inc(self, target, addr, width=8):
        return self.atomic_apply(target, addr, sync.AtomicOp.fetch_inc(width))

    def swap(self, target, addr, value, width=8):
        return self.atomic_apply(target, addr, sync.AtomicOp.swap(value, width))

    def compare_swap(self, target, addr, expected, value, width=8):
        return self.atomic_apply(target, addr, sync.AtomicOp.compare_swap(expected, value, width))

    def finalize(self):
        if not self.heap.closed:
            self.heap.finalize()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.finalize()
        else:
            # peers may never reach the final barrier; just drop our segment
            self.heap.abort()
        return False


def init(environ=None, **overrides) -> Runtime:
    """Start this PE from the launcher's environment (plus overrides)."""
    return Runtime(Config.from_env(environ, **overrides))


@contextmanager
def session(environ=None, **overrides):
    rt = init(environ, **overrides)
    with rt:
        yield rt


__all__ = ["Runtime", "init", "session", "HeapError"]
