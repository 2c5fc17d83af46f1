"""One-sided put/get between private buffers and symmetric heaps.

The copy kernel is chosen once (``POSH_COPY`` or :meth:`DataMover.select_copy_strategy`)
and bound as an attribute, so the transfer path never branches on it.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from . import _native
from .config import ConfigError, DefaultChoiceWarning
from .symheap import SafeModeError, SymAddr, SymmetricHeap


class CopyStrategy(NamedTuple):
    id: str
    copy: object  # (dst, dst_off, src, src_off, nbytes) -> None


STRATEGIES = {
    "default": CopyStrategy("default", _native.copy_default),
    "byteloop": CopyStrategy("byteloop", _native.copy_byteloop),
    "wideblock": CopyStrategy("wideblock", _native.copy_wideblock),
}
DEFAULT_STRATEGY = "default"


def get_strategy(strategy_id: str | None) -> CopyStrategy:
    if strategy_id is None:
        warnings.warn(
            f"no copy strategy selected, using {DEFAULT_STRATEGY}",
            DefaultChoiceWarning,
            stacklevel=2,
        )
        strategy_id = DEFAULT_STRATEGY
    try:
        return STRATEGIES[strategy_id]
    except KeyError:
        raise ConfigError(
            f"unknown copy strategy {strategy_id!r}; choose from {sorted(STRATEGIES)}"
        ) from None


# The seven scalar types of the C API, by C name.
ELEMENT_TYPES = {
    "short": np.dtype(np.short),
    "int": np.dtype(np.intc),
    "long": np.dtype("l"),
    "longlong": np.dtype(np.longlong),
    "float": np.dtype(np.single),
    "double": np.dtype(np.double),
    "longdouble": np.dtype(np.longdouble),
}


def element_type(t) -> np.dtype:
    if isinstance(t, str) and t in ELEMENT_TYPES:
        return ELEMENT_TYPES[t]
    return np.dtype(t)


def _byte_view(buf) -> memoryview:
    mv = memoryview(buf)
    if not mv.c_contiguous:
        raise ValueError("transfer buffers must be C-contiguous")
    return mv.cast("B") if mv.format != "B" or mv.ndim != 1 else mv


class DataMover:
    def __init__(self, heap: SymmetricHeap, strategy: str | None = None):
        self.heap = heap
        self.safe = heap.safe
        self.select_copy_strategy(strategy)

    def select_copy_strategy(self, strategy_id: str | None) -> CopyStrategy:
        self.strategy = get_strategy(strategy_id)
        self._copy = self.strategy.copy
        return self.strategy

    def put(self, target: int, dest: SymAddr, src, nbytes: int | None = None):
        """Write ``nbytes`` of private ``src`` into PE ``target``'s heap at ``dest``.

        Complete on return: the bytes are in the target's segment.
        """
        mv = _byte_view(src)
        n = len(mv) if nbytes is None else nbytes
        if n == 0:
            return
        off = int(dest)
        if self.safe:
            self.heap.check_range(target, off, n)
        self._copy(self.heap.bufs[target], off, mv, 0, n)

    def get(self, dest, target: int, src: SymAddr, nbytes: int | None = None):
        """Read ``nbytes`` from PE ``target``'s heap at ``src`` into private ``dest``."""
        mv = _byte_view(dest)
        n = len(mv) if nbytes is None else nbytes
        if n == 0:
            return dest
        off = int(src)
        if self.safe:
            self.heap.check_range(target, off, n)
        self._copy(mv, 0, self.heap.bufs[target], off, n)
        return dest

    def get_bytes(self, target: int, src: SymAddr, nbytes: int) -> bytes:
        out = bytearray(nbytes)
        self.get(out, target, src, nbytes)
        return bytes(out)

    def put_elem(self, t, target: int, dest: SymAddr, value):
        """Single-element put; every typed ``*_p`` entry point lands here."""
        dt = element_type(t)
        off = int(dest)
        if self.safe:
            if off % dt.alignment:
                raise SafeModeError(f"{dest!r} is not aligned for {dt.name}")
            self.heap.check_range(target, off, dt.itemsize)
        np.frombuffer(self.heap.bufs[target], dt, 1, off)[0] = value

    def get_elem(self, t, target: int, src: SymAddr):
        """Single-element get; every typed ``*_g`` entry point lands here."""
        dt = element_type(t)
        off = int(src)
        if self.safe:
            if off % dt.alignment:
                raise SafeModeError(f"{src!r} is not aligned for {dt.name}")
            self.heap.check_range(target, off, dt.itemsize)
        return np.frombuffer(self.heap.bufs[target], dt, 1, off)[0]

    def array(self, t, target: int, addr: SymAddr, count: int) -> np.ndarray:
        """Writable numpy view of ``count`` elements in PE ``target``'s heap."""
        dt = element_type(t)
        if self.safe:
            self.heap.check_range(target, int(addr), dt.itemsize * count)
        return np.frombuffer(self.heap.bufs[target], dt, count, int(addr))


def _make_typed(name):
    def g(self, addr, pe):
        return self.get_elem(name, pe, addr)

    def p(self, addr, value, pe):
        self.put_elem(name, pe, addr, value)

    g.__name__ = f"{name}_g"
    p.__name__ = f"{name}_p"
    g.__doc__ = f"Fetch one {name} from PE ``pe``."
    p.__doc__ = f"Store one {name} into PE ``pe``."
    return g, p


for _name in ELEMENT_TYPES:
    _g, _p = _make_typed(_name)
    setattr(DataMover, _g.__name__, _g)
    setattr(DataMover, _p.__name__, _p)
del _name, _g, _p
