"""posh: an OpenSHMEM-style symmetric heap runtime over POSIX shared memory."""

from .config import Config, PoshError
from .runtime import Runtime, init, session
from .symheap import SafeModeError, SymAddr
from .sync import AtomicOp

__all__ = ["AtomicOp", "Config", "PoshError", "Runtime", "SafeModeError", "SymAddr", "init", "session"]
