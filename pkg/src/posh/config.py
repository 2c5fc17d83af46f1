"""Environment contract between the launcher and the PEs, plus profile flags.

Safe and debug mode are resolved once per process when the runtime starts,
the closest Python gets to compiling the checks out.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

ENV_RANK = "POSH_RANK"
ENV_NPES = "POSH_NPES"
ENV_JOBID = "POSH_JOBID"
ENV_HEAP_SIZE = "POSH_HEAP_SIZE"
ENV_DEBUG = "POSH_DEBUG"
ENV_SAFE = "POSH_SAFE"
ENV_DEBUG_HOLD_RANK = "POSH_DEBUG_HOLD_RANK"
ENV_COLL_ALGO = "POSH_COLL_ALGO"
ENV_COPY = "POSH_COPY"

SEGMENT_BASE = "posh"
DEFAULT_HEAP_SIZE = 64 * 1024 * 1024

BROADCAST_ALGOS = ("binomial-tree", "linear-put")
REDUCE_ALGOS = ("linear-gather", "recursive-doubling")
DEFAULT_BROADCAST = "binomial-tree"
DEFAULT_REDUCE = "linear-gather"


class PoshError(RuntimeError):
    """Base class for runtime errors raised by the library."""


class ConfigError(PoshError):
    pass


class DefaultChoiceWarning(UserWarning):
    """An algorithm or copy strategy fell back to its default."""


def segment_name(jobid: str, rank: int) -> str:
    return f"{SEGMENT_BASE}-{jobid}-{rank}"


def _flag(value: str | None) -> bool:
    return value is not None and value.strip().lower() in ("1", "true", "yes", "on")


def parse_coll_algo(value: str | None) -> tuple[str, str]:
    """Parse ``POSH_COLL_ALGO``.

    Accepts a comma separated list of algorithm names, optionally keyed
    (``broadcast=linear-put,reduce=recursive-doubling``).  Each missing
    choice falls back to the default with a warning.
    """
    bcast = reduce = None
    for item in (value or "").split(","):
        item = item.strip()
        if not item:
            continue
        if "=" in item:
            key, name = (s.strip() for s in item.split("=", 1))
        else:
            key, name = None, item
        if name in BROADCAST_ALGOS and key in (None, "broadcast"):
            bcast = name
        elif name in REDUCE_ALGOS and key in (None, "reduce"):
            reduce = name
        else:
            raise ConfigError(f"unknown collective algorithm {item!r}")
    if bcast is None:
        warnings.warn(
            f"no broadcast algorithm selected, using {DEFAULT_BROADCAST}",
            DefaultChoiceWarning,
            stacklevel=2,
        )
        bcast = DEFAULT_BROADCAST
    if reduce is None:
        warnings.warn(
            f"no reduce algorithm selected, using {DEFAULT_REDUCE}",
            DefaultChoiceWarning,
            stacklevel=2,
        )
        reduce = DEFAULT_REDUCE
    return bcast, reduce


@dataclass
class Config:
    rank: int = 0
    npes: int = 1
    jobid: str = ""
    heap_size: int = DEFAULT_HEAP_SIZE
    debug: bool = False
    safe: bool = False
    debug_hold_rank: int | None = None
    broadcast_algo: str = DEFAULT_BROADCAST
    reduce_algo: str = DEFAULT_REDUCE
    copy_strategy: str | None = None
    attach_timeout: float = 10.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_env(cls, environ=None, **overrides) -> "Config":
        env = os.environ if environ is None else environ
        rank = int(env.get(ENV_RANK, 0))
        npes = int(env.get(ENV_NPES, 1))
        jobid = env.get(ENV_JOBID) or f"solo{os.getpid()}"
        heap = int(env.get(ENV_HEAP_SIZE, DEFAULT_HEAP_SIZE))
        hold = env.get(ENV_DEBUG_HOLD_RANK)
        bcast, reduce = parse_coll_algo(env.get(ENV_COLL_ALGO))
        cfg = cls(
            rank=rank,
            npes=npes,
            jobid=jobid,
            heap_size=heap,
            debug=_flag(env.get(ENV_DEBUG)),
            safe=_flag(env.get(ENV_SAFE)),
            debug_hold_rank=int(hold) if hold not in (None, "") else None,
            broadcast_algo=bcast,
            reduce_algo=reduce,
            copy_strategy=env.get(ENV_COPY) or None,
        )
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config field {key!r}")
            setattr(cfg, key, value)
        if not 0 <= cfg.rank < cfg.npes:
            raise ConfigError(f"rank {cfg.rank} outside 0..{cfg.npes - 1}")
        return cfg
