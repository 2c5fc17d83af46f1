"""Barrier entry/exit timestamps under random per-PE jitter."""

import random
import time

import posh
from _common import emit, params

p = params()
seed, count, jitter = p.get("seed", 0), p.get("count", 1000), p.get("jitter_us", 300)

with posh.init() as pe:
    rng = random.Random(seed * 7919 + pe.rank)
    entries, exits = [], []
    clock = time.monotonic_ns
    for _ in range(count):
        roll = rng.random()
        if roll < 0.25:
            time.sleep(rng.uniform(0, jitter) * 1e-6)
        elif roll < 0.5:
            stop = clock() + rng.randint(0, jitter * 100)
            while clock() < stop:
                pass
        entries.append(clock())
        pe.barrier_all()
        exits.append(clock())
    emit(pe.rank, {"entries": entries, "exits": exits})
