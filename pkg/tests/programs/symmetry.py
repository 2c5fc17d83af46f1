"""Randomized symmetric alloc/free scripts; every PE runs the same scripts."""

import random

import posh
from _common import emit, params

p = params()
seed, scripts, ops = p.get("seed", 0), p.get("scripts", 200), p.get("ops", 40)

with posh.init() as pe:
    offsets, digests, overlaps = [], [], 0
    for s in range(scripts):
        rng = random.Random(seed * 1_000_003 + s)
        live = {}  # offset -> size
        seq = []
        for _ in range(ops):
            roll = rng.random()
            if live and roll < 0.35:
                off = rng.choice(sorted(live))
                pe.shfree(posh.SymAddr(off))
                del live[off]
                seq.append(("free", off))
                continue
            size = rng.choice([rng.randint(1, 256), rng.randint(257, 8192), rng.randint(1, 65536)])
            if roll < 0.55:
                align = 1 << rng.randint(3, 12)
                a = pe.shmemalign(align, size)
                if int(a) % align:
                    overlaps += 1
            else:
                a = pe.shmalloc(size)
            off = int(a)
            for o, n in live.items():
                if off < o + n and o < off + size:
                    overlaps += 1
            live[off] = size
            seq.append(("alloc", off))
        for off in sorted(live):
            pe.shfree(posh.SymAddr(off))
        offsets.append(seq)
        digests.append(pe.heap.allocator_digest())
    emit(pe.rank, {"offsets": offsets, "digests": digests, "overlaps": overlaps})
