"""Random (PE, offset, payload) put/get round-trips checked against a private model."""

import random

import posh
from _common import emit, params

p = params()
seed, rounds, per_round = p.get("seed", 0), p.get("rounds", 50), p.get("per_round", 50)
slice_size = p.get("slice", 16384)

with posh.init() as pe:
    n = pe.npes
    buf = pe.shmalloc(slice_size * n)
    zero = bytes(slice_size * n)
    pe.put(pe.rank, buf, zero)
    pe.barrier_all()
    # model[t][w] = what writer w has put into its slice of PE t's buffer
    model = [[bytearray(slice_size) for _ in range(n)] for _ in range(n)]
    trips = mismatches = 0
    for r in range(rounds):
        for w in range(n):
            rng = random.Random(f"{seed}:{r}:{w}")
            for _ in range(per_round):
                target = rng.randrange(n)
                size = rng.randint(1, 2048)
                off = rng.randrange(slice_size - size + 1)
                payload = rng.randbytes(size)
                model[target][w][off:off + size] = payload
                if w == pe.rank:
                    dest = buf + (w * slice_size + off)
                    pe.put(target, dest, payload)
                    back = pe.get_bytes(target, dest, size)
                    trips += 1
                    mismatches += back != payload
        pe.barrier_all()
        # every slice of my own buffer must match what the writers were modelled to put
        mine = pe.get_bytes(pe.rank, buf, slice_size * n)
        expect = b"".join(bytes(m) for m in model[pe.rank])
        mismatches += mine != expect
        pe.barrier_all()
    emit(pe.rank, {"trips": trips, "mismatches": mismatches})
