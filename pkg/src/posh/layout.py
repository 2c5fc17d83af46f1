"""Byte layout of a PE's shared segment.

    [0, HEADER_SIZE)               control header (see offsets below)
    [HEADER_SIZE, capacity)        symmetric heap managed by the allocator
    [capacity, capacity+STAGING)   staging area for collective temporaries

Every field is a naturally aligned 8-byte word so it can be driven by the
native atomics.  The layout is identical in every segment, which is what
lets a PE find a peer's descriptor or barrier cells without asking.
"""

import struct
import sys

PAGE = 4096
HEADER_SIZE = 16 * 1024
STAGING_SIZE = 1024 * 1024
WORD = 8

MAGIC = 0x504F53484845_4150  # "POSHHEAP"
ABI_TAG = (struct.calcsize("P") << 8) | (1 if sys.byteorder == "little" else 2)

# segment identity
H_MAGIC = 0
H_ABI = 8
H_CAPACITY = 16
H_OWNER_PID = 24
H_READY = 32
H_RANK = 40
H_NPES = 48
H_HOLD = 56

# allocator
H_ALLOC_LOCK = 64
H_ALLOC_START = 72
H_ALLOC_END = 80
H_ALLOC_BLOCKS = 88
H_STAGING_TOP = 96
H_STAGING_LIVE = 104

# dissemination barrier: one monotonic counter per round
H_BARRIER = 256
BARRIER_ROUNDS = 32

# collective descriptor
H_DESC = 1024
D_LOCK = H_DESC + 0
D_BUF = H_DESC + 8
D_COUNTER = H_DESC + 16
D_CTYPE = H_DESC + 24
D_IN_PROGRESS = H_DESC + 32
D_SIZE = H_DESC + 40
D_EPOCH = H_DESC + 48
D_DONE_EPOCH = H_DESC + 56
D_STATE = H_DESC + 64
D_ARRIVALS = H_DESC + 72
D_OWNER_ENTERED = H_DESC + 80
D_PUSHER = H_DESC + 88
DESC_SIZE = 96

# named lock table (used in rank 0's segment): (key hash, lock word) pairs
H_LOCKS = 2048
LOCK_SLOTS = 256
LOCK_SLOT_SIZE = 16

assert H_LOCKS + LOCK_SLOTS * LOCK_SLOT_SIZE <= HEADER_SIZE
assert H_BARRIER + BARRIER_ROUNDS * WORD <= H_DESC
