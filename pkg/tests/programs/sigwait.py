"""Log every relayed signal with a timestamp; leave on the first terminating one."""

import json
import os
import signal
import sys
import time

import posh
from _common import emit, params

p = params()
out = os.environ["POSH_TEST_OUT"]
pe = posh.init()
log_path = os.path.join(out, f"sig-{pe.rank}.log")


def handler(sig, _frame):
    with open(log_path, "a") as f:
        f.write(json.dumps({"sig": sig, "t": time.time()}) + "\n")
    if sig in (signal.SIGINT, signal.SIGTERM):
        sys.exit(p.get("exit_code", 0))


for s in (signal.SIGINT, signal.SIGTERM, signal.SIGUSR1):
    signal.signal(s, handler)
pe.barrier_all()
emit(pe.rank, {"pid": os.getpid()})
if p.get("in_barrier") and pe.rank != 0:
    # sit inside a barrier rank 0 never joins
    pe.barrier_all()
while True:
    time.sleep(0.01)
