import os
import sys

import posh
from _common import emit, params

p = params()
with posh.init() as pe:
    print(f"hello from {pe.rank}", flush=True)
    if p.get("stderr"):
        print(f"complaint from {pe.rank}", file=sys.stderr, flush=True)
    env = {k: os.environ.get(k) for k in ("POSH_RANK", "POSH_NPES", "POSH_JOBID")}
    emit(pe.rank, {"rank": pe.rank, "npes": pe.npes, "jobid": pe.cfg.jobid, "env": env})
