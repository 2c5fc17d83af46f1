"""Median put/get/local-copy bandwidth per strategy, measured on rank 0."""

import statistics

import posh
from posh.bench import run_suite, summarize
from _common import emit, params

p = params()
sizes = p.get("sizes", [1 << 20, 2 << 20, 4 << 20, 8 << 20, 16 << 20])

with posh.init() as pe:
    recs = run_suite(["localcopy", "put", "get"], sizes, reps=p.get("reps", 20), warmup=1, runtime=pe)
    if pe.rank == 0:
        summary = summarize(recs)
        emit(0, {"bandwidth": [[k[0], k[1], k[2], v["bandwidth"]] for k, v in summary.items()]})
    else:
        emit(pe.rank, {})
