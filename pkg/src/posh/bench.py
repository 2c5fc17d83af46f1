"""Latency/bandwidth micro-benchmarks for copy strategies and put/get.

Every (kind, strategy, size) group runs ``warmup`` discarded rounds and
then ``reps`` timed ones.  Buffers below :data:`BANDWIDTH_THRESHOLD` are
latency measurements: a loop of :data:`LATENCY_LOOP` operations is timed
and divided, because one small copy is below what the clock resolves.
Larger buffers are timed one operation per repetition and also reported
as bandwidth.

put/get kinds need a two-PE job: PE 0 measures against PE 1's heap while
PE 1 idles in a barrier.  The CLI relaunches itself under the launcher
when started outside a job.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import sys
import time
from dataclasses import dataclass
from itertools import groupby

from . import config as C
from .datamover import STRATEGIES

KINDS = ("localcopy", "put", "get")
BANDWIDTH_THRESHOLD = 64 * 1024
LATENCY_LOOP = 1000
LATENCY_SIZES = [8]
BANDWIDTH_SIZES = [1 << k for k in range(16, 25)]  # 64 KiB .. 16 MiB
CSV_HEADER = ["kind", "strategy", "nbytes", "rep", "elapsed_ns", "bandwidth_gbps"]


class BenchError(C.PoshError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    kind: str
    strategy: str
    nbytes: int
    rep: int
    elapsed_ns: float
    bandwidth_gbps: float | None = None

    @classmethod
    def make(cls, kind, strategy, nbytes, rep, elapsed_ns):
        if elapsed_ns <= 0:
            raise BenchError(f"non-positive elapsed time {elapsed_ns} for {kind}/{nbytes}")
        bw = nbytes * 8 / elapsed_ns if nbytes >= BANDWIDTH_THRESHOLD else None
        return cls(kind, strategy, nbytes, rep, elapsed_ns, bw)


def check_clock():
    info = time.get_clock_info("perf_counter")
    if info.resolution > 1e-6:
        raise BenchError(f"perf_counter resolution {info.resolution}s is too coarse")
    return info


def _time_op(op, nbytes):
    clock = time.perf_counter_ns
    if nbytes < BANDWIDTH_THRESHOLD:
        t0 = clock()
        for _ in range(LATENCY_LOOP):
            op()
        return (clock() - t0) / LATENCY_LOOP
    t0 = clock()
    op()
    return float(clock() - t0)


def _payload(n):
    return bytearray(os.urandom(n))


def run_suite(kinds=KINDS, sizes=None, reps=20, warmup=1, strategies=None, runtime=None):
    """Run the benchmark groups; returns the records measured by this PE.

    For each (strategy, size) the requested kinds are interleaved rep by
    rep, so a transient slowdown of the host hits local copy and put/get
    alike instead of skewing whichever kind happened to be running.

    With put/get kinds this is collective over ``runtime`` (npes >= 2) and
    only PE 0 returns records.
    """
    check_clock()
    sizes = sorted(sizes or LATENCY_SIZES + BANDWIDTH_SIZES)
    strategies = list(strategies or STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise BenchError(f"unknown copy strategy {s!r}")
    for k in kinds:
        if k not in KINDS:
            raise BenchError(f"unknown benchmark kind {k!r}")
    kinds = [k for k in KINDS if k in kinds]
    remote = any(k != "localcopy" for k in kinds)
    if remote and (runtime is None or runtime.npes < 2):
        raise BenchError("put/get benchmarks need a runtime with at least two PEs")
    measuring = runtime is None or runtime.rank == 0
    heap_buf = runtime.shmalloc(max(sizes)) if remote else None
    records = []

    for strategy in strategies:
        copy = STRATEGIES[strategy].copy
        if remote:
            runtime.select_copy_strategy(strategy)
        for n in sizes:
            if remote:
                runtime.barrier_all()
            if measuring:
                src = _payload(n)
                local_dst, get_dst = bytearray(n), bytearray(n)
                ops = {
                    "localcopy": lambda: copy(local_dst, 0, src, 0, n),
                    "put": lambda: runtime.put(1, heap_buf, src, n),
                    "get": lambda: runtime.get(get_dst, 1, heap_buf, n),
                }
                if remote:
                    runtime.put(1, heap_buf, src, n)
                for kind in kinds:
                    for _ in range(warmup):
                        _time_op(ops[kind], n)
                for rep in range(reps):
                    for kind in kinds:
                        records.append(
                            BenchRecord.make(kind, strategy, n, rep, _time_op(ops[kind], n))
                        )
                for kind, dst in (("localcopy", local_dst), ("get", get_dst)):
                    if kind in kinds and dst != src:
                        raise BenchError(f"{strategy} {kind} of {n} bytes corrupted data")
            if remote:
                runtime.barrier_all()
    if remote:
        runtime.shfree(heap_buf)
    return records


# -- summaries and serialization --------------------------------------------------


def summarize(records):
    """{(kind, strategy, nbytes): {"median": ns, "min": ns, "bandwidth": Gb/s or None}}"""
    out = {}
    key = lambda r: (r.kind, r.strategy, r.nbytes)  # noqa: E731
    for k, group in groupby(sorted(records, key=key), key=key):
        times = [r.elapsed_ns for r in group]
        med = statistics.median(times)
        out[k] = {
            "median": med,
            "min": min(times),
            "bandwidth": k[2] * 8 / med if k[2] >= BANDWIDTH_THRESHOLD else None,
            "n": len(times),
        }
    return out


def _fmt_row(label, values, best):
    cells = []
    for v in values:
        if v is None:
            cells.append("-")
        elif v == best:
            cells.append(f"*{v:.2f}*")
        else:
            cells.append(f"{v:.2f}")
    return [label, *cells]


def _render(title, header, rows):
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = [title]
    lines.append(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("-+-".join("-" * w for w in widths))
    for r in rows:
        lines.append(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def emit_table(records) -> str:
    """Latency (ns) and bandwidth (Gb/s) medians per strategy; best marked *x*."""
    summary = summarize(records)
    strategies = sorted({k[1] for k in summary}, key=lambda s: list(STRATEGIES).index(s)
                        if s in STRATEGIES else len(STRATEGIES))
    kinds = [k for k in KINDS if any(key[0] == k for key in summary)]
    lat_sizes = sorted({k[2] for k in summary if k[2] < BANDWIDTH_THRESHOLD})
    bw_sizes = sorted({k[2] for k in summary if k[2] >= BANDWIDTH_THRESHOLD})

    lat_rows = []
    for kind in kinds:
        for n in lat_sizes:
            vals = [summary.get((kind, s, n), {}).get("median") for s in strategies]
            present = [v for v in vals if v is not None]
            if present:
                lat_rows.append(_fmt_row(f"{kind} {n}B", vals, min(present)))
    bw_rows = []
    for kind in kinds:
        for n in bw_sizes:
            vals = [summary.get((kind, s, n), {}).get("bandwidth") for s in strategies]
            present = [v for v in vals if v is not None]
            if present:
                bw_rows.append(_fmt_row(f"{kind} {_human(n)}", vals, max(present)))

    parts = []
    if lat_rows:
        parts.append(_render("Latency (ns, median)", ["", *strategies], lat_rows))
    if bw_rows:
        parts.append(_render("Bandwidth (Gb/s, median)", ["", *strategies], bw_rows))
    return "\n\n".join(parts) + "\n"


def _human(n):
    for unit, scale in (("MiB", 1 << 20), ("KiB", 1 << 10)):
        if n >= scale and n % scale == 0:
            return f"{n // scale}{unit}"
    return f"{n}B"


def emit_csv(records, path=None) -> str:
    """Write records as CSV (to ``path`` if given); returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(
            [
                r.kind,
                r.strategy,
                r.nbytes,
                r.rep,
                repr(float(r.elapsed_ns)),
                "" if r.bandwidth_gbps is None else repr(float(r.bandwidth_gbps)),
            ]
        )
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text


def parse_csv(text: str) -> list[BenchRecord]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header != CSV_HEADER:
        raise BenchError(f"unexpected CSV header {header}")
    out = []
    for kind, strategy, nbytes, rep, elapsed, bw in rows:
        out.append(
            BenchRecord(kind, strategy, int(nbytes), int(rep), float(elapsed), float(bw) if bw else None)
        )
    return out


def parse_sizes(text: str) -> list[int]:
    units = {"": 1, "B": 1, "K": 1 << 10, "KB": 1 << 10, "KIB": 1 << 10,
             "M": 1 << 20, "MB": 1 << 20, "MIB": 1 << 20}
    sizes = []
    for item in text.split(","):
        item = item.strip().upper()
        if not item:
            continue
        digits = item.rstrip("KMIB")
        unit = item[len(digits):]
        if not digits.isdigit() or unit not in units:
            raise argparse.ArgumentTypeError(f"bad size {item!r}")
        sizes.append(int(digits) * units[unit])
    if not sizes:
        raise argparse.ArgumentTypeError("empty size list")
    return sizes


def build_parser():
    p = argparse.ArgumentParser(prog="posh-bench", description=__doc__.split("\n\n")[0])
    p.add_argument("--kind", choices=["copy", "put", "get", "all"], default="all")
    p.add_argument("--sizes", type=parse_sizes, help="comma list, e.g. 8,64K,1M,16M")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--strategies", help="comma list of copy strategies (default: all)")
    p.add_argument("--csv", metavar="PATH", help="write raw records here")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    kinds = {"copy": ["localcopy"], "put": ["put"], "get": ["get"], "all": list(KINDS)}[args.kind]
    strategies = args.strategies.split(",") if args.strategies else None
    needs_job = any(k != "localcopy" for k in kinds)

    if needs_job and C.ENV_RANK not in os.environ:
        from .rte import JobSpec, launch

        heap = max(args.sizes or BANDWIDTH_SIZES) + (4 << 20)
        heap = (heap + 4095) // 4096 * 4096
        spec = JobSpec(
            npes=2,
            argv=[sys.executable, "-m", "posh.bench", *argv],
            heap_size=heap,
            coll_algo="binomial-tree,linear-gather",
        )
        return launch(spec)

    runtime = None
    if needs_job:
        from .runtime import init

        runtime = init(copy_strategy="default")
    try:
        records = run_suite(kinds, args.sizes, args.reps, args.warmup, strategies, runtime)
    finally:
        if runtime is not None:
            runtime.finalize()
    if runtime is None or runtime.rank == 0:
        if args.csv:
            emit_csv(records, args.csv)
        sys.stdout.write(emit_table(records))
    return 0


if __name__ == "__main__":
    sys.exit(main())
