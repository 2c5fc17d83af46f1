"""Launcher: spawn the PEs, hand them their contact info, and act as gateway.

One supervisor thread per PE forks the child and waits for it; the
gateway thread sleeps on a condition until the job finishes or a child
dies abnormally, relays the signals it receives to every live child, and
removes the job's shared-memory segments whatever way the job ended.

The launcher never touches the communication library itself: it only
knows how segments are named so it can clean them up.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field

from . import config as C
from .symheap import release_hold, unlink_job_segments

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHILD_FAILURE = 1
EXIT_LAUNCHER_ERROR = 2

RELAYED_SIGNALS = (
    signal.SIGINT,
    signal.SIGTERM,
    signal.SIGHUP,
    signal.SIGQUIT,
    signal.SIGUSR1,
    signal.SIGUSR2,
)
TERMINATING_SIGNALS = (signal.SIGINT, signal.SIGTERM, signal.SIGHUP, signal.SIGQUIT)


class LaunchError(C.PoshError):
    pass


def new_jobid() -> str:
    return uuid.uuid4().hex[:12]


@dataclass
class JobSpec:
    npes: int
    argv: list
    heap_size: int = C.DEFAULT_HEAP_SIZE
    jobid: str = field(default_factory=new_jobid)
    debug: bool = False
    safe: bool = False
    debug_hold_rank: int | None = None
    coll_algo: str | None = None
    copy_strategy: str | None = None
    capture_io: bool = False
    env: dict = field(default_factory=dict)
    timeout: float | None = None
    grace: float = 3.0

    def __post_init__(self):
        if self.npes < 1:
            raise LaunchError(f"npes must be at least 1, got {self.npes}")
        if not self.argv:
            raise LaunchError("no program given")

    def child_env(self, rank: int) -> dict:
        env = dict(os.environ)
        env.update(self.env)
        env[C.ENV_RANK] = str(rank)
        env[C.ENV_NPES] = str(self.npes)
        env[C.ENV_JOBID] = self.jobid
        env[C.ENV_HEAP_SIZE] = str(self.heap_size)
        env[C.ENV_DEBUG] = "1" if self.debug else "0"
        env[C.ENV_SAFE] = "1" if self.safe else "0"
        if self.debug_hold_rank is not None:
            env[C.ENV_DEBUG_HOLD_RANK] = str(self.debug_hold_rank)
        else:
            env.pop(C.ENV_DEBUG_HOLD_RANK, None)
        if self.coll_algo:
            env[C.ENV_COLL_ALGO] = self.coll_algo
        if self.copy_strategy:
            env[C.ENV_COPY] = self.copy_strategy
        return env


@dataclass
class ChildRecord:
    rank: int
    pid: int | None = None
    status: str = "pending"  # pending | running | exited | signaled | failed-to-start
    returncode: int | None = None
    error: str | None = None

    @property
    def finished(self) -> bool:
        return self.status in ("exited", "signaled", "failed-to-start")

    @property
    def ok(self) -> bool:
        return self.status == "exited" and self.returncode == 0

    def describe(self) -> str:
        if self.status == "signaled":
            try:
                name = signal.Signals(-self.returncode).name
            except ValueError:
                name = str(-self.returncode)
            return f"rank {self.rank} (pid {self.pid}) killed by {name}"
        if self.status == "failed-to-start":
            return f"rank {self.rank} failed to start: {self.error}"
        return f"rank {self.rank} (pid {self.pid}) exited with code {self.returncode}"


class Job:
    def __init__(self, spec: JobSpec, stdout=None, stderr=None):
        self.spec = spec
        self.children = [ChildRecord(r) for r in range(spec.npes)]
        self._procs: list[subprocess.Popen | None] = [None] * spec.npes
        self._cond = threading.Condition()
        self._out = stdout if stdout is not None else sys.stdout
        self._err = stderr if stderr is not None else sys.stderr
        self._io_lock = threading.Lock()
        self._io_threads: list[threading.Thread] = []
        self.failed: ChildRecord | None = None
        self.signals_received: list[int] = []
        self.terminated = False

    # -- supervisors ------------------------------------------------------------

    def _supervise(self, rank: int):
        spec = self.spec
        rec = self.children[rank]
        pipe = subprocess.PIPE if spec.capture_io else None
        try:
            proc = subprocess.Popen(
                spec.argv,
                env=spec.child_env(rank),
                stdin=None if rank == 0 else subprocess.DEVNULL,
                stdout=pipe,
                stderr=pipe,
            )
        except OSError as exc:
            with self._cond:
                rec.status = "failed-to-start"
                rec.error = str(exc)
                self._cond.notify_all()
            return
        with self._cond:
            self._procs[rank] = proc
            rec.pid = proc.pid
            rec.status = "running"
            if self.terminated:
                # teardown began while we were forking
                self._kill(proc, signal.SIGTERM)
            self._cond.notify_all()
        if spec.capture_io:
            for stream, sink in ((proc.stdout, self._out), (proc.stderr, self._err)):
                t = threading.Thread(target=self._pump, args=(rank, stream, sink), daemon=True)
                t.start()
                self._io_threads.append(t)
        code = proc.wait()
        with self._cond:
            rec.returncode = code
            rec.status = "signaled" if code < 0 else "exited"
            self._cond.notify_all()

    def _pump(self, rank, stream, sink):
        prefix = f"[{rank}] ".encode()
        target = getattr(sink, "buffer", None)
        for line in iter(stream.readline, b""):
            with self._io_lock:
                if target is not None:
                    target.write(prefix + line)
                    target.flush()
                else:
                    sink.write((prefix + line).decode(errors="replace"))
                    sink.flush()
        stream.close()

    # -- signals / teardown ----------------------------------------------------------

    @staticmethod
    def _kill(proc, sig):
        if proc.poll() is None:
            try:
                proc.send_signal(sig)
            except ProcessLookupError:
                pass

    def relay(self, sig: int):
        """Forward ``sig`` to every live child."""
        self.signals_received.append(sig)
        with self._cond:
            procs = [p for p in self._procs if p is not None]
            if sig in TERMINATING_SIGNALS:
                self.terminated = True
            self._cond.notify_all()
        for proc in procs:
            self._kill(proc, sig)

    def _terminate_all(self):
        with self._cond:
            self.terminated = True
            procs = [p for p in self._procs if p is not None]
        for proc in procs:
            self._kill(proc, signal.SIGTERM)
        deadline = time.monotonic() + self.spec.grace
        for proc in procs:
            try:
                proc.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                self._kill(proc, signal.SIGKILL)

    def _all_finished(self):
        return all(c.finished for c in self.children)

    # -- main loop --------------------------------------------------------------

    def run(self) -> int:
        spec = self.spec
        if spec.debug:
            print(f"poshrun: job {spec.jobid}, {spec.npes} PEs", file=self._err, flush=True)
        workers = [
            threading.Thread(target=self._supervise, args=(r,), name=f"posh-worker-{r}", daemon=True)
            for r in range(spec.npes)
        ]
        for w in workers:
            w.start()
        deadline = None if spec.timeout is None else time.monotonic() + spec.timeout
        timed_out = False
        try:
            with self._cond:
                while not self._all_finished():
                    bad = next(
                        (c for c in self.children if c.finished and not c.ok), None
                    )
                    if bad is not None and self.failed is None:
                        self.failed = bad
                        break
                    if deadline is not None and time.monotonic() > deadline:
                        timed_out = True
                        break
                    # short timeout so relayed signals are handled promptly
                    self._cond.wait(0.05)
            if self.failed is not None or timed_out:
                self._terminate_all()
            for w in workers:
                w.join()
            for t in self._io_threads:
                t.join(1.0)
        finally:
            removed = unlink_job_segments(spec.jobid)
            if removed and spec.debug:
                print(f"poshrun: removed segments {removed}", file=self._err, flush=True)

        if timed_out:
            print(f"poshrun: job {spec.jobid} timed out after {spec.timeout}s", file=self._err, flush=True)
            return EXIT_CHILD_FAILURE
        if any(c.status == "failed-to-start" for c in self.children):
            for c in self.children:
                if c.status == "failed-to-start":
                    print(f"poshrun: {c.describe()}", file=self._err, flush=True)
            return EXIT_LAUNCHER_ERROR
        if self.failed is not None:
            print(f"poshrun: {self.failed.describe()}; job terminated", file=self._err, flush=True)
        return EXIT_OK if all(c.ok for c in self.children) else EXIT_CHILD_FAILURE


def launch(spec: JobSpec, stdout=None, stderr=None) -> int:
    """Run a job to completion and return its exit code."""
    job = Job(spec, stdout=stdout, stderr=stderr)
    return run_job(job)


def run_job(job: Job) -> int:
    in_main = threading.current_thread() is threading.main_thread()
    previous = {}
    if in_main:
        for sig in RELAYED_SIGNALS:
            previous[sig] = signal.signal(sig, lambda s, _f: job.relay(s))
    try:
        return job.run()
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


def _resolve_program(argv):
    prog = argv[0]
    path = prog if os.sep in prog else shutil.which(prog)
    if path is None or not os.path.isfile(path) or not os.access(path, os.X_OK):
        raise LaunchError(f"{prog}: not found or not executable")
    return [path, *argv[1:]]


def build_parser():
    p = argparse.ArgumentParser(
        prog="poshrun",
        description="Run a program as a set of PEs sharing symmetric heaps.",
    )
    p.add_argument("-n", "--npes", type=int, required=True, help="number of PEs")
    p.add_argument("--heap", type=int, default=C.DEFAULT_HEAP_SIZE, help="heap capacity in bytes")
    p.add_argument("--capture-io", action="store_true", help="prefix each output line with [rank]")
    p.add_argument("--debug-hold", type=int, metavar="RANK", help="hold RANK at init for a debugger")
    p.add_argument("--coll", metavar="ALGO", help="collective algorithm(s), see POSH_COLL_ALGO")
    p.add_argument("--copy", metavar="STRATEGY", help="copy strategy: default, byteloop, wideblock")
    p.add_argument("--safe", action="store_true", help="enable safe-mode checks in the PEs")
    p.add_argument("--debug", action="store_true", help="enable library debugging in the PEs")
    p.add_argument("--timeout", type=float, help="kill the job after this many seconds")
    p.add_argument("--jobid", help=argparse.SUPPRESS)
    p.add_argument("program", nargs=argparse.REMAINDER)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    prog = args.program
    if prog and prog[0] == "--":
        prog = prog[1:]
    try:
        if not prog:
            raise LaunchError("no program given")
        spec = JobSpec(
            npes=args.npes,
            argv=_resolve_program(prog),
            heap_size=args.heap,
            debug=args.debug,
            safe=args.safe,
            debug_hold_rank=args.debug_hold,
            coll_algo=args.coll,
            copy_strategy=args.copy,
            capture_io=args.capture_io,
            timeout=args.timeout,
        )
        if args.jobid:
            spec.jobid = args.jobid
        if spec.debug_hold_rank is not None and not 0 <= spec.debug_hold_rank < spec.npes:
            raise LaunchError(f"--debug-hold rank {spec.debug_hold_rank} outside 0..{spec.npes - 1}")
    except LaunchError as exc:
        print(f"poshrun: {exc}", file=sys.stderr)
        return EXIT_LAUNCHER_ERROR
    return launch(spec)


def release_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="posh-release", description="Release a PE held for a debugger.")
    p.add_argument("jobid")
    p.add_argument("rank", type=int)
    args = p.parse_args(argv)
    try:
        release_hold(args.jobid, args.rank)
    except (OSError, C.PoshError) as exc:
        print(f"posh-release: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
