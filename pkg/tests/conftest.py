import io
import json
import os
import sys
import time
from pathlib import Path

import pytest

from posh.rte import JobSpec, launch
from posh.symheap import SHM_DIR

PROGRAMS = Path(__file__).parent / "programs"


class JobResult:
    def __init__(self, code, results, stdout, stderr, elapsed, jobid):
        self.code = code
        self.results = results
        self.stdout = stdout
        self.stderr = stderr
        self.elapsed = elapsed
        self.jobid = jobid

    def __repr__(self):
        return f"JobResult(code={self.code}, elapsed={self.elapsed:.2f}s, stderr={self.stderr[-2000:]!r})"


def run_program(name, npes, params=None, tmp_path=None, **spec_kw):
    """Run tests/programs/<name>.py as an npes-PE job; collect each rank's JSON result."""
    import tempfile

    outdir = Path(tempfile.mkdtemp(dir=tmp_path))
    spec_kw.setdefault("heap_size", 8 << 20)
    spec_kw.setdefault("coll_algo", "binomial-tree,linear-gather")
    spec_kw.setdefault("timeout", 120)
    spec_kw.setdefault("copy_strategy", "default")
    env = dict(spec_kw.pop("env", {}))
    env["POSH_TEST_OUT"] = str(outdir)
    env["PYTHONWARNINGS"] = "ignore"
    argv = [sys.executable, str(PROGRAMS / f"{name}.py"), json.dumps(params or {})]
    spec = JobSpec(npes=npes, argv=argv, env=env, capture_io=True, **spec_kw)
    out, err = io.StringIO(), io.StringIO()
    t0 = time.monotonic()
    code = launch(spec, stdout=out, stderr=err)
    elapsed = time.monotonic() - t0
    results = {}
    for r in range(npes):
        p = outdir / f"{r}.json"
        if p.exists():
            results[r] = json.loads(p.read_text())
    return JobResult(code, results, out.getvalue(), err.getvalue(), elapsed, spec.jobid)


def leaked_segments(jobid=None):
    prefix = "posh-" if jobid is None else f"posh-{jobid}-"
    return sorted(n for n in os.listdir(SHM_DIR) if n.startswith(prefix))


@pytest.fixture
def job(tmp_path):
    def _run(name, npes, params=None, **kw):
        res = run_program(name, npes, params, tmp_path=tmp_path, **kw)
        assert leaked_segments(res.jobid) == []
        return res

    return _run


@pytest.fixture
def solo(request):
    """A one-PE runtime in this process, torn down afterwards."""
    from posh.runtime import init

    marker = request.node.get_closest_marker("solo")
    kw = dict(marker.kwargs) if marker else {}
    env = {"POSH_COLL_ALGO": kw.pop("coll", "binomial-tree,linear-gather")}
    jobid = f"t{os.getpid()}x{abs(hash(request.node.nodeid)) % 10**8}"
    kw.setdefault("heap_size", 4 << 20)
    kw.setdefault("copy_strategy", "default")
    rt = init(env, jobid=jobid, **kw)
    try:
        yield rt
    finally:
        rt.heap.abort()
        assert leaked_segments(jobid) == []


def pytest_configure(config):
    config.addinivalue_line("markers", "solo(**cfg): config overrides for the solo fixture")
