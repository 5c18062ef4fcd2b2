"""Latency sweep of the two GEMM paths and the dense float baseline.

For each weight shape and activation row count ``m`` the harness times the
fused path, the dequantize-first path and a dense float32 GEMM on the
unquantized weight, reporting median latency over the repetitions.  Speedup
is ``baseline_median / path_median``.  Every 100th timed call is checked
against the float64 oracle.
"""

from __future__ import annotations

import csv
import io
import statistics
import subprocess
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits, threadpool_info

from rtnq.bitpack import prepare_kernel_weight
from rtnq.errors import InsufficientDataError
from rtnq.gemm import DEFAULT_THRESHOLD, GemmPath, gemm_dense, gemm_dequant, gemm_fused, gemm_oracle, rel_err
from rtnq.manifest import MODULES, ModelManifest
from rtnq.quant import DEFAULT_GROUP, quantize_tensor

DEFAULT_M_VALUES = (1, 4, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096)
DEFAULT_REPS = 20
DEFAULT_WARMUP = 5
CHECK_EVERY = 100
CHECK_TOL = 1e-4
CSV_FIELDS = ("path", "m", "k", "n", "bits", "reps", "median_ns", "speedup")
PATH_ORDER = (GemmPath.FUSED, GemmPath.DEQUANT, GemmPath.BASELINE)


@dataclass(frozen=True)
class BenchRecord:
    path: str
    m: int
    k: int
    n: int
    bits: int
    reps: int
    median_ns: int
    speedup: float


def manifest_shapes(manifest: ModelManifest) -> list[tuple[int, int]]:
    """Distinct ``(k, n)`` = (input dim, output dim) pairs of the four modules."""
    seen = []
    for m in MODULES:
        rows, cols = manifest.shape(m)
        if (cols, rows) not in seen:
            seen.append((cols, rows))
    return seen


class _SpotChecker:
    def __init__(self, every: int = CHECK_EVERY):
        self.every = every
        self.calls = 0
        self.checked = 0

    def __call__(self, out, a, w):
        self.calls += 1
        if (self.calls - 1) % self.every:
            return
        self.checked += 1
        err = rel_err(out, gemm_oracle(a, w))
        if err > CHECK_TOL:
            raise AssertionError(f"GEMM output off by {err:.3g} relative to the oracle during benchmarking")


def _time(fn, reps: int, warmup: int, check=None) -> tuple[int, list[int]]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        out = fn()
        samples.append(max(time.perf_counter_ns() - t0, 1))
        if check is not None:
            check(out)
    return int(statistics.median(samples)), samples


def bench_sweep(
    shapes,
    m_values=DEFAULT_M_VALUES,
    bits: int = 4,
    reps: int = DEFAULT_REPS,
    warmup: int = DEFAULT_WARMUP,
    group: int = DEFAULT_GROUP,
    seed: int = 0,
    threads: int | None = None,
    checker: _SpotChecker | None = None,
) -> list[BenchRecord]:
    """Time all three paths for every ``(m, (k, n))`` combination."""
    shapes = [tuple(s) for s in shapes]
    if not shapes:
        raise ValueError("bench_sweep needs at least one shape")
    m_values = list(m_values)
    if m_values != sorted(m_values):
        raise ValueError("m_values must be sorted")
    rng = np.random.default_rng([seed, 2])
    check = checker or _SpotChecker()
    records = []
    with threadpool_limits(limits=threads):
        for k, n in shapes:
            w_float = (rng.standard_normal((n, k), dtype=np.float32) / np.float32(np.sqrt(k))).astype(np.float32)
            q = quantize_tensor(w_float, bits, group, allow_remainder=True)
            wk = prepare_kernel_weight(q)
            for m in m_values:
                a = rng.standard_normal((m, k), dtype=np.float32)
                runs = {
                    GemmPath.FUSED: (lambda: gemm_fused(a, wk), lambda out: check(out, a, q)),
                    GemmPath.DEQUANT: (lambda: gemm_dequant(a, wk), lambda out: check(out, a, q)),
                    GemmPath.BASELINE: (lambda: gemm_dense(a, w_float), None),
                }
                medians = {p: _time(fn, reps, warmup, chk)[0] for p, (fn, chk) in runs.items()}
                base = medians[GemmPath.BASELINE]
                for p in PATH_ORDER:
                    speed = 1.0 if p is GemmPath.BASELINE else base / medians[p]
                    records.append(BenchRecord(p.value, m, k, n, bits, reps, medians[p], speed))
    return records


@dataclass(frozen=True)
class Crossover:
    per_shape: dict  # (k, n, bits) -> m or None
    recommended: int | None


def find_crossover(records) -> Crossover:
    """Smallest ``m`` per shape where dequant-first is no slower than fused.

    The recommended dispatch threshold is the median of the per-shape
    crossovers that exist (rounded down to an integer), or None.
    """
    by_shape = {}
    for r in records:
        if r.path in (GemmPath.FUSED.value, GemmPath.DEQUANT.value):
            by_shape.setdefault((r.k, r.n, r.bits), {}).setdefault(r.m, {})[r.path] = r.median_ns
    if not by_shape:
        raise InsufficientDataError("no fused/dequant records")
    per_shape = {}
    for shape, rows in sorted(by_shape.items()):
        complete = {m: v for m, v in rows.items() if len(v) == 2}
        if len(complete) < 2:
            raise InsufficientDataError(f"shape {shape} has fewer than two m values with both paths")
        per_shape[shape] = next(
            (m for m in sorted(complete) if complete[m][GemmPath.DEQUANT.value] <= complete[m][GemmPath.FUSED.value]),
            None,
        )
    found = [m for m in per_shape.values() if m is not None]
    return Crossover(per_shape, int(statistics.median(found)) if found else None)


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def blas_threads() -> int:
    info = threadpool_info()
    return max((i.get("num_threads", 1) for i in info), default=1)


def records_csv(records, threads: int | None = None, threshold: int = DEFAULT_THRESHOLD,
                revision: str | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# threads={threads if threads is not None else blas_threads()}\n")
    buf.write(f"# git_revision={revision or git_revision()}\n")
    buf.write(f"# threshold={threshold}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.path, r.m, r.k, r.n, r.bits, r.reps, r.median_ns, repr(float(r.speedup))])
    return buf.getvalue()


def read_records_csv(text: str) -> tuple[dict, list[BenchRecord]]:
    """Parse CSV text back into ``(header comments, records)``."""
    meta, lines = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
        elif line.strip():
            lines.append(line)
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected bench CSV header {reader.fieldnames}")
    records = []
    for r in reader:
        rec = BenchRecord(
            r["path"], int(r["m"]), int(r["k"]), int(r["n"]), int(r["bits"]), int(r["reps"]),
            int(r["median_ns"]), float(r["speedup"]),
        )
        if rec.path not in {p.value for p in GemmPath} or rec.median_ns <= 0 or rec.reps < 1:
            raise ValueError(f"invalid bench record {r}")
        records.append(rec)
    return meta, records
