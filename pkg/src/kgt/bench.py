"""Analytic cost models for the attention core and a measured scaling harness.

FLOPs count 2 per multiply-accumulate over the score and aggregation
matmuls; projections are excluded because every variant shares them.
Peak bytes cover the real-valued auxiliary buffers a backend keeps live
at once (neighbor slices, logits, running softmax statistics), per window.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import astuple, dataclass, field, fields
from typing import Iterable, TextIO

import numpy as np
from threadpoolctl import threadpool_limits

from kgt.attention import Backend, dense_attention, instrument, keygraph_attention
from kgt.errors import ConfigurationError
from kgt.keygraph import build
from kgt.numerics import Tensor, no_grad

CSV_COLUMNS = ("n_nodes", "k", "d", "heads", "backend", "flops", "peak_aux_bytes",
               "wall_ms", "skipped")
BACKENDS = ("dense", "gather", "mask", "streaming")


def _kind(backend) -> str:
    return backend if backend == "dense" else Backend.parse(backend).kind


def attention_flops(hw: int, k: int, d: int, heads: int, backend="gather",
                    windows: int = 1) -> int:
    """Score + aggregate FLOPs. Gather touches k keys per query; the rest touch all hw."""
    kind = _kind(backend)
    if kind == "gather":
        if not 1 <= k <= hw:
            raise ConfigurationError(f"k={k} outside [1, {hw}]")
        keys = k
    else:
        keys = hw
    return windows * heads * (2 * hw * keys * d + 2 * hw * keys * d)


def attention_peak_bytes(hw: int, k: int, d: int, heads: int, backend="gather",
                         bytes_per_real: int = 4, block_size: int | None = None,
                         windows: int = 1) -> int:
    kind = _kind(backend)
    if kind == "gather":
        reals = 2 * hw * k * d + hw * k
    elif kind == "streaming":
        bs = Backend.parse(backend).block_size if block_size is None else block_size
        reals = hw * min(bs, hw) + 2 * hw
    else:
        reals = hw * hw
    return windows * heads * reals * bytes_per_real


@dataclass(frozen=True)
class GridPoint:
    hw: int
    k: int
    d: int = 16
    heads: int = 2
    backend: str = "gather"


@dataclass
class CostRow:
    n_nodes: int
    k: int
    d: int
    heads: int
    backend: str
    flops: int
    peak_aux_bytes: int
    wall_ms: float
    skipped: bool = False


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    def write_csv(self, out: TextIO):
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            vals = list(astuple(r))
            vals[7] = "" if r.skipped else f"{r.wall_ms:.4f}"
            vals[8] = int(r.skipped)
            w.writerow(vals)

    def select(self, **kw) -> list[CostRow]:
        return [r for r in self.rows if all(getattr(r, a) == v for a, v in kw.items())]


assert tuple(f.name for f in fields(CostRow)) == CSV_COLUMNS


def default_grid(hws=(64, 256, 1024), d=16, heads=2,
                 backends=("gather", "mask", "streaming")) -> list[GridPoint]:
    grid = []
    for hw in hws:
        ks = sorted({k for k in (4, 16, 64, hw - 1) if k <= hw - 1})
        for k in ks:
            grid += [GridPoint(hw, k, d, heads, b) for b in backends]
        grid.append(GridPoint(hw, hw, d, heads, "dense"))
    return grid


def _inputs(hw: int, d: int, heads: int, seed: int):
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.standard_normal((1, heads, hw, d)).astype(np.float32))
               for _ in range(3))
    nodes = rng.standard_normal((1, hw, heads * d)).astype(np.float32)
    return q, k, v, nodes


def run_cell(p: GridPoint, seed: int = 0):
    """Run one grid cell once with instrumentation; returns (instrument, seconds)."""
    q, k, v, nodes = _inputs(p.hw, p.d, p.heads, seed)
    graph = None if p.backend == "dense" else build(nodes, p.k)
    with no_grad(), instrument() as ins:
        t0 = time.perf_counter()
        if p.backend == "dense":
            dense_attention(q, k, v)
        else:
            keygraph_attention(q, k, v, graph, p.backend)
        dt = time.perf_counter() - t0
    return ins, dt


def run_scaling(grid: Iterable[GridPoint], repeats: int = 3,
                max_aux_bytes: int | None = None, seed: int = 0) -> CostReport:
    """Median wall time per cell; cells over ``max_aux_bytes`` or out of memory are skipped.

    Timing runs with BLAS pinned to one thread so cells do not contend.
    """
    if repeats < 3:
        raise ConfigurationError(f"repeats must be >= 3, got {repeats}")
    with threadpool_limits(limits=1):
        return _run_scaling(grid, repeats, max_aux_bytes, seed)


def _run_scaling(grid, repeats, max_aux_bytes, seed) -> CostReport:
    report = CostReport()
    for p in grid:
        flops = attention_flops(p.hw, p.k, p.d, p.heads, p.backend)
        peak = attention_peak_bytes(p.hw, p.k, p.d, p.heads, p.backend)
        row = CostRow(p.hw, p.k, p.d, p.heads, p.backend, flops, peak, 0.0)
        if max_aux_bytes is not None and peak > max_aux_bytes:
            row.skipped = True
            report.rows.append(row)
            continue
        try:
            times = [run_cell(p, seed)[1] for _ in range(repeats)]
        except MemoryError:
            row.skipped = True
        else:
            row.wall_ms = 1000.0 * statistics.median(times)
        report.rows.append(row)
    return report


def fit_exponent(xs, ys) -> float:
    """Slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def flops_table(hw: int, k: int, d: int, heads: int, block_size: int = 16) -> list[dict]:
    rows = []
    for name in BACKENDS:
        backend = f"streaming:{block_size}" if name == "streaming" else name
        rows.append({
            "backend": name,
            "flops": attention_flops(hw, k, d, heads, backend),
            "peak_aux_bytes": attention_peak_bytes(hw, k, d, heads, backend),
        })
    return rows
