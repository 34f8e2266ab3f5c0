"""``kgt`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
input files, failed checks).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys

from kgt import bench
from kgt.attention import Backend
from kgt.errors import ConfigurationError, KGTError
from kgt.gradsuite import run_suite
from kgt.keygraph import build
from kgt.model import forward, init, load, save
from kgt.numerics import Tensor, conv2d_3x3, no_grad
from kgt.tooling.config import parse_config
from kgt.tooling.pgm import GrayImage, read_pgm, write_pgm
from kgt.training import train
from kgt.windowing import partition

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("kgt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    raw = os.environ.get("KGT_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"KGT_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _backend(text: str) -> Backend:
    try:
        return Backend.parse(text)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def cmd_build_graph(args) -> int:
    img = read_pgm(args.input)
    x = Tensor(img.to_array())
    with no_grad():
        if args.model:
            net = load(args.model)
            x = conv2d_3x3(x, net["extract.w"], net["extract.b"])
        wb = partition(x, args.window)
    k = args.k
    if not 1 <= k <= wb.hw - 1:
        raise UsageError(f"--k must be in [1, {wb.hw - 1}] for window {args.window}")
    graph = build(wb.nodes, k)
    with _open_out(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("window", "row", "rank", "neighbor"))
        for b, rows in enumerate(graph.neighbors):
            for i, nbrs in enumerate(rows):
                for rank, j in enumerate(nbrs):
                    w.writerow((b, i, rank, int(j)))
    return EXIT_OK


GRIDS = {
    "default": dict(hws=(64, 256, 1024)),
    "small": dict(hws=(64, 256)),
}


def cmd_attn_bench(args) -> int:
    if args.grid not in GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; choose from {sorted(GRIDS)}")
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    grid = bench.default_grid(d=args.d, heads=args.heads, **GRIDS[args.grid])
    report = bench.run_scaling(grid, args.repeats, max_aux_bytes=args.max_aux_bytes)
    with _open_out(args.out) as fh:
        report.write_csv(fh)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in run_suite(args.seed):
        status = "PASS" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status} {r.name:<40} rel_err={r.error:.3e} tol={r.tol:.0e}")
    print(f"{failed} failed" if failed else "all gradient checks passed")
    return EXIT_DATA if failed else EXIT_OK


def cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    net_cfg, train_cfg = cfg.net_config(), cfg.train_config()
    if args.steps is not None:
        train_cfg.steps = args.steps
    net = init(net_cfg)
    train(net, train_cfg, sys.stdout)
    save(net, args.out)
    return EXIT_OK


def cmd_denoise(args) -> int:
    backend = _backend(args.backend)
    net = load(args.model)
    img = read_pgm(args.input)
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    with no_grad():
        out = forward(net, img.to_array(), args.k, backend).data
    write_pgm(GrayImage.from_array(out), args.out)
    return EXIT_OK


def cmd_flops(args) -> int:
    if not 1 <= args.k <= args.hw:
        raise UsageError("--k must be in [1, hw]")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("backend", "n_nodes", "k", "d", "heads", "flops", "peak_aux_bytes"))
    for row in bench.flops_table(args.hw, args.k, args.d, args.heads, args.block_size):
        w.writerow((row["backend"], args.hw, args.k, args.d, args.heads, row["flops"],
                    row["peak_aux_bytes"]))
    return EXIT_OK


@contextlib.contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgt", description="Key-graph attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-graph", help="dump the key-graph of an image as CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--window", type=int, default=8)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--out", default="-")
    s.add_argument("--model", help="use this checkpoint's feature extractor for node features")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("attn-bench", help="measure attention cost scaling")
    s.add_argument("--grid", default="default")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--d", type=int, default=16)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--max-aux-bytes", type=int, default=None)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_attn_bench)

    s = sub.add_parser("gradcheck", help="run the 64-bit gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train", help="train the toy denoiser; CSV log on stdout")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None, help="override the configured step count")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="run a checkpoint on a PGM image")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--backend", default="streaming")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("flops", help="print the analytic cost table for every backend")
    s.add_argument("--hw", type=int, required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--heads", type=int, default=1)
    s.add_argument("--block-size", type=int, default=16)
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"kgt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KGTError, OSError, UnicodeDecodeError) as exc:
        print(f"kgt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
