"""Command-line entry point: ``crossfuse <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 check failure, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import harness as H
from .backbone import DEFAULT_TAPS, STRATEGIES, TAP_NAMES
from .block import CORRELATION_ALIASES, CrossFusionConfig
from .checks import GRADCHECK_TOLERANCE, block_gradcheck, default_channels
from .data import DatasetError, GenConfig, gen_dataset
from .tensor import ContractViolation, default_dtype
from .tensorfile import TensorFileError

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_ABORT = 0, 1, 2, 3

KINDS = ("gaussian", "sigmoid", "dot")

# named grids; cells are run with the same seeds
PRESETS: dict[str, list[dict]] = {
    "directional": [
        {"id": "none", "strategy": "none"},
        {"id": "cross", "strategy": "cross", "pool": [5, 3]},
        {"id": "cross_nopool", "strategy": "cross", "pool": [1, 1]},
    ],
    "correlation": [
        {"id": "none", "strategy": "none"},
        {"id": "gaussian", "strategy": "cross", "correlation": "embedded_gaussian"},
        {"id": "sigmoid", "strategy": "cross", "correlation": "sigmoid"},
        {"id": "dot", "strategy": "cross", "correlation": "dot_product"},
    ],
    "strategy": [
        {"id": "none", "strategy": "none"},
        {"id": "addition", "strategy": "addition"},
        {"id": "concat", "strategy": "concat"},
        {"id": "cross", "strategy": "cross"},
    ],
    "pool": [
        {"id": f"pool{k}x{d}", "strategy": "cross", "pool": [k, d]}
        for k, d in ((1, 1), (3, 3), (5, 2), (5, 3), (5, 4))
    ],
    "taps": [
        {"id": "target_only", "strategy": "cross", "taps": ["s4_last"]},
        {"id": "s4", "strategy": "cross", "taps": ["s4_first", "s4_last"]},
        {"id": "s3_s4", "strategy": "cross", "taps": ["s3_last", "s4_first", "s4_last"]},
        {"id": "s2_s3_s4", "strategy": "cross", "taps": ["s2_last", "s3_last", "s4_first", "s4_last"]},
    ],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pool(text: str) -> tuple[int, int]:
    try:
        k, d = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pool must look like KxD, got {text!r}")
    return k, d


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossfuse", description="Cross-scale feature fusion experiments on synthetic defect data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2500)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--scale-min", type=float, default=2.0)
    g.add_argument("--scale-max", type=float, default=20.0)
    g.add_argument("--similarity", type=float, default=0.8)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference check of the fusion block")
    c.add_argument("--kind", choices=KINDS + ("all",), default="all")
    c.add_argument("--eps", type=float, default=1e-3)
    c.add_argument("--levels", type=int, default=3)
    c.add_argument("--size", type=int, default=6)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=GRADCHECK_TOLERANCE)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="report JSON path")
    t.add_argument("--fusion", choices=STRATEGIES, default="cross")
    t.add_argument("--correlation", choices=sorted(CORRELATION_ALIASES), default="gaussian")
    t.add_argument("--pool", type=_pool, default=(5, 3), help="kernel x dilation, e.g. 5x3; 1x1 disables")
    t.add_argument("--taps", default=",".join(DEFAULT_TAPS), help=f"comma list from {','.join(TAP_NAMES)}")
    t.add_argument("--epochs", type=int, default=H.TrainConfig.epochs)
    t.add_argument("--lr", type=float, default=H.TrainConfig.lr)
    t.add_argument("--momentum", type=float, default=H.TrainConfig.momentum)
    t.add_argument("--batch", type=int, default=H.TrainConfig.batch)
    t.add_argument("--clip-norm", type=float, default=H.TrainConfig.clip_norm,
                   help="rescale gradients to this joint L2 norm; 0 disables")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--save-model", help="directory for the trained weights")
    t.add_argument("--strip-timing", action="store_true")

    a = sub.add_parser("ablate", help="run a grid of configurations over paired seeds")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", help="grid spec JSON file")
    src.add_argument("--preset", choices=sorted(PRESETS))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seeds", type=int)
    a.add_argument("--master-seed", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--eval-every", type=int, help="evaluate on the test split every N epochs (and at the end)")
    a.add_argument("--strip-timing", action="store_true")

    r = sub.add_parser("report", help="summarise report files")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--csv", help="write the aggregate CSV here")
    r.add_argument("--summary", help="write the text table here")
    r.add_argument("--strip-timing", action="store_true")
    return p


def cmd_gen_data(args) -> int:
    try:
        cfg = GenConfig(image_size=args.size, samples=args.n, scale_range=(args.scale_min, args.scale_max),
                        class_similarity=args.similarity, noise_sigma=args.noise, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))
    m = gen_dataset(cfg, args.out)
    print(f"wrote {len(m['samples'])} samples to {args.out}; class pixels {m['class_pixels']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.levels < 1 or args.size < 1 or args.eps <= 0:
        raise UsageError("--levels and --size must be >= 1 and --eps > 0")
    kinds = KINDS if args.kind == "all" else (args.kind,)
    failed = False
    for kind in kinds:
        t0 = time.perf_counter()
        res = block_gradcheck(kind, levels=args.levels, size=args.size, channels=default_channels(args.levels),
                              eps=args.eps, seed=args.seed)
        ok = res.max_rel_error < args.tol
        failed |= not ok
        line = f"{kind:<9} max_rel_error={res.max_rel_error:.3e} {'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s)"
        if not ok:
            line += (f"\n  worst: param={res.worst_param} index={tuple(res.worst_index)} "
                     f"analytic={res.analytic:.10g} numeric={res.numeric:.10g}")
        print(line)
    return EXIT_CHECK if failed else EXIT_OK


def _write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_train(args) -> int:
    taps = tuple(t for t in args.taps.split(",") if t)
    try:
        fusion = CrossFusionConfig(correlation=args.correlation, pool_kernel=args.pool[0], pool_dilation=args.pool[1])
        run = H.TrainConfig(epochs=args.epochs, lr=args.lr, momentum=args.momentum, batch=args.batch,
                            clip_norm=args.clip_norm or None, seed=args.seed, strategy=args.fusion, fusion=fusion,
                            reference_taps=taps)
        bundle = H.make_bundle(run)
    except (ValueError, ContractViolation) as e:
        raise UsageError(str(e))
    train_data, test_data = H.load_splits(args.data)
    report, bundle = H.train(run, train_data, test_data, bundle)
    _write(args.out, report.to_json(args.strip_timing) + "\n")
    if args.save_model:
        bundle.save(args.save_model)
    p, f = report.params, report.flops
    print(f"status={report.status} mIoU={report.metrics['miou']:.4f} "
          f"params={p['total']} (+{p['overhead']:.2%}) flops={f['total']} (+{f['overhead']:.2%})")
    if report.status != "ok":
        print(f"aborted: {report.abort}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def _load_grid(args) -> H.GridSpec:
    if args.grid:
        spec = json.loads(Path(args.grid).read_text())
    else:
        spec = {"cells": PRESETS[args.preset]}
    if args.seeds is not None:
        spec["seeds"] = args.seeds
    if args.master_seed is not None:
        spec["master_seed"] = args.master_seed
    if args.epochs is not None:
        spec.setdefault("base", {})["epochs"] = args.epochs
    if args.eval_every is not None:
        spec.setdefault("base", {})["eval_every"] = args.eval_every
    try:
        grid = H.GridSpec.from_dict(spec)
        for cell in grid.cells:      # validate every cell before any training
            H.make_bundle(H.cell_config(grid.base, cell, 0))
    except (ValueError, TypeError, ContractViolation) as e:
        raise UsageError(f"bad grid: {e}")
    return grid


def _write_outputs(reports: list[H.RunReport], out: Path, strip_timing: bool, grid: H.GridSpec | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"schema": H.REPORT_SCHEMA, "reports": H.grid_to_jsonable(reports, strip_timing)}
    if grid is not None:
        payload["grid"] = grid.to_dict()
    (out / "reports.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    (out / "aggregate.csv").write_text(H.reports_to_csv(reports, strip_timing))
    (out / "summary.txt").write_text(H.summary_table(reports) + "\n")


def cmd_ablate(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    grid = _load_grid(args)
    reports = H.ablate(grid, args.data, jobs=args.jobs)
    _write_outputs(reports, Path(args.out), args.strip_timing, grid)
    print(H.summary_table(reports))
    aborted = sum(r.status != "ok" for r in reports)
    if aborted:
        print(f"{aborted} run(s) aborted", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        reports = H.load_reports(args.inputs)
    except (H.SchemaError, json.JSONDecodeError, TypeError) as e:
        raise UsageError(str(e))
    if not reports:
        raise UsageError("no reports found")
    table = H.summary_table(reports)
    print(table)
    if args.csv:
        _write(args.csv, H.reports_to_csv(reports, args.strip_timing))
    if args.summary:
        _write(args.summary, table + "\n")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "gradcheck": cmd_gradcheck, "train": cmd_train,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        default_dtype()      # reject a bad precision setting up front
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"crossfuse: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"crossfuse {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetError, TensorFileError) as e:
        print(f"crossfuse {args.command}: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
