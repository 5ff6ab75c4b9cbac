"""``scst`` command-line interface.

Subcommands: ``scan gen|check``, ``ssm bench``, ``block bench|check``,
``moco demo``, ``train toy``, ``metrics psnr|we`` and ``selftest``.

Conventions:

* machine output goes to stdout — CSV for time series/paths, JSON for
  reports;
* ``--out DIR`` additionally writes the same data to files and, for the
  report-style commands, renders a matplotlib figure next to the
  delimited output (``--no-fig`` disables the figure);
* exit codes: 0 success, 1 usage/validation error (printed to stderr),
  2 internal error;
* every command is deterministic for a fixed ``--seed`` (benchmark
  timing *values* are measurements; the row structure is deterministic);
* ``--threads`` caps worker threads where a command fans out, with the
  ``SCST_THREADS`` environment variable as fallback.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import train as tr
from .core import Rng, TensorFormatError, tensor_read, tensor_write
from .metrics import psnr, warping_error
from .moco import moco_demo
from .scan import (PATTERN_BY_NAME, VolumeShape, continuity_report,
                   generate_path, sweep_path)
from .selftest import run_selftest

__all__ = ["main"]


class UsageError(Exception):
    """Raised for argument problems so ``main`` can exit 1, not 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def _parse_dims(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.lower().split("x")
    if len(parts) != n:
        raise UsageError(f"{what} must be {n} integers joined by 'x', "
                         f"got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"{what} must be integers, got {text!r}") from None
    return dims


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers") from None


def resolve_threads(value: int | None) -> int:
    """--threads flag, else SCST_THREADS, else 1; must be >= 1."""
    if value is None:
        env = os.environ.get("SCST_THREADS", "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"SCST_THREADS must be an integer, "
                                 f"got {env!r}") from None
        else:
            value = 1
    if value < 1:
        raise UsageError("thread count must be >= 1")
    return value


def _emit_csv(rows: list[dict], columns: list[str], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=columns)
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in columns})


def _write_outputs(rows, columns, out_dir, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    with open(path, "w", newline="") as fh:
        _emit_csv(rows, columns, fh)
    return out


def _print_json(payload: dict, out=None, name: str = "report") -> None:
    text = json.dumps(payload, sort_keys=True)
    print(text)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n")


def _resolve_path_spec(args) -> tuple[VolumeShape, np.ndarray, str]:
    shape = VolumeShape(*_parse_dims(args.shape, 3, "--shape"))
    name = args.pattern
    if name == "sweep":
        return shape, sweep_path(shape), name
    if name not in PATTERN_BY_NAME:
        raise UsageError(f"unknown pattern {name!r}; choose from "
                         f"{', '.join(sorted(PATTERN_BY_NAME))}, sweep")
    return shape, generate_path(shape, PATTERN_BY_NAME[name]), name


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def cmd_scan_gen(args) -> int:
    shape, path, name = _resolve_path_spec(args)
    t, h, w = shape.t, shape.h, shape.w
    tt, rem = np.divmod(path, h * w)
    yy, xx = np.divmod(rem, w)
    rows = [{"index": int(i), "t": int(a), "h": int(b), "w": int(c)}
            for i, a, b, c in zip(path, tt, yy, xx)]
    _emit_csv(rows, ["index", "t", "h", "w"], sys.stdout)
    if args.out:
        out = _write_outputs(rows, ["index", "t", "h", "w"], args.out,
                             "scan_path")
        # persisted as float64 (the tensor format's integer-exact carrier)
        tensor_write(path.astype(np.float64), out / "scan_path.scst")
        if not args.no_fig:
            from .plots import save_scan_path_figure
            save_scan_path_figure(path, (t, h, w), out / "scan_path.png",
                                  title=f"{name} over {t}x{h}x{w}")
    return 0


def cmd_scan_check(args) -> int:
    shape, path, _ = _resolve_path_spec(args)
    report = continuity_report(path, shape)
    _print_json(report, args.out, "scan_check")
    return 0


# ---------------------------------------------------------------------------
# ssm / block
# ---------------------------------------------------------------------------

_BENCH_COLUMNS = ["length", "variant", "mean_ns", "p50", "p95"]


def cmd_ssm_bench(args) -> int:
    lengths = _parse_int_list(args.len, "--len")
    if not lengths:
        raise UsageError("--len must name at least one length")
    engines = tuple(args.engines.split(","))
    for engine in engines:
        if engine not in ("sequential", "parallel"):
            raise UsageError(f"unknown engine {engine!r}")
    rows = bench_mod.bench_selective_scan(lengths, state=args.state,
                                          reps=args.reps, seed=args.seed,
                                          engines=engines)
    if args.attention:
        rows += bench_mod.bench_attention(lengths, reps=args.reps,
                                          seed=args.seed)
    _emit_csv(rows, _BENCH_COLUMNS, sys.stdout)
    if args.out:
        out = _write_outputs(rows, _BENCH_COLUMNS, args.out, "ssm_bench")
        if not args.no_fig:
            from .plots import save_bench_figure
            save_bench_figure(rows, out / "ssm_bench.png",
                              title="selective scan runtime")
    return 0


def cmd_block_bench(args) -> int:
    shape = _parse_dims(args.shape, 4, "--shape")
    variants = tuple(args.variants.split(","))
    rows = bench_mod.bench_block(shape, variants=variants, reps=args.reps,
                                 seed=args.seed)
    columns = ["voxels", "variant", "mean_ns", "p50", "p95"]
    _emit_csv(rows, columns, sys.stdout)
    if args.out:
        out = _write_outputs(rows, columns, args.out, "block_bench")
        if not args.no_fig:
            from .plots import save_block_bench_figure
            save_block_bench_figure(rows, out / "block_bench.png")
    return 0


def cmd_block_check(args) -> int:
    if not args.grad:
        raise UsageError("block check currently supports --grad only")
    from .selftest import (check_block_gradient, check_dwconv_gradient,
                           check_ssm_gradients)
    checks = [("ssm-gradients", check_ssm_gradients),
              ("dwconv3d-gradient", check_dwconv_gradient),
              ("block-gradient", check_block_gradient)]
    failures = []
    for i, (name, fn) in enumerate(checks):
        try:
            fn(Rng(args.seed).spawn(i + 1), 1)
        except Exception as exc:
            failures.append({"check": name, "error": str(exc)})
    payload = {"checks": [n for n, _ in checks],
               "failures": failures,
               "passed": not failures}
    _print_json(payload, args.out, "block_check")
    return 0 if not failures else 1


# ---------------------------------------------------------------------------
# moco / train
# ---------------------------------------------------------------------------


def cmd_moco_demo(args) -> int:
    rows = moco_demo(steps=args.steps, seed=args.seed, size=args.size)
    _emit_csv(rows, ["step", "loss"], sys.stdout)
    if args.out:
        out = _write_outputs(rows, ["step", "loss"], args.out, "moco_demo")
        if not args.no_fig:
            from .plots import save_loss_figure
            save_loss_figure(rows, out / "moco_demo.png",
                             title="contrastive demo loss")
    return 0


def _coerce_field(name: str, text: str, ftype) -> object:
    if ftype in (int, "int"):
        return int(text)
    if ftype in (float, "float"):
        return float(text)
    if ftype in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    return text


def load_stage_config(path, stage: int) -> tr.StageConfig:
    """Parse a ``key = value`` config file into a StageConfig.

    ``#`` starts a comment; unknown keys are rejected; the ``--stage``
    flag always wins over a ``stage`` line in the file.
    """
    ftypes = {}
    for f in dataclasses.fields(tr.StageConfig):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "bool": bool}.get(
                t.split(" ")[0], str)
        ftypes[f.name] = t
    mapping: dict[str, object] = {}
    if path is not None:
        for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key = value")
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in ftypes:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            mapping[key] = _coerce_field(key, value, ftypes[key])
    mapping["stage"] = stage
    return tr.StageConfig(**mapping)


def cmd_train_toy(args) -> int:
    cfg = load_stage_config(args.config, args.stage)
    weights = None
    if args.weights_in:
        weights = tr.load_weights(args.weights_in)
    weights, log = tr.run_stage(cfg, weights=weights, seed=args.seed)
    _emit_csv(log.rows, list(log.columns), sys.stdout)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        log.to_csv(out / "log.csv")
        tr.save_weights(weights, out / "weights")
        if not args.no_fig and log.rows:
            from .plots import save_loss_figure
            save_loss_figure(log.rows, out / "loss.png",
                             title=f"stage {cfg.stage} loss")
    return 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _load_video(path) -> np.ndarray:
    arr = tensor_read(path)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a (T, H, W) video tensor, "
                         f"got shape {arr.shape}")
    return arr


def cmd_metrics_psnr(args) -> int:
    a = tensor_read(args.a)
    b = tensor_read(args.b)
    value = psnr(a, b, peak=args.peak)
    _print_json({"value": value, "n_valid": int(a.size)}, args.out, "psnr")
    return 0


def cmd_metrics_we(args) -> int:
    video = _load_video(args.video)
    flows = tensor_read(args.flows)
    if flows.ndim != 4 or flows.shape[-1] != 2:
        raise ValueError(f"{args.flows}: expected (T-1, H, W, 2) flows, "
                         f"got shape {flows.shape}")
    out = warping_error(video, list(flows))
    _print_json(out, args.out, "we")
    return 0


def cmd_selftest(args) -> int:
    return run_selftest(seed=args.seed, threads=resolve_threads(args.threads))


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def _add_common(p, seed_default=0, fig=False):
    p.add_argument("--seed", type=int, default=seed_default,
                   help=f"deterministic seed (default {seed_default})")
    p.add_argument("--out", default=None,
                   help="directory for file outputs (and figures)")
    if fig:
        p.add_argument("--no-fig", action="store_true",
                       help="skip the figure even when --out is given")


def build_parser() -> _Parser:
    parser = _Parser(prog="scst",
                     description="Spatial-temporal continuous-scan toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="scan-path generation and checking")
    scan_sub = scan.add_subparsers(dest="action", required=True)
    gen = scan_sub.add_parser("gen", help="emit a traversal path")
    gen.add_argument("--shape", required=True, help="volume as TxHxW")
    gen.add_argument("--pattern", default="w-forward",
                     help="one of the six continuous patterns, or 'sweep'")
    _add_common(gen, fig=True)
    gen.set_defaults(func=cmd_scan_gen)
    chk = scan_sub.add_parser("check", help="continuity report as JSON")
    chk.add_argument("--shape", required=True, help="volume as TxHxW")
    chk.add_argument("--pattern", default="w-forward",
                     help="pattern name or 'sweep'")
    _add_common(chk)
    chk.set_defaults(func=cmd_scan_check)

    ssm = sub.add_parser("ssm", help="scan-kernel benchmarks")
    ssm_sub = ssm.add_subparsers(dest="action", required=True)
    sb = ssm_sub.add_parser("bench", help="time the selective scan")
    sb.add_argument("--len", default="1024,2048,4096",
                    help="comma-separated sequence lengths")
    sb.add_argument("--state", type=int, default=8)
    sb.add_argument("--reps", type=int, default=5)
    sb.add_argument("--engines", default="sequential,parallel")
    sb.add_argument("--attention", action="store_true",
                    help="also time the quadratic attention comparator")
    _add_common(sb, fig=True)
    sb.set_defaults(func=cmd_ssm_bench)

    block = sub.add_parser("block", help="3D block benchmarks and checks")
    block_sub = block.add_subparsers(dest="action", required=True)
    bb = block_sub.add_parser("bench", help="time block variants")
    bb.add_argument("--shape", default="4x4x16x16", help="volume as CxTxHxW")
    bb.add_argument("--variants", default=",".join(bench_mod.BLOCK_VARIANTS))
    bb.add_argument("--reps", type=int, default=3)
    _add_common(bb, fig=True)
    bb.set_defaults(func=cmd_block_bench)
    bc = block_sub.add_parser("check", help="gradient verification")
    bc.add_argument("--grad", action="store_true",
                    help="run the finite-difference suite")
    _add_common(bc)
    bc.set_defaults(func=cmd_block_check)

    moco = sub.add_parser("moco", help="momentum-contrast demo")
    moco_sub = moco.add_subparsers(dest="action", required=True)
    md = moco_sub.add_parser("demo", help="toy contrastive loop")
    md.add_argument("--steps", type=int, default=200)
    md.add_argument("--size", type=int, default=32)
    _add_common(md, fig=True)
    md.set_defaults(func=cmd_moco_demo)

    train = sub.add_parser("train", help="toy diffusion training")
    train_sub = train.add_subparsers(dest="action", required=True)
    tt = train_sub.add_parser("toy", help="run one training stage")
    tt.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    tt.add_argument("--config", default=None,
                    help="key = value stage-config file")
    tt.add_argument("--weights-in", default=None,
                    help="weights directory from the previous stage")
    _add_common(tt, fig=True)
    tt.set_defaults(func=cmd_train_toy)

    metrics = sub.add_parser("metrics", help="PSNR and warping error")
    metrics_sub = metrics.add_subparsers(dest="action", required=True)
    mp = metrics_sub.add_parser("psnr", help="peak signal-to-noise ratio")
    mp.add_argument("--a", required=True, help="tensor file")
    mp.add_argument("--b", required=True, help="tensor file")
    mp.add_argument("--peak", type=float, default=1.0)
    _add_common(mp)
    mp.set_defaults(func=cmd_metrics_psnr)
    mw = metrics_sub.add_parser("we", help="flow-based warping error")
    mw.add_argument("--video", required=True, help="(T,H,W) tensor file")
    mw.add_argument("--flows", required=True, help="(T-1,H,W,2) tensor file")
    _add_common(mw)
    mw.set_defaults(func=cmd_metrics_we)

    st = sub.add_parser("selftest", help="deterministic invariant suite")
    st.add_argument("--seed", type=int, default=7)
    st.add_argument("--threads", type=int, default=None,
                    help="worker-thread cap (fallback: SCST_THREADS)")
    st.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help & co.
        code = exc.code
        return 0 if code in (0, None) else int(code)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, TensorFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
