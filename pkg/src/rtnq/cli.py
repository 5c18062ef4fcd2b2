"""Command-line front end: gen | quantize | inspect | eval | bench.

Exit codes: 0 success, 1 other failure, 2 bad plan or usage, 3 I/O error or
corrupt checkpoint.  Diagnostics go to stderr prefixed with ``error:``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from rtnq import bench as benchmod
from rtnq.errors import CorruptDataError, PlanError, PlanSyntaxError, RtnqError
from rtnq.evaluate import PlanEvaluator, SweepRow, horizontal_sweep, sweep_csv, vertical_sweep
from rtnq.gemm import DEFAULT_THRESHOLD
from rtnq.manifest import MODULES
from rtnq.plan import parse_plan
from rtnq.quant import DEFAULT_GROUP
from rtnq.store import load_quantized, read_checkpoint, save_model
from rtnq.toy import (PRESETS, ToyTransformerConfig, config_of, gen_synthetic_checkpoint, make_inputs,
                      manifest_for_config)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    base = PRESETS[args.preset]
    fields = {
        "layers": args.layers, "dim": args.dim, "heads": args.heads, "ffn": args.ffn,
        "seq": args.seq, "kv_heads": args.kv_heads,
    }
    cfg = ToyTransformerConfig(**{**base.to_dict(), **{k: v for k, v in fields.items() if v is not None},
                                  "seed": args.seed})
    path = gen_synthetic_checkpoint(cfg, args.seed, args.out, name=args.name or args.preset, group=args.group)
    print(f"wrote {path} ({cfg.layers} layers x 4 tensors, seed {args.seed})")
    return 0


def cmd_quantize(args) -> int:
    plan = parse_plan(args.plan)
    model = load_quantized(args.input, plan, group=args.group, allow_remainder=args.allow_remainder)
    save_model(model, args.out)
    print(f"plan: {model.manifest.plan}")
    print(f"tensors: {model.assignment.count(plan.high_bits)} at {plan.high_bits}-bit, "
          f"{model.assignment.count(plan.base_bits)} at {plan.base_bits}-bit")
    print(f"effective bits/weight: {model.effective_bits():.6f}")
    print(f"effective bits/weight incl. scales: {model.effective_bits(include_scales=True):.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    man = ckpt.manifest
    print(f"file: {ckpt.path} ({ckpt.file_size} bytes)")
    print(f"model: {man.name}  layers: {man.layer_count}  params: {man.total_params}")
    print(f"group: {man.group}  layout: {man.layout}  plan: {man.plan or '-'}")
    for m in MODULES:
        r, c = man.shape(m)
        print(f"module {int(m)}: {r} x {c}")
    print(f"{'layer':>5} {'mod':>3} {'dtype':>5} {'rows':>6} {'cols':>6} {'bytes':>10} {'bits/w':>6}")
    total_bits = 0
    for (layer, m), rec in sorted(ckpt.records.items()):
        total_bits += rec.bits * rec.rows * rec.cols
        stored = rec.data_length + rec.scales_length
        print(f"{layer:>5} {int(m):>3} {rec.dtype:>5} {rec.rows:>6} {rec.cols:>6} {stored:>10} {rec.bits:>6}")
    print(f"effective bits/weight: {total_bits / man.total_params:.6f}")
    if ckpt.quantized:
        print(f"effective bits/weight incl. scales: {ckpt.load().effective_bits(include_scales=True):.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    if ckpt.quantized:
        raise CliError("eval needs a float checkpoint as the reference", 2)
    model = ckpt.load()
    cfg = config_of(model)
    inputs = make_inputs(cfg, args.inputs, args.seed)
    ev = PlanEvaluator(model, inputs, args.group, args.threshold, args.allow_remainder)
    rows = []
    if args.plan:
        plan = parse_plan(args.plan)
        rep = ev.report(plan)
        rows.append(SweepRow.from_report("plan", str(plan), rep))
    sweeps = {"horizontal": ["first", "middle", "last"], "all": ["first", "middle", "last", "vertical"]}
    for kind in sweeps.get(args.sweep, [args.sweep] if args.sweep else []):
        rows.extend(vertical_sweep(ev) if kind == "vertical" else horizontal_sweep(ev, kind))
    if not rows:
        raise CliError("eval needs --plan or --sweep", 2)
    _emit(sweep_csv(rows), args.csv)
    return 0


def _parse_shapes(text: str) -> list[tuple[int, int]]:
    shapes = []
    for part in text.split(","):
        try:
            k, n = part.lower().split("x")
            shapes.append((int(k), int(n)))
        except ValueError:
            raise CliError(f"bad shape {part!r}; expected KxN", 2) from None
    return shapes


def cmd_bench(args) -> int:
    if args.shapes:
        shapes = _parse_shapes(args.shapes)
    elif args.checkpoint:
        shapes = benchmod.manifest_shapes(read_checkpoint(args.checkpoint).manifest)
    else:
        shapes = benchmod.manifest_shapes(manifest_for_config(PRESETS["toy"]))
    m_values = [int(v) for v in args.m.split(",")] if args.m else list(benchmod.DEFAULT_M_VALUES)
    records = benchmod.bench_sweep(shapes, sorted(m_values), args.bits, args.reps, args.warmup, args.group,
                                   args.seed, args.threads)
    _emit(benchmod.records_csv(records, args.threads, args.threshold), args.csv)
    cross = benchmod.find_crossover(records)
    for (k, n, bits), m in cross.per_shape.items():
        print(f"crossover k={k} n={n} bits={bits}: {m if m is not None else 'none'}", file=sys.stderr)
    print(f"recommended threshold: {cross.recommended if cross.recommended is not None else 'none'}",
          file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="BLAS worker threads (default: library default)")
    common.add_argument("--seed", type=int, default=0, help="PRNG seed (default 0)")

    p = argparse.ArgumentParser(prog="rtnq", description="Group-wise RTN quantization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic float checkpoint")
    g.add_argument("--out", required=True, help="output checkpoint path")
    g.add_argument("--preset", choices=sorted(PRESETS), default="toy", help="base configuration")
    g.add_argument("--name", help="model name stored in the manifest")
    g.add_argument("--layers", type=int, help="layer count")
    g.add_argument("--dim", type=int, help="model width")
    g.add_argument("--heads", type=int, help="attention heads")
    g.add_argument("--kv-heads", type=int, help="KV heads (default: heads)")
    g.add_argument("--ffn", type=int, help="feed-forward width")
    g.add_argument("--seq", type=int, help="sequence length of evaluation inputs")
    g.add_argument("--group", type=int, default=DEFAULT_GROUP, help="group size recorded in the manifest")
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("quantize", parents=[common], help="quantize a float checkpoint under a plan")
    q.add_argument("input", help="float checkpoint")
    q.add_argument("--plan", required=True, help='plan text, e.g. "first:1 modules:1+3+4"')
    q.add_argument("--out", required=True, help="output checkpoint path")
    q.add_argument("--group", type=int, default=DEFAULT_GROUP, help="quantization group size (default 128)")
    q.add_argument("--allow-remainder", action="store_true", help="permit a short final group")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("inspect", parents=[common], help="print manifest and per-tensor sizes")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", parents=[common], help="score a plan or run a sweep against the float model")
    e.add_argument("checkpoint", help="float checkpoint (reference)")
    e.add_argument("--plan", help="evaluate one plan")
    e.add_argument("--sweep", choices=["first", "middle", "last", "horizontal", "vertical", "all"],
                   help="sweep kind; 'horizontal' runs first, middle and last")
    e.add_argument("--csv", help="CSV output path (default stdout)")
    e.add_argument("--group", type=int, default=DEFAULT_GROUP, help="quantization group size (default 128)")
    e.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD, help="GEMM dispatch threshold")
    e.add_argument("--inputs", type=int, default=4, help="number of random input sequences")
    e.add_argument("--allow-remainder", action="store_true", help="permit a short final group")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="time fused vs dequant-first GEMM")
    b.add_argument("checkpoint", nargs="?", help="take shapes from this checkpoint (default: toy config)")
    b.add_argument("--shapes", help="comma-separated KxN shapes, overrides the checkpoint")
    b.add_argument("--bits", type=int, choices=[4, 8], default=4, help="weight bit width")
    b.add_argument("--m", help="comma-separated activation row counts")
    b.add_argument("--reps", type=int, default=benchmod.DEFAULT_REPS, help="timed repetitions")
    b.add_argument("--warmup", type=int, default=benchmod.DEFAULT_WARMUP, help="untimed warmup calls")
    b.add_argument("--group", type=int, default=DEFAULT_GROUP, help="quantization group size (default 128)")
    b.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD, help="threshold recorded in the CSV")
    b.add_argument("--csv", help="CSV output path (default stdout)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except PlanSyntaxError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.text:
            print(f"error:   {e.text}", file=sys.stderr)
            print(f"error:   {' ' * len(e.text.encode()[: e.offset].decode(errors='ignore'))}^", file=sys.stderr)
        return 2
    except PlanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (OSError, CorruptDataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except RtnqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
