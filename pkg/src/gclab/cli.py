"""``gclab`` command line.

Exit codes: 0 success, 1 failed check or unreadable input file, 2 usage error.
Results go to stdout (or ``--out``); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import analysis, blocks, checks, cost, harness, rng, tensorio
from .blocks import BlockSpec
from .errors import ConfigError, TensorFormatError
from .tensor import Tensor, rng_tensor

FORMATS = ("table", "csv", "json")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write results here instead of stdout")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--config", type=Path, help="JSON object whose keys override flags")
    return p


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("spatial dims must be positive")
    return h, w


def _block_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block", choices=blocks.KINDS, default="nl")
    p.add_argument("--variant", choices=blocks.NL_VARIANTS)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--ratio", type=int, default=None, help="bottleneck ratio r")
    p.add_argument("--pooling", choices=blocks.POOLINGS, default="att")
    p.add_argument("--fusion", choices=blocks.FUSIONS, default="add")
    p.add_argument("--transform", choices=blocks.TRANSFORMS, default=None)
    p.add_argument("--hw", type=_hw, default=(6, 6))
    p.add_argument("--input", type=Path, help="input tensor in the text tensor format")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--target", choices=("all", "ops", "blocks"), default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("equiv", parents=[common], help="dual-path equivalence checks")
    p.add_argument("--check", choices=checks.EQUIV_CHECKS + ("all",), default="all")

    p = sub.add_parser("cost", parents=[common], help="parameter and FLOP counts")
    p.add_argument("--arch", choices=("resnet50",), default="resnet50")
    p.add_argument("--insert", action="append", default=[], metavar="KIND:SLOTS[:rR]")
    p.add_argument("--position", choices=cost.POSITIONS, default="after1x1")
    p.add_argument("--table7a", action="store_true", help="the five reference configurations")
    p.add_argument("--num-classes", type=int, default=1000)

    p = sub.add_parser("stats", parents=[common], help="avg_dist probe statistics")
    _block_flags(p)
    p.add_argument("--probes", default=",".join(blocks.PROBES))

    p = sub.add_parser("attn-export", parents=[common], help="attention heatmap as CSV + PGM")
    _block_flags(p)
    p.add_argument("--query", type=int, default=None, help="query position (default: centre)")

    p = sub.add_parser("train", parents=[common], help="train the toy net")
    p.add_argument("--insert", action="append", default=[], metavar="KIND:SLOTS[:rR]")
    p.add_argument("--position", choices=cost.POSITIONS, default="after1x1")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=0)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if args.config is None:
        return
    try:
        obj = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {args.config}: {err}") from None
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    for key, value in obj.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if dest in ("out", "input") and value is not None:
            value = Path(value)
        elif dest == "hw" and isinstance(value, str):
            value = _hw(value)
        setattr(args, dest, value)


# -- output helpers --------------------------------------------------------------

def _rows_text(header: list[str], rows: list[list], fmt: str) -> str:
    if fmt == "json":
        return json.dumps([dict(zip(header, r)) for r in rows], indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def _emit(args, text: str) -> None:
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _check_rows(results: list[checks.CheckResult]) -> list[list]:
    return [[r.name, format(r.value, ".3e"), format(r.tol, ".0e"), "PASS" if r.passed else "FAIL"]
            for r in results]


# -- subcommands -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = checks.gradient_suite(args.seeds, args.tol, args.target)
    _emit(args, _rows_text(["check", "max_rel_err", "tol", "status"], _check_rows(results),
                           args.format or "table"))
    return 0 if all(r.passed for r in results) else 1


def cmd_equiv(args) -> int:
    results = checks.run_equivalence(args.check, args.seed)
    _emit(args, _rows_text(["check", "max_abs_diff", "tol", "status"], _check_rows(results),
                           args.format or "table"))
    return 0 if all(r.passed for r in results) else 1


def _cost_rows(labelled: list[tuple[str, cost.CostReport]]) -> list[list]:
    return [[label, rep.params, f"{rep.params / 1e6:.2f}", rep.flops, f"{rep.flops / 1e9:.2f}",
             rep.added_params, rep.added_flops] for label, rep in labelled]


def cmd_cost(args) -> int:
    base = cost.describe_resnet50(args.num_classes)
    if args.table7a:
        if args.insert:
            raise UsageError("--table7a and --insert are mutually exclusive")
        labelled = cost.reference_configs(args.num_classes)
        fmt = args.format or "csv"
        if fmt == "json":
            _emit(args, json.dumps({"convention": cost.FLOP_CONVENTION,
                                    "rows": [dict(label=l, **r.to_dict()) for l, r in labelled]},
                                   indent=2) + "\n")
        elif fmt == "csv":
            lines = ["label,params_M,flops_G"]
            lines += [f"{l},{r.params / 1e6:.2f},{r.flops / 1e9:.2f}" for l, r in labelled]
            _emit(args, "\n".join(lines) + "\n" + f"# flops: {cost.FLOP_CONVENTION}\n")
        else:
            rows = [[l, f"{r.params / 1e6:.2f}M", f"{r.flops / 1e9:.2f}G"] for l, r in labelled]
            _emit(args, _rows_text(["label", "params", "flops"], rows, "table")
                  + f"flops: {cost.FLOP_CONVENTION}\n")
        return 0
    try:
        plans = [cost.parse_insert(t, args.position) for t in args.insert]
    except ConfigError as err:
        raise UsageError(str(err)) from None
    arch = cost.insert_blocks(base, plans)
    rep = cost.count_flops(arch)
    label = "+".join(args.insert) or "baseline"
    fmt = args.format or "table"
    if fmt == "json":
        _emit(args, rep.to_json() + "\n")
        return 0
    if fmt == "csv":
        header = ["label", "params", "params_M", "flops", "flops_G", "added_params", "added_flops"]
        _emit(args, _rows_text(header, _cost_rows([(label, rep)]), "csv"))
        return 0
    lines = [
        f"arch      {args.arch}" + (f" + {label}" if args.insert else ""),
        f"params    {rep.params:,} ({rep.params / 1e6:.2f}M)",
        f"flops     {rep.flops:,} ({rep.flops / 1e9:.2f}G)",
        f"added     {rep.added_params:,} params ({rep.added_params / 1e6:.2f}M), "
        f"{rep.added_flops:,} flops ({rep.added_flops / 1e9:.4f}G)",
        f"blocks    {len(rep.breakdown)}",
        f"convention: {cost.FLOP_CONVENTION}",
    ]
    _emit(args, "\n".join(lines) + "\n")
    return 0


def _block_spec(args) -> BlockSpec:
    kw = {}
    if args.block == "nl":
        kw["variant"] = args.variant or "e-gaussian"
    elif args.variant is not None:
        raise UsageError("--variant only applies to --block nl")
    if args.ratio is not None:
        kw["bottleneck_ratio"] = args.ratio
    elif args.block in ("gc", "se", "framework"):
        # default r = 16 is too coarse for small channel counts
        kw["bottleneck_ratio"] = min(16, args.channels)
    if args.block == "framework":
        kw.update(pooling=args.pooling, fusion=args.fusion,
                  transform=args.transform or ("bottleneck_sigmoid" if args.fusion == "scale"
                                               else "bottleneck_ln_relu"))
    try:
        return BlockSpec(args.block, args.channels, **kw)
    except ConfigError as err:
        raise UsageError(str(err)) from None


def _block_input(args, spec: BlockSpec) -> Tensor:
    if args.input is not None:
        x = tensorio.read_tensor(args.input)
        if x.ndim == 3:
            x = Tensor(x.data[None])
        if x.ndim != 4 or x.shape[1] != spec.channels:
            raise TensorFormatError(
                f"{args.input}: expected [N,{spec.channels},H,W] or [{spec.channels},H,W], got {x.shape}", 1)
        return x
    h, w = args.hw
    return rng_tensor(rng.derive_seed(args.seed, "input"), (1, spec.channels, h, w), "normal")


def cmd_stats(args) -> int:
    spec = _block_spec(args)
    probes = tuple(p.strip() for p in args.probes.split(",") if p.strip())
    bad = [p for p in probes if p not in blocks.PROBES]
    if bad or not probes:
        raise UsageError(f"unknown probes {bad}; choose from {','.join(blocks.PROBES)}")
    x = _block_input(args, spec)
    report = analysis.probe_stats(spec, args.seed, input=x, probes=probes)
    fmt = args.format or "csv"
    if fmt == "csv":
        _emit(args, report.to_csv())
    else:
        header = ["block", "variant", "probe", "avg_dist", "np", "c", "seed"]
        rows = [[r.block, r.variant, r.probe, "absent" if r.absent else format(r.avg_dist, ".12g"),
                 report.np, report.c, report.seed] for r in report.rows]
        _emit(args, _rows_text(header, rows, fmt))
    return 0


def cmd_attn_export(args) -> int:
    if args.out is None:
        raise UsageError("attn-export needs --out (path stem for .csv and .pgm)")
    spec = _block_spec(args)
    x = _block_input(args, spec)
    params = blocks.build_block(spec, args.seed)
    att = blocks.attention_map(params, x)
    h, w = x.shape[2], x.shape[3]
    npos = h * w
    query = args.query if args.query is not None else (h // 2) * w + w // 2
    if not 0 <= query < npos:
        raise UsageError(f"--query must lie in [0, {npos})")
    row = att.weights[0, query] if att.per_query else att.weights[0]
    csv_path, pgm_path = analysis.export_heatmap(row, (h, w), args.out)
    kind = "per-query" if att.per_query else "global"
    print(f"wrote {csv_path} and {pgm_path} ({kind} map, query {query})", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    try:
        net = harness.ToyNetSpec(insert=tuple(cost.parse_insert(t, args.position) for t in args.insert),
                                 num_classes=args.classes)
        data = harness.gen_dataset(harness.ToyDatasetSpec(
            seed=args.data_seed, num_samples=args.samples, num_classes=args.classes,
            density=args.density))
    except ConfigError as err:
        raise UsageError(str(err)) from None
    result = harness.train(net, data, args.epochs, args.seed, lr=args.lr)
    fmt = args.format or "csv"
    if fmt == "csv":
        _emit(args, result.to_csv())
    else:
        rows = [[m.epoch, format(m.train_loss, ".6f"), format(m.test_acc, ".4f")] for m in result.history]
        _emit(args, _rows_text(["epoch", "train_loss", "test_acc"], rows, fmt))
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck, "equiv": cmd_equiv, "cost": cmd_cost, "stats": cmd_stats,
    "attn-export": cmd_attn_export, "train": cmd_train,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_config(args)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err).rstrip(), file=sys.stderr)
        return 2
    except TensorFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
