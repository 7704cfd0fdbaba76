"""Command-line interface: score | plan | quantize | eval | sweep | compare-prune | train-toy.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure (NaN perplexity).
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import harness, importance, planner
from .corpus import CorpusSpec, build_batches
from .errors import LayerQuantError
from .model import ModelConfig, TransformerModel, load_model, quantize_to_map, save_model
from .tensor import save_container

log = logging.getLogger("layerquant")

_UNITS = {"": 1, "B": 1, "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12, "KIB": 2**10, "MIB": 2**20, "GIB": 2**30}


class UsageError(LayerQuantError):
    pass


def parse_size(s: str) -> float:
    """'20GB' -> 2e10, '1.5MiB' -> 1572864.0, '4096' -> 4096.0 (decimal units unless *iB)."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z]*)\s*", s)
    if not m or m.group(2).upper() not in _UNITS:
        raise argparse.ArgumentTypeError(f"cannot parse size {s!r}")
    return float(m.group(1)) * _UNITS[m.group(2).upper()]


def parse_bits(s: str) -> tuple[int, int]:
    try:
        hi, lo = (int(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--bits expects HIGH,LOW, got {s!r}") from None
    return hi, lo


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _batch(args, directory: str | None, max_tokens: int | None = None):
    if not directory:
        raise UsageError("this command needs --corpus")
    spec = CorpusSpec.from_dir(directory, seq_len=args.seq_len, stride=args.stride or args.seq_len,
                               max_docs=args.max_docs)
    return build_batches(spec, max_tokens)


def _report(args, model: TransformerModel) -> importance.ImportanceReport:
    if getattr(args, "report", None):
        return importance.ImportanceReport.from_json(Path(args.report).read_text())
    calib = _batch(args, args.calib_corpus or args.corpus)
    return importance.build_report(model, calib)


# -- commands ----------------------------------------------------------------


def cmd_score(args) -> int:
    scores = [s.strip() for s in args.scores.split(",") if s.strip()]
    model = load_model(args.model)
    batch = None
    if "lim" in scores:
        if not args.corpus:
            raise UsageError("LIM scores need a calibration corpus (--corpus)")
        batch = _batch(args, args.corpus)
    rep = importance.build_report(model, batch, scores, two_sided=args.two_sided, pooled=not args.per_matrix)
    _emit(rep.to_json(), args.out)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv(), encoding="utf-8")
    return 0


def cmd_plan(args) -> int:
    rep = importance.ImportanceReport.from_json(Path(args.report).read_text())
    n = rep.n_layers
    name, order = planner.ordering(args.ordering, n, rep, args.seed)
    kw = {"group_size": args.group_size}
    hi, lo = args.bits
    if args.budget is not None:
        if args.m_lower is not None and args.m_higher is not None:
            budget = planner.Budget(args.budget, args.m_lower, args.m_higher, n)
        elif args.model:
            budget = planner.budget_from_model(load_model(args.model), args.budget, hi, lo)
        else:
            raise UsageError("--budget needs --m-lower and --m-higher, or --model to derive them")
        plan = planner.budget_plan(order, budget, hi, lo, name, **kw)
    elif args.n_low is not None:
        plan = planner.two_level_plan(order, n - args.n_low, hi, lo, name, **kw)
    elif args.three_level is not None:
        plan = planner.three_level_plan(order, args.three_level, name, **kw)
    elif args.prune is not None:
        if args.prune_mode == "sequential_top":
            name, order = planner.ordering("sequential_top", n)
        plan = planner.pruning_plan(order, args.prune, args.base_bits, name, **kw)
    else:
        plan = planner.outlier_plan(order, args.outlier, args.p_high, args.p_low, args.outlier_bits, name, **kw)
    _emit(plan.to_json(), args.out)
    return 0


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    plan = planner.QuantPlan.from_json(Path(args.plan).read_text())
    tmap, acct = quantize_to_map(model, plan)
    save_container(tmap, args.out)
    _emit(json.dumps(acct | {"avg_bits": plan.avg_bits, "out": str(args.out)}, sort_keys=True), None)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    batch = _batch(args, args.corpus, args.max_eval_tokens)
    plan = planner.QuantPlan.from_json(Path(args.plan).read_text()) if args.plan else None
    base = None
    if args.baseline:
        base = harness.evaluate(load_model(args.baseline), batch.sequences).perplexity
    rep = harness.evaluate(model, batch.sequences, plan, base)
    _emit(json.dumps(rep.to_dict(), sort_keys=True, indent=2), args.out)
    return 0


def cmd_sweep(args) -> int:
    model = load_model(args.model)
    orderings = [o.strip() for o in args.orderings.split(",") if o.strip()]
    needs_report = any(o in ("lim", "zd", "reverse", "reverse_lim") for o in orderings)
    rep = _report(args, model) if needs_report else None
    batch = _batch(args, args.corpus, args.max_eval_tokens)
    hi, lo = args.bits
    res = harness.sweep(model, batch.sequences, rep, orderings, hi, lo, args.seeds, args.seed,
                        args.group_size, args.threads, args.retention_factor)
    _emit(res.to_csv(), args.out)
    points = json.dumps(res.retention_points, sort_keys=True, indent=2)
    if args.retention_out:
        Path(args.retention_out).write_text(points, encoding="utf-8")
    else:
        print(points, file=sys.stderr)
    return 0


def cmd_compare_prune(args) -> int:
    model = load_model(args.model)
    rep = _report(args, model) if args.ordering in ("lim", "zd", "reverse", "reverse_lim") else None
    name, order = planner.ordering(args.ordering, model.n_layers, rep, args.seed)
    batch = _batch(args, args.corpus, args.max_eval_tokens)
    hi, lo = args.bits
    rows = harness.compare_prune(model, batch.sequences, order, name, hi, lo, args.group_size, args.threads)
    _emit(harness.prune_rows_csv(rows), args.out)
    return 0


def cmd_train_toy(args) -> int:
    from .train import train_toy

    cfg = ModelConfig(n_layers=args.n_layers, d_model=args.d_model, n_heads=args.n_heads, d_ff=args.d_ff,
                      max_seq_len=args.max_seq_len)
    model = train_toy(args.corpus, cfg, args.steps, args.batch_size, args.train_seq_len, args.lr, args.seed)
    save_model(model, args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker threads (speed only, never results)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--corpus", help="directory of UTF-8 .txt files")
    corpus.add_argument("--max-docs", type=int)
    corpus.add_argument("--seq-len", type=int, default=256)
    corpus.add_argument("--stride", type=int, help="defaults to --seq-len")
    corpus.add_argument("--max-eval-tokens", type=int)

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument("--report", help="importance report JSON (skips LIM calibration)")
    calib.add_argument("--calib-corpus", help="calibration corpus for LIM (defaults to --corpus)")

    p = argparse.ArgumentParser(prog="layerquant", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", parents=[common, corpus], help="LIM/ZD importance report")
    s.add_argument("model")
    s.add_argument("--scores", default="lim,zd")
    s.add_argument("--two-sided", action="store_true", help="ZD counts |z| > 1")
    s.add_argument("--per-matrix", action="store_true", help="ZD averaged over matrices instead of pooled")
    s.add_argument("--out")
    s.add_argument("--csv", help="also write layer,lim,zd CSV here")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("plan", parents=[common], help="bit assignment from a report")
    s.add_argument("report")
    mode = s.add_mutually_exclusive_group(required=True)
    mode.add_argument("--budget", type=parse_size, help="available memory, e.g. 20GB")
    mode.add_argument("--n-low", type=int, help="number of layers at the low bit width")
    mode.add_argument("--three-level", type=int, metavar="X", help="X layers at 8 bits, 2X at 2, rest 4")
    mode.add_argument("--prune", type=int, metavar="K", help="remove K layers")
    mode.add_argument("--outlier", type=int, metavar="N", help="N most important layers get --p-high outliers")
    s.add_argument("--ordering", default="lim", choices=["lim", "zd", "reverse_lim", "reverse", "random", "sequential_top"])
    s.add_argument("--bits", type=parse_bits, default=(4, 2))
    s.add_argument("--m-lower", type=parse_size)
    s.add_argument("--m-higher", type=parse_size)
    s.add_argument("--model", help="derive M_lower/M_higher from this checkpoint")
    s.add_argument("--prune-mode", choices=["importance", "sequential_top"], default="importance")
    s.add_argument("--base-bits", type=int, default=16)
    s.add_argument("--p-high", type=float, default=0.01)
    s.add_argument("--p-low", type=float, default=0.001)
    s.add_argument("--outlier-bits", type=int, default=4)
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("quantize", parents=[common], help="write a quantized container")
    s.add_argument("model")
    s.add_argument("plan")
    s.add_argument("out")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", parents=[common, corpus], help="perplexity report")
    s.add_argument("model", help="plain or quantized checkpoint")
    s.add_argument("--plan", help="fake-quantize with this plan before evaluating")
    s.add_argument("--baseline", help="checkpoint whose perplexity is the retention baseline")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, corpus, calib], help="n_low = 0..N curves as CSV")
    s.add_argument("model")
    s.add_argument("--orderings", default="lim,zd,reverse,random")
    s.add_argument("--bits", type=parse_bits, default=(4, 2))
    s.add_argument("--seeds", type=int, default=3, help="random orderings averaged")
    s.add_argument("--retention-factor", type=float, default=harness.RETENTION_FACTOR)
    s.add_argument("--retention-out", help="write retention points JSON here (default: stderr)")
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("compare-prune", parents=[common, corpus, calib], help="quantization vs pruning at equal memory")
    s.add_argument("model")
    s.add_argument("--bits", type=parse_bits, default=(8, 4))
    s.add_argument("--ordering", default="lim", choices=["lim", "zd", "reverse_lim", "reverse", "random"])
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare_prune)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy checkpoint (needs torch)")
    s.add_argument("--corpus", default="data/corpus/train")
    s.add_argument("--out", default="data/toy_checkpoint.safetensors")
    s.add_argument("--steps", type=int, default=600)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--train-seq-len", type=int, default=256)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--n-layers", type=int, default=12)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--d-ff", type=int, default=256)
    s.add_argument("--max-seq-len", type=int, default=256)
    s.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train-toy" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except harness.NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LayerQuantError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
