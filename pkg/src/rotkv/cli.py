"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numeric or property failure,
4 I/O or file-format error. The --threads flag only parallelizes internal
work and never changes output bytes.
"""

from __future__ import annotations

import argparse
import sys

from . import formats, lowrank, pipeline
from .errors import EXIT_IO, EXIT_NUMERIC, EXIT_OK, ToolError, ValidationError
from .model import ModelConfig
from .chunk_select import synthetic_calibration


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rotkv",
        description="Rotary-chunk selection and low-rank KV-cache compression",
    )
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; never changes output bytes")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a seeded synthetic model file")
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--heads", type=int, required=True)
    g.add_argument("--head-dim", type=int, required=True)
    g.add_argument("--embed-dim", type=int, default=None,
                   help="defaults to heads * head_dim")
    g.add_argument("--rope-base", type=float, default=10000.0)
    g.add_argument("--out", required=True)

    c = sub.add_parser("gen-calib", help="write seeded calibration sequences")
    c.add_argument("--model", required=True, help="model file fixing the embed width")
    c.add_argument("--sequences", type=int, default=4)
    c.add_argument("--length", type=int, default=24)
    c.add_argument("--out", required=True)

    s = sub.add_parser("search", help="select elite rotation chunks per head")
    s.add_argument("--model", required=True)
    s.add_argument("--method", choices=pipeline.METHODS, default="ropelite")
    s.add_argument("--r", type=int, required=True)
    s.add_argument("--score", choices=("pre", "post"), default="pre")
    s.add_argument("--calib", default=None,
                   help="calibration file; defaults to seeded synthetic data")
    s.add_argument("--sequences", type=int, default=4)
    s.add_argument("--length", type=int, default=24)
    s.add_argument("--out", default=None, help="elite selection output path")

    d = sub.add_parser("decompose", help="factorize the key/value path")
    d.add_argument("--model", required=True)
    d.add_argument("--elite", required=True)
    d.add_argument("--mode", choices=("jlrd", "slrd"), default="jlrd")
    d.add_argument("--rank", type=int, default=None, help="joint latent width")
    d.add_argument("--rank-k", type=int, default=None)
    d.add_argument("--rank-v", type=int, default=None)
    d.add_argument("--out", required=True)

    a = sub.add_parser("allocate", help="enumerate and rank (r, d_ckv) settings")
    a.add_argument("--model", default=None,
                   help="model file; enables proxy ranking")
    a.add_argument("--shape", default=None,
                   help="L,HEADS,HEAD_DIM shape for arithmetic-only runs")
    a.add_argument("--target-ratio", type=float, required=True)
    a.add_argument("--alignment", type=int, default=1)
    a.add_argument("--proxy", choices=("frobenius", "perplexity"), default="frobenius")
    a.add_argument("--tolerance-pp", type=float, default=0.0,
                   help="accepted deviation from the target ratio, percentage points")
    a.add_argument("--method", choices=("uniform", "contribution", "ropelite"),
                   default="uniform", help="selection used while scoring the proxy")

    m = sub.add_parser("simulate", help="run the full pipeline from a manifest")
    m.add_argument("--manifest", required=True)

    v = sub.add_parser("verify", help="run invariant suites against a model file")
    v.add_argument("--model", required=True)
    v.add_argument("--suite", default="all",
                   choices=pipeline.SUITES + ("all",))
    v.add_argument("--elite", default=None)
    v.add_argument("--factors", default=None)

    r = sub.add_parser("report", help="render a JSON-lines report")
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return p


def _emit(row: dict) -> None:
    sys.stdout.write(formats.dump_json_line(row) + "\n")


def _cmd_gen_model(args) -> int:
    embed = args.embed_dim if args.embed_dim is not None else args.heads * args.head_dim
    cfg = ModelConfig(args.layers, args.heads, args.head_dim, embed, args.rope_base)
    pipeline.gen_model(args.out, cfg, args.seed)
    _emit({"stage": "gen-model", "path": args.out, "seed": args.seed})
    return EXIT_OK


def _cmd_gen_calib(args) -> int:
    cfg, _ = formats.read_model(args.model)
    calib = synthetic_calibration(cfg, args.seed, args.sequences, args.length)
    formats.write_calibration(args.out, calib)
    _emit({"stage": "gen-calib", "path": args.out, "seed": args.seed,
           "sequences": args.sequences, "length": args.length})
    return EXIT_OK


def _cmd_search(args) -> int:
    cfg, weights = formats.read_model(args.model)
    if args.calib is not None:
        calib = formats.read_calibration(args.calib)
        calib.validate(cfg)
    else:
        calib = synthetic_calibration(cfg, args.seed, args.sequences, args.length)
    selection = pipeline.run_search(
        cfg, weights, args.method, args.r, calib,
        score_mode=args.score, threads=args.threads,
    )
    if args.out:
        formats.write_elite(args.out, selection)
    _emit({
        "stage": "search", "method": selection.method, "r": selection.r,
        "score_mode": args.score, "forward_passes": selection.forward_passes,
        "out": args.out,
    })
    return EXIT_OK


def _cmd_decompose(args) -> int:
    from . import attention

    cfg, weights = formats.read_model(args.model)
    elite = formats.read_elite(args.elite)
    elite.validate(cfg)
    if args.mode == "jlrd":
        if args.rank is None:
            raise ValidationError("--rank is required for jlrd")
        cmodel = attention.compress_model(cfg, weights, elite, "jlrd", d_ckv=args.rank)
        cost = lowrank.cost_jlrd(cfg, elite.r, args.rank)
        ranks = {"d_ckv": args.rank}
    else:
        if args.rank_k is None or args.rank_v is None:
            raise ValidationError("--rank-k and --rank-v are required for slrd")
        cmodel = attention.compress_model(
            cfg, weights, elite, "slrd", d_ck=args.rank_k, d_cv=args.rank_v
        )
        cost = lowrank.cost_slrd(cfg, elite.r, args.rank_k, args.rank_v)
        ranks = {"d_ck": args.rank_k, "d_cv": args.rank_v}
    formats.write_factors(args.out, cfg, tuple(l.factors for l in cmodel.layers))
    _emit({
        "stage": "cost", "mode": args.mode, "r": elite.r, **ranks,
        "params_original": cost.params_original, "params_after": cost.params_after,
        "cache_per_token_layer": cost.cache_per_token_layer,
        "cache_ratio": str(cost.cache_ratio),
        "cache_ratio_float": float(cost.cache_ratio),
        "out": args.out,
    })
    return EXIT_OK


def _cmd_allocate(args) -> int:
    weights = calib = None
    if args.model is not None:
        cfg, weights = formats.read_model(args.model)
        calib = synthetic_calibration(cfg, args.seed)
    elif args.shape is not None:
        parts = [int(x) for x in args.shape.split(",")]
        if len(parts) != 3:
            raise ValidationError("--shape must be L,HEADS,HEAD_DIM")
        cfg = ModelConfig.create(*parts)
    else:
        raise ValidationError("allocate needs --model or --shape")
    configs = lowrank.allocate_configs(
        cfg, args.target_ratio, args.alignment, args.proxy,
        tolerance=args.tolerance_pp / 100.0, weights=weights, calib=calib,
        selection_method=args.method, holdout_seed=args.seed,
    )
    for rank, c in enumerate(configs):
        _emit({
            "stage": "allocate", "rank": rank, "r": c.r, "d_ckv": c.d_ckv,
            "cache_per_token_layer": c.cache_per_token_layer,
            "cache_ratio": str(c.cache_ratio),
            "cache_ratio_float": float(c.cache_ratio),
            "params_after": c.params_after, "params_original": c.params_original,
            "identity": c.identity, "proxy_score": c.proxy_score,
        })
    return EXIT_OK


def _cmd_simulate(args) -> int:
    manifest = pipeline.read_manifest(args.manifest)
    result = pipeline.run_pipeline(manifest, threads=args.threads)
    for row in result.cost_rows + result.equivalence_rows:
        _emit(row)
    return EXIT_OK if result.passed else EXIT_NUMERIC


def _cmd_verify(args) -> int:
    report = pipeline.verify(
        args.model, args.suite, elite_path=args.elite,
        factors_path=args.factors, seed=args.seed,
    )
    for row in report.rows:
        _emit(row)
    _emit({"stage": "verify-summary", "suite": args.suite, "pass": report.passed})
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_report(args) -> int:
    rows = formats.read_jsonl(args.infile)
    if args.format == "json":
        for row in rows:
            _emit(row)
        return EXIT_OK
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    if args.format == "csv":
        import csv

        writer = csv.DictWriter(sys.stdout, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        return EXIT_OK
    widths = {k: max(len(k), *(len(str(r.get(k, ""))) for r in rows)) for k in keys}
    sys.stdout.write("  ".join(k.ljust(widths[k]) for k in keys).rstrip() + "\n")
    for row in rows:
        line = "  ".join(str(row.get(k, "")).ljust(widths[k]) for k in keys)
        sys.stdout.write(line.rstrip() + "\n")
    return EXIT_OK


_COMMANDS = {
    "gen-model": _cmd_gen_model,
    "gen-calib": _cmd_gen_calib,
    "search": _cmd_search,
    "decompose": _cmd_decompose,
    "allocate": _cmd_allocate,
    "simulate": _cmd_simulate,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ToolError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
