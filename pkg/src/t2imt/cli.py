"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime
failure, 5 partial result (failed or missing cells). Results go to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, IncompleteRun, MutationInapplicable, T2IMTError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4, 5

logger = logging.getLogger("t2imt")


def _print_json(data) -> None:
    print(json.dumps(data, sort_keys=True))


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from None


# --- subcommands -----------------------------------------------------------------

def cmd_validate(args) -> int:
    from .campaign import validate_config

    try:
        data = _load_json(args.config)
    except ConfigError as exc:
        print(f"error: {exc.errors[0]}", file=sys.stderr)
        return EXIT_CONFIG
    errors = validate_config(data, Path(args.config).parent)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if errors:
        return EXIT_CONFIG
    print("config ok")
    return EXIT_OK


def cmd_run(args) -> int:
    from dataclasses import replace

    from .campaign import load_config, run

    config = load_config(args.config)
    if args.workers is not None:
        config = replace(config, max_workers=args.workers)
    if args.output_dir is not None:
        config = replace(config, output_dir=Path(args.output_dir).resolve())
    outcome = run(config)
    _print_json({"run_dir": str(config.output_dir), "counts": outcome.report.counts,
                 "generator_calls": outcome.generator_calls})
    return EXIT_OK if outcome.complete else EXIT_PARTIAL


def cmd_report(args) -> int:
    from .report import build_report, render

    try:
        report = build_report(args.run_dir, epsilon=args.epsilon, quality_dir=args.quality_dir)
        code = EXIT_PARTIAL if report.failures else EXIT_OK
    except IncompleteRun as exc:
        if not exc.report.backends:
            print(f"error: {args.run_dir} has no run manifest", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"warning: {len(exc.missing)} cell(s) missing; report is partial", file=sys.stderr)
        report, code = exc.report, EXIT_PARTIAL
    sys.stdout.write(render(report, args.format, args.table))
    return code


def _canon(args):
    from .er import load_canon_map

    return load_canon_map(args.registry)


def cmd_mutate(args) -> int:
    from .er import Seed, build_pool, load_seed_corpus, naive_extract
    from .mutation import (
        SS,
        apply_operator,
        build_candidate_pool,
        load_candidate_pool,
        load_lexicon,
        mutate_ss_record,
        registry_candidate_pool,
    )

    canon = _canon(args)
    if args.seeds:
        seeds = load_seed_corpus(args.seeds, canon)
        default_cands = build_candidate_pool(s.pool for s in seeds)
    elif args.caption is not None:
        triples = [tuple(t) for t in args.triple] if args.triple else naive_extract(args.caption, canon)
        seeds = [Seed("caption", args.caption, build_pool(args.caption, triples, canon))]
        default_cands = registry_candidate_pool(canon)
    else:
        print("error: give --caption or --seeds", file=sys.stderr)
        return EXIT_USAGE
    cands = load_candidate_pool(args.candidates, canon) if args.candidates else default_cands
    lexicon = load_lexicon(args.lexicon)
    for seed in seeds:
        try:
            if args.op == SS:
                records = [mutate_ss_record(seed.pool, seed.caption, lexicon, args.rng_seed)[0]]
            else:
                records = apply_operator(args.op, seed.pool, cands, args.rng_seed)
        except MutationInapplicable as exc:
            _print_json({"seed": seed.id, "status": "inapplicable", "reason": f"{type(exc).__name__}: {exc}"})
            continue
        _print_json({"seed": seed.id, "status": "ok", "records": [r.to_dict() for r in records]})
    return EXIT_OK


def cmd_synth(args) -> int:
    from .er import build_pool
    from .synth import load_templates, render

    pool = build_pool(args.caption or "", [tuple(t) for t in args.triple], _canon(args))
    print(render(pool, load_templates(args.templates)))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detection import parse_detections
    from .mr import MRCase, check
    from .mutation import MutationRecord

    canon = _canon(args)
    record = MutationRecord.from_dict(_load_json(args.record), canon)
    kw = {"entity_threshold": args.threshold}
    follow = parse_detections(_load_json(args.follow), canon, args.follow, **kw)
    seed = parse_detections(_load_json(args.seed), canon, args.seed, **kw) if args.seed else None
    verdict = check(MRCase(record, seed, follow))
    _print_json(verdict.to_record(args.case_id, record.operator))
    return EXIT_OK


def cmd_metrics(args) -> int:
    from . import metrics as m

    if args.metric == "fid":
        value = m.i_fid(m.summarize(m.load_matrix(args.real)), m.summarize(m.load_matrix(args.generated)))
        print(f"{value:.6f}")
    elif args.metric == "is":
        arr = m.load_matrix(args.input)
        if args.probabilities:
            probs = arr
        else:
            t = args.temperature
            if args.calibrate:
                t = m.fit_temperature(m.load_matrix(args.calibrate[0]), m.load_matrix(args.calibrate[1])[:, 0].astype(int))
                print(f"temperature {t:g}", file=sys.stderr)
            probs = m.temperature_scale(arr, t)
        mean, std = m.i_is(probs, args.splits)
        print(f"{mean:.6f} {std:.6f}")
    elif args.metric == "rp":
        print(f"{m.r_precision(m.load_matrix(args.input), args.candidates or None):.6f}")
    elif args.metric == "temperature":
        print(f"{m.fit_temperature(m.load_matrix(args.logits), m.load_matrix(args.labels)[:, 0].astype(int)):g}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2imt", description="Metamorphic testing harness for text-to-image software.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(s):
        s.add_argument("config_path", nargs="?", metavar="CONFIG", help="campaign config JSON")
        s.add_argument("-c", "--config", dest="config_opt", help="same as the positional CONFIG")

    s = sub.add_parser("validate", help="check a campaign config without running it")
    add_config(s)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="run or resume a campaign")
    add_config(s)
    s.add_argument("--workers", type=int, help="override max_workers")
    s.add_argument("--output-dir", help="override output_dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="aggregate a run directory into metric tables")
    s.add_argument("run_dir")
    s.add_argument("--format", choices=("md", "json", "csv"), default="md")
    s.add_argument("--table", choices=("cells", "quality", "errors", "miss", "density"), default="cells",
                   help="table to emit with --format csv")
    s.add_argument("--epsilon", type=float, help="density flag threshold (default: from the run config)")
    s.add_argument("--quality-dir", help="directory of ingested features/logits/similarities")
    s.set_defaults(func=cmd_report)

    def add_registry(s):
        s.add_argument("--registry", help="registry/alias JSON (default: packaged registry)")

    s = sub.add_parser("mutate", help="apply one operator to a caption's ER pool")
    s.add_argument("--op", required=True, type=str.upper,
                   choices=("SS", "EC", "ER_R", "ER_A", "EC+ER_R", "EC+ER_A"))
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--caption", help="a single caption")
    src.add_argument("--seeds", help="seed corpus (JSONL); one output line per seed")
    s.add_argument("--triple", nargs=3, action="append", metavar=("SUBJ", "PRED", "OBJ"),
                   help="ER triple (repeatable); default: extract from the caption")
    s.add_argument("--rng-seed", type=int, default=0)
    s.add_argument("--candidates", help="candidate pool JSON")
    s.add_argument("--lexicon", help="synonym lexicon JSON")
    add_registry(s)
    s.set_defaults(func=cmd_mutate)

    s = sub.add_parser("synth", help="render an ER pool as a prompt")
    s.add_argument("--triple", nargs=3, action="append", required=True, metavar=("SUBJ", "PRED", "OBJ"))
    s.add_argument("--caption", help="fallback text for an empty pool")
    s.add_argument("--templates", help="template JSON")
    add_registry(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="check one metamorphic relation from stored detections")
    s.add_argument("record", help="mutation record JSON")
    s.add_argument("follow", help="follow-up detection JSON (wire format)")
    s.add_argument("--seed", help="seed detection JSON (not needed for SS)")
    s.add_argument("--case-id", default="case")
    s.add_argument("--threshold", type=float, default=0.08)
    add_registry(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", help="image quality metrics on ingested arrays")
    msub = s.add_subparsers(dest="metric", required=True)
    f = msub.add_parser("fid", help="Frechet distance between two feature matrices")
    f.add_argument("real")
    f.add_argument("generated")
    f = msub.add_parser("is", help="inception score from logits (or probabilities)")
    f.add_argument("input")
    f.add_argument("--splits", type=int, default=10)
    f.add_argument("--temperature", type=float, default=1.0)
    f.add_argument("--calibrate", nargs=2, metavar=("LOGITS", "LABELS"), help="fit the temperature first")
    f.add_argument("--probabilities", action="store_true", help="input rows are already probabilities")
    f = msub.add_parser("rp", help="R-precision of a similarity matrix (true caption in column 0)")
    f.add_argument("input")
    f.add_argument("--candidates", type=int, default=100, help="captions per row; 0 accepts any width")
    f = msub.add_parser("temperature", help="fit a softmax temperature on labelled logits")
    f.add_argument("logits")
    f.add_argument("labels")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if hasattr(args, "config_path"):
        args.config = args.config_opt or args.config_path
        if args.config is None:
            parser.print_usage(sys.stderr)
            print("error: a config path is required", file=sys.stderr)
            return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (T2IMTError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
