"""``dual-lora`` command-line entry point.

Exit codes: 0 success, 1 runtime failure (one ``error: <Kind>: <message>``
line on stderr), 2 usage error, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, parse_config_text
from .evaluation import (
    PAIRINGS,
    embed_corpus,
    export_score_histogram,
    fuse_scores,
    probe_lid,
    read_scores,
    scenario_eer,
    score_trials,
    write_scores,
)
from .network import DualLoraModel
from .synthdata import Corpus, build_bundle, read_bundle, write_bundle
from .training import TrainMode, run_training

log = logging.getLogger("dual_lora")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3


class CliError(RuntimeError):
    pass


def _config(path: str | None) -> RunConfig:
    return parse_config(path) if path else parse_config_text("")


def _write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    bundle = build_bundle(cfg.corpus_spec(), cfg["trials_per_scenario"])
    out = Path(args.out or cfg["corpus_dir"] or "corpus")
    write_bundle(bundle, out)
    _write(out / "config.cfg", cfg.echo())
    print(f"wrote {out} source={len(bundle.source)} train={len(bundle.train)} dev={len(bundle.dev)} "
          f"trials={len(bundle.dev_trials)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    corpus_dir = args.corpus or cfg["corpus_dir"]
    if not corpus_dir:
        raise CliError("no corpus directory (use --corpus or set corpus_dir)")
    mode = TrainMode(args.mode or cfg["mode"])
    result = run_training(cfg.train_config(), read_bundle(corpus_dir), mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.tsv")
    _write(metrics, result.metrics_tsv())
    last = result.metrics[-1]
    print(f"wrote {out} mode={mode.value} epochs={len(result.metrics)} dev_eer={last.dev_eer:.4f} metrics={metrics}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, DualLoraModel):
        raise CliError(f"{args.checkpoint} is already a merged model")
    save_checkpoint(model.merge(), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    bundle = read_bundle(args.corpus)
    scores = score_trials(load_checkpoint(args.checkpoint), bundle.dev_trials, bundle.dev)
    write_scores(scores, args.out)
    print(f"wrote {args.out} trials={len(scores)}")
    return EXIT_OK


def _pairings(scenario: str):
    return PAIRINGS[:1] if scenario == "worst-case" else PAIRINGS


def _report(scores, args) -> int:
    pairings = _pairings(args.scenario)
    if args.scenario == "worst-case":
        scores = scores.select(*PAIRINGS[0])
    report = scenario_eer(scores, pairings)
    text = report.to_tsv()
    if args.report:
        _write(args.report, text)
    sys.stdout.write(text)
    if args.histogram:
        export_score_histogram(scores, args.bins, path=args.histogram)
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = read_bundle(args.corpus)
    if args.scores:
        scores = read_scores(args.scores, bundle.dev_trials)
    elif args.checkpoint:
        scores = score_trials(load_checkpoint(args.checkpoint), bundle.dev_trials, bundle.dev)
    else:
        raise CliError("eval needs --scores or --checkpoint")
    return _report(scores, args)


def cmd_fuse(args) -> int:
    bundle = read_bundle(args.corpus)
    fused = fuse_scores([read_scores(p, bundle.dev_trials) for p in args.scores])
    write_scores(fused, args.out)
    print(f"wrote {args.out} systems={len(args.scores)}")
    if args.report or args.histogram:
        return _report(fused, args)
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args.config)
    bundle = read_bundle(args.corpus)
    corpus = Corpus(bundle.train.records + bundle.dev.records, bundle.dev.n_languages)
    emb = embed_corpus(load_checkpoint(args.checkpoint), corpus.features())
    rep = probe_lid(emb, corpus.languages, cfg.seed, n_classes=corpus.n_languages, groups=corpus.speakers)
    print(f"lid_accuracy={rep.lid_accuracy:.4f}\tn_train={rep.n_train}\tn_test={rep.n_test}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_suite

    reports = gradient_suite(n_batches=args.batches, seed=args.seed)
    worst: dict[str, tuple[float, float, bool]] = {}
    for r in reports:
        if args.verbose_cases:
            print(r.line())
        err, tol, ok = worst.get(r.case, (0.0, r.tol, True))
        worst[r.case] = (max(err, r.max_rel_error), tol, ok and r.passed)
    for case, (err, tol, ok) in worst.items():
        print(f"{case}\tbatches={args.batches}\tmax_rel_err={err:.3e}\ttol={tol:g}\t{'ok' if ok else 'FAIL'}")
    return EXIT_OK if all(ok for _, _, ok in worst.values()) else EXIT_CHECK


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", choices=["all", "worst-case"], default="all")
    p.add_argument("--report", help="write the EER table (TSV) here")
    p.add_argument("--histogram", help="write a score histogram (CSV) here")
    p.add_argument("--bins", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dual-lora", description="Dual-LoRA speaker verification toolkit")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and dev trials")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one system and write its checkpoint")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=[m.value for m in TrainMode])
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-epoch TSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold the speaker adapters into the backbone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("score", help="cosine-score the dev trials")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER overall and per pairing")
    p.add_argument("--corpus", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scores")
    src.add_argument("--checkpoint")
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="language-ID probe on frozen speaker embeddings")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("fuse", help="equal-weight standardized score fusion")
    p.add_argument("--corpus", required=True)
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose-cases", action="store_true", help="one line per microbatch")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except Exception as exc:  # report every failure on one line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
