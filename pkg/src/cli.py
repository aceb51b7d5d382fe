"""Command-line entry point: ``python run.py <subcommand> ...``.

Library code raises; this module is the only place that turns exceptions
into exit statuses (1 usage, 2 data, 3 lint errors).
"""
from __future__ import annotations
import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from rich.table import Table

from .config import (
    DEFAULT_CONFIG_FILE, TwparseConfig, _validate_log_level, load_config_file, merge_overrides, resolve_model_path,
)
from .conllu import Sentence, Treebank, ingestion_report, read_conllu, write_conllu_file
from .distill import (
    MODES, alpha_sweep, check_mode, distill_train, load_ensemble, train_ensemble, write_manifest,
)
from .errors import IncompatibleModeError, TwparseError, UsageError
from .evaluation import (
    EvalReport, attachment_scores, compare_systems, pipeline_scores, pos_scores, render_table,
    speed_report, throughput, token_scores,
)
from .lint import anonymize, corpus_stats, lint_treebank, load_allowlist, write_allowlist
from .logger import get_console, get_logger, setup_logging
from .parser import labeled_attachment, parse_treebank, train_parser, train_parser_seeds
from .pipeline import TweetPipeline, load_parser, parse_function, read_tweets
from .tagger import TaggerModel, jackknife_tags, tag_tokens, train_tagger
from .tokenizer import TokenizerModel, tokenize, train_tokenizer

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_LINT = 3

METRICS = ("tok", "pos", "las", "pipeline", "speed")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers

def _resolve_config(args: argparse.Namespace) -> TwparseConfig:
    """Defaults < config file < command-line flags."""
    overrides: Dict[str, Any] = {
        "training": {
            "seed": args.seed,
            "epochs": args.epochs,
            "learning_rate": args.learning_rate,
            "progress": False if args.no_progress else None,
        },
        "distill": {
            "alpha": getattr(args, "alpha", None),
            "mode": getattr(args, "mode", None),
            "members": getattr(args, "members", None),
            "jobs": getattr(args, "jobs", None),
        },
    }
    pretrained = getattr(args, "pretrained", None)
    if pretrained:
        overrides["tagger"] = {"pretrained": pretrained}
        overrides["parser"] = {"pretrained": pretrained}
    if args.log_level:
        level = _validate_log_level(args.log_level, "INFO")
        overrides["logging"] = {"log_level": level, "console_level": level}
    config_path = args.config
    if config_path == DEFAULT_CONFIG_FILE and not Path(config_path).exists():
        config_path = None
    return TwparseConfig.from_dict(merge_overrides(load_config_file(config_path), overrides))


def _run_config(args: argparse.Namespace, cfg: TwparseConfig) -> Dict[str, Any]:
    shown = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    return {"command": args.command, "args": shown, "config": cfg.to_dict()}


def _write_output(path: str, tb: Treebank, run_config: Dict[str, Any]) -> None:
    """Write CoNLL-U with the resolved run configuration embedded in the first sentence."""
    if len(tb):
        stamp = json.dumps(run_config, sort_keys=True, separators=(",", ":"))
        first = tb.sentences[0].with_comment("run_config", stamp)
        tb = Treebank((first,) + tb.sentences[1:], tb.split_name)
    write_conllu_file(path, tb)


def _load_parser(path: str) -> Callable[[Sentence], Sentence]:
    return parse_function(load_parser(resolve_model_path(path)))


def _read_optional(path: Optional[str], split: str) -> Optional[Treebank]:
    return read_conllu(path, split) if path else None


def _raw_pairs(tb: Treebank):
    pairs = [(s.text, s) for s in tb if s.text]
    missing = len(tb) - len(pairs)
    if missing:
        logger.warning(f"{missing} sentences have no '# text' comment and were left out")
    return pairs


def _emit_reports(reports: Sequence[EvalReport], as_json: bool, title: str) -> None:
    if as_json:
        payload = reports[0].as_dict() if len(reports) == 1 else [r.as_dict() for r in reports]
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
        return
    get_console().print(render_table(reports, title))
    sys.stdout.write("".join(r.to_key_values() for r in reports))


def _seed_list(args: argparse.Namespace, cfg: TwparseConfig, count: int) -> List[int]:
    if args.seeds:
        if args.members is not None and args.members != len(args.seeds):
            raise UsageError(f"--members {args.members} does not match {len(args.seeds)} --seeds")
        return list(args.seeds)
    return [cfg.training.seed + i for i in range(count)]


# ---------------------------------------------------------------- commands

def cmd_tokenize(args, cfg, run_config) -> int:
    model = TokenizerModel.load(resolve_model_path(args.model))
    sentences = []
    for lineno, raw in enumerate(read_tweets(args.input), start=1):
        if not raw.strip():
            continue
        text = anonymize(raw) if args.anonymize else raw
        sentences.append(tokenize(model, text, f"{args.id_prefix}-{lineno}"))
    _write_output(args.output, Treebank(tuple(sentences)), run_config)
    return EXIT_OK


def cmd_tag(args, cfg, run_config) -> int:
    model = TaggerModel.load(resolve_model_path(args.model))
    tb = read_conllu(args.input)
    tagged = Treebank(tuple(tag_tokens(model, s) for s in tb), tb.split_name)
    _write_output(args.output, tagged, run_config)
    return EXIT_OK


def cmd_parse(args, cfg, run_config) -> int:
    parse = _load_parser(args.model)
    tb = read_conllu(args.input)
    _write_output(args.output, parse_treebank(parse, tb, cfg.training.progress), run_config)
    return EXIT_OK


def cmd_pipeline(args, cfg, run_config) -> int:
    pipeline = TweetPipeline.from_paths(
        resolve_model_path(args.tokenizer),
        resolve_model_path(args.tagger),
        resolve_model_path(args.parser),
        cfg.training.progress,
    )
    tb = pipeline.process(read_tweets(args.input), anonymize=args.anonymize, id_prefix=args.id_prefix)
    _write_output(args.output, tb, run_config)
    return EXIT_OK


def cmd_train_tokenizer(args, cfg, run_config) -> int:
    train = _raw_pairs(read_conllu(args.train, "train"))
    dev_tb = _read_optional(args.dev, "dev")
    dev = _raw_pairs(dev_tb) if dev_tb is not None else None
    model = train_tokenizer(train, cfg.tokenizer, cfg.training, dev)
    model.save(resolve_model_path(args.output))
    logger.info(f"Saved tokenizer to {args.output}")
    return EXIT_OK


def cmd_train_tagger(args, cfg, run_config) -> int:
    model = train_tagger(read_conllu(args.train, "train"), cfg.tagger, cfg.training, _read_optional(args.dev, "dev"))
    model.save(resolve_model_path(args.output))
    logger.info(f"Saved tagger to {args.output}")
    return EXIT_OK


def cmd_train_parser(args, cfg, run_config) -> int:
    train = read_conllu(args.train, "train")
    dev = _read_optional(args.dev, "dev")
    output = Path(resolve_model_path(args.output))
    if args.seeds and len(args.seeds) > 1:
        study = train_parser_seeds(train, cfg.parser, cfg.training, args.seeds, dev)
        for seed, model in zip(study.seeds, study.models):
            model.save(str(output.with_name(f"{output.stem}.seed{seed}{output.suffix}")))
        report = EvalReport("las", las=round(study.mean, 1), details={
            "las_min": round(study.worst, 1), "las_max": round(study.best, 1), "seeds": len(study.seeds),
        })
        _emit_reports([report], args.json, "Seed study")
        return EXIT_OK
    training = cfg.training
    if args.seeds:
        training = dataclasses.replace(training, seed=args.seeds[0])
    model = train_parser(train, cfg.parser, training, dev)
    model.save(str(output))
    logger.info(f"Saved parser to {output}")
    return EXIT_OK


def cmd_train_ensemble(args, cfg, run_config) -> int:
    seeds = _seed_list(args, cfg, cfg.distill.members)
    train = read_conllu(args.train, "train")
    members = train_ensemble(train, cfg.parser, cfg.training, seeds, cfg.distill.jobs, _read_optional(args.dev, "dev"))
    out_dir = Path(resolve_model_path(args.output_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed, model in zip(seeds, members):
        path = out_dir / f"member-{seed}.twpm"
        model.save(str(path))
        paths.append(str(path))
    manifest = resolve_model_path(args.manifest) if args.manifest else str(out_dir / "ensemble.manifest")
    write_manifest(manifest, paths)
    return EXIT_OK


def cmd_distill(args, cfg, run_config) -> int:
    alphas = args.sweep
    if alphas:
        for a in alphas:
            check_mode(a, "oracle")
        if not args.dev:
            raise UsageError("--sweep needs --dev to score each alpha")
    else:
        check_mode(cfg.distill.alpha, cfg.distill.mode)
        if not args.output:
            raise UsageError("distill needs --output unless --sweep is given")
    ensemble = load_ensemble(resolve_model_path(args.ensemble))
    train = read_conllu(args.train, "train")
    dev = _read_optional(args.dev, "dev")
    if alphas:
        results = alpha_sweep(ensemble, train, alphas, cfg.parser, cfg.training, dev)
        reports = [EvalReport(f"alpha={a:g}", las=round(las, 1)) for a, las in results]
        _emit_reports(reports, args.json, "Distillation alpha sweep")
        return EXIT_OK
    student = distill_train(
        ensemble, train, cfg.distill.alpha, cfg.distill.mode, cfg.parser, cfg.training, dev, cfg.distill.jobs,
    )
    student.save(resolve_model_path(args.output))
    if dev is not None:
        logger.info(f"Distilled parser LAS on dev: {labeled_attachment(student, dev):.1f}")
    logger.info(f"Saved distilled parser to {args.output}")
    return EXIT_OK


def cmd_jackknife(args, cfg, run_config) -> int:
    train = read_conllu(args.train, "train")
    tagged = jackknife_tags(train, args.folds, cfg.tagger, cfg.training, cfg.distill.jobs)
    _write_output(args.output, tagged, run_config)
    return EXIT_OK


def cmd_eval(args, cfg, run_config) -> int:
    gold = read_conllu(args.gold)
    if args.metric == "speed":
        if not args.models:
            raise UsageError("--metric speed needs --models")
        rates = {}
        for path in args.models:
            rates[path] = throughput(_load_parser(path), gold, runs=args.runs)
        relative = compare_systems(rates, args.models[0])
        reports = []
        for path, rate in rates.items():
            report = speed_report(path, rate)
            report.details["relative_speed"] = round(relative[path], 2)
            reports.append(report)
        _emit_reports(reports, args.json, "Parsing speed")
        return EXIT_OK
    if not args.system:
        raise UsageError(f"--metric {args.metric} needs --system")
    system = read_conllu(args.system)
    if args.metric == "tok":
        report = token_scores(gold, system)
    elif args.metric == "pos":
        report = pos_scores(gold, system, gold_tokens=not args.auto_tokens)
    elif args.metric == "las":
        report = attachment_scores(gold, system)
    else:
        report = pipeline_scores(gold, system)
    _emit_reports([report], args.json, "Evaluation")
    return EXIT_OK


def cmd_lint(args, cfg, run_config) -> int:
    tb = read_conllu(args.input)
    result = lint_treebank(tb, load_allowlist(args.allowlist))
    if args.write_allowlist:
        write_allowlist(args.write_allowlist, result.violations)
        return EXIT_OK
    for v in result.violations:
        sys.stdout.write(v.format() + "\n")
    return EXIT_LINT if result.errors else EXIT_OK


def cmd_stats(args, cfg, run_config) -> int:
    tb = read_conllu(args.input, allow_multi_root=args.allow_multi_root)
    ingest = ingestion_report(tb)
    stats = corpus_stats(tb)
    table = Table(title=f"Token classes ({stats.tokens} tokens, {ingest.sentences} sentences)")
    table.add_column("class", style="bold")
    for col in ("syntactic %", "non-syntactic %", "total %"):
        table.add_column(col, justify="right")
    for row in stats.rows:
        table.add_row(row.token_class.value, f"{row.syntactic:.2f}", f"{row.non_syntactic:.2f}", f"{row.total:.2f}")
    table.add_row("all", "", f"{stats.non_syntactic_total:.2f}", "")
    get_console().print(table)
    lines = [
        f"sentences={ingest.sentences}",
        f"tokens={ingest.tokens}",
        f"multiword_ranges={ingest.multiword_ranges}",
        f"non_projective={ingest.non_projective}",
        f"non_projective_fraction={ingest.non_projective_fraction:.4f}",
        f"non_syntactic_percent={stats.non_syntactic_total:.2f}",
    ]
    lines += [f"{r.token_class.value}_non_syntactic_percent={r.non_syntactic:.2f}" for r in stats.rows]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_anonymize(args, cfg, run_config) -> int:
    lines = [anonymize(raw) for raw in read_tweets(args.input)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text, encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--config", default=DEFAULT_CONFIG_FILE,
        help=f"JSON or 'key = value' config file (default: {DEFAULT_CONFIG_FILE} when present)",
    )
    common.add_argument("--log-level", default=None, help="Override log level (DEBUG, INFO, WARNING, ERROR)")
    common.add_argument("--seed", type=int, default=None, help="Training seed")
    common.add_argument("--epochs", type=int, default=None, help="Training epochs")
    common.add_argument("--learning-rate", type=float, default=None, help="Initial SGD learning rate")
    common.add_argument("--no-progress", action="store_true", help="Disable progress bars")
    return common


def build_parser() -> ArgumentParser:
    common = _common()
    ap = ArgumentParser(prog="twparse", description="Tokenize, tag and parse tweets into Universal Dependencies.")
    sub = ap.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    sub.required = True

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("tokenize", cmd_tokenize, "Tokenize raw tweets (one per line) into CoNLL-U")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")
    p.add_argument("--anonymize", action="store_true")
    p.add_argument("--id-prefix", default="tweet")

    p = add("tag", cmd_tag, "Add UPOS tags to CoNLL-U")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")

    p = add("parse", cmd_parse, "Parse tagged CoNLL-U with a parser model or ensemble manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")

    p = add("pipeline", cmd_pipeline, "Raw tweets to parsed CoNLL-U")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--tagger", required=True)
    p.add_argument("--parser", required=True, help="Parser model or ensemble manifest")
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")
    p.add_argument("--anonymize", action="store_true")
    p.add_argument("--id-prefix", default="tweet")

    for name, handler, what in (
        ("train-tokenizer", cmd_train_tokenizer, "Train the character tokenizer"),
        ("train-tagger", cmd_train_tagger, "Train the UPOS tagger"),
        ("train-parser", cmd_train_parser, "Train a greedy parser"),
    ):
        p = add(name, handler, what)
        p.add_argument("--train", required=True)
        p.add_argument("--dev", default=None)
        p.add_argument("--output", required=True)
        if name != "train-tokenizer":
            p.add_argument("--pretrained", default=None, help="Whitespace-separated word vectors")
        if name == "train-parser":
            p.add_argument("--seeds", type=int, nargs="+", default=None, help="Several seeds run a seed study")
            p.add_argument("--json", action="store_true")

    p = add("train-ensemble", cmd_train_ensemble, "Train ensemble members and write a manifest")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--pretrained", default=None)

    p = add("distill", cmd_distill, "Distill an ensemble into one greedy parser")
    p.add_argument("--ensemble", required=True, help="Ensemble manifest")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--sweep", type=float, nargs="+", default=None, help="Oracle-mode dev LAS per alpha")
    p.add_argument("--json", action="store_true")
    p.add_argument("--pretrained", default=None)

    p = add("jackknife", cmd_jackknife, "Replace gold UPOS with k-fold automatic tags")
    p.add_argument("--train", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--output", default="-")

    p = add("eval", cmd_eval, "Score system output against gold")
    p.add_argument("--metric", choices=METRICS, required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--system", default=None)
    p.add_argument("--auto-tokens", action="store_true", help="POS F1 over span-aligned automatic tokens")
    p.add_argument("--models", nargs="+", default=None, help="Parsers to time; the first is the baseline")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--json", action="store_true")

    p = add("lint", cmd_lint, "Check tweet annotation conventions")
    p.add_argument("--input", default="-")
    p.add_argument("--allowlist", default=None)
    p.add_argument("--write-allowlist", default=None, help="Freeze current errors into an allowlist file")

    p = add("stats", cmd_stats, "Token-class proportions and ingestion statistics")
    p.add_argument("--input", default="-")
    p.add_argument("--allow-multi-root", action="store_true")

    p = add("anonymize", cmd_anonymize, "Replace at-mentions and URLs in raw tweets")
    p.add_argument("--input", default="-")
    p.add_argument("--output", default="-")
    return ap


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit status."""
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        cfg = _resolve_config(args)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE

    setup_logging(cfg.logging, force=True)
    run_config = _run_config(args, cfg)
    logger.info(f"twparse {args.command}: {json.dumps(run_config, sort_keys=True)}")

    try:
        return args.handler(args, cfg, run_config)
    except (UsageError, IncompatibleModeError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (TwparseError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        return EXIT_DATA
