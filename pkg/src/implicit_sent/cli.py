"""Command-line entry point.

Subcommands: ``prepare``, ``train``, ``evaluate``, ``predict``,
``gradcheck``, ``experiment`` and ``synth`` (writes a generated corpus).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric or training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .config import RunConfig, build_run_config, load_config_file
from .data import (
    LABELS,
    Example,
    dedupe_overlap,
    load_corpus,
    load_embeddings,
    split_train_valid,
    write_corpus,
    write_embeddings,
)
from .errors import ConfigError, ContractError, NumericError, ParseError, TrainingError
from .metrics import average_reports, format_table, reports_to_json
from .models import MODEL_KINDS, build_model, load_checkpoint, predict_labels, save_checkpoint

log = logging.getLogger("implicit_sent")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "IMPLICIT_SENT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_run_flags(p: argparse.ArgumentParser, *, model_list: bool = False) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    if model_list:
        p.add_argument("--models", nargs="+", choices=MODEL_KINDS, help="architectures to compare (default: all five)")
    else:
        p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--embeddings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="implicit-sent", description="Neural implicit-sentiment polarity classifiers.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="remove test sentences that also occur in the training file")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _common_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="label sentences with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--input", required=True, help="lines of 'id<TAB>tokens' or full corpus lines")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--model", nargs="*", choices=MODEL_KINDS, help="architectures to check (default: all)")
    p.add_argument("--no-layers", action="store_true", help="skip the per-layer checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="replicate runs for several architectures, compared in one table")
    _common_run_flags(p, model_list=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("synth", help="write a generated order-sensitive corpus and embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--kind", choices=("order", "separable"), default="order")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def _run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "func", "command", "verbose")}
    return build_run_config(file_values, flags)


def _load_checked(path) -> list[Example]:
    examples, errors = load_corpus(path)
    if errors:
        for err in errors:
            print(f"{path}: {err}", file=sys.stderr)
        raise ParseError(f"{path}: {len(errors)} malformed line(s)")
    return examples


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_prepare(args) -> int:
    train, test = _load_checked(args.train), _load_checked(args.test)
    kept, removed = dedupe_overlap(train, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "test.dedup.tsv", kept)
    _write_json(out / "dedupe_report.json", {"removed": len(removed), "removed_ids": [e.id for e in removed], "kept": len(kept)})
    print(f"removed {len(removed)} overlapping test sentence(s); kept {len(kept)}")
    for ex in removed:
        print(f"removed\t{ex.id}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cfg.require_paths("train", "embeddings")
    if cfg.out is None:
        raise ConfigError("--out is required")
    from .training import fit

    spec = cfg.model_spec()
    tcfg = cfg.train_config()
    vocab, table = load_embeddings(cfg.embeddings, spec.embedding_dim)
    examples = _load_checked(cfg.train)
    split = split_train_valid(examples, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", cfg.to_dict())
    log.info("config %s", json.dumps(cfg.to_dict(), sort_keys=True))

    model = build_model(spec, table, seed=cfg.seed)
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:

        def record(rep):
            fh.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")
            log.info("epoch %d loss %.4f val_macro_f1 %.2f", rep.epoch, rep.train_loss, rep.val_macro_f1)

        fit(model, split, tcfg, vocab, on_epoch=record)
    save_checkpoint(out / "model.ckpt", model, vocab.fingerprint(spec.embedding_dim), cfg.seed)
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for p in (args.checkpoint, args.test, args.embeddings):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    from .training import evaluate

    vocab, table = load_embeddings(args.embeddings)
    model, header = load_checkpoint(args.checkpoint, table, vocab.fingerprint())
    report = evaluate(model, _load_checked(args.test), vocab)
    reports = {model.spec.kind: report}
    print(format_table(reports))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(format_table(reports) + "\n", encoding="utf-8")
        (out / "report.json").write_text(reports_to_json(reports) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_predict_input(path) -> list[tuple[str, list[str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) == 2:
                ex_id, text = fields
            elif len(fields) in (3, 4):
                ex_id, text = fields[0], fields[2]
            else:
                raise ParseError("expected 'id<TAB>tokens' or a corpus line", lineno)
            tokens = text.split()
            if not tokens:
                raise ParseError("empty token field", lineno)
            rows.append((ex_id, tokens))
    return rows


def cmd_predict(args) -> int:
    for p in (args.checkpoint, args.embeddings, args.input):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    import numpy as np

    vocab, table = load_embeddings(args.embeddings)
    model, _ = load_checkpoint(args.checkpoint, table, vocab.fingerprint())
    rows = _read_predict_input(args.input)
    lines = []
    if rows:
        max_len = model.spec.max_len
        ids = np.zeros((len(rows), max_len), dtype=np.int64)
        mask = np.zeros((len(rows), max_len), dtype=bool)
        for i, (_, toks) in enumerate(rows):
            toks = toks[:max_len]
            ids[i, : len(toks)] = vocab.ids(toks)
            mask[i, : len(toks)] = True
        from .training import predict_arrays

        preds = predict_arrays(model, ids, mask)
        lines = [f"{ex_id}\t{LABELS[p]}" for (ex_id, _), p in zip(rows, preds)]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import LAYER_CHECKS, run_check

    names = [] if args.no_layers else list(LAYER_CHECKS)
    names += list(args.model) if args.model else list(MODEL_KINDS)
    worst = None
    for name in names:
        outcome = run_check(name, seed=args.seed)
        print(outcome.line(), flush=True)
        if not outcome.passed and (worst is None or outcome.result.max_rel_error > worst.result.max_rel_error):
            worst = outcome
    if worst is not None:
        print(f"gradient check failed; worst: {worst.name} {worst.result.worst_param} rel_err={worst.result.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def cmd_experiment(args) -> int:
    cfg = _run_config(args)
    cfg.require_paths("train", "test", "embeddings")
    if cfg.out is None:
        raise ConfigError("--out is required")
    from .training import train_and_evaluate

    vocab, table = load_embeddings(cfg.embeddings)
    train = _load_checked(cfg.train)
    test = _load_checked(cfg.test)
    split = split_train_valid(train, seed=cfg.seed, test=test)
    tcfg = cfg.train_config()
    seeds = [cfg.seed + i for i in range(cfg.replicates)]
    log.info("config %s", json.dumps(cfg.to_dict(), sort_keys=True))

    cells = [(kind, seed) for kind in cfg.models for seed in seeds]

    def run(cell):
        kind, seed = cell
        try:
            return train_and_evaluate(cfg.model_spec(kind), split, tcfg, vocab, table, seed)
        except (TrainingError, NumericError) as exc:
            return exc

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, cells))

    reports, failures = {}, {}
    for kind in cfg.models:
        got = [r for (k, _), r in zip(cells, results) if k == kind]
        errs = [r for r in got if isinstance(r, Exception)]
        if errs:
            failures[kind] = str(errs[0])
            print(f"{kind}: failed: {errs[0]}", file=sys.stderr)
        else:
            reports[kind] = average_reports(got)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_config.json", cfg.to_dict())
    table_text = format_table(reports)
    (out / "comparison.txt").write_text(table_text + "\n", encoding="utf-8")
    payload = json.loads(reports_to_json(reports))
    if failures:
        payload["_failures"] = failures
    _write_json(out / "comparison.json", payload)
    print(table_text)
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_synth(args) -> int:
    from . import synthetic

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "order":
        vocab, table = synthetic.order_vocabulary(seed=args.seed)
        train = synthetic.order_corpus(args.n_train, seed=args.seed + 1, prefix="tr")
        test = synthetic.order_corpus(args.n_test, seed=args.seed + 2, prefix="te")
    else:
        words = synthetic.filler_words(20) + ["kw_neutral", "kw_positive", "kw_negative"]
        vocab, table = synthetic.random_embeddings(words, seed=args.seed)
        train = synthetic.separable_corpus(args.n_train, seed=args.seed + 1)
        test = [Example(f"te{i}", e.label, e.tokens) for i, e in enumerate(synthetic.separable_corpus(args.n_test, seed=args.seed + 2))]
    write_corpus(out / "train.tsv", train)
    write_corpus(out / "test.tsv", test)
    write_embeddings(out / "embeddings.txt", vocab.words[1:], table.matrix[1:])
    print(f"wrote {len(train)} train / {len(test)} test examples and {len(vocab) - 1} vectors to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
