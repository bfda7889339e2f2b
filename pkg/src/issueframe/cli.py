"""``issueframe`` command line: preprocess, synth, train, gridsearch, evaluate, predict, agreement.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  Tables go to stdout, machine-readable results to files in
``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from .config import read_kv, write_kv
from .data import FRAMES, QUALITY, Instance, TaskDataset, distribution_report, load_corpus, save_corpus
from .errors import ConfigError, DataError, IssueFrameError, NumericError, ParseError
from .evaluation import (TfidfFeaturizer, agreement_macro_f, baseline_majority, baseline_random, cohen_kappa,
                         evaluate, softmax_regression, write_delta_csv, write_report_json)
from .model import load_checkpoint, predict_proba, save_checkpoint
from .numcore import make_rng
from .preprocess import (SpanAnnotation, clean_tweet, filter_frames, project_spans, quality_dataset,
                         raw_frame_labels, tokenize)
from .synth import SynthSpec, synth_embeddings, synth_generate
from .train import (DEFAULT_GRID, TrainConfig, grid_search_weight, load_corpora, multi_seed_report,
                    report_on, train_run)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
PATH_KEYS = ("main", "unlabeled", "dev", "test", "embeddings")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("baseline", "multitask", "adversarial"))
    p.add_argument("--main-weight", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--hidden", dest="hidden_size", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--min-epochs", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--iter-factor", type=int)
    p.add_argument("--lambda-rev", type=float)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--main", help="main-task corpus (JSONL)")
    p.add_argument("--aux", action="append", help="labelset:path, repeatable")
    p.add_argument("--unlabeled", help="unlabeled target corpus for the adversarial task")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--embeddings", help="word-vector text file")
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="issueframe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="filter, clean and tokenize raw corpora")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--kind", required=True, choices=("spans", "tweets", "quality", "corpus"))
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("synth", help="write synthetic domain-shifted corpora and embeddings")
    p.add_argument("--spec", help="flat key = value synthetic spec")
    p.add_argument("--shift", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)

    p = sub.add_parser("gridsearch", help="grid-search the main-task coin weight")
    _add_train_flags(p)
    p.add_argument("--grid", help="comma-separated weights (default 0.1..0.9)")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labeled corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-corpus", help="training corpus for the majority and tf-idf baselines")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("predict", help="predict one frame per input line")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-", help="text file, one sequence per line ('-' = stdin)")
    p.add_argument("--out", help="write JSONL here instead of stdout")

    p = sub.add_parser("agreement", help="Cohen's kappa and macro-F agreement of two annotations")
    p.add_argument("file_a")
    p.add_argument("file_b")
    return parser


# -- helpers -------------------------------------------------------------------

def _out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _read_jsonl(path):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot open: {e.strerror}", path) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as e:
                    raise ParseError(f"invalid JSON: {e.msg}", path, lineno) from None


def _config_from_args(args) -> TrainConfig:
    values = {}
    base_dir = None
    if args.config:
        values.update(read_kv(args.config))
        base_dir = os.path.dirname(os.path.abspath(args.config))
    flags = {k: v for k, v in vars(args).items()
             if k in TrainConfig.__dataclass_fields__ and v is not None}
    if "aux" in flags:
        flags["aux"] = ",".join(flags["aux"])
    values.update(flags)
    if base_dir is not None:
        # relative paths inside a config file are relative to that file
        from_file = read_kv(args.config)
        for key in PATH_KEYS:
            if key in from_file and key not in flags and from_file[key] and not os.path.isabs(from_file[key]):
                values[key] = os.path.normpath(os.path.join(base_dir, from_file[key]))
        if "aux" in from_file and "aux" not in flags:
            entries = []
            for entry in filter(None, (e.strip() for e in from_file["aux"].split(","))):
                ls, _, path = entry.partition(":")
                if path and not os.path.isabs(path):
                    path = os.path.normpath(os.path.join(base_dir, path))
                entries.append(f"{ls}:{path}")
            values["aux"] = ",".join(entries)
    return TrainConfig.from_mapping(values)


# -- commands ------------------------------------------------------------------

def _instance_from_raw(obj, lineno, path, text, domain_default):
    labels = raw_frame_labels(obj.get("labels", []), path, lineno)
    tokens = tokenize(text)
    return Instance(str(obj.get("id", lineno)), text, tuple(tokens), labels,
                    obj.get("domain", domain_default), obj.get("split", "train"))


def cmd_preprocess(args) -> int:
    out = _out_dir(args.out_dir)
    rng = make_rng(args.seed)
    for path in args.inputs:
        stem = os.path.splitext(os.path.basename(path))[0]
        if args.kind == "quality":
            records = []
            for lineno, obj in _read_jsonl(path):
                if not isinstance(obj.get("scores"), list) or "text" not in obj:
                    raise ParseError("quality records need 'text' and 'scores'", path, lineno)
                records.append(obj)
            ds = quality_dataset(records, rng, name=stem)
        elif args.kind == "spans":
            insts = []
            for lineno, obj in _read_jsonl(path):
                tokens = obj.get("tokens") or tokenize(obj.get("text", ""))
                try:
                    spans = [SpanAnnotation(str(obj["doc_id"]), int(s["start"]), int(s["end"]),
                                            int(s["label"]), str(s["annotator"])) for s in obj["spans"]]
                    sentences = [tuple(map(int, se)) for se in obj["sentences"]]
                except (KeyError, TypeError, ValueError) as e:
                    raise ParseError(f"malformed span record ({e})", path, lineno) from None
                for sl in project_spans(sentences, spans, len(tokens)):
                    toks = [t.lower() for t in tokens[sl.start:sl.end]]
                    insts.append(Instance(f"{obj['doc_id']}:{sl.index}", " ".join(tokens[sl.start:sl.end]),
                                          tuple(toks), sl.labels, obj.get("domain", "news"),
                                          obj.get("split", "train")))
            ds = TaskDataset(stem, FRAMES, tuple(insts))
        else:
            insts = []
            for lineno, obj in _read_jsonl(path):
                if not isinstance(obj.get("text"), str):
                    raise ParseError("field 'text' must be a string", path, lineno)
                text = clean_tweet(obj["text"]) if args.kind == "tweets" else obj["text"]
                inst = _instance_from_raw(obj, lineno, path, text,
                                          "twitter" if args.kind == "tweets" else "news")
                if inst.tokens:
                    insts.append(inst)
            ds = filter_frames(TaskDataset(stem, FRAMES, tuple(insts)))
        target = os.path.join(out, f"{stem}.jsonl")
        save_corpus(ds, target)
        report = distribution_report(ds)
        with open(os.path.join(out, f"{stem}.dist.txt"), "w", encoding="utf-8") as fh:
            fh.write(report + "\n")
        print(report)
    write_kv({"command": "preprocess", "kind": args.kind, "seed": args.seed,
              "inputs": list(args.inputs)}, os.path.join(out, "preprocess.cfg"))
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args.out_dir)
    values = read_kv(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.shift is not None:
        values["shift"] = args.shift
    spec = SynthSpec.from_mapping(values)
    corpora = synth_generate(spec, make_rng(spec.seed, 100))
    emb = synth_embeddings(corpora, spec.embedding_dim, make_rng(spec.seed, 101), spec.embedding_std)
    save_corpus(corpora.source, os.path.join(out, "source.jsonl"))
    save_corpus(corpora.target.where("dev"), os.path.join(out, "target_dev.jsonl"))
    save_corpus(corpora.target.where("test"), os.path.join(out, "target_test.jsonl"))
    save_corpus(corpora.unlabeled, os.path.join(out, "unlabeled.jsonl"))
    emb.save(os.path.join(out, "embeddings.txt"))
    write_kv(asdict(spec), os.path.join(out, "synth.cfg"))
    write_kv({"main": "source.jsonl", "dev": "target_dev.jsonl", "test": "target_test.jsonl",
              "unlabeled": "unlabeled.jsonl", "embeddings": "embeddings.txt", "seed": spec.seed},
             os.path.join(out, "train.cfg"))
    print(distribution_report(corpora.source))
    print(distribution_report(corpora.target))
    print(f"unlabeled target: {len(corpora.unlabeled)}; vocabulary: {len(corpora.words)} words")
    return 0


def _echo(config: TrainConfig) -> dict:
    return config.echo()


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args.out_dir)
    corpora = load_corpora(config)
    log_path = os.path.join(out, "run_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(entry):
            log.write(json.dumps(entry, sort_keys=True) + "\n")
        model, record = train_run(config, corpora, config.seed, on_epoch=on_epoch)
    echo = _echo(config)
    save_checkpoint(model, os.path.join(out, "model.json"), echo)
    write_kv(echo, os.path.join(out, "config.cfg"))
    dev_report = report_on(model, corpora.dev)
    dev_report.config = echo
    write_report_json(dev_report, os.path.join(out, "report_dev.json"))
    if corpora.test is not None:
        test_report = report_on(model, corpora.test)
        test_report.config = echo
        write_report_json(test_report, os.path.join(out, "report_test.json"))
    _write_json(record.to_json(), os.path.join(out, "run_record.json"))
    print(f"mode={config.mode} seed={config.seed} epochs={record.epochs_run} best_epoch={record.best_epoch} "
          f"dev_macro_f={record.best_dev_f:.4f}")
    print(dev_report.table())
    return 0


def cmd_gridsearch(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args.out_dir)
    try:
        grid = [float(w) for w in args.grid.split(",")] if args.grid else list(DEFAULT_GRID)
    except ValueError:
        raise ConfigError(f"bad --grid value {args.grid!r}") from None
    corpora = load_corpora(config)
    best_w, table = grid_search_weight(config, corpora, grid, jobs=max(1, args.jobs))
    _write_json({"best_main_weight": best_w, "table": table, "config": _echo(config)},
                os.path.join(out, "grid.json"))
    best = TrainConfig.from_mapping({"main_weight": best_w}, base=config)
    write_kv(_echo(best), os.path.join(out, "best.cfg"))
    print(f"{'w':>5} {'mean F':>8} {'std':>8}  runs")
    for row in table:
        mark = " *" if row["w"] == best_w else ""
        print(f"{row['w']:5.2f} {row['mean']:8.4f} {row['std']:8.4f}  {len(row['scores'])}{mark}")
    print(f"best main weight: {best_w}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out_dir)
    model, _ = load_checkpoint(args.model)
    head = model.heads["main"]
    labels = head.labels
    corpus = load_corpus(args.corpus, labels)
    docs = [i.tokens for i in corpus.instances]
    gold = [i.labels for i in corpus.instances]
    probs = predict_proba(model, head, docs)
    preds = [labels.labels[k] for k in probs.argmax(axis=1)]
    cfg = {"model": args.model, "corpus": args.corpus, "seed": args.seed}
    report = evaluate(preds, gold, labels.labels, cfg)
    rand = evaluate(baseline_random(labels.labels, len(docs), make_rng(args.seed, 7)), gold, labels.labels)
    write_report_json(report, os.path.join(out, "report.json"))
    write_delta_csv(report, rand, os.path.join(out, "per_class_delta.csv"))
    baselines = {"random": rand.to_json()}
    if args.train_corpus:
        train_ds = load_corpus(args.train_corpus, labels)
        tgold = [i.labels for i in train_ds.instances]
        baselines["majority"] = evaluate(baseline_majority(tgold, len(docs), labels.labels), gold,
                                         labels.labels).to_json()
        feats = TfidfFeaturizer().fit([i.tokens for i in train_ds.instances])
        expanded = [(i.tokens, lab) for i in train_ds.instances for lab in i.labels]
        pred_idx = softmax_regression(feats.transform([t for t, _ in expanded]),
                                      [labels.index(lab) for _, lab in expanded],
                                      feats.transform(docs), len(labels))
        baselines["tfidf_softmax"] = evaluate([labels.labels[k] for k in pred_idx], gold,
                                              labels.labels).to_json()
    _write_json(baselines, os.path.join(out, "baselines.json"))
    print(report.table())
    for name, rep in baselines.items():
        print(f"{name:>14}: macro-F {rep['macro_f']:.4f}  micro-F {rep['micro_f']:.4f}")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.model)
    head = model.heads["main"]
    if args.input == "-":
        lines = sys.stdin.read().splitlines()
    else:
        try:
            with open(args.input, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except OSError as e:
            raise ParseError(f"cannot open: {e.strerror}", args.input) from None
    token_lists = [tokenize(line) for line in lines]
    for k, toks in enumerate(token_lists, 1):
        if not toks:
            raise ParseError("empty input line", args.input, k)
    probs = predict_proba(model, head, token_lists) if token_lists else []
    rows = []
    for line, p in zip(lines, probs):
        k = int(p.argmax())
        rows.append(json.dumps({"text": line, "label": head.labels.labels[k],
                                "probs": {str(lab): float(x) for lab, x in zip(head.labels.labels, p)}}))
    text = "\n".join(rows) + ("\n" if rows else "")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _read_annotations(path) -> dict | list:
    if path.endswith(".jsonl"):
        out = {}
        for lineno, obj in _read_jsonl(path):
            labels = obj.get("labels")
            if not isinstance(labels, list) or len(labels) != 1:
                raise ParseError("agreement needs exactly one label per instance", path, lineno)
            out[str(obj["id"])] = labels[0]
        return out
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]
    except OSError as e:
        raise ParseError(f"cannot open: {e.strerror}", path) from None


def cmd_agreement(args) -> int:
    a, b = _read_annotations(args.file_a), _read_annotations(args.file_b)
    if isinstance(a, dict) != isinstance(b, dict):
        raise DataError("both annotation files must use the same format")
    if isinstance(a, dict):
        if set(a) != set(b):
            raise DataError("annotation files cover different instance ids")
        ids = sorted(a)
        a, b = [a[i] for i in ids], [b[i] for i in ids]
    kappa = cohen_kappa(a, b)
    f_a, f_b = agreement_macro_f(a, b)
    print(f"instances          {len(a)}")
    print(f"cohen_kappa        {kappa:.4f}")
    print(f"macro_f (A gold)   {f_a:.4f}")
    print(f"macro_f (B gold)   {f_b:.4f}")
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "synth": cmd_synth, "train": cmd_train,
            "gridsearch": cmd_gridsearch, "evaluate": cmd_evaluate, "predict": cmd_predict,
            "agreement": cmd_agreement}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, IssueFrameError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
