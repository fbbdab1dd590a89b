"""Command-line entry point: ``longctx <subcommand> [flags]``.

Every run writes its results plus ``manifest.json`` into ``--out``.  The
manifest echoes the fully resolved config, so ``--config <out>/manifest.json``
reruns the same experiment.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import CorpusError, load_corpus, sample_targets
from .evaluator import (
    AggregateCurve,
    CurvePoint,
    EvalError,
    Taxonomy,
    aggregate,
    overlap_matrix,
    prefix_sweep,
    read_records_csv,
    write_records_csv,
)
from .model import TransformerLM, load_checkpoint, save_checkpoint
from .perturbations import RANDOM_REPLACE, TOKEN_DROP, PerturbationError, perturbation_sweep
from .probes import (
    ProbeError,
    boundary_ids,
    build_suffix_task,
    chapter_increment_probe,
    copy_probe,
    suffix_accuracy,
    suffix_length_sweep,
    suffix_records,
)
from .reporting import Axes, sha256_file, write_chart, write_manifest
from .synthetic import ChapterLayout, make_chapter_doc
from .tokenizer import encode, frequency_table, load_vocab, save_vocab, train_bpe
from .train import train

log = logging.getLogger("longctx")

SUBCOMMANDS = ("tokenize", "train", "sweep", "perturb", "copy-probe", "suffix-id", "chapter-probe", "report")
THREADS_ENV = "LONGCTX_THREADS"


class CliError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON); a run manifest also works")
    common.add_argument("--seed", type=int, help="master seed (overrides config.seed)")
    common.add_argument("--out", type=Path, help="output directory for results and manifest.json")
    common.add_argument("--model", type=Path, help="model checkpoint (overrides config.model_path)")
    common.add_argument("--corpus", type=Path, help="directory of .txt documents (overrides config.corpus.dir)")
    common.add_argument(
        "--threads", type=int,
        help=f"torch intra-op threads (default 1); the {THREADS_ENV} environment variable takes precedence",
    )
    parser = argparse.ArgumentParser(
        prog="longctx",
        description="Long-context usage analysis for small sparse-attention language models.",
        epilog=f"Every subcommand takes --config, --seed, --out, --model, --corpus and --threads; "
        f"see 'longctx SUBCOMMAND --help'. {THREADS_ENV} overrides --threads.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "tokenize": "train a BPE vocabulary on the corpus; writes vocab.txt and token_counts.csv",
        "train": "train a model on the tokenized corpus; writes model.ckpt, vocab.txt, losses.csv",
        "sweep": "perplexity vs prefix length; writes sweep.csv, sweep.svg, overlap.json",
        "perturb": "perturbation sweeps over m; writes perturb.csv and perturb.svg",
        "copy-probe": "paste targets into the prefix at each offset; writes copy_probe.csv/.svg/.json",
        "suffix-id": "suffix identification accuracy; writes suffix_tasks.jsonl, suffix.csv/.svg/.json",
        "chapter-probe": "chapter-number increment probe on synthetic headers; writes chapter.json",
        "report": "re-render charts from the CSVs already in --out",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    else:
        n = flag if flag is not None else 1
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.model is not None:
        cfg.model_path = str(args.model)
    if args.corpus is not None:
        cfg.corpus.dir = str(args.corpus)
    if cfg.out is None:
        raise ConfigError("no output directory: pass --out or set config.out")
    cfg.validate()
    return cfg


# -- shared plumbing ----------------------------------------------------------


class Run:
    def __init__(self, command: str, cfg: ExperimentConfig, threads: int):
        self.command = command
        self.cfg = cfg
        self.threads = threads
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.vocab_sha256 = None
        self.model_sha256 = None

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def corpus(self):
        c = self.cfg.corpus
        if not c.dir:
            raise ConfigError("no corpus: pass --corpus or set config.corpus.dir")
        if c.metadata is None and (Path(c.dir) / "metadata.jsonl").exists():
            c.metadata = str(Path(c.dir) / "metadata.jsonl")
        if c.metadata is not None and not Path(c.metadata).exists():
            raise ConfigError(f"metadata file not found: {c.metadata}")
        return load_corpus(c.dir, c.metadata)

    def vocab(self, required: bool = True):
        t = self.cfg.tokenizer
        if t.vocab is None and self.cfg.model_path:
            sibling = Path(self.cfg.model_path).parent / "vocab.txt"
            if sibling.exists():
                t.vocab = str(sibling)
        if t.vocab is None:
            if required:
                raise ConfigError("no vocabulary: set config.tokenizer.vocab or keep vocab.txt next to the model")
            return None
        if not Path(t.vocab).exists():
            raise ConfigError(f"vocab file not found: {t.vocab}")
        vocab = load_vocab(t.vocab)
        self.vocab_sha256 = vocab.digest()
        return vocab

    def model(self) -> TransformerLM:
        if not self.cfg.model_path:
            raise ConfigError("no model: pass --model or set config.model_path")
        model = load_checkpoint(self.cfg.model_path)
        self.model_sha256 = sha256_file(self.cfg.model_path)
        return model

    def check_vocab(self, model: TransformerLM, vocab) -> None:
        expected = model.meta.get("vocab_sha256")
        if expected != vocab.digest():
            raise CliError(
                f"model/corpus mismatch: {self.cfg.model_path} was trained with vocab {expected}, "
                f"but {self.cfg.tokenizer.vocab} hashes to {vocab.digest()}"
            )

    def taxonomy(self, corpus, tokens, vocab) -> Taxonomy:
        labels = {d.doc_id: d.labels for d in corpus if d.labels is not None}
        return Taxonomy(frequency_table(tokens, vocab), self.cfg.protocol.cutoff, labels)

    def finish(self, name: str = "manifest.json") -> None:
        manifest = {
            "subcommand": self.command,
            "config": self.cfg.to_dict(),
            "seeds": {"seed": self.cfg.seed},
            "vocab_sha256": self.vocab_sha256,
            "model_sha256": self.model_sha256,
            "code_version": f"longctx {__version__}",
            "threads": self.threads,
        }
        write_manifest(self.out, manifest, self.outputs, name)


def tokenize_corpus(corpus, vocab) -> dict:
    return {d.doc_id: encode(vocab, d.text) for d in corpus}


def _windows(run: Run, corpus, tokens):
    p = run.cfg.protocol
    return sample_targets(corpus, tokens, p.prefix_len, p.n_targets, p.exclude_last, p.total, run.cfg.seed)


def _chart(run: Run, name: str, curves, title: str, **axes) -> None:
    write_chart(run.path(name), curves, Axes(title=title, **axes))


# -- subcommands --------------------------------------------------------------


def cmd_tokenize(run: Run) -> None:
    corpus = run.corpus()
    vocab = run.vocab(required=False)
    if vocab is None:
        vocab = train_bpe([d.text for d in corpus], run.cfg.tokenizer.vocab_size)
        run.vocab_sha256 = vocab.digest()
    save_vocab(vocab, run.path("vocab.txt"))
    tokens = tokenize_corpus(corpus, vocab)
    table = frequency_table(tokens, vocab)
    with open(run.path("token_counts.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("token_id", "count", "frequent"))
        for i, n in enumerate(table.counts):
            if i != vocab.pad_id:
                w.writerow((i, int(n), int(i in table.frequent_set)))


def cmd_train(run: Run) -> None:
    corpus = run.corpus()
    vocab = run.vocab(required=False)
    if vocab is None:
        vocab = train_bpe([d.text for d in corpus], run.cfg.tokenizer.vocab_size)
        run.vocab_sha256 = vocab.digest()
    save_vocab(vocab, run.path("vocab.txt"))
    tokens = tokenize_corpus(corpus, vocab)
    config = run.cfg.model.build(vocab.vocab_size)
    result = train(config, [tokens[k].ids for k in sorted(tokens)], run.cfg.train.build(run.cfg.seed))
    ckpt = run.path("model.ckpt")
    save_checkpoint(result.model, ckpt, meta={"vocab_sha256": vocab.digest()})
    run.model_sha256 = sha256_file(ckpt)
    with open(run.path("losses.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, v in enumerate(result.losses):
            w.writerow((i, repr(v)))


def _setup_eval(run: Run):
    model = run.model()
    vocab = run.vocab()
    run.check_vocab(model, vocab)
    corpus = run.corpus()
    tokens = tokenize_corpus(corpus, vocab)
    return corpus, vocab, model, tokens


def cmd_sweep(run: Run) -> None:
    corpus, vocab, model, tokens = _setup_eval(run)
    p = run.cfg.protocol
    windows = _windows(run, corpus, tokens)
    curves, records = prefix_sweep(
        model, windows, tokens, p.lengths, run.taxonomy(corpus, tokens, vocab), p.group_by, p.loss_scale, p.batch_size
    )
    write_records_csv(records, run.path("sweep.csv"))
    _chart(run, "sweep.svg", curves, "Perplexity vs prefix length")
    longest = [r for r in records if r.prefix_len == p.lengths[-1]]
    run.path("overlap.json").write_text(json.dumps(overlap_matrix(longest), indent=2, sort_keys=True) + "\n")


def cmd_perturb(run: Run) -> None:
    corpus, vocab, model, tokens = _setup_eval(run)
    p = run.cfg.protocol
    windows = _windows(run, corpus, tokens)
    taxonomy = run.taxonomy(corpus, tokens, vocab)
    donors = {k: v.ids for k, v in tokens.items()}
    records = []
    for kind in p.kinds:
        predicates = p.drop_predicates if kind == TOKEN_DROP else [None]
        for pred in predicates:
            res = perturbation_sweep(
                model, windows, tokens, kind, p.m_values, p.runs, run.cfg.seed,
                drop_predicate=pred, donors=donors if kind == RANDOM_REPLACE else None,
                pad_id=vocab.pad_id, taxonomy=taxonomy, batch_size=p.batch_size,
            )
            records.extend(res.records)
    write_records_csv(records, run.path("perturb.csv"))
    curves = aggregate(records, ["perturb_kind", *p.group_by], "perturb_m", p.loss_scale)
    _chart(run, "perturb.svg", curves, "Perplexity vs perturbed prefix tokens")


def cmd_copy_probe(run: Run) -> None:
    corpus, vocab, model, tokens = _setup_eval(run)
    p = run.cfg.protocol
    windows = _windows(run, corpus, tokens)
    res = copy_probe(model, windows, tokens, sorted(p.offsets), run.taxonomy(corpus, tokens, vocab))
    write_records_csv(res.records, run.path("copy_probe.csv"), with_probe=True)
    _chart(run, "copy_probe.svg", [res.curve], "Target perplexity vs copy offset")
    summary = {"baseline_ppl": res.baseline_ppl, "points": [[pt.x, pt.ppl] for pt in res.curve.points]}
    run.path("copy_probe.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_suffix_id(run: Run) -> None:
    corpus, vocab, model, tokens = _setup_eval(run)
    p = run.cfg.protocol
    ids = {k: v.ids for k, v in tokens.items()}
    bounds = boundary_ids(vocab)
    examples = build_suffix_task(ids, bounds, p.lengths[-1], p.suffix_len, count=p.suffix_count, seed=run.cfg.seed)
    with open(run.path("suffix_tasks.jsonl"), "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")
    records, points = [], []
    for length in p.lengths:
        records.extend(suffix_records(model, examples, ids, length))
        points.append(CurvePoint(length, suffix_accuracy(model, examples, ids, length), len(examples)))
    write_records_csv(records, run.path("suffix.csv"), with_probe=True)
    curve = AggregateCurve(("suffix accuracy",), points)
    _chart(run, "suffix.svg", [curve], "Suffix identification accuracy", y_label="accuracy")
    summary = {"accuracy_by_prefix_len": [[pt.x, pt.ppl] for pt in points]}
    if p.suffix_lengths:
        sweep = suffix_length_sweep(
            model, ids, bounds, p.suffix_lengths, p.lengths[-1], p.suffix_count, run.cfg.seed
        )
        summary["accuracy_by_suffix_len"] = [[pt.x, pt.ppl] for pt in sweep.points]
    run.path("suffix.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_chapter_probe(run: Run) -> None:
    c = run.cfg.chapter
    layout = ChapterLayout(n_chapters=c.n_chapters, spacing=c.spacing, n_filler=c.n_filler)
    if run.cfg.model_path:
        model = run.model()
        if model.config.vocab_size != layout.vocab.vocab_size:
            raise CliError(
                f"model vocab size {model.config.vocab_size} does not match the chapter layout "
                f"({layout.vocab.vocab_size}); train one with chapter-probe and no --model"
            )
    else:
        rng = np.random.default_rng(run.cfg.seed)
        docs = []
        for i in range(c.train_docs):
            first = int(rng.integers(0, layout.n_chapters - 1))
            docs.append(make_chapter_doc(layout, run.cfg.seed * 100_003 + i + 1, first)[0])
        hp = replace(
            run.cfg.train.build(run.cfg.seed),
            lr=c.train_lr, steps=c.train_steps, batch_size=c.train_batch_size, optimizer="adam",
        )
        model = train(run.cfg.model.build(layout.vocab.vocab_size), docs, hp).model
        ckpt = run.path("chapter_model.ckpt")
        save_checkpoint(model, ckpt)
        run.model_sha256 = sha256_file(ckpt)
    report = chapter_increment_probe(model, layout, seed=run.cfg.seed, first_number=c.first_number)
    out = {
        "delta": report.delta,
        "noise_bound": report.noise_bound,
        "headers": [
            {"header": h, "nll_correct": a, "nll_corrupted": b, "delta": d}
            for h, a, b, d in zip(report.header_index, report.nll_correct, report.nll_corrupted, report.deltas)
        ],
    }
    run.path("chapter.json").write_text(json.dumps(out, indent=2) + "\n")


def _suffix_curve(records) -> AggregateCurve:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.prefix_len, r.doc_id, r.anchor, r.seed), {})[r.target_index] = r.nll
    by_len: dict = {}
    for (length, *_), scores in sorted(groups.items()):
        gold = scores[0]
        ok = all(gold < s for i, s in scores.items() if i != 0)
        by_len.setdefault(length, []).append(ok)
    points = [CurvePoint(n, float(Fraction(sum(v), len(v))), len(v)) for n, v in sorted(by_len.items())]
    return AggregateCurve(("suffix accuracy",), points)


def cmd_report(run: Run) -> None:
    p = run.cfg.protocol
    made = 0
    if (run.out / "sweep.csv").exists():
        curves = aggregate(read_records_csv(run.out / "sweep.csv"), p.group_by, "prefix_len", p.loss_scale)
        _chart(run, "sweep.svg", curves, "Perplexity vs prefix length")
        made += 1
    if (run.out / "perturb.csv").exists():
        records = read_records_csv(run.out / "perturb.csv")
        curves = aggregate(records, ["perturb_kind", *p.group_by], "perturb_m", p.loss_scale)
        _chart(run, "perturb.svg", curves, "Perplexity vs perturbed prefix tokens")
        made += 1
    if (run.out / "copy_probe.csv").exists():
        curves = aggregate(read_records_csv(run.out / "copy_probe.csv"), (), "offset_or_suffix_len", p.loss_scale)
        _chart(run, "copy_probe.svg", curves, "Target perplexity vs copy offset")
        made += 1
    if (run.out / "suffix.csv").exists():
        curve = _suffix_curve(read_records_csv(run.out / "suffix.csv"))
        _chart(run, "suffix.svg", [curve], "Suffix identification accuracy", y_label="accuracy")
        made += 1
    if not made:
        raise CliError(f"no result CSVs found in {run.out}")


HANDLERS = {
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "perturb": cmd_perturb,
    "copy-probe": cmd_copy_probe,
    "suffix-id": cmd_suffix_id,
    "chapter-probe": cmd_chapter_probe,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve_threads(args.threads)
        torch.set_num_threads(threads)
        cfg = resolve_config(args)
        run = Run(args.command, cfg, threads)
        HANDLERS[args.command](run)
        run.finish("report_manifest.json" if args.command == "report" else "manifest.json")
    except (
        ConfigError, CorpusError, EvalError, PerturbationError, ProbeError, CliError, FileNotFoundError, ValueError,
    ) as e:
        print(f"longctx {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
