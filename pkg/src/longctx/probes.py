"""Sequence-level probes: copy-paste, suffix identification, chapter increments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import TargetWindow
from .evaluator import AggregateCurve, CurvePoint, EvalRecord, Taxonomy, aggregate, perplexity, score_inputs, window_input
from .model import TransformerLM, batch_nll
from .synthetic import ChapterLayout, make_chapter_doc


class ProbeError(ValueError):
    pass


def _ids(x) -> np.ndarray:
    return np.asarray(getattr(x, "ids", x), dtype=np.int64)


# -- copy probe ---------------------------------------------------------------


def paste_targets(prefix, targets, offset: int) -> np.ndarray:
    """Overwrite prefix[end - offset - k : end - offset] with the k targets."""
    prefix = np.array(prefix, dtype=np.int64, copy=True)
    k = len(targets)
    if offset < 0 or offset + k > len(prefix):
        raise ProbeError(f"offset {offset} with {k} targets does not fit a {len(prefix)}-token prefix")
    end = len(prefix) - offset
    prefix[end - k : end] = targets
    return prefix


@dataclass
class CopyProbeResult:
    curve: AggregateCurve
    baseline_ppl: float
    records: list


def copy_probe(
    model: TransformerLM,
    windows: Sequence[TargetWindow],
    tokens: Mapping[str, object],
    offsets: Sequence[int],
    taxonomy: Taxonomy | None = None,
) -> CopyProbeResult:
    """Paste each window's targets into its prefix at every offset and score the targets."""
    baseline = []
    for w in windows:
        baseline.extend(
            score_inputs(model, [w], [window_input(tokens[w.doc_id], w, w.prefix_len)], w.prefix_len, tokens, taxonomy)
        )
    records = []
    for d in offsets:
        for w in windows:
            x = window_input(tokens[w.doc_id], w, w.prefix_len)
            prefix, targets = x[: w.prefix_len], x[w.prefix_len :]
            pasted = np.concatenate([paste_targets(prefix, targets, d), targets])
            records.extend(
                score_inputs(
                    model, [w], [pasted], w.prefix_len, tokens, taxonomy,
                    probe={"probe_kind": "copy", "offset_or_suffix_len": d},
                )
            )
    curve = aggregate(records, (), "offset_or_suffix_len")
    return CopyProbeResult(curve[0] if curve else AggregateCurve((), []), perplexity(baseline), records)


# -- suffix identification ------------------------------------------------------


@dataclass(frozen=True)
class SuffixExample:
    doc_id: str
    prefix_span: tuple[int, int]
    gold_span: tuple[int, int]
    negative_spans: tuple[tuple[int, int], ...]
    seed: int

    def candidates(self) -> list[tuple[int, int]]:
        return [self.gold_span, *self.negative_spans]

    def to_json(self) -> str:
        d = asdict(self)
        d["prefix_span"] = list(self.prefix_span)
        d["gold_span"] = list(self.gold_span)
        d["negative_spans"] = [list(s) for s in self.negative_spans]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SuffixExample":
        d = json.loads(line)
        return cls(
            d["doc_id"],
            tuple(d["prefix_span"]),
            tuple(d["gold_span"]),
            tuple(tuple(s) for s in d["negative_spans"]),
            d["seed"],
        )


SENTENCE_END = (b".", b"?", b"!")


def boundary_ids(vocab) -> tuple[frozenset, frozenset]:
    """(sentence-final punctuation ids, ids whose text starts with whitespace) for a BPE vocab."""
    ends, spaced = set(), set()
    for i, tok in enumerate(vocab.tokens):
        if i == vocab.pad_id or not tok:
            continue
        if tok.strip() in SENTENCE_END:
            ends.add(i)
        if tok[:1].isspace():
            spaced.add(i)
    return frozenset(ends), frozenset(spaced)


def sentence_boundaries(ids, end_ids, word_start_ids) -> np.ndarray:
    """Positions p where token p-1 ends a sentence and token p starts a new word."""
    ids = _ids(ids)
    if len(ids) < 2:
        return np.zeros(0, dtype=np.int64)
    prev_end = np.isin(ids[:-1], list(end_ids))
    starts = np.isin(ids[1:], list(word_start_ids))
    return np.flatnonzero(prev_end & starts) + 1


def _overlaps(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def build_suffix_task(
    corpus_tokens: Mapping[str, object],
    boundaries: tuple,
    prefix_len: int,
    suffix_len: int = 128,
    n_negatives: int = 5,
    count: int = 100,
    seed: int = 0,
    max_attempts: int = 50,
) -> list[SuffixExample]:
    """Sample examples whose prefix ends, and every candidate starts, at a sentence boundary.

    ``boundaries`` is ``(end_ids, word_start_ids)``, e.g. from :func:`boundary_ids`.
    Negatives come from the same document and overlap neither the prefix,
    the gold suffix, nor each other.
    """
    end_ids, start_ids = boundaries
    rng = np.random.default_rng(seed)
    plans = []
    for doc_id in sorted(corpus_tokens):
        ids = _ids(corpus_tokens[doc_id])
        b = sentence_boundaries(ids, end_ids, start_ids)
        starts = b[b + suffix_len <= len(ids)]
        anchors = starts[starts >= prefix_len]
        if len(anchors) and len(starts) >= n_negatives + 1:
            plans.append((doc_id, anchors, starts))
    if not plans:
        raise ProbeError("no document has enough sentence boundaries for the suffix task")

    examples = []
    failures = 0
    while len(examples) < count:
        doc_id, anchors, starts = plans[int(rng.integers(len(plans)))]
        b = int(anchors[int(rng.integers(len(anchors)))])
        prefix = (b - prefix_len, b)
        gold = (b, b + suffix_len)
        negatives: list[tuple[int, int]] = []
        for q in rng.permutation(starts):
            span = (int(q), int(q) + suffix_len)
            if _overlaps(span, prefix) or _overlaps(span, gold):
                continue
            if any(_overlaps(span, n) for n in negatives):
                continue
            negatives.append(span)
            if len(negatives) == n_negatives:
                break
        if len(negatives) < n_negatives:
            failures += 1
            if failures > max_attempts * max(count, 1):
                raise ProbeError("documents too short for disjoint candidate spans")
            continue
        examples.append(SuffixExample(doc_id, prefix, gold, tuple(sorted(negatives)), seed))
    return examples


# A scorer maps (context ids, candidate ids) to the candidate's mean NLL per token.
Scorer = Callable[[np.ndarray, np.ndarray], float]


def model_scorer(model: TransformerLM) -> Scorer:
    def score(context, candidate):
        x = np.concatenate([context, candidate])
        nll = batch_nll(model, x[None])[0]
        return float(np.mean(nll[len(context) - 1 :]))

    return score


def uniform_scorer(seed: int = 0, noise: float = 1e-6) -> Scorer:
    """Baseline: equal scores broken by tiny random noise, so accuracy sits at chance."""
    rng = np.random.default_rng(seed)

    def score(context, candidate):
        return float(rng.uniform(-noise, noise))

    return score


def oracle_scorer(examples, corpus_tokens) -> Scorer:
    """Baseline that knows each example's gold continuation."""
    gold = {}
    for ex in examples:
        ids = _ids(corpus_tokens[ex.doc_id])
        gold[(ex.doc_id, ex.prefix_span)] = ids[slice(*ex.gold_span)].tobytes()
    contexts = {}
    for ex in examples:
        ids = _ids(corpus_tokens[ex.doc_id])
        contexts.setdefault(ids[slice(*ex.prefix_span)].tobytes(), set()).add(gold[(ex.doc_id, ex.prefix_span)])

    def score(context, candidate):
        for full, golds in contexts.items():
            if full.endswith(context.tobytes()) and candidate.tobytes() in golds:
                return 0.0
        return 1.0

    return score


def score_suffix_examples(scorer: Scorer, examples, corpus_tokens, prefix_len: int) -> list[list[float]]:
    """Mean NLL per candidate, gold first."""
    out = []
    for ex in examples:
        ids = _ids(corpus_tokens[ex.doc_id])
        start, end = ex.prefix_span
        if prefix_len > end - start:
            raise ProbeError(f"prefix_len {prefix_len} exceeds the example's {end - start}-token prefix")
        context = ids[end - prefix_len : end]
        out.append([scorer(context, ids[a:b]) for a, b in ex.candidates()])
    return out


def is_correct(scores: Sequence[float]) -> bool:
    """Gold (index 0) must be strictly below every negative; ties count as wrong."""
    return all(scores[0] < s for s in scores[1:])


def suffix_accuracy(scorer, examples, corpus_tokens, prefix_len: int) -> float:
    if isinstance(scorer, TransformerLM):
        scorer = model_scorer(scorer)
    scores = score_suffix_examples(scorer, examples, corpus_tokens, prefix_len)
    if not scores:
        return 0.0
    return sum(is_correct(s) for s in scores) / len(scores)


def suffix_records(scorer, examples, corpus_tokens, prefix_len: int) -> list[EvalRecord]:
    """One CSV-ready record per candidate; target_index 0 is gold, nll is the mean per token."""
    if isinstance(scorer, TransformerLM):
        scorer = model_scorer(scorer)
    records = []
    for ex, scores in zip(examples, score_suffix_examples(scorer, examples, corpus_tokens, prefix_len)):
        order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
        rank = {c: r for r, c in enumerate(order)}
        ids = _ids(corpus_tokens[ex.doc_id])
        for c, (a, b) in enumerate(ex.candidates()):
            records.append(
                EvalRecord(
                    doc_id=ex.doc_id, anchor=ex.prefix_span[1] - 1, target_index=c,
                    token_id=int(ids[a]), nll=scores[c], prefix_len=prefix_len, seed=ex.seed,
                    probe={"probe_kind": "suffix", "offset_or_suffix_len": b - a, "candidate_rank": rank[c]},
                )
            )
    return records


def suffix_length_sweep(
    scorer,
    corpus_tokens,
    boundaries,
    suffix_lengths: Sequence[int],
    prefix_len: int,
    count: int = 100,
    seed: int = 0,
) -> AggregateCurve:
    """Accuracy per suffix length; tasks are rebuilt per length with the same seed."""
    points = []
    for s in suffix_lengths:
        examples = build_suffix_task(corpus_tokens, boundaries, prefix_len, s, count=count, seed=seed)
        acc = suffix_accuracy(scorer, examples, corpus_tokens, prefix_len)
        points.append(CurvePoint(s, acc, len(examples)))
    return AggregateCurve(("suffix accuracy",), points, "suffix length (tokens)")


# -- chapter increment ------------------------------------------------------------


@dataclass
class ChapterReport:
    header_index: list[int]
    nll_correct: list[float]
    nll_corrupted: list[float]
    deltas: list[float]
    control_deltas: list[float]

    @property
    def delta(self) -> float:
        return float(np.mean(self.deltas))

    @property
    def noise_bound(self) -> float:
        """Spread of NLL changes when the previous number is swapped for an unrelated one."""
        c = np.abs(np.asarray(self.control_deltas))
        return float(c.mean() + 3 * c.std()) if len(c) else 0.0


def chapter_increment_probe(
    model: TransformerLM,
    layout: ChapterLayout = ChapterLayout(),
    seed: int = 0,
    first_number: int = 0,
    n_headers: int | None = None,
) -> ChapterReport:
    """NLL of each header's number under a correct vs corrupted previous header.

    Corruption writes the number being predicted into the previous header,
    so a model that increments numbers should be pushed toward the next one.
    Controls write other unrelated numbers instead.
    """
    ids, positions = make_chapter_doc(layout, seed, first_number, n_headers)
    report = ChapterReport([], [], [], [], [])
    for h in range(1, len(positions)):
        prev_num = positions[h - 1] + 1
        pos = positions[h] + 1
        target = int(ids[pos])
        x = ids[: pos + 1]
        if len(x) > model.config.max_seq_len:
            raise ProbeError(f"header {h} sits beyond max_seq_len {model.config.max_seq_len}")

        def nll_with(prev_value: int) -> float:
            y = x.copy()
            y[prev_num] = prev_value
            return float(batch_nll(model, y[None])[0][pos - 1])

        clean = nll_with(int(ids[prev_num]))
        bad = nll_with(target)
        report.header_index.append(h)
        report.nll_correct.append(clean)
        report.nll_corrupted.append(bad)
        report.deltas.append(bad - clean)
        others = [
            layout.number_id(i)
            for i in range(layout.n_chapters)
            if layout.number_id(i) not in (target, int(ids[prev_num]))
        ]
        report.control_deltas.extend(nll_with(o) - clean for o in others)
    return report
