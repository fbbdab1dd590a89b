"""Target-window perplexity protocol, token taxonomy, and aggregation."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import BookLabels, TargetWindow
from .model import TransformerLM, batch_nll
from .tokenizer import ClusterPos, FrequencyTable

FREQUENT, INFREQUENT = "frequent", "infrequent"
FIRST, REST, SINGLETON = "first", "rest", "singleton"
LOCAL, DISTANT, ABSENT = "local", "distant", "absent"

_SUBWORD = {ClusterPos.FIRST: FIRST, ClusterPos.INTERIOR: REST, ClusterPos.SINGLETON: SINGLETON}


@dataclass(frozen=True)
class CategorySet:
    frequency: str | None
    subword: str
    copy: str
    copy_distance: int | None
    labels: BookLabels | None = None

    def __post_init__(self):
        if (self.copy_distance is None) != (self.copy == ABSENT):
            raise ValueError("copy_distance must be present exactly when copy != absent")


@dataclass
class EvalRecord:
    doc_id: str
    anchor: int
    target_index: int
    token_id: int
    nll: float
    prefix_len: int
    categories: CategorySet | None = None
    perturbation: object | None = None  # perturbations.PerturbationSpec
    run_index: int = 0
    seed: int | None = None
    probe: dict | None = None  # probe_kind / offset_or_suffix_len / candidate_rank


@dataclass(frozen=True)
class Taxonomy:
    """What ``categorize`` needs besides the tokens themselves."""

    frequency: FrequencyTable | None = None
    cutoff: int = 2000
    labels: Mapping[str, BookLabels] = field(default_factory=dict)


class EvalError(ValueError):
    pass


def _ids(tokens) -> np.ndarray:
    return np.asarray(getattr(tokens, "ids", tokens), dtype=np.int64)


def perplexity(records: Iterable, loss_scale: float = 1.0) -> float:
    """exp(loss_scale * mean NLL).

    The mean is accumulated exactly (rational arithmetic over the float
    NLLs), so pooling, reordering, or replicating record sets never changes
    the result.
    """
    total = Fraction(0)
    n = 0
    for r in records:
        total += Fraction(getattr(r, "nll", r))
        n += 1
    if n == 0:
        raise EvalError("perplexity of an empty record set")
    return math.exp(loss_scale * float(total / n))


def copy_distance(history: np.ndarray, token_id: int) -> int | None:
    """Distance from the end of ``history`` back to the token's most recent occurrence."""
    hits = np.flatnonzero(history == token_id)
    if not len(hits):
        return None
    return len(history) - int(hits[-1])


def categorize(
    token_id: int,
    history,
    taxonomy: Taxonomy,
    subword_flag: int = ClusterPos.SINGLETON,
    labels: BookLabels | None = None,
) -> CategorySet:
    """Categories of one target given exactly the tokens the model saw before it."""
    dist = copy_distance(_ids(history), token_id)
    if dist is None:
        copy = ABSENT
    else:
        copy = LOCAL if dist < taxonomy.cutoff else DISTANT
    freq = None
    if taxonomy.frequency is not None:
        freq = FREQUENT if taxonomy.frequency.is_frequent(token_id) else INFREQUENT
    return CategorySet(freq, _SUBWORD[ClusterPos(int(subword_flag))], copy, dist, labels)


def window_input(tokens, window: TargetWindow, prefix_len: int) -> np.ndarray:
    """Last ``prefix_len`` prefix tokens followed by the window's targets."""
    ids = _ids(tokens)
    if prefix_len < 1 or prefix_len > window.prefix_len:
        raise EvalError(f"prefix_len {prefix_len} outside 1..{window.prefix_len}")
    start = window.anchor - prefix_len + 1
    return ids[start : window.anchor + 1 + window.n_targets]


def score_inputs(
    model: TransformerLM,
    windows: Sequence[TargetWindow],
    inputs: Sequence[np.ndarray],
    prefix_len: int,
    tokens: Mapping[str, object] | None = None,
    taxonomy: Taxonomy | None = None,
    batch_size: int = 1,
    **record_fields,
) -> list[EvalRecord]:
    """Score the targets of pre-built ``prefix + targets`` inputs (possibly perturbed).

    Categories are computed against the input actually fed to the model.
    """
    limit = model.config.max_seq_len
    records: list[EvalRecord] = []
    for lo in range(0, len(windows), batch_size):
        chunk_w = windows[lo : lo + batch_size]
        chunk_x = [np.asarray(x, dtype=np.int64) for x in inputs[lo : lo + batch_size]]
        for w, x in zip(chunk_w, chunk_x):
            if len(x) != prefix_len + w.n_targets:
                raise EvalError(f"{w.doc_id}@{w.anchor}: input length {len(x)} != prefix + targets")
            if len(x) > limit:
                raise EvalError(
                    f"prefix_len {prefix_len} + {w.n_targets} targets exceeds max_seq_len {limit}"
                )
        by_len = defaultdict(list)
        for i, x in enumerate(chunk_x):
            by_len[len(x)].append(i)
        nlls: list = [None] * len(chunk_x)
        for idx in by_len.values():
            out = batch_nll(model, np.stack([chunk_x[i] for i in idx]))
            for row, i in enumerate(idx):
                nlls[i] = out[row]
        for w, x, nll in zip(chunk_w, chunk_x, nlls):
            flags = None
            if tokens is not None:
                flags = getattr(tokens[w.doc_id], "cluster_pos", None)
            labels = taxonomy.labels.get(w.doc_id) if taxonomy is not None else None
            for t in range(w.n_targets):
                pos = prefix_len + t
                value = float(nll[pos - 1])
                if not math.isfinite(value):
                    raise EvalError(f"non-finite NLL at {w.doc_id}@{w.anchor}+{t}")
                cats = None
                if taxonomy is not None:
                    flag = flags[w.anchor + 1 + t] if flags is not None else ClusterPos.SINGLETON
                    cats = categorize(int(x[pos]), x[:pos], taxonomy, flag, labels)
                records.append(
                    EvalRecord(
                        doc_id=w.doc_id,
                        anchor=w.anchor,
                        target_index=t,
                        token_id=int(x[pos]),
                        nll=value,
                        prefix_len=prefix_len,
                        categories=cats,
                        **record_fields,
                    )
                )
    return records


def eval_targets(
    model: TransformerLM,
    windows: Sequence[TargetWindow],
    tokens: Mapping[str, object],
    prefix_len: int,
    taxonomy: Taxonomy | None = None,
    batch_size: int = 1,
) -> list[EvalRecord]:
    """NLL of every target given the last ``prefix_len`` tokens of its prefix."""
    inputs = [window_input(tokens[w.doc_id], w, prefix_len) for w in windows]
    return score_inputs(model, windows, inputs, prefix_len, tokens, taxonomy, batch_size)


# -- aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    x: int
    ppl: float
    token_count: int


@dataclass
class AggregateCurve:
    key: tuple
    points: list[CurvePoint]
    x_label: str = "prefix length (tokens)"

    @property
    def name(self) -> str:
        return "/".join(str(k) for k in self.key) if self.key else "all"


def record_field(record: EvalRecord, name: str):
    cats = record.categories
    if name in ("frequency", "subword", "copy", "copy_distance"):
        return getattr(cats, name) if cats is not None else None
    if name in ("genre", "continuity", "authorship"):
        labels = cats.labels if cats is not None else None
        return getattr(labels, name) if labels is not None else None
    if name in ("perturb_kind", "perturb_m"):
        p = record.perturbation
        if p is None:
            return None
        return p.label if name == "perturb_kind" else p.m
    if name in ("probe_kind", "offset_or_suffix_len", "candidate_rank"):
        return (record.probe or {}).get(name)
    return getattr(record, name)


def aggregate(
    records: Sequence[EvalRecord],
    group_by: Sequence[str] = (),
    x: str = "prefix_len",
    loss_scale: float = 1.0,
    x_label: str | None = None,
) -> list[AggregateCurve]:
    """One curve per group key, one point per distinct ``x`` value (ascending)."""
    groups: dict = defaultdict(lambda: defaultdict(list))
    for r in records:
        key = tuple(record_field(r, g) for g in group_by)
        groups[key][record_field(r, x)].append(r)
    curves = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        pts = groups[key]
        points = [
            CurvePoint(xv, perplexity(pts[xv], loss_scale), len(pts[xv])) for xv in sorted(pts)
        ]
        curves.append(AggregateCurve(key, points, x_label or _X_LABELS.get(x, x)))
    return curves


_X_LABELS = {
    "prefix_len": "prefix length (tokens)",
    "perturb_m": "perturbed tokens from prefix start",
    "offset_or_suffix_len": "copy offset from prefix end (tokens)",
}


def prefix_sweep(
    model: TransformerLM,
    windows: Sequence[TargetWindow],
    tokens: Mapping[str, object],
    lengths: Sequence[int],
    taxonomy: Taxonomy | None = None,
    group_by: Sequence[str] = (),
    loss_scale: float = 1.0,
    batch_size: int = 1,
):
    """Evaluate the same windows at every prefix length; returns ``(curves, records)``."""
    if list(lengths) != sorted(lengths):
        raise EvalError("lengths must be ascending")
    records: list[EvalRecord] = []
    for length in lengths:
        records.extend(eval_targets(model, windows, tokens, length, taxonomy, batch_size))
    return aggregate(records, group_by, "prefix_len", loss_scale), records


OVERLAP_CATEGORIES = ("infrequent", "subword-rest", "copy-distant")


def _in_category(r: EvalRecord, name: str) -> bool:
    c = r.categories
    if name == "infrequent":
        return c.frequency == INFREQUENT
    if name == "subword-rest":
        return c.subword == REST
    if name == "copy-distant":
        return c.copy == DISTANT
    raise KeyError(name)


def overlap_matrix(records: Sequence[EvalRecord]) -> dict[str, dict[str, float | None]]:
    """Entry (row, col) = |row & col| / |row|; None where the row category is empty."""
    members = {
        name: {i for i, r in enumerate(records) if _in_category(r, name)}
        for name in OVERLAP_CATEGORIES
    }
    table = {}
    for row in OVERLAP_CATEGORIES:
        table[row] = {}
        for col in OVERLAP_CATEGORIES:
            rs = members[row]
            table[row][col] = len(rs & members[col]) / len(rs) if rs else None
    return table


# -- CSV -----------------------------------------------------------------------

CSV_COLUMNS = (
    "doc_id", "anchor", "target_index", "token_id", "prefix_len", "nll",
    "frequency", "subword", "copy", "copy_distance",
    "genre", "continuity", "authorship",
    "perturb_kind", "perturb_m", "run_index", "seed",
)
PROBE_COLUMNS = ("probe_kind", "offset_or_suffix_len", "candidate_rank")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_row(r: EvalRecord, with_probe: bool = False) -> list[str]:
    p = r.perturbation
    seed = r.seed if r.seed is not None else (getattr(p, "seed", None) if p is not None else None)
    row = [
        r.doc_id, r.anchor, r.target_index, r.token_id, r.prefix_len, r.nll,
        record_field(r, "frequency"), record_field(r, "subword"), record_field(r, "copy"),
        record_field(r, "copy_distance"),
        record_field(r, "genre"), record_field(r, "continuity"), record_field(r, "authorship"),
        record_field(r, "perturb_kind"), record_field(r, "perturb_m"), r.run_index, seed,
    ]
    if with_probe:
        probe = r.probe or {}
        row += [probe.get(c) for c in PROBE_COLUMNS]
    return [_cell(v) for v in row]


def write_records_csv(records: Iterable[EvalRecord], path, with_probe: bool = False, append: bool = False) -> None:
    columns = CSV_COLUMNS + (PROBE_COLUMNS if with_probe else ())
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        if not exists:
            w.writerow(columns)
        for r in records:
            w.writerow(record_row(r, with_probe))


def records_to_csv_text(records: Iterable[EvalRecord], with_probe: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + (PROBE_COLUMNS if with_probe else ()))
    for r in records:
        w.writerow(record_row(r, with_probe))
    return buf.getvalue()


def _opt_int(v: str) -> int | None:
    return int(v) if v != "" else None


def read_records_csv(path) -> list[EvalRecord]:
    """Inverse of :func:`write_records_csv`; NLLs round-trip exactly."""
    from .perturbations import PerturbationSpec  # perturbations imports this module

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header not in (CSV_COLUMNS, CSV_COLUMNS + PROBE_COLUMNS):
            raise EvalError(f"{path}: unexpected CSV columns {header}")
        out = []
        for row in reader:
            d = dict(zip(header, row))
            cats = None
            if d["subword"]:
                labels = None
                if d["genre"]:
                    labels = BookLabels(d["genre"], d["continuity"], d["authorship"])
                cats = CategorySet(
                    d["frequency"] or None, d["subword"], d["copy"], _opt_int(d["copy_distance"]), labels
                )
            seed = _opt_int(d["seed"])
            run = int(d["run_index"])
            pert = None
            if d["perturb_kind"]:
                kind, _, pred = d["perturb_kind"].partition(":")
                pert = PerturbationSpec(kind, int(d["perturb_m"]), seed, run, pred or None)
            probe = None
            if "probe_kind" in d and d["probe_kind"]:
                probe = {"probe_kind": d["probe_kind"]}
                for c in ("offset_or_suffix_len", "candidate_rank"):
                    if d[c] != "":
                        probe[c] = int(d[c])
            out.append(
                EvalRecord(
                    d["doc_id"], int(d["anchor"]), int(d["target_index"]), int(d["token_id"]),
                    float(d["nll"]), int(d["prefix_len"]), cats, pert, run, seed, probe,
                )
            )
    return out
