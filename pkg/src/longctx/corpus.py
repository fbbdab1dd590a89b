"""Document ingestion and target-window sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from .seeding import rng_for

log = logging.getLogger(__name__)

GENRES = ("fiction", "nonfiction")
CONTINUITY = ("continuous", "discontinuous")
AUTHORSHIP = ("single", "various")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class BookLabels:
    genre: str
    continuity: str
    authorship: str

    def __post_init__(self):
        for name, allowed in (
            ("genre", GENRES),
            ("continuity", CONTINUITY),
            ("authorship", AUTHORSHIP),
        ):
            value = getattr(self, name)
            if value not in allowed:
                raise CorpusError(f"{name} must be one of {allowed}, got {value!r}")


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    labels: BookLabels | None = None

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"document {self.doc_id!r} is empty")


class Corpus:
    """Documents ordered by doc_id."""

    def __init__(self, documents):
        docs = sorted(documents, key=lambda d: d.doc_id)
        self._by_id = {}
        for d in docs:
            if d.doc_id in self._by_id:
                raise CorpusError(f"duplicate doc_id {d.doc_id!r}")
            self._by_id[d.doc_id] = d
        self.documents = docs

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def __contains__(self, doc_id) -> bool:
        return doc_id in self._by_id

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


def read_metadata(path) -> dict[str, dict]:
    rows = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: bad JSON ({e})") from None
            doc_id = row.get("doc_id")
            if doc_id is None:
                raise CorpusError(f"{path}:{lineno}: missing doc_id")
            if doc_id in rows:
                raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            rows[doc_id] = row
    return rows


def load_corpus(directory, metadata_path=None) -> Corpus:
    """One UTF-8 ``.txt`` file per document; doc_id is the file stem.

    Metadata rows may carry ``"exclude": true`` to drop a document by hand.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"corpus directory not found: {directory}")
    files = sorted(directory.glob("*.txt"))
    if not files:
        raise CorpusError(f"no .txt documents in {directory}")
    meta = read_metadata(metadata_path) if metadata_path else None
    if meta is not None:
        stems = {p.stem for p in files}
        unknown = sorted(set(meta) - stems)
        if unknown:
            raise CorpusError(f"metadata references unknown document(s): {', '.join(unknown)}")

    docs = []
    for path in files:
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise CorpusError(f"cannot read {path}: {e}") from None
        labels = None
        if meta is not None:
            row = meta.get(path.stem)
            if row is None:
                raise CorpusError(f"metadata has no labels for document {path.stem!r}")
            if row.get("exclude"):
                log.info("excluding %s per metadata", path.stem)
                continue
            labels = BookLabels(row["genre"], row["continuity"], row["authorship"])
        docs.append(Document(path.stem, text, labels))
    if not docs:
        raise CorpusError(f"every document in {directory} was excluded")
    return Corpus(docs)


@dataclass(frozen=True)
class TargetWindow:
    """Prefix = tokens[anchor - prefix_len + 1 .. anchor]; targets = tokens[anchor + 1 .. anchor + n_targets]."""

    doc_id: str
    anchor: int
    prefix_len: int
    n_targets: int = 10
    exclude_last: int = 40

    @property
    def prefix_start(self) -> int:
        return self.anchor - self.prefix_len + 1

    @property
    def target_slice(self) -> slice:
        return slice(self.anchor + 1, self.anchor + 1 + self.n_targets)


def largest_remainder(weights: list[int], total: int) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights`` (ties to earlier index)."""
    w_sum = sum(weights)
    if w_sum <= 0:
        raise ValueError("weights must have a positive sum")
    base = [total * w // w_sum for w in weights]
    rem = [total * w % w_sum for w in weights]
    short = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-rem[i], i))
    for i in order[:short]:
        base[i] += 1
    return base


def _apportion_capped(weights: list[int], caps: list[int], total: int) -> list[int]:
    counts = [0] * len(weights)
    open_ = [i for i in range(len(weights)) if caps[i] > 0]
    remaining = total
    while remaining:
        share = largest_remainder([weights[i] for i in open_], remaining)
        remaining = 0
        for i, s in zip(open_, share):
            take = min(s, caps[i] - counts[i])
            counts[i] += take
            remaining += s - take
        open_ = [i for i in open_ if counts[i] < caps[i]]
    return counts


def valid_anchor_range(n_tokens: int, prefix_len: int, n_targets: int, exclude_last: int) -> range:
    # full prefix before the anchor, and exclude_last tokens after the last target
    return range(prefix_len, n_tokens - n_targets - exclude_last)


def sample_targets(
    corpus,
    tokenized: Mapping[str, object],
    prefix_len: int,
    n_targets: int,
    exclude_last: int,
    total: int,
    seed: int,
) -> list[TargetWindow]:
    """Sample ``total`` windows, apportioned across documents by token count."""
    if total < 1:
        raise ValueError("total must be >= 1")
    doc_ids = corpus.doc_ids if hasattr(corpus, "doc_ids") else sorted(corpus)
    eligible, weights, caps = [], [], []
    for doc_id in doc_ids:
        n_tok = len(getattr(tokenized[doc_id], "ids", tokenized[doc_id]))
        anchors = valid_anchor_range(n_tok, prefix_len, n_targets, exclude_last)
        if len(anchors) <= 0:
            log.warning(
                "skipping %s: %d tokens < prefix %d + targets %d + exclusion %d",
                doc_id, n_tok, prefix_len, n_targets, exclude_last,
            )
            continue
        eligible.append((doc_id, anchors))
        weights.append(n_tok)
        caps.append(len(anchors))
    if not eligible:
        raise CorpusError("no document is long enough for the requested windows")
    if total > sum(caps):
        raise CorpusError(f"requested {total} windows but only {sum(caps)} anchor positions exist")

    counts = _apportion_capped(weights, caps, total)
    windows = []
    for (doc_id, anchors), count in zip(eligible, counts):
        if not count:
            continue
        rng = rng_for("targets", seed, doc_id)
        picks = sorted(rng.choice(len(anchors), size=count, replace=False).tolist())
        windows.extend(
            TargetWindow(doc_id, anchors[p], prefix_len, n_targets, exclude_last) for p in picks
        )
    return windows
