"""Synthetic id-level corpora with planted long-range structure.

Two generators:

* copy corpus: iid filler tokens with a rare marker that appears once and
  reappears ``D`` tokens later, announced by a recall cue token.  The cue
  says *when* a marker is due but not *which* one, so the only way to
  predict the reappearing marker is to find its first occurrence.
* chapter corpus: filler text with ``HEADER NUM_i`` titles at a fixed
  spacing, numbered consecutively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import TargetWindow


@dataclass(frozen=True)
class SyntheticVocab:
    vocab_size: int
    pad_id: int = 0


@dataclass(frozen=True)
class CopyLayout:
    n_filler: int = 128
    n_markers: int = 64

    pad_id = 0
    cue_id = 1

    @property
    def filler_start(self) -> int:
        return 2

    @property
    def marker_start(self) -> int:
        return 2 + self.n_filler

    @property
    def vocab(self) -> SyntheticVocab:
        return SyntheticVocab(vocab_size=2 + self.n_filler + self.n_markers, pad_id=self.pad_id)

    def marker_ids(self) -> np.ndarray:
        return np.arange(self.marker_start, self.marker_start + self.n_markers)


@dataclass(frozen=True)
class Plant:
    doc_id: str
    first_pos: int
    recall_pos: int
    marker: int

    @property
    def distance(self) -> int:
        return self.recall_pos - self.first_pos


def make_copy_corpus(
    n_docs: int,
    doc_len: int,
    distances: tuple[int, ...],
    seed: int,
    layout: CopyLayout = CopyLayout(),
    tail: int = 8,
    min_first: int = 1,
):
    """Return ``(docs, plants)``; document i has one plant with distance ``distances[i % len]``.

    The first marker position is drawn uniformly so that position alone does
    not reveal where the marker sits.
    """
    rng = np.random.default_rng(seed)
    docs, plants = {}, []
    width = len(str(n_docs - 1))
    for i in range(n_docs):
        dist = distances[i % len(distances)]
        hi = doc_len - tail - dist
        if hi <= min_first:
            raise ValueError(f"doc_len {doc_len} too short for distance {dist}")
        ids = rng.integers(layout.filler_start, layout.marker_start, size=doc_len)
        first = int(rng.integers(min_first, hi))
        marker = int(rng.integers(layout.marker_start, layout.marker_start + layout.n_markers))
        recall = first + dist
        ids[first] = marker
        ids[recall - 1] = layout.cue_id
        ids[recall] = marker
        doc_id = f"copy{i:0{width}d}"
        docs[doc_id] = ids
        plants.append(Plant(doc_id, first, recall, marker))
    return docs, plants


def plant_windows(plants, prefix_len: int) -> list[TargetWindow]:
    """One single-target window per plant whose target is the reappearing marker."""
    out = []
    for p in plants:
        anchor = p.recall_pos - 1
        if anchor - prefix_len + 1 < 0:
            raise ValueError(f"{p.doc_id}: plant too close to the start for prefix {prefix_len}")
        out.append(TargetWindow(p.doc_id, anchor, prefix_len, n_targets=1, exclude_last=0))
    return out


@dataclass(frozen=True)
class ChapterLayout:
    """``HEADER NUM_i`` titles every ``spacing`` tokens over iid filler."""

    n_chapters: int = 12
    spacing: int = 32
    n_filler: int = 64

    pad_id = 0
    header_id = 1

    @property
    def number_start(self) -> int:
        return 2

    @property
    def filler_start(self) -> int:
        return 2 + self.n_chapters

    @property
    def vocab(self) -> SyntheticVocab:
        return SyntheticVocab(vocab_size=2 + self.n_chapters + self.n_filler, pad_id=self.pad_id)

    def number_id(self, i: int) -> int:
        return self.number_start + i


def make_chapter_doc(layout: ChapterLayout, seed: int, first_number: int = 0, n_headers: int | None = None):
    """Return ``(ids, header_positions)``; header h carries number ``first_number + h``."""
    rng = np.random.default_rng(seed)
    n_headers = n_headers or (layout.n_chapters - first_number)
    if first_number + n_headers > layout.n_chapters:
        raise ValueError("not enough chapter numbers for the requested headers")
    length = n_headers * layout.spacing
    ids = rng.integers(layout.filler_start, layout.filler_start + layout.n_filler, size=length)
    positions = []
    for h in range(n_headers):
        pos = h * layout.spacing
        ids[pos] = layout.header_id
        ids[pos + 1] = layout.number_id(first_number + h)
        positions.append(pos)
    return ids, positions
