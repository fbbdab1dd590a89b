import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longctx.corpus import (
    BookLabels,
    Corpus,
    CorpusError,
    Document,
    TargetWindow,
    largest_remainder,
    load_corpus,
    read_metadata,
    sample_targets,
    valid_anchor_range,
)
from conftest import write_corpus


def test_load_corpus_with_labels(corpus_dir):
    c = load_corpus(corpus_dir, corpus_dir / "metadata.jsonl")
    assert c.doc_ids == ["book0", "book1", "book2", "book3"]
    assert c["book1"].labels == BookLabels("nonfiction", "continuous", "single")
    assert "book0" in c and "nope" not in c
    assert len(c) == 4


def test_load_corpus_without_metadata(corpus_dir):
    c = load_corpus(corpus_dir)
    assert all(d.labels is None for d in c)


def test_metadata_exclude(corpus_dir):
    meta = corpus_dir / "metadata.jsonl"
    rows = [json.loads(x) for x in meta.read_text().splitlines()]
    rows[0]["exclude"] = True
    meta.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert load_corpus(corpus_dir, meta).doc_ids == ["book1", "book2", "book3"]


def test_metadata_errors(corpus_dir, tmp_path):
    meta = tmp_path / "m.jsonl"
    meta.write_text('{"doc_id": "ghost", "genre": "fiction", "continuity": "continuous", "authorship": "single"}\n')
    with pytest.raises(CorpusError, match="ghost"):
        load_corpus(corpus_dir, meta)
    meta.write_text('{"doc_id": "book0", "genre": "fiction", "continuity": "continuous", "authorship": "single"}\n')
    with pytest.raises(CorpusError, match="no labels"):
        load_corpus(corpus_dir, meta)
    meta.write_text("{bad json\n")
    with pytest.raises(CorpusError, match="bad JSON"):
        read_metadata(meta)
    meta.write_text('{"doc_id": "a"}\n{"doc_id": "a"}\n')
    with pytest.raises(CorpusError, match="duplicate"):
        read_metadata(meta)


def test_bad_labels_rejected():
    with pytest.raises(CorpusError):
        BookLabels("poetry", "continuous", "single")


def test_load_errors(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        load_corpus(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(CorpusError, match="no .txt"):
        load_corpus(tmp_path / "empty")
    d = tmp_path / "bad"
    d.mkdir()
    (d / "x.txt").write_bytes(b"\xff\xfe\xfa")
    with pytest.raises(CorpusError, match="cannot read"):
        load_corpus(d)
    (d / "x.txt").write_text("")
    with pytest.raises(CorpusError, match="empty"):
        load_corpus(d)


def test_duplicate_doc_ids_rejected():
    with pytest.raises(CorpusError):
        Corpus([Document("a", "x"), Document("a", "y")])


def test_largest_remainder_examples():
    assert largest_remainder([1, 1, 1], 2) == [1, 1, 0]
    assert largest_remainder([100, 50, 50], 4) == [2, 1, 1]
    assert largest_remainder([7], 5) == [5]
    with pytest.raises(ValueError):
        largest_remainder([0, 0], 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=8).filter(lambda w: sum(w) > 0), st.integers(0, 500))
def test_largest_remainder_properties(weights, total):
    got = largest_remainder(weights, total)
    assert sum(got) == total
    s = sum(weights)
    for g, w in zip(got, weights):
        assert abs(g - total * w / s) < 1  # within one seat of the exact quota


def test_target_window_geometry():
    w = TargetWindow("d", anchor=9, prefix_len=4, n_targets=3)
    toks = np.arange(20)
    assert toks[w.prefix_start : w.anchor + 1].tolist() == [6, 7, 8, 9]
    assert toks[w.target_slice].tolist() == [10, 11, 12]


def test_valid_anchor_range():
    r = valid_anchor_range(100, prefix_len=10, n_targets=5, exclude_last=20)
    assert r.start == 10 and r.stop == 75
    assert len(valid_anchor_range(30, 10, 5, 20)) == 0


def _tok(lengths):
    return {f"d{i}": np.arange(n) for i, n in enumerate(lengths)}


def test_sample_targets_proportional_and_valid():
    toks = _tok([1000, 3000])
    ws = sample_targets(sorted(toks), toks, 50, 10, 40, 40, seed=0)
    per_doc = {d: sum(w.doc_id == d for w in ws) for d in toks}
    assert per_doc == {"d0": 10, "d1": 30}
    for w in ws:
        n = len(toks[w.doc_id])
        assert w.anchor - w.prefix_len + 1 >= 0
        assert w.anchor + w.n_targets + w.exclude_last < n
    anchors = [(w.doc_id, w.anchor) for w in ws]
    assert len(set(anchors)) == len(anchors)


def test_sample_targets_deterministic_and_stable():
    toks = _tok([500, 800])
    a = sample_targets(sorted(toks), toks, 20, 5, 10, 10, seed=3)
    assert a == sample_targets(sorted(toks), toks, 20, 5, 10, 10, seed=3)
    assert a != sample_targets(sorted(toks), toks, 20, 5, 10, 10, seed=4)


def test_sample_targets_skips_short_docs(caplog):
    toks = _tok([10, 500])
    with caplog.at_level(logging.WARNING):
        ws = sample_targets(sorted(toks), toks, 20, 5, 10, 5, seed=0)
    assert {w.doc_id for w in ws} == {"d1"}
    assert "skipping d0" in caplog.text


def test_sample_targets_errors():
    toks = _tok([10])
    with pytest.raises(CorpusError, match="long enough"):
        sample_targets(sorted(toks), toks, 20, 5, 10, 1, seed=0)
    toks = _tok([40])
    with pytest.raises(CorpusError, match="requested"):
        sample_targets(sorted(toks), toks, 20, 5, 10, 100, seed=0)


def test_sample_targets_caps_redistribute():
    # d0 has only 5 anchors; its surplus flows to d1
    toks = _tok([40, 4000])
    ws = sample_targets(sorted(toks), toks, 20, 5, 10, 100, seed=0)
    assert len(ws) == 100
    assert sum(w.doc_id == "d0" for w in ws) <= 5


def test_write_corpus_helper(tmp_path):
    root = write_corpus(tmp_path / "c", n_docs=2, n_sentences=3, labels=False)
    assert not (root / "metadata.jsonl").exists()
    assert len(load_corpus(root)) == 2
