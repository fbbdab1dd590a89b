import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longctx.corpus import BookLabels, TargetWindow
from longctx.evaluator import (
    ABSENT,
    CSV_COLUMNS,
    DISTANT,
    FIRST,
    FREQUENT,
    INFREQUENT,
    LOCAL,
    PROBE_COLUMNS,
    REST,
    SINGLETON,
    CategorySet,
    EvalError,
    EvalRecord,
    Taxonomy,
    aggregate,
    categorize,
    copy_distance,
    eval_targets,
    overlap_matrix,
    perplexity,
    prefix_sweep,
    read_records_csv,
    records_to_csv_text,
    window_input,
    write_records_csv,
)
from longctx.tokenizer import ClusterPos, FrequencyTable, TokenSequence
from conftest import tiny_lm, uniform_model
from oracles import ppl_oracle

nll_lists = st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=40)


def test_perplexity_examples():
    assert perplexity([math.log(7)] * 3) == pytest.approx(7, abs=1e-12)
    assert perplexity([0.5, 1.5]) == pytest.approx(math.e, abs=1e-12)
    assert perplexity([1.0], loss_scale=2.0) == pytest.approx(math.e ** 2, abs=1e-12)
    with pytest.raises(EvalError):
        perplexity([])


@settings(max_examples=200, deadline=None)
@given(nll_lists, st.floats(0.5, 2.0))
def test_perplexity_matches_oracle(nlls, scale):
    assert perplexity(nlls, scale) == pytest.approx(ppl_oracle(nlls, scale), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(nll_lists, st.randoms(use_true_random=False), st.integers(1, 4))
def test_pooling_reordering_replication_are_exact(nlls, rnd, reps):
    shuffled = list(nlls)
    rnd.shuffle(shuffled)
    assert perplexity(shuffled) == perplexity(nlls)
    assert perplexity(nlls * reps) == perplexity(nlls)
    cut = len(nlls) // 2
    assert perplexity(nlls[:cut] + nlls[cut:]) == perplexity(nlls)


def test_copy_distance():
    h = np.array([5, 3, 5, 9])
    assert copy_distance(h, 9) == 1
    assert copy_distance(h, 5) == 2
    assert copy_distance(h, 3) == 3
    assert copy_distance(h, 4) is None


def test_categorize():
    table = FrequencyTable(np.array([0, 10, 1, 1]), frozenset({1}))
    tax = Taxonomy(table, cutoff=3)
    c = categorize(1, [2, 1, 3], tax, ClusterPos.FIRST)
    assert c == CategorySet(FREQUENT, FIRST, LOCAL, 2)
    c = categorize(2, [2, 1, 3, 3], tax, ClusterPos.INTERIOR)
    assert c == CategorySet(INFREQUENT, REST, DISTANT, 4)
    c = categorize(3, [1], tax)
    assert (c.subword, c.copy, c.copy_distance) == (SINGLETON, ABSENT, None)
    assert categorize(3, [1], Taxonomy()).frequency is None


def test_category_set_invariant():
    with pytest.raises(ValueError):
        CategorySet(None, FIRST, LOCAL, None)
    with pytest.raises(ValueError):
        CategorySet(None, FIRST, ABSENT, 3)


def test_window_input():
    w = TargetWindow("d", anchor=9, prefix_len=5, n_targets=2)
    toks = np.arange(20)
    assert window_input(toks, w, 5).tolist() == [5, 6, 7, 8, 9, 10, 11]
    assert window_input(toks, w, 2).tolist() == [8, 9, 10, 11]
    with pytest.raises(EvalError):
        window_input(toks, w, 6)
    with pytest.raises(EvalError):
        window_input(toks, w, 0)


def _setup(n_docs=2, length=120, vocab=30):
    rng = np.random.default_rng(0)
    tokens = {f"d{i}": TokenSequence.from_ids(rng.integers(1, vocab, size=length)) for i in range(n_docs)}
    windows = [TargetWindow(d, a, 32, 4, 0) for d in tokens for a in (40, 80)]
    return tokens, windows


def test_eval_targets_picks_target_positions():
    tokens, windows = _setup()
    m = tiny_lm()
    recs = eval_targets(m, windows, tokens, 16)
    assert len(recs) == len(windows) * 4
    from longctx.model import forward_nll

    w = windows[1]
    full = forward_nll(m, window_input(tokens[w.doc_id], w, 16))
    got = [r.nll for r in recs if (r.doc_id, r.anchor) == (w.doc_id, w.anchor)]
    assert got == full[15:19].tolist()
    assert [r.token_id for r in recs[:4]] == tokens["d0"].ids[41:45].tolist()


def test_batched_eval_matches_unbatched():
    tokens, windows = _setup()
    m = tiny_lm()
    a = eval_targets(m, windows, tokens, 16, batch_size=1)
    b = eval_targets(m, windows, tokens, 16, batch_size=3)
    np.testing.assert_allclose([r.nll for r in a], [r.nll for r in b], atol=1e-6)


def test_eval_rejects_overlong_input():
    tokens, windows = _setup()
    with pytest.raises(EvalError, match="max_seq_len"):
        eval_targets(tiny_lm(max_seq_len=20), windows, tokens, 17)


def test_uniform_model_ppl_is_vocab_size():
    tokens, windows = _setup(vocab=30)
    recs = eval_targets(uniform_model(30), windows, tokens, 8)
    assert abs(perplexity(recs) - 30) < 1e-9


def test_prefix_sweep_and_aggregate():
    tokens, windows = _setup()
    tax = Taxonomy(labels={"d0": BookLabels("fiction", "continuous", "single"),
                           "d1": BookLabels("nonfiction", "continuous", "single")})
    curves, recs = prefix_sweep(tiny_lm(), windows, tokens, [4, 8, 32], tax, group_by=["genre"])
    assert [c.key for c in curves] == [("fiction",), ("nonfiction",)]
    assert [p.x for p in curves[0].points] == [4, 8, 32]
    assert all(p.token_count == 8 for c in curves for p in c.points)
    subset = [r for r in recs if r.prefix_len == 8 and r.doc_id == "d0"]
    assert curves[0].points[1].ppl == perplexity(subset)
    with pytest.raises(EvalError):
        prefix_sweep(tiny_lm(), windows, tokens, [8, 4])


def test_aggregate_pooled_equals_split():
    recs = [EvalRecord("d", i, 0, 1, float(i) / 7, 8) for i in range(20)]
    [pooled] = aggregate(recs)
    [split] = aggregate(recs[:7] + recs[7:])
    assert pooled.points == split.points
    assert pooled.name == "all"


def test_categories_follow_the_actual_input():
    # the target repeats a token seen 3 positions earlier only in a long prefix
    ids = np.array([1, 2, 3, 7, 4, 5, 6, 7, 8, 9])
    tokens = {"d": TokenSequence.from_ids(ids)}
    w = TargetWindow("d", anchor=6, prefix_len=6, n_targets=1)
    tax = Taxonomy(cutoff=3)
    long_ = eval_targets(tiny_lm(), [w], tokens, 6, tax)[0]
    short = eval_targets(tiny_lm(), [w], tokens, 3, tax)[0]
    assert (long_.categories.copy, long_.categories.copy_distance) == (DISTANT, 4)
    assert short.categories.copy == ABSENT


def test_overlap_matrix():
    def rec(freq, sub, copy):
        return EvalRecord("d", 0, 0, 1, 1.0, 4, CategorySet(freq, sub, copy, None if copy == ABSENT else 5))

    recs = [rec(INFREQUENT, REST, DISTANT), rec(INFREQUENT, FIRST, ABSENT), rec(FREQUENT, REST, LOCAL)]
    m = overlap_matrix(recs)
    assert m["infrequent"] == {"infrequent": 1.0, "subword-rest": 0.5, "copy-distant": 0.5}
    assert m["copy-distant"]["subword-rest"] == 1.0
    assert overlap_matrix([rec(FREQUENT, FIRST, ABSENT)])["infrequent"]["copy-distant"] is None


GOLDEN_HEADER = (
    "doc_id,anchor,target_index,token_id,prefix_len,nll,frequency,subword,copy,copy_distance,"
    "genre,continuity,authorship,perturb_kind,perturb_m,run_index,seed"
)


def test_csv_golden(tmp_path):
    assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER
    assert PROBE_COLUMNS == ("probe_kind", "offset_or_suffix_len", "candidate_rank")
    cats = CategorySet(FREQUENT, FIRST, LOCAL, 3, BookLabels("fiction", "continuous", "various"))
    recs = [EvalRecord("b", 10, 1, 42, 0.1, 64, cats), EvalRecord("b", 10, 2, 5, 1 / 3, 64)]
    text = records_to_csv_text(recs)
    assert text == (
        GOLDEN_HEADER + "\n"
        "b,10,1,42,64,0.1,frequent,first,local,3,fiction,continuous,various,,,0,\n"
        "b,10,2,5,64,0.3333333333333333,,,,,,,,,,0,\n"
    )
    path = tmp_path / "r.csv"
    write_records_csv(recs[:1], path)
    write_records_csv(recs[1:], path, append=True)
    assert path.read_text() == text


def test_csv_round_trip(tmp_path):
    from longctx.perturbations import PerturbationSpec

    cats = CategorySet(INFREQUENT, REST, DISTANT, 3000, BookLabels("fiction", "discontinuous", "single"))
    recs = [
        EvalRecord("b", 10, 1, 42, 0.123456789012345678, 64, cats),
        EvalRecord("b", 11, 0, 7, 2.5, 64, None, PerturbationSpec("token_drop", 8, 99, 2, "random_control"), 2, 99),
        EvalRecord("c", 3, 0, 9, 1e-300, 16, probe={"probe_kind": "copy", "offset_or_suffix_len": 4}),
    ]
    path = tmp_path / "r.csv"
    write_records_csv(recs, path, with_probe=True)
    back = read_records_csv(path)
    assert records_to_csv_text(back, with_probe=True) == path.read_text()
    assert [r.nll for r in back] == [r.nll for r in recs]
    assert back[1].perturbation == recs[1].perturbation
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n")
    with pytest.raises(EvalError):
        read_records_csv(bad)
