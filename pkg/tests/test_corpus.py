import numpy as np
import pytest

from bilrp.corpus import (
    PosAggregate,
    aggregate_diff,
    aggregate_pos_relevance,
    align_subtokens_to_words,
    rank_top_interactions,
    select_quantile_groups,
    word_level,
    word_spans,
)
from bilrp.errors import (
    EmptyInput,
    MissingPosTags,
    NormalizationMismatch,
    OffsetOutOfRange,
    ValidationError,
)
from bilrp.interactions import InteractionMatrix

from oracles import brute_force_pos_cells, brute_force_top

TAGS = ("NOUN", "VERB", "ADJ", "DET")
WORDS = ("dog", "runs", "red", "the", "cat", "key", "##board", "[CLS]", "[SEP]")


def _matrix(values, pos_a, pos_b, pair_id="p", tokens_a=None, tokens_b=None, wa=None, wb=None):
    values = np.asarray(values, dtype=np.float64)
    tokens_a = tokens_a or tuple(f"a{i}" for i in range(values.shape[0]))
    tokens_b = tokens_b or tuple(f"b{j}" for j in range(values.shape[1]))
    return InteractionMatrix(values, tuple(tokens_a), tuple(tokens_b), "bilrp",
                             float(values.sum()), float(values.sum()), pair_id,
                             pos_a=tuple(pos_a), pos_b=tuple(pos_b), word_ids_a=wa, word_ids_b=wb)


def random_corpus(rng, n_pairs=None, max_tokens=8, subwords=True):
    n_pairs = n_pairs or int(rng.integers(1, 21))
    out = []
    for k in range(n_pairs):
        sides = []
        for _ in range(2):
            s = int(rng.integers(1, max_tokens + 1))
            tokens = [str(rng.choice(WORDS)) for _ in range(s)]
            tags, word_ids, w = [], [], -1
            for t, tok in enumerate(tokens):
                if tok.startswith("["):
                    tags.append(tok)
                    word_ids.append(-1)
                    continue
                if not (subwords and t > 0 and word_ids[-1] >= 0 and rng.random() < 0.3):
                    w += 1
                word_ids.append(w)
                tags.append(str(rng.choice(TAGS)))
            sides.append((tokens, tags, word_ids))
        (ta, pa, wa), (tb, pb, wb) = sides
        # quarter-integer values keep every sum exact regardless of order
        values = rng.integers(-8, 9, (len(ta), len(tb))) / 4.0
        if rng.random() < 0.5:
            values = rng.normal(size=(len(ta), len(tb)))
        out.append(_matrix(values, pa, pb, f"pair{k:02d}", ta, tb, tuple(wa), tuple(wb)))
    return out


def _expected_values(cells, normalization):
    raw = {}
    for tags, (pos, neg, count) in cells.items():
        raw[tags] = (pos / count, neg / count) if normalization == "mean" else (pos, neg)
    peak = max([max(p, -n) for p, n in raw.values()] + [0.0])
    peak = peak if peak > 0 else 1.0
    return {tags: (p / peak, n / peak, cells[tags][2]) for tags, (p, n) in raw.items()}


def test_hand_example():
    m = _matrix([[2.0], [-1.0]], ["NOUN", "VERB"], ["NOUN"])
    agg = aggregate_pos_relevance([m])
    assert agg.cells[("NOUN", "NOUN")].pos_sum == 2.0
    assert agg.cells[("VERB", "NOUN")].neg_sum == -1.0
    assert agg.value(("NOUN", "NOUN"), "pos") == 1.0
    assert agg.value(("VERB", "NOUN"), "neg") == -0.5
    assert agg.rows() == [("NOUN", "NOUN", 1.0, 0.0, 1), ("VERB", "NOUN", 0.0, -0.5, 1)]


def test_all_positive_has_no_negative_sums(rng):
    corpus = [_matrix(np.abs(m.values), m.pos_a, m.pos_b) for m in random_corpus(rng, subwords=False)]
    agg = aggregate_pos_relevance(corpus)
    assert all(c.neg_sum == 0.0 for c in agg.cells.values())


@pytest.mark.parametrize("normalization", ["sum", "mean"])
def test_matches_brute_force(rng, normalization):
    for _ in range(30):
        corpus = random_corpus(rng)
        agg = aggregate_pos_relevance(corpus, normalization)
        want = _expected_values(brute_force_pos_cells(corpus), normalization)
        got = {(a, b): (p, n, c) for a, b, p, n, c in agg.rows()}
        assert got == want


def test_duplication_and_permutation_invariance(rng):
    corpus = random_corpus(rng, 10)
    base = aggregate_pos_relevance(corpus).rows()
    doubled = aggregate_pos_relevance(corpus + corpus).rows()
    for r, d in zip(base, doubled):
        assert r[:2] == d[:2] and d[4] == 2 * r[4]
        assert d[2] == pytest.approx(r[2], rel=1e-12) and d[3] == pytest.approx(r[3], rel=1e-12)
    shuffled = [corpus[i] for i in rng.permutation(len(corpus))]
    for r, s in zip(base, aggregate_pos_relevance(shuffled).rows()):
        assert r[:2] == s[:2] and r[4] == s[4]
        assert s[2] == pytest.approx(r[2], rel=1e-12) and s[3] == pytest.approx(r[3], rel=1e-12)


def test_merge_equals_joint_aggregate(rng):
    left, right = random_corpus(rng, 6), random_corpus(rng, 7)
    merged = aggregate_pos_relevance(left).merge(aggregate_pos_relevance(right))
    joint = aggregate_pos_relevance(left + right)
    assert set(merged.cells) == set(joint.cells)
    for tags, cell in joint.cells.items():
        assert merged.cells[tags].count == cell.count
        assert merged.cells[tags].pos_sum == pytest.approx(cell.pos_sum, rel=1e-12)
    with pytest.raises(NormalizationMismatch):
        aggregate_pos_relevance(left, "sum").merge(aggregate_pos_relevance(right, "mean"))


def test_mean_equals_sum_when_counts_are_one():
    m = _matrix([[0.5, -2.0], [1.5, 3.0]], ["NOUN", "VERB"], ["ADJ", "DET"])
    assert aggregate_pos_relevance([m], "mean").rows() == aggregate_pos_relevance([m], "sum").rows()


def test_totals_are_preserved(rng):
    corpus = random_corpus(rng, 15, subwords=False)
    agg = aggregate_pos_relevance(corpus, "none")
    pos_total = sum(float(m.values[m.values > 0].sum()) for m in corpus)
    neg_total = sum(float(m.values[m.values < 0].sum()) for m in corpus)
    assert sum(c.pos_sum for c in agg.cells.values()) == pytest.approx(pos_total, rel=1e-6)
    assert sum(c.neg_sum for c in agg.cells.values()) == pytest.approx(neg_total, rel=1e-6)


def test_all_zero_corpus_normalizer():
    agg = aggregate_pos_relevance([_matrix([[0.0]], ["NOUN"], ["NOUN"])])
    assert agg.normalizer == 1.0 and agg.value(("NOUN", "NOUN")) == 0.0


def test_missing_tags():
    m = InteractionMatrix(np.ones((1, 1)), ("a",), ("b",), "bilrp", 1.0, 1.0)
    with pytest.raises(MissingPosTags):
        aggregate_pos_relevance([m])
    with pytest.raises(MissingPosTags):
        aggregate_pos_relevance([m], word_level_sum=False)


def test_word_level_sums_subtokens():
    m = _matrix([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], ["NOUN", "NOUN", "[SEP]"], ["VERB", "ADJ"],
                wa=(0, 0, -1), wb=(0, 1))
    values, ta, tb = word_level(m)
    np.testing.assert_array_equal(values, [[4.0, 6.0], [5.0, 6.0]])
    assert ta == ["NOUN", "[SEP]"] and tb == ["VERB", "ADJ"]


def test_bad_normalization():
    with pytest.raises(ValidationError):
        PosAggregate({}, "max")


def test_quantile_groups():
    preds = [(f"p{i:03d}", float(i)) for i in range(100)]
    high, low = select_quantile_groups(preds)
    assert len(high) == 25 and len(low) == 25
    assert high[0] == "p099" and low[0] == "p000" and set(high).isdisjoint(low)
    high, low = select_quantile_groups([("a", 0.3), ("b", 0.9), ("c", 0.1), ("d", 0.5)], q=0.5)
    assert high == ["b", "d"] and low == ["c", "a"]
    high, low = select_quantile_groups([(pid, 1.0) for pid in "dcba"], q=0.5)
    assert low == ["a", "b"] and high == ["d", "c"]


def test_quantile_errors():
    with pytest.raises(ValidationError):
        select_quantile_groups([("a", 1.0)], q=0.0)
    with pytest.raises(ValidationError):
        select_quantile_groups([("a", 1.0)], q=0.6)
    with pytest.raises(EmptyInput):
        select_quantile_groups([])


def test_rank_unique_maximum():
    m = _matrix([[0.1, 0.2], [0.3, 9.0]], ["NOUN", "NOUN"], ["NOUN", "NOUN"],
                tokens_a=("blood", "leukemia"), tokens_b=("cells", "leukemia"))
    top = rank_top_interactions([m], k=1)
    assert (top.entries[0].token_a, top.entries[0].token_b) == ("leukemia", "leukemia")
    assert top.entries[0].relevance == 9.0


def test_rank_k_larger_than_cells():
    m = _matrix([[1.0, -1.0]], ["NOUN"], ["VERB", "ADJ"])
    assert len(rank_top_interactions([m], k=50).entries) == 2


def test_rank_excludes_special_tokens():
    m = _matrix([[5.0, 1.0], [2.0, 0.5]], ["[CLS]", "NOUN"], ["NOUN", "[SEP]"],
                tokens_a=("[CLS]", "dog"), tokens_b=("dog", "[SEP]"))
    assert [e.relevance for e in rank_top_interactions([m]).entries] == [2.0]
    assert len(rank_top_interactions([m], exclude_special=False).entries) == 4


@pytest.mark.parametrize("special", [True, False])
def test_rank_matches_brute_force(rng, special):
    specials = {"[CLS]", "[SEP]"} if special else set()
    for _ in range(30):
        corpus = random_corpus(rng)
        ids = {m.pair_id for m in corpus if rng.random() < 0.6}
        k = int(rng.integers(1, 12))
        got = rank_top_interactions(corpus, ids, k, exclude_special=special)
        want = brute_force_top(corpus, ids, k, specials)
        assert [(e.relevance, e.token_a, e.token_b, e.pair_id, e.i, e.j) for e in got.entries] == want


def test_rank_is_stable(rng):
    corpus = random_corpus(rng, 10)
    assert rank_top_interactions(corpus, k=8) == rank_top_interactions(list(corpus), k=8)


def test_diff_identity_and_single_cell():
    m = _matrix([[2.0, 1.0]], ["NOUN"], ["NOUN", "VERB"])
    agg = aggregate_pos_relevance([m])
    assert all(e.difference == 0.0 for e in aggregate_diff(agg, agg))
    other = aggregate_pos_relevance([_matrix([[2.0, 0.5]], ["NOUN"], ["NOUN", "VERB"])])
    top = aggregate_diff(agg, other)
    assert top[0].tags == ("NOUN", "VERB") and top[0].difference == 0.25


def test_diff_top_n_and_errors(rng):
    a = aggregate_pos_relevance(random_corpus(rng, 20))
    b = aggregate_pos_relevance(random_corpus(rng, 20))
    top = aggregate_diff(a, b)
    assert len(top) == min(10, len(set(a.cells) | set(b.cells)))
    diffs = [abs(e.difference) for e in top]
    assert diffs == sorted(diffs, reverse=True)
    with pytest.raises(NormalizationMismatch):
        aggregate_diff(a, aggregate_pos_relevance(random_corpus(rng, 2), "mean"))
    with pytest.raises(ValidationError):
        aggregate_diff(a, b, sign="both")


def test_alignment_examples():
    text = "keyboard"
    assert align_subtokens_to_words(["key", "##board"], [(0, 3), (3, 8)], word_spans(text)) == [0, 0]
    text = "the dog runs"
    offsets = [(0, 3), (4, 7), (8, 12)]
    assert align_subtokens_to_words(text.split(), offsets, word_spans(text)) == [0, 1, 2]
    assert align_subtokens_to_words(["[CLS]", "the"], [None, (0, 3)], word_spans("the")) == [-1, 0]


def test_alignment_matches_span_containment(rng):
    for _ in range(50):
        words = [str(rng.choice(["a", "dog", "keyboard", "xylophone", "is"])) for _ in range(6)]
        text = " ".join(words)
        spans = word_spans(text)
        tokens, offsets = [], []
        for start, end in spans:
            cut = start
            while cut < end:
                nxt = min(end, cut + int(rng.integers(1, 4)))
                tokens.append(text[cut:nxt])
                offsets.append((cut, nxt))
                cut = nxt
        want = []
        for s, _ in offsets:
            want.append(next(w for w, (a, b) in enumerate(spans) if a <= s < b))
        assert align_subtokens_to_words(tokens, offsets, spans) == want


def test_alignment_out_of_range():
    with pytest.raises(OffsetOutOfRange):
        align_subtokens_to_words(["x"], [(2, 3)], word_spans("ab cd"))
    with pytest.raises(OffsetOutOfRange):
        align_subtokens_to_words(["x"], [(40, 41)], word_spans("ab cd"))
