import numpy as np
import pytest

from bilrp.encoder import Vocab, embed, load_model, save_model, similarity_score
from bilrp.errors import EmptyNounSet, ValidationError
from bilrp.evaluation import average_cosine_similarity
from bilrp.interactions import bilrp_explain
from bilrp.synthetic import (
    VARIANTS,
    NounMatchSpec,
    build_nounmatch_model,
    default_spec,
    generate_pairs,
    ground_truth_matrix,
    noun_count_similarity,
    shares_non_noun,
)


@pytest.fixture(scope="module")
def tiny_spec():
    vocab = ("[PAD]", "[MASK]", "dog", "park", "run", "the", "a")
    return NounMatchSpec(vocab, {2, 3, 4})


def _y(model, vocab, a, b):
    return similarity_score(embed(model, vocab.encode(a)), embed(model, vocab.encode(b)))


@pytest.mark.parametrize("variant", VARIANTS)
def test_count_examples(tiny_spec, variant):
    model = build_nounmatch_model(tiny_spec, variant)
    vocab = tiny_spec.to_vocab()
    assert _y(model, vocab, "dog park", "dog run") == 1.0
    assert _y(model, vocab, "dog dog", "dog") == 2.0
    assert _y(model, vocab, "the dog", "a park run") == 0.0


def test_ground_truth_examples(tiny_spec):
    vocab = tiny_spec.to_vocab()
    enc = vocab.encode
    assert not ground_truth_matrix(enc("the dog"), enc("park a"), tiny_spec).any()
    np.testing.assert_array_equal(ground_truth_matrix(enc("dog"), enc("dog"), tiny_spec), [[1.0]])
    np.testing.assert_array_equal(ground_truth_matrix(enc("dog dog"), enc("dog"), tiny_spec), [[1.0], [1.0]])
    # matching non-nouns are not interactions
    assert ground_truth_matrix(enc("the"), enc("the"), tiny_spec)[0, 0] == 0.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_similarity_is_exact_count(variant):
    spec = default_spec()
    model = build_nounmatch_model(spec, variant)
    for pair in generate_pairs(spec, 60, seed=2):
        y = similarity_score(embed(model, pair.a), embed(model, pair.b))
        assert noun_count_similarity(pair.a, pair.b, spec) == pair.score
        if variant == "attention":
            # 1/s attention weights are not exact binary fractions
            assert y == pytest.approx(pair.score, abs=1e-12)
        else:
            assert y == pair.score


@pytest.mark.parametrize("variant", VARIANTS)
def test_bilrp_recovers_ground_truth(variant):
    spec = default_spec()
    model = build_nounmatch_model(spec, variant)
    pairs = generate_pairs(spec, 40, seed=8)
    explanations, truths = [], []
    for pair in pairs:
        m = bilrp_explain(model, pair.a, pair.b)
        truth = ground_truth_matrix(pair.a, pair.b, spec)
        assert np.max(np.abs(m.values - truth)) <= 1e-6
        explanations.append(m)
        truths.append(truth)
    assert average_cosine_similarity(explanations, truths) >= 0.999


def test_container_round_trip(tmp_path):
    spec = default_spec()
    model = build_nounmatch_model(spec, "filter")
    save_model(model, tmp_path / "c.json", tmp_path / "w.tnsr")
    again = load_model(tmp_path / "c.json", tmp_path / "w.tnsr")
    assert again.fingerprint == model.fingerprint
    pair = generate_pairs(spec, 1, seed=0)[0]
    assert similarity_score(embed(again, pair.a), embed(again, pair.b)) == pair.score


def test_spec_validation():
    with pytest.raises(EmptyNounSet):
        NounMatchSpec(("a", "b"), set())
    with pytest.raises(ValidationError):
        NounMatchSpec(("a", "b"), {5})
    with pytest.raises(ValidationError):
        build_nounmatch_model(default_spec(), "deep")


def test_generation_is_deterministic():
    spec = default_spec()
    a = generate_pairs(spec, 20, seed=4)
    b = generate_pairs(spec, 20, seed=4)
    assert a == b
    assert all(p.score >= 1 for p in a)
    assert all(shares_non_noun(p, spec) for p in a)  # [CLS]/[SEP] frame every side


def test_pos_tags():
    spec = default_spec()
    seq = spec.to_vocab().encode("the dog", special=True)
    assert spec.pos_tags(seq) == ("[CLS]", "X", "NOUN", "[SEP]")


def test_vocab_fallback_unknown():
    from bilrp.errors import UnknownToken

    with pytest.raises(UnknownToken):
        Vocab(["a"]).encode("b")
    assert Vocab(["[UNK]", "a"]).encode("a b").ids == (1, 0)
