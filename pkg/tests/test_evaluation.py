import numpy as np
import pytest

from bilrp.encoder import embed
from bilrp.errors import DegenerateInput, EmptyInput, LengthMismatch, ShapeMismatch, StepOutOfRange
from bilrp.evaluation import (
    PerturbationCurve,
    aupc,
    average_cosine_similarity,
    average_cosine_similarity_report,
    conservation_check,
    evaluate_perturbation,
    perturbation_curve,
    perturbation_curve_from_order,
    perturbation_fractions,
    predict_similarities,
    ranking_from_matrix,
    restored_count,
    spearman_rho,
)
from bilrp.interactions import bilrp_explain
from bilrp.pairs import AnnotatedPair
from bilrp.relevance import RuleConfig
from bilrp.synthetic import (
    build_nounmatch_model,
    default_spec,
    generate_pairs,
    random_config,
    random_model,
    random_sequence,
)

from oracles import brute_force_spearman


@pytest.fixture(scope="module")
def nounmatch():
    spec = default_spec()
    return spec, build_nounmatch_model(spec, "filter")


def test_fraction_grid():
    f = perturbation_fractions(0.04)
    assert len(f) == 26 and f[0] == 0.0 and f[-1] == 1.0
    np.testing.assert_allclose(np.diff(f), 0.04)
    assert list(perturbation_fractions(0.3)) == pytest.approx([0.0, 0.3, 0.6, 0.9, 1.0])


@pytest.mark.parametrize("step", [0.0, -0.1, 1.5])
def test_bad_step(step):
    with pytest.raises(StepOutOfRange):
        perturbation_fractions(step)


def test_restored_count_is_robust_to_float_noise():
    f = perturbation_fractions(0.04)
    assert [restored_count(x, 25) for x in f] == list(range(26))
    assert restored_count(0.5, 3) == 2 and restored_count(1.0, 7) == 7


def test_full_restoration_has_zero_distance(rng):
    cfg = random_config(rng)
    model = random_model(cfg, 3)
    for length in (1, 4, 9):
        seq = random_sequence(rng, cfg, length)
        order = tuple(rng.permutation(length))
        curve = perturbation_curve_from_order(model, seq, order)
        assert curve.distances[-1] == 0.0


def test_single_token_curve(small_model):
    seq = random_sequence(np.random.default_rng(2), small_model.config, 1)
    curve = perturbation_curve_from_order(small_model, seq, (0,))
    masked = seq.with_ids([small_model.config.mask_token_id])
    all_mask = np.linalg.norm(embed(small_model, masked) - embed(small_model, seq))
    assert curve.distances[0] == pytest.approx(all_mask)
    assert np.all(curve.distances[1:] == 0.0)


def test_rejects_non_permutation(small_model):
    seq = random_sequence(np.random.default_rng(2), small_model.config, 3)
    with pytest.raises(Exception):
        perturbation_curve_from_order(small_model, seq, (0, 0, 1))


def test_nouns_first_beats_reverse(nounmatch):
    spec, model = nounmatch
    vocab = spec.to_vocab()
    a = vocab.encode("the dog saw the park")
    b = vocab.encode("a dog left the park")
    pair = AnnotatedPair("p", a, b)
    m = bilrp_explain(model, a, b)
    order = ranking_from_matrix(m, "a")
    assert set(order[:2]) == {1, 4}
    best = perturbation_curve(model, pair, m, "a")
    # both nouns restored at 2 of 5 tokens: distance is 0 from then on
    restored = [restored_count(f, 5) for f in best.fractions]
    assert all(d == 0.0 for d, n in zip(best.distances, restored) if n >= 2)
    worst = perturbation_curve_from_order(model, a, tuple(reversed(order)))
    assert best.aupc < worst.aupc


def test_ranking_ties_by_position():
    from bilrp.interactions import InteractionMatrix

    m = InteractionMatrix(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 0.0]]), ("a", "b", "c"),
                          ("x", "y"), "bilrp", 2.0, 2.0)
    assert ranking_from_matrix(m, "a") == (0, 1, 2)
    assert ranking_from_matrix(m, "b") == (0, 1)


def test_aupc_closed_forms():
    assert aupc([0.0, 0.5, 1.0], [0.0, 0.0, 0.0]) == 0.0
    assert aupc([0.0, 0.25, 0.5, 1.0], [3.0, 3.0, 3.0, 3.0]) == 3.0
    assert aupc([0.0, 0.5, 1.0], [2.0, 1.0, 0.0]) == 1.0
    assert aupc([0.0, 0.25, 1.0], [4.0, 2.0, 0.0]) == 1.5
    f = perturbation_fractions(0.04)
    d = 1.0 - f
    assert aupc(f, d) == pytest.approx(0.5, abs=1e-9)


def test_aupc_append_invariance():
    f = [0.0, 0.5, 1.0]
    d = [1.5, 0.25, 0.0]
    assert aupc(f + [1.0, 1.0], d + [0.0, 0.0]) == aupc(f, d)


def test_aupc_length_mismatch():
    with pytest.raises(LengthMismatch):
        aupc([0.0, 1.0], [1.0])


def test_aupc_accepts_curve():
    c = PerturbationCurve(np.array([0.0, 1.0]), np.array([2.0, 0.0]), 1.0)
    assert aupc(c) == 1.0


def test_evaluate_perturbation_summary(nounmatch):
    spec, model = nounmatch
    pairs = generate_pairs(spec, 30, seed=3)
    report = evaluate_perturbation(model, pairs, ("bilrp", "random"), seed=1)
    assert len(report.records) == 2 * 2 * 30
    s = report.summary
    assert s["bilrp"]["mean_aupc"] < s["random"]["mean_aupc"]
    assert s["random"]["p_value_vs_bilrp"] < 0.05
    assert s["bilrp"]["p_value_vs_bilrp"] is None
    for curve in report.curves.values():
        assert curve.distances[-1] == 0.0
    again = evaluate_perturbation(model, pairs, ("bilrp", "random"), seed=1)
    assert [r.aupc for r in again.records] == [r.aupc for r in report.records]


def test_conservation_records():
    rng = np.random.default_rng(9)
    cfg = random_config(rng)
    model = random_model(cfg, 9)
    pair = AnnotatedPair("q", random_sequence(rng, cfg, 5), random_sequence(rng, cfg, 4))
    zero = conservation_check(model, pair, RuleConfig(zero_biases=True))
    assert zero.zero_biases
    assert abs(zero.gap) <= 1e-3 * abs(zero.similarity) + 1e-6
    biased = conservation_check(model, pair)
    assert np.isfinite(biased.gap) and not biased.zero_biases
    assert biased.gap == biased.relevance_sum - biased.similarity


def test_linear_hxp_conservation_gap():
    from test_interactions import _linear_config

    model = random_model(_linear_config(), 4, zero_biases=True, linear=True)
    rng = np.random.default_rng(4)
    pair = AnnotatedPair("q", random_sequence(rng, model.config, 5), random_sequence(rng, model.config, 3))
    rec = conservation_check(model, pair, method="hxp")
    assert abs(rec.gap) <= 1e-9 * abs(rec.similarity) + 1e-12


def test_acs_closed_forms():
    t = [np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([[0.0, 3.0]])]
    assert average_cosine_similarity(t, t) == 1.0
    assert average_cosine_similarity([-x for x in t], t) == -1.0
    e = [np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([[0.0, 3.0]])]
    # cos = 1/sqrt(2)/sqrt(5)*... computed by hand: <e,t> = 1, |e| = sqrt 2, |t| = sqrt 5
    assert average_cosine_similarity(e, t) == pytest.approx((1 / np.sqrt(10) + 1) / 2, abs=1e-15)


def test_acs_degenerate_and_scale():
    t = [np.ones((2, 2)), np.zeros((1, 1))]
    e = [3.0 * np.ones((2, 2)), np.zeros((1, 1))]
    r = average_cosine_similarity_report(e, t)
    assert r.degenerate == 1 and r.value == 0.5
    assert average_cosine_similarity([np.array([[2.0, -1.0]])], [np.array([[7.0, 1.0]])]) == \
        pytest.approx(average_cosine_similarity([np.array([[20.0, -10.0]])], [np.array([[0.7, 0.1]])]))


def test_acs_errors():
    with pytest.raises(ShapeMismatch):
        average_cosine_similarity([np.ones((2, 2))], [np.ones((2, 3))])
    with pytest.raises(LengthMismatch):
        average_cosine_similarity([np.ones(1)], [])
    with pytest.raises(EmptyInput):
        average_cosine_similarity([], [])


def test_spearman_examples():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-15)
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_with_ties_matches_counting_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, n).astype(float)
        y = rng.normal(size=n).round(1)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman_rho(x, y) == pytest.approx(brute_force_spearman(x, y), abs=1e-9)


def test_spearman_monotone_invariance(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert spearman_rho(np.exp(x), y ** 3) == pytest.approx(spearman_rho(x, y), abs=1e-12)


def test_spearman_degenerate():
    with pytest.raises(DegenerateInput):
        spearman_rho([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateInput):
        spearman_rho([1.0], [2.0])
    with pytest.raises(LengthMismatch):
        spearman_rho([1.0, 2.0], [1.0, 2.0, 3.0])


def test_predict_similarities(nounmatch):
    spec, model = nounmatch
    pairs = generate_pairs(spec, 10, seed=5)
    for (pid, y, gold), pair in zip(predict_similarities(model, pairs), pairs):
        assert pid == pair.id and y == gold
