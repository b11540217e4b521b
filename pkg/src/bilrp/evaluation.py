"""Quantitative evaluation: perturbation curves, conservation, ACS and Spearman."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .encoder import Model, TokenSequence, embed, similarity_score
from .errors import (
    DegenerateInput,
    EmptyInput,
    LengthMismatch,
    ShapeMismatch,
    StepOutOfRange,
    ValidationError,
)
from .interactions import FactorCache, InteractionMatrix, explain_pair
from .pairs import AnnotatedPair
from .relevance import RuleConfig

WILCOXON_TEST = "one-sided paired Wilcoxon signed-rank (H1: BiLRP AUPC lower)"


# ---------------------------------------------------------------------------
# perturbation


@dataclass(frozen=True)
class PerturbationCurve:
    fractions: np.ndarray
    distances: np.ndarray
    aupc: float
    order: tuple[int, ...] = ()


def perturbation_fractions(step: float) -> np.ndarray:
    """``[0, step, 2*step, ..., 1.0]``; the last point is clipped to exactly 1."""
    if not 0 < step <= 1:
        raise StepOutOfRange(f"step must lie in (0, 1], got {step!r}")
    n_steps = math.ceil(1.0 / step - 1e-9)
    fractions = np.minimum(np.arange(n_steps + 1) * step, 1.0)
    fractions[-1] = 1.0
    return fractions


def restored_count(fraction: float, length: int) -> int:
    """Tokens restored at *fraction*: ``ceil(fraction * length)``, robust to float noise."""
    return min(length, math.ceil(fraction * length - 1e-9))


def aupc(curve_or_fractions, distances: Optional[Sequence[float]] = None) -> float:
    """Trapezoidal area under distance over restored fraction."""
    if distances is None:
        fractions, distances = curve_or_fractions.fractions, curve_or_fractions.distances
    else:
        fractions = curve_or_fractions
    f = np.asarray(fractions, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if f.shape != d.shape:
        raise LengthMismatch("fractions and distances differ in length")
    return float(np.sum(0.5 * (d[1:] + d[:-1]) * np.diff(f)))


def ranking_from_matrix(matrix: InteractionMatrix, side: str) -> tuple[int, ...]:
    """Token positions of one side, by sum-pooled relevance descending, ties by position."""
    if side == "a":
        scores = matrix.values.sum(axis=1)
    elif side == "b":
        scores = matrix.values.sum(axis=0)
    else:
        raise ValidationError(f"side must be 'a' or 'b', got {side!r}")
    return tuple(sorted(range(len(scores)), key=lambda i: (-scores[i], i)))


def random_ranking(length: int, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(i) for i in rng.permutation(length))


def perturbation_curve_from_order(
    model: Model,
    seq: TokenSequence,
    order: Sequence[int],
    step: float = 0.04,
    fill_token: Optional[int] = None,
) -> PerturbationCurve:
    """Restore tokens of *seq* in *order* onto an all-filler sequence.

    At every fraction f the first ``ceil(f * s)`` ranked tokens carry their
    true ids; the distance is Euclidean in embedding space to the original.
    """
    fractions = perturbation_fractions(step)
    fill = model.config.mask_token_id if fill_token is None else int(fill_token)
    s = len(seq)
    if sorted(order) != list(range(s)):
        raise ValidationError("order must be a permutation of the token positions")
    reference = embed(model, seq)
    distances = np.empty(len(fractions))
    for k, f in enumerate(fractions):
        n = restored_count(f, s)
        ids = [fill] * s
        for pos in order[:n]:
            ids[pos] = seq.ids[pos]
        distances[k] = float(np.linalg.norm(embed(model, seq.with_ids(ids)) - reference))
    return PerturbationCurve(fractions, distances, aupc(fractions, distances), tuple(order))


def perturbation_curve(
    model: Model,
    pair: AnnotatedPair,
    matrix: InteractionMatrix,
    side: str,
    step: float = 0.04,
    fill_token: Optional[int] = None,
) -> PerturbationCurve:
    order = ranking_from_matrix(matrix, side)
    return perturbation_curve_from_order(model, pair.side(side), order, step, fill_token)


def mean_curve(curves: Sequence[PerturbationCurve]) -> PerturbationCurve:
    if not curves:
        raise EmptyInput("no curves to average")
    fractions = curves[0].fractions
    distances = np.mean([c.distances for c in curves], axis=0)
    return PerturbationCurve(fractions, distances, aupc(fractions, distances))


@dataclass(frozen=True)
class PerturbationRecord:
    pair_id: str
    method: str
    side: str
    aupc: float


@dataclass
class PerturbationReport:
    records: list[PerturbationRecord]
    curves: dict[str, PerturbationCurve]  # per-method dataset mean curve
    summary: dict[str, dict]
    test: str = WILCOXON_TEST

    def pair_aupc(self, method: str) -> dict[str, float]:
        """Per-pair AUPC, the two sides averaged."""
        out: dict[str, list[float]] = {}
        for r in self.records:
            if r.method == method:
                out.setdefault(r.pair_id, []).append(r.aupc)
        return {k: float(np.mean(v)) for k, v in out.items()}


def paired_wilcoxon_less(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """p-value of the one-sided test that x tends to be smaller than y."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if not np.any(diff != 0):
        return None
    return float(stats.wilcoxon(x, y, alternative="less").pvalue)


def evaluate_perturbation(
    model: Model,
    pairs: Sequence[AnnotatedPair],
    methods: Sequence[str] = ("bilrp", "hxp", "embedding", "random"),
    *,
    step: float = 0.04,
    fill_token: Optional[int] = None,
    rules: RuleConfig = RuleConfig(),
    seed: int = 0,
    cache: Optional[FactorCache] = None,
) -> PerturbationReport:
    """Perturbation analysis over a dataset, both sides of every pair.

    ``random`` ranks tokens by a seeded permutation drawn per pair and side.
    """
    rng = np.random.default_rng(seed)
    cache = cache if cache is not None else FactorCache()
    records = []
    curves: dict[str, list[PerturbationCurve]] = {m: [] for m in methods}
    for pair in pairs:
        random_orders = {side: random_ranking(len(pair.side(side)), rng) for side in ("a", "b")}
        for method in methods:
            matrix = None
            if method != "random":
                matrix = explain_pair(method, model, pair.a, pair.b, rules, cache=cache,
                                      pair_id=pair.id)
            for side in ("a", "b"):
                order = random_orders[side] if matrix is None else ranking_from_matrix(matrix, side)
                curve = perturbation_curve_from_order(model, pair.side(side), order, step, fill_token)
                curves[method].append(curve)
                records.append(PerturbationRecord(pair.id, method, side, curve.aupc))
    report = PerturbationReport(records, {}, {})
    report.curves = {m: mean_curve(c) for m, c in curves.items() if c}
    per_pair = {m: report.pair_aupc(m) for m in methods}
    ids = [p.id for p in pairs]
    for method in methods:
        values = np.array([per_pair[method][i] for i in ids]) if ids else np.empty(0)
        p_value = None
        if method != "bilrp" and "bilrp" in per_pair and len(ids):
            p_value = paired_wilcoxon_less([per_pair["bilrp"][i] for i in ids], values)
        report.summary[method] = {
            "mean_aupc": float(values.mean()) if values.size else float("nan"),
            "std": float(values.std()) if values.size else float("nan"),
            "n": int(values.size),
            "p_value_vs_bilrp": p_value,
        }
    return report


# ---------------------------------------------------------------------------
# conservation


@dataclass(frozen=True)
class ConservationRecord:
    pair_id: str
    method: str
    relevance_sum: float
    similarity: float
    zero_biases: bool

    @property
    def gap(self) -> float:
        return self.relevance_sum - self.similarity


def conservation_check(
    model: Model,
    pair: AnnotatedPair,
    rules: RuleConfig = RuleConfig(),
    method: str = "bilrp",
    cache: Optional[FactorCache] = None,
) -> ConservationRecord:
    matrix = explain_pair(method, model, pair.a, pair.b, rules, cache=cache, pair_id=pair.id)
    return ConservationRecord(pair.id, method, matrix.relevance_sum, matrix.similarity,
                              rules.zero_biases)


# ---------------------------------------------------------------------------
# ground-truth agreement and correlation


@dataclass(frozen=True)
class ACSReport:
    value: float
    per_item: np.ndarray
    degenerate: int


def _as_array(m):
    return np.asarray(m.values if isinstance(m, InteractionMatrix) else m, dtype=np.float64)


def average_cosine_similarity_report(explanations: Sequence, truths: Sequence) -> ACSReport:
    if len(explanations) != len(truths):
        raise LengthMismatch(f"{len(explanations)} explanations vs {len(truths)} truths")
    if not explanations:
        raise EmptyInput("no explanations")
    cosines = np.empty(len(explanations))
    degenerate = 0
    for k, (e, t) in enumerate(zip(explanations, truths)):
        e, t = _as_array(e), _as_array(t)
        if e.shape != t.shape:
            raise ShapeMismatch(f"item {k}", t.shape, e.shape)
        e, t = e.ravel(), t.ravel()
        # one square root of the product keeps identical vectors at exactly 1
        ee, tt = float(np.dot(e, e)), float(np.dot(t, t))
        if ee == 0 or tt == 0:
            degenerate += 1
            cosines[k] = 0.0
        else:
            cosines[k] = float(np.dot(e, t)) / math.sqrt(ee * tt)
    return ACSReport(float(cosines.mean()), cosines, degenerate)


def average_cosine_similarity(explanations: Sequence, truths: Sequence) -> float:
    """Mean cosine between flattened explanation and ground-truth matrices.

    An all-zero matrix on either side contributes 0; see
    :func:`average_cosine_similarity_report` for the degenerate count.
    """
    return average_cosine_similarity_report(explanations, truths).value


def spearman_rho(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("spearman_rho needs two 1-d sequences of equal length")
    if x.size < 2:
        raise DegenerateInput("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("constant input has undefined rank correlation")
    rx = stats.rankdata(x) - (x.size + 1) / 2
    ry = stats.rankdata(y) - (y.size + 1) / 2
    return float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def predict_similarities(model: Model, pairs: Iterable[AnnotatedPair], normalized: bool = False):
    """``[(pair_id, predicted y, gold score)]`` for every pair."""
    out = []
    for pair in pairs:
        y = similarity_score(embed(model, pair.a), embed(model, pair.b), normalized)
        out.append((pair.id, y, pair.score))
    return out
