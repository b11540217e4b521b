"""Second-order token interaction explanations for dot-product similarity.

For ``y = <phi(x), phi(x')>`` both BiLRP and Hessian x Product factor over
embedding dimensions::

    R = sum_m  r_m(x) (outer) r_m(x')

where ``r_m`` is the token-pooled first-order explanation of ``phi_m``:
LRP with the transformer rules for BiLRP, plain Gradient x Input for H x P
(which equals ``x_i x'_j d^2y/dx_i dx'_j`` because y is bilinear in the two
embeddings).  Per-sentence factors depend only on the sentence, so they are
cached and reused across pairs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .encoder import Model, TokenSequence, forward, similarity_score
from .errors import ValidationError, ZeroNormWithNormalization
from .relevance import GRADIENT, RuleConfig, explain_dimensions

METHODS = ("bilrp", "hxp", "embedding")


@dataclass(frozen=True)
class InteractionMatrix:
    values: np.ndarray  # (s_a, s_b)
    tokens_a: tuple[str, ...]
    tokens_b: tuple[str, ...]
    method: str
    similarity: float
    relevance_sum: float
    pair_id: str = ""
    model_fingerprint: str = ""
    pos_a: Optional[tuple[str, ...]] = None
    pos_b: Optional[tuple[str, ...]] = None
    word_ids_a: Optional[tuple[int, ...]] = None
    word_ids_b: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.values.shape != (len(self.tokens_a), len(self.tokens_b)):
            raise ValidationError(
                f"matrix shape {self.values.shape} does not match token counts "
                f"({len(self.tokens_a)}, {len(self.tokens_b)})"
            )
        self.values.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape

    def transpose(self) -> "InteractionMatrix":
        return InteractionMatrix(
            self.values.T.copy(), self.tokens_b, self.tokens_a, self.method, self.similarity,
            self.relevance_sum, self.pair_id, self.model_fingerprint, self.pos_b, self.pos_a,
            self.word_ids_b, self.word_ids_a,
        )

    def with_annotations(self, seq_a: TokenSequence, seq_b: TokenSequence, pair_id: str = ""):
        return replace(
            self, pair_id=pair_id or self.pair_id, pos_a=seq_a.pos, pos_b=seq_b.pos,
            word_ids_a=seq_a.word_ids, word_ids_b=seq_b.word_ids,
        )


@dataclass(frozen=True)
class SentenceFactors:
    """Token-pooled first-order explanations of every embedding dimension."""

    tokens: np.ndarray  # (d_model, s)
    embedding: np.ndarray  # (d_model,)
    fingerprint: str


class FactorCache:
    """Thread-safe memo of :class:`SentenceFactors` keyed by model, rules and ids."""

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            found = self._data.get(key)
            if found is not None:
                self.hits += 1
            return found

    def put(self, key, value):
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self):
        return len(self._data)


def sentence_factors(
    model: Model, seq: TokenSequence, rules: RuleConfig, cache: Optional[FactorCache] = None
) -> SentenceFactors:
    key = (model.fingerprint, rules, tuple(seq.ids))
    if cache is not None:
        found = cache.get(key)
        if found is not None:
            return found
        cache.misses += 1
    seq.validate(model.config)
    effective = model.without_biases() if rules.zero_biases else model
    _, trace = forward(effective, seq)
    rel = explain_dimensions(effective, seq, trace, rules)
    tokens = rel.tokens
    tokens.setflags(write=False)
    factors = SentenceFactors(tokens, trace.embedding, effective.fingerprint)
    if cache is not None:
        factors = cache.put(key, factors)
    return factors


def _outer_sum(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """``sum_m outer(fa[m], fb[m])``, reduced in a fixed order so that swapping
    the arguments yields the exact transpose."""
    return np.sum(fa[:, :, None] * fb[:, None, :], axis=0)


def _factored(method, model, seq_a, seq_b, rules, normalized, cache, pair_id):
    fa = sentence_factors(model, seq_a, rules, cache)
    fb = sentence_factors(model, seq_b, rules, cache)
    ra, rb = fa.tokens, fb.tokens
    if normalized:
        na, nb = np.linalg.norm(fa.embedding), np.linalg.norm(fb.embedding)
        if na == 0 or nb == 0:
            raise ZeroNormWithNormalization("cannot normalize a zero embedding")
        ra, rb = ra / na, rb / nb
    values = _outer_sum(ra, rb)
    y = similarity_score(fa.embedding, fb.embedding, normalized)
    return InteractionMatrix(
        values, seq_a.tokens, seq_b.tokens, method, y, float(values.sum()),
        pair_id, fa.fingerprint,
    ).with_annotations(seq_a, seq_b)


def bilrp_explain(
    model: Model,
    seq_a: TokenSequence,
    seq_b: TokenSequence,
    rules: RuleConfig = RuleConfig(),
    *,
    normalized: bool = False,
    cache: Optional[FactorCache] = None,
    pair_id: str = "",
) -> InteractionMatrix:
    """BiLRP interaction matrix between the tokens of two sentences.

    With ``normalized=True`` the cosine similarity is explained, treating both
    embedding norms as constants.
    """
    if not rules.rules_enabled:
        raise ValidationError("bilrp_explain needs rules_enabled=True; use hxp_explain")
    return _factored("bilrp", model, seq_a, seq_b, rules, normalized, cache, pair_id)


def hxp_explain(
    model: Model,
    seq_a: TokenSequence,
    seq_b: TokenSequence,
    *,
    normalized: bool = False,
    zero_biases: bool = False,
    cache: Optional[FactorCache] = None,
    pair_id: str = "",
) -> InteractionMatrix:
    """Hessian x Product interactions, via Gradient x Input factors."""
    rules = replace(GRADIENT, zero_biases=zero_biases)
    return _factored("hxp", model, seq_a, seq_b, rules, normalized, cache, pair_id)


def embedding_baseline(
    model: Model,
    seq_a: TokenSequence,
    seq_b: TokenSequence,
    *,
    contextual: bool = False,
    normalized: bool = False,
    pair_id: str = "",
) -> InteractionMatrix:
    """Dot products between the two sentences' token embeddings.

    Uses the input-layer embeddings (after the embedding layer norm) unless
    *contextual*, in which case the final token states are used.  The
    ``similarity`` field carries the model's actual score for reference.
    """
    ea, ta = forward(model, seq_a)
    eb, tb = forward(model, seq_b)
    xa = ta.final_states if contextual else ta.embeddings
    xb = tb.final_states if contextual else tb.embeddings
    values = np.sum(xa[:, None, :] * xb[None, :, :], axis=-1)
    y = similarity_score(ea, eb, normalized)
    return InteractionMatrix(
        values, seq_a.tokens, seq_b.tokens, "embedding", y, float(values.sum()),
        pair_id, model.fingerprint,
    ).with_annotations(seq_a, seq_b)


def explain_pair(
    method: str,
    model: Model,
    seq_a: TokenSequence,
    seq_b: TokenSequence,
    rules: RuleConfig = RuleConfig(),
    *,
    normalized: bool = False,
    cache: Optional[FactorCache] = None,
    pair_id: str = "",
) -> InteractionMatrix:
    if method == "bilrp":
        return bilrp_explain(model, seq_a, seq_b, replace(rules, rules_enabled=True),
                             normalized=normalized, cache=cache, pair_id=pair_id)
    if method == "hxp":
        return hxp_explain(model, seq_a, seq_b, normalized=normalized,
                           zero_biases=rules.zero_biases, cache=cache, pair_id=pair_id)
    if method == "embedding":
        effective = model.without_biases() if rules.zero_biases else model
        return embedding_baseline(effective, seq_a, seq_b, normalized=normalized, pair_id=pair_id)
    raise ValidationError(f"unknown method {method!r}; expected one of {METHODS}")
