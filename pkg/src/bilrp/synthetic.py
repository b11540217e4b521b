"""Models with known answers: random encoders and analytic noun-matching models.

The noun-matching models compute ``y(x, x') = sum over noun types of
count_a * count_b`` exactly, so the true token interactions are known: a
pair of positions interacts with weight 1 iff both hold the same noun.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .encoder import Model, TokenSequence, Vocab, expected_shapes, is_bias, pooling_shapes
from .errors import EmptyNounSet, ValidationError
from .pairs import AnnotatedPair

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

NOUNS = (
    "dog", "cat", "park", "man", "woman", "car", "ball", "tree", "house", "river",
    "child", "bird", "horse", "street", "table", "book", "guitar", "beach", "phone",
    "train", "kitchen", "shirt", "boat", "city",
)
OTHERS = (
    "the", "a", "is", "are", "on", "in", "of", "with", "and", "big", "small", "red",
    "quickly", "saw", "left", "plays", "runs", "sits", "holds", "near", "two", "by",
)


# ---------------------------------------------------------------------------
# random encoders


def random_model(
    config: ModelConfig,
    seed: int = 0,
    *,
    zero_biases: bool = False,
    linear: bool = False,
    bias_scale: float = 0.1,
) -> Model:
    """Encoder with seeded Gaussian weights, stored at float32 precision.

    ``linear=True`` zeroes the query/key projections (uniform attention) and
    the pooling query, and requires ``layer_norm=False`` with relu, giving
    a piecewise-linear model whose gradient equals its frozen-gain graph.
    """
    if linear and (config.layer_norm or config.activation != "relu"):
        raise ValidationError("linear models need layer_norm=False and activation='relu'")
    rng = np.random.default_rng(seed)
    shapes = dict(expected_shapes(config))
    if config.pooling == "qkv":
        shapes.update(pooling_shapes(config))
    weights = {}
    for name, shape in shapes.items():
        if name == "embed.token":
            w = rng.normal(0.0, 1.0, shape)
        elif name == "embed.position":
            w = rng.normal(0.0, 0.5, shape)
        elif name.endswith(".gamma"):
            w = 1.0 + 0.1 * rng.normal(size=shape)
        elif is_bias(name):
            w = bias_scale * rng.normal(size=shape)
        elif name == "pool.query":
            w = rng.normal(0.0, 1.0, shape)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        if zero_biases and is_bias(name):
            w = np.zeros(shape)
        if linear and (name.endswith((".Wq", ".Wk", ".bq", ".bk")) or name == "pool.query"):
            w = np.zeros(shape)
        weights[name] = w.astype(np.float32)
    return Model(config, weights)


def random_config(rng: np.random.Generator, **overrides) -> ModelConfig:
    """Small random architecture (layers <= 3, heads <= 4, d_model <= 32)."""
    n_heads = int(rng.choice([1, 2, 4]))
    d_model = n_heads * int(rng.integers(2, 32 // n_heads + 1))
    kwargs = dict(
        d_model=d_model,
        n_layers=int(rng.integers(1, 4)),
        n_heads=n_heads,
        d_ff=int(rng.integers(4, 33)),
        vocab_size=40,
        max_position=16,
        mask_token_id=3,
        ln_eps=1e-12,
        activation="gelu",
        pooling=str(rng.choice(["cls", "mean", "qkv"])),
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def random_sequence(rng: np.random.Generator, config: ModelConfig, length: int) -> TokenSequence:
    ids = tuple(int(i) for i in rng.integers(0, config.vocab_size, length))
    return TokenSequence(ids, tuple(f"t{i}" for i in ids))


# ---------------------------------------------------------------------------
# noun matching


@dataclass(frozen=True)
class NounMatchSpec:
    vocab: tuple[str, ...]
    noun_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "noun_ids", frozenset(int(i) for i in self.noun_ids))
        if not self.noun_ids:
            raise EmptyNounSet("noun set is empty")
        bad = [i for i in self.noun_ids if not 0 <= i < len(self.vocab)]
        if bad:
            raise ValidationError(f"noun ids {bad} outside vocabulary")

    @property
    def nouns(self) -> list[int]:
        return sorted(self.noun_ids)

    @property
    def mask_token_id(self) -> int:
        return self.vocab.index("[MASK]") if "[MASK]" in self.vocab else 0

    def to_vocab(self) -> Vocab:
        return Vocab(self.vocab)

    def pos_tags(self, seq: TokenSequence) -> tuple[str, ...]:
        """NOUN for noun ids, the token itself for special tokens, X otherwise."""
        tags = []
        for i, tok in zip(seq.ids, seq.tokens):
            if i in self.noun_ids:
                tags.append("NOUN")
            elif tok in ("[CLS]", "[SEP]", "[MASK]"):
                tags.append(tok)
            else:
                tags.append("X")
        return tuple(tags)


def default_spec(nouns: Sequence[str] = NOUNS, others: Sequence[str] = OTHERS) -> NounMatchSpec:
    vocab = (*SPECIALS, *others, *nouns)
    start = len(SPECIALS) + len(others)
    return NounMatchSpec(vocab, frozenset(range(start, len(vocab))))


VARIANTS = ("minimal", "filter", "attention")


def build_nounmatch_model(spec: NounMatchSpec, variant: str = "filter", max_position: int = 64) -> Model:
    """Construct an encoder whose similarity counts matching noun tokens.

    ``minimal``
        No layers: nouns embed as distinct one-hot vectors, everything else
        as zero, sum pooling.
    ``filter``
        Every token embeds as its own one-hot vector; one layer whose relu
        feed-forward block removes the non-noun directions.  Input
        embeddings are thus not noun-selective, while the model is.
    ``attention``
        As ``filter`` but the attention block passes a uniform mixture of
        the values through (query/key weights zero, identity value and
        output maps) and embeddings are scaled by 1/2 so that the residual
        plus attention doubling still yields exact counts.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    V = len(spec.vocab)
    nouns = spec.nouns
    if variant == "minimal":
        d = len(nouns)
        config = ModelConfig(
            d_model=d, n_layers=0, n_heads=1, d_ff=1, vocab_size=V, max_position=max_position,
            mask_token_id=spec.mask_token_id, activation="relu", pooling="sum", layer_norm=False,
        )
        token = np.zeros((V, d))
        for col, i in enumerate(nouns):
            token[i, col] = 1.0
        weights = {"embed.token": token, "embed.position": np.zeros((max_position, d))}
        return Model(config, weights)

    d = V
    config = ModelConfig(
        d_model=d, n_layers=1, n_heads=1, d_ff=d, vocab_size=V, max_position=max_position,
        mask_token_id=spec.mask_token_id, activation="relu", pooling="sum", layer_norm=False,
    )
    weights = {name: np.zeros(shape) for name, shape in expected_shapes(config).items()}
    scale = 0.5 if variant == "attention" else 1.0
    weights["embed.token"] = scale * np.eye(V)
    if variant == "attention":
        weights["layer0.attn.Wv"] = np.eye(d)
        weights["layer0.attn.Wo"] = np.eye(d)
    other = np.ones(d)
    other[nouns] = 0.0
    weights["layer0.ffn.W1"] = np.diag(other)
    weights["layer0.ffn.W2"] = -np.diag(other)
    return Model(config, weights)


def ground_truth_matrix(seq_a: TokenSequence, seq_b: TokenSequence, spec: NounMatchSpec) -> np.ndarray:
    """1 where both positions hold the same noun id, else 0."""
    a = np.asarray(seq_a.ids)
    b = np.asarray(seq_b.ids)
    is_noun = np.isin(a, list(spec.noun_ids))
    return ((a[:, None] == b[None, :]) & is_noun[:, None]).astype(np.float64)


def noun_count_similarity(seq_a: TokenSequence, seq_b: TokenSequence, spec: NounMatchSpec) -> int:
    """Bag-of-nouns count product, the exact output of the noun-matching models."""
    total = 0
    for noun in spec.noun_ids:
        total += seq_a.ids.count(noun) * seq_b.ids.count(noun)
    return total


def generate_pairs(
    spec: NounMatchSpec,
    n: int,
    seed: int = 0,
    *,
    min_len: int = 3,
    max_len: int = 8,
    special: bool = True,
    repeat_prob: float = 0.15,
) -> list[AnnotatedPair]:
    """Random sentence pairs that share at least one noun.

    Sentences mix nouns and other tokens; function words recur across the
    pair often, which is what makes token-identity baselines non-selective.
    Scores are the exact noun-match counts.
    """
    rng = np.random.default_rng(seed)
    vocab = spec.to_vocab()
    noun_words = [spec.vocab[i] for i in spec.nouns]
    other_words = [w for i, w in enumerate(spec.vocab) if i not in spec.noun_ids and w not in SPECIALS]
    pairs = []
    for k in range(n):
        shared = list(rng.choice(noun_words, size=int(rng.integers(1, 3)), replace=False))
        sides = []
        for _ in range(2):
            length = int(rng.integers(min_len, max_len + 1))
            words = list(shared)
            if rng.random() < repeat_prob:
                words.append(str(rng.choice(shared)))
            while len(words) < length:
                if rng.random() < 0.3:
                    words.append(str(rng.choice(noun_words)))
                else:
                    words.append(str(rng.choice(other_words)))
            order = rng.permutation(len(words))
            words = [str(words[i]) for i in order]
            text = " ".join(words)
            seq = vocab.encode(text, special=special)
            seq = TokenSequence(seq.ids, seq.tokens, seq.word_ids, spec.pos_tags(seq))
            sides.append((seq, text))
        (a, ta), (b, tb) = sides
        score = float(noun_count_similarity(a, b, spec))
        pairs.append(AnnotatedPair(f"pair{k:04d}", a, b, score, ta, tb))
    return pairs


def shares_non_noun(pair: AnnotatedPair, spec: NounMatchSpec) -> bool:
    common = set(pair.a.ids) & set(pair.b.ids)
    return any(i not in spec.noun_ids for i in common)
