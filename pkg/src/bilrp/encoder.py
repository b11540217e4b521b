"""A small post-layer-norm BERT-style encoder with a full activation trace.

Weights are stored as float32 and promoted to float64 once at model
construction, so every matmul and reduction accumulates in 64 bits.  The
forward pass records every quantity that the relevance module freezes:
attention probabilities, layer-norm statistics, nonlinearity inputs, both
branches of every residual junction and the pooling coefficients.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import erf

from . import container
from .config import ModelConfig, load_config
from .errors import (
    LengthMismatch,
    MissingPoolingWeights,
    MissingTensor,
    NonFiniteActivation,
    NonFiniteValue,
    SequenceTooLong,
    ShapeMismatch,
    UnknownToken,
    ValidationError,
    ZeroNormWithNormalization,
)

SPECIAL_TAGS = ("[CLS]", "[SEP]", "[MASK]")

POOL_TENSORS = ("pool.query", "pool.Wk", "pool.bk", "pool.Wv", "pool.bv")
_BIAS_SUFFIXES = (".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".beta")


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every tensor the encoder body needs, in canonical order.

    Pooling tensors are listed separately by :func:`pooling_shapes`.
    """
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, d),
        "embed.position": (config.max_position, d),
    }
    if config.layer_norm:
        shapes["embed.ln.gamma"] = (d,)
        shapes["embed.ln.beta"] = (d,)
    for i in range(config.n_layers):
        p = f"layer{i}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.W{proj}"] = (d, d)
            shapes[f"{p}.attn.b{proj}"] = (d,)
        if config.layer_norm:
            shapes[f"{p}.attn.ln.gamma"] = (d,)
            shapes[f"{p}.attn.ln.beta"] = (d,)
        shapes[f"{p}.ffn.W1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.W2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        if config.layer_norm:
            shapes[f"{p}.ffn.ln.gamma"] = (d,)
            shapes[f"{p}.ffn.ln.beta"] = (d,)
    return shapes


def pooling_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    return {
        "pool.query": (d,),
        "pool.Wk": (d, d),
        "pool.bk": (d,),
        "pool.Wv": (d, d),
        "pool.bv": (d,),
    }


def is_bias(name: str) -> bool:
    return name.endswith(_BIAS_SUFFIXES)


class Model:
    """An immutable (config, weights) bundle ready for :func:`forward`.

    Construction validates every tensor against the config.  The float64
    weights are read-only, so one model can be shared across threads.
    """

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        self.config = config
        shapes = expected_shapes(config)
        extra = pooling_shapes(config)
        if config.pooling == "qkv" or any(name in weights for name in extra):
            shapes.update(extra)
        for name, shape in shapes.items():
            if name not in weights:
                if name in extra:
                    continue
                raise MissingTensor(name)
            found = np.shape(weights[name])
            if tuple(found) != shape:
                raise ShapeMismatch(name, shape, found)
        if config.pooling == "qkv":
            missing = [name for name in extra if name not in weights]
            if missing:
                raise MissingPoolingWeights(f"qkv pooling needs tensors {missing}")

        converted: dict[str, np.ndarray] = {}
        for name in shapes:
            if name not in weights:
                continue
            array = np.array(np.asarray(weights[name], dtype=np.float32), dtype=np.float64)
            if not np.all(np.isfinite(array)):
                raise NonFiniteValue(f"tensor {name!r} contains non-finite values")
            array.setflags(write=False)
            converted[name] = array
        self._w = converted

    def __getitem__(self, name: str) -> np.ndarray:
        return self._w[name]

    def __contains__(self, name: str) -> bool:
        return name in self._w

    @property
    def names(self) -> list[str]:
        return list(self._w)

    @property
    def has_pooling_weights(self) -> bool:
        return all(name in self._w for name in POOL_TENSORS)

    def float32_tensors(self) -> dict[str, np.ndarray]:
        return {name: array.astype(np.float32) for name, array in self._w.items()}

    @cached_property
    def fingerprint(self) -> str:
        """Content hash of the config and the float32 weight bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(container.encode(self.float32_tensors()))
        return h.hexdigest()[:16]

    @cached_property
    def bias_free(self) -> bool:
        return not any(is_bias(n) and np.any(a) for n, a in self._w.items())

    def without_biases(self) -> "Model":
        """Copy of this model with every bias and layer-norm shift set to zero."""
        return self._bias_free_copy

    @cached_property
    def _bias_free_copy(self) -> "Model":
        if self.bias_free:
            return self
        weights = {
            name: (np.zeros_like(a) if is_bias(name) else a) for name, a in self._w.items()
        }
        return Model(self.config, weights)

    def with_pooling(self, pooling: str) -> "Model":
        return Model(self.config.replace(pooling=pooling), self._w)

    def __repr__(self):
        c = self.config
        return (
            f"Model(layers={c.n_layers}, d_model={c.d_model}, heads={c.n_heads}, "
            f"pooling={c.pooling!r}, fingerprint={self.fingerprint})"
        )


def load_model(
    config_source: str | os.PathLike | ModelConfig, weights_source: str | os.PathLike
) -> Model:
    config = (
        config_source if isinstance(config_source, ModelConfig) else load_config(config_source)
    )
    return Model(config, container.read_container(weights_source))


def save_model(model: Model, config_path, weights_path) -> None:
    from .config import save_config

    save_config(model.config, config_path)
    container.write_container(model.float32_tensors(), weights_path)


# ---------------------------------------------------------------------------
# token sequences


@dataclass(frozen=True)
class TokenSequence:
    """A pre-tokenized sentence.

    ``word_ids`` aligns subtokens to words (-1 for special tokens); ``pos``
    holds one tag per subtoken when available.
    """

    ids: tuple[int, ...]
    tokens: tuple[str, ...]
    word_ids: tuple[int, ...] = ()
    pos: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.word_ids:
            object.__setattr__(self, "word_ids", tuple(range(len(self.ids))))
        else:
            object.__setattr__(self, "word_ids", tuple(int(w) for w in self.word_ids))
        if self.pos is not None:
            object.__setattr__(self, "pos", tuple(self.pos))
        n = len(self.ids)
        if len(self.tokens) != n or len(self.word_ids) != n:
            raise LengthMismatch(
                f"ids/tokens/word_ids lengths differ: {n}, {len(self.tokens)}, {len(self.word_ids)}"
            )
        if self.pos is not None and len(self.pos) != n:
            raise LengthMismatch(f"pos has length {len(self.pos)}, expected {n}")

    def __len__(self):
        return len(self.ids)

    def validate(self, config: ModelConfig) -> None:
        if len(self.ids) == 0:
            raise ValidationError("empty token sequence")
        if len(self.ids) > config.max_position:
            raise SequenceTooLong(
                f"sequence of length {len(self.ids)} exceeds max_position={config.max_position}"
            )
        bad = [i for i in self.ids if not 0 <= i < config.vocab_size]
        if bad:
            raise UnknownToken(f"token ids {bad} outside vocabulary of size {config.vocab_size}")

    def with_ids(self, ids: Sequence[int]) -> "TokenSequence":
        return TokenSequence(tuple(ids), self.tokens, self.word_ids, self.pos)


class Vocab:
    """Token list where the line number is the token id."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {}
        for i, tok in enumerate(self.tokens):
            self.index.setdefault(tok, i)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        if token in self.index:
            return self.index[token]
        if "[UNK]" in self.index:
            return self.index["[UNK]"]
        raise UnknownToken(f"token {token!r} not in vocabulary")

    def encode(self, text: str, special: bool = False) -> TokenSequence:
        """Whitespace tokenizer with vocabulary lookup, for synthetic data."""
        words = text.split()
        tokens = list(words)
        word_ids = list(range(len(words)))
        if special:
            tokens = ["[CLS]", *tokens, "[SEP]"]
            word_ids = [-1, *word_ids, -1]
        return TokenSequence(tuple(self.lookup(t) for t in tokens), tuple(tokens), tuple(word_ids))


# ---------------------------------------------------------------------------
# activation trace


def _frozen(*arrays):
    for a in arrays:
        if a is not None:
            a.setflags(write=False)


@dataclass(frozen=True)
class LayerNormTrace:
    h: np.ndarray  # (s, d) input
    mean: np.ndarray  # (s,)
    var: np.ndarray  # (s,)
    out: np.ndarray  # (s, d)

    def __post_init__(self):
        _frozen(self.h, self.mean, self.var, self.out)


@dataclass(frozen=True)
class AttentionTrace:
    h: np.ndarray  # (s, d) input to the block
    q: np.ndarray  # (s, d) after bias
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray  # (heads, s, s); probs[h, j, i]: query j attends to key i
    context: np.ndarray  # (s, d) heads concatenated
    out: np.ndarray  # (s, d) after output projection

    def __post_init__(self):
        _frozen(self.h, self.q, self.k, self.v, self.probs, self.context, self.out)


@dataclass(frozen=True)
class FeedForwardTrace:
    h: np.ndarray  # (s, d)
    pre: np.ndarray  # (s, d_ff) nonlinearity input
    act: np.ndarray  # (s, d_ff) nonlinearity output
    out: np.ndarray  # (s, d)

    def __post_init__(self):
        _frozen(self.h, self.pre, self.act, self.out)


@dataclass(frozen=True)
class ResidualTrace:
    u: np.ndarray  # skip branch
    v: np.ndarray  # block branch

    def __post_init__(self):
        _frozen(self.u, self.v)


@dataclass(frozen=True)
class LayerTrace:
    attn: AttentionTrace
    attn_residual: ResidualTrace
    attn_ln: Optional[LayerNormTrace]
    ffn: FeedForwardTrace
    ffn_residual: ResidualTrace
    ffn_ln: Optional[LayerNormTrace]
    out: np.ndarray


@dataclass(frozen=True)
class PoolTrace:
    strategy: str
    states: np.ndarray  # (s, d)
    output: np.ndarray  # (d,)
    weights: Optional[np.ndarray] = None  # (s,) qkv coefficients
    keys: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        _frozen(self.states, self.output, self.weights, self.keys, self.values)


@dataclass(frozen=True)
class ActivationTrace:
    fingerprint: str
    ids: tuple[int, ...]
    inputs: np.ndarray  # (s, d) token + position embedding
    embed_ln: Optional[LayerNormTrace]
    embeddings: np.ndarray  # (s, d) after the embedding layer norm; relevance stops here
    layers: tuple[LayerTrace, ...]
    pool: PoolTrace
    final_states: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        _frozen(self.inputs, self.embeddings, self.final_states)

    @property
    def embedding(self) -> np.ndarray:
        return self.pool.output

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


# ---------------------------------------------------------------------------
# forward


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return gelu(x)
    return np.maximum(x, 0.0)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _layer_norm(model: Model, prefix: str, h: np.ndarray) -> LayerNormTrace:
    mean = h.mean(axis=-1)
    centered = h - mean[:, None]
    var = (centered**2).mean(axis=-1)
    out = model[f"{prefix}.gamma"] * centered / np.sqrt(var + model.config.ln_eps)[:, None]
    out = out + model[f"{prefix}.beta"]
    return LayerNormTrace(h, mean, var, out)


def _attention(model: Model, prefix: str, h: np.ndarray) -> AttentionTrace:
    cfg = model.config
    s = h.shape[0]
    q = h @ model[f"{prefix}.Wq"] + model[f"{prefix}.bq"]
    k = h @ model[f"{prefix}.Wk"] + model[f"{prefix}.bk"]
    v = h @ model[f"{prefix}.Wv"] + model[f"{prefix}.bv"]
    split = lambda a: a.reshape(s, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)
    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(cfg.head_dim)
    probs = softmax(scores)
    context = (probs @ vh).transpose(1, 0, 2).reshape(s, cfg.d_model)
    out = context @ model[f"{prefix}.Wo"] + model[f"{prefix}.bo"]
    return AttentionTrace(h, q, k, v, probs, context, out)


def _feed_forward(model: Model, prefix: str, h: np.ndarray) -> FeedForwardTrace:
    pre = h @ model[f"{prefix}.W1"] + model[f"{prefix}.b1"]
    act = activate(model.config.activation, pre)
    out = act @ model[f"{prefix}.W2"] + model[f"{prefix}.b2"]
    return FeedForwardTrace(h, pre, act, out)


def pool(model: Model, states: np.ndarray, strategy: Optional[str] = None) -> PoolTrace:
    """Summarize token states into one sentence embedding.

    ``cls`` takes position 0, ``mean`` averages all positions, ``sum`` adds
    them, and ``qkv`` weights value projections by a softmax over scaled
    scores between the learned query and the key projections.
    """
    strategy = strategy or model.config.pooling
    if strategy == "cls":
        return PoolTrace(strategy, states, states[0].copy())
    if strategy == "mean":
        return PoolTrace(strategy, states, states.mean(axis=0))
    if strategy == "sum":
        return PoolTrace(strategy, states, states.sum(axis=0))
    if strategy == "qkv":
        if not model.has_pooling_weights:
            raise MissingPoolingWeights("qkv pooling needs pool.query, pool.Wk/bk, pool.Wv/bv")
        keys = states @ model["pool.Wk"] + model["pool.bk"]
        values = states @ model["pool.Wv"] + model["pool.bv"]
        scores = keys @ model["pool.query"] / math.sqrt(model.config.head_dim)
        weights = softmax(scores)
        output = weights @ values
        return PoolTrace(strategy, states, output, weights, keys, values)
    raise ValidationError(f"unknown pooling strategy {strategy!r}")


def encode_inputs(model: Model, inputs: np.ndarray, ids: Sequence[int] = ()) -> ActivationTrace:
    """Run the encoder from input embeddings (token + position) of shape (s, d)."""
    cfg = model.config
    x = np.array(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise LengthMismatch(f"inputs must have shape (s, {cfg.d_model}), got {x.shape}")
    if x.shape[0] > cfg.max_position:
        raise SequenceTooLong(f"sequence of length {x.shape[0]} exceeds max_position")

    embed_ln = _layer_norm(model, "embed.ln", x) if cfg.layer_norm else None
    h = embed_ln.out if embed_ln is not None else x.copy()
    embeddings = h
    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        attn = _attention(model, f"{p}.attn", h)
        attn_res = ResidualTrace(h, attn.out)
        summed = h + attn.out
        attn_ln = _layer_norm(model, f"{p}.attn.ln", summed) if cfg.layer_norm else None
        h1 = attn_ln.out if attn_ln is not None else summed
        ffn = _feed_forward(model, f"{p}.ffn", h1)
        ffn_res = ResidualTrace(h1, ffn.out)
        summed = h1 + ffn.out
        ffn_ln = _layer_norm(model, f"{p}.ffn.ln", summed) if cfg.layer_norm else None
        h = ffn_ln.out if ffn_ln is not None else summed
        layers.append(LayerTrace(attn, attn_res, attn_ln, ffn, ffn_res, ffn_ln, h))

    pooled = pool(model, h)
    if not np.all(np.isfinite(pooled.output)) or not np.all(np.isfinite(h)):
        raise NonFiniteActivation("forward pass produced non-finite activations")
    return ActivationTrace(
        fingerprint=model.fingerprint,
        ids=tuple(int(i) for i in ids),
        inputs=x,
        embed_ln=embed_ln,
        embeddings=embeddings,
        layers=tuple(layers),
        pool=pooled,
        final_states=h,
    )


def input_embeddings(model: Model, ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return model["embed.token"][ids] + model["embed.position"][: len(ids)]


def forward(model: Model, seq: TokenSequence) -> tuple[np.ndarray, ActivationTrace]:
    """Encode *seq*; returns the pooled sentence embedding and the trace."""
    seq.validate(model.config)
    trace = encode_inputs(model, input_embeddings(model, seq.ids), seq.ids)
    return trace.embedding, trace


def embed(model: Model, seq: TokenSequence) -> np.ndarray:
    return forward(model, seq)[0]


def similarity_score(e: np.ndarray, e2: np.ndarray, normalized: bool = False) -> float:
    """Dot product of two sentence embeddings, or their cosine if *normalized*."""
    e = np.asarray(e, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e.shape != e2.shape:
        raise LengthMismatch(f"embedding shapes differ: {e.shape} vs {e2.shape}")
    if normalized:
        na, nb = np.linalg.norm(e), np.linalg.norm(e2)
        if na == 0 or nb == 0:
            raise ZeroNormWithNormalization("cannot normalize a zero embedding")
        return float(np.dot(e / na, e2 / nb))
    return float(np.dot(e, e2))
