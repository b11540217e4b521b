"""First-order relevance propagation through a recorded forward trace.

With ``rules_enabled`` the backward pass applies the transformer rules:
attention probabilities, layer-norm denominators and nonlinearity gains are
frozen at their trace values, and every remaining linear map uses LRP-0.  The
modified pass is then exactly Gradient x Input of the frozen (locally linear)
graph, which is what makes per-dimension relevance conserve to the output
activation when biases are zero.

With ``rules_enabled=False`` the pass is plain Gradient x Input of the
unmodified forward, the first-order factor of Hessian x Product.

Relevance stops at the token embeddings after the embedding layer norm,
the representation each token enters the first layer with.  (Stopping before
that norm would make every token's Gradient x Input sum vanish, since the
norm is scale invariant.)

All passes are batched: relevance tensors carry a leading axis over the
explained embedding dimensions, shape ``(B, s, d)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import (
    ActivationTrace,
    LayerNormTrace,
    Model,
    PoolTrace,
    TokenSequence,
    forward,
)
from .errors import DimensionOutOfRange, TraceMismatch

DEFAULT_LRP_EPS = 1e-9
DEFAULT_GELU_EPS = 1e-9


@dataclass(frozen=True)
class RuleConfig:
    rules_enabled: bool = True
    lrp_denominator_eps: float = DEFAULT_LRP_EPS
    gelu_gain_eps: float = DEFAULT_GELU_EPS
    zero_biases: bool = False

    def __post_init__(self):
        if self.lrp_denominator_eps < 0 or self.gelu_gain_eps < 0:
            raise ValueError("stabilizers must be nonnegative")

    @classmethod
    def from_env(cls, **overrides) -> "RuleConfig":
        """Defaults, with ``BILRP_LRP_EPS`` / ``BILRP_GELU_EPS`` overrides."""
        kwargs = {}
        if "BILRP_LRP_EPS" in os.environ:
            kwargs["lrp_denominator_eps"] = float(os.environ["BILRP_LRP_EPS"])
        if "BILRP_GELU_EPS" in os.environ:
            kwargs["gelu_gain_eps"] = float(os.environ["BILRP_GELU_EPS"])
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "rules_enabled": self.rules_enabled,
            "lrp_denominator_eps": self.lrp_denominator_eps,
            "gelu_gain_eps": self.gelu_gain_eps,
            "zero_biases": self.zero_biases,
        }


GRADIENT = RuleConfig(rules_enabled=False)


@dataclass
class Diagnostics:
    """Counters collected during one relevance pass."""

    zero_denominators: int = 0


@dataclass(frozen=True)
class RelevanceReport:
    zero_denominators: int
    conservation_gap: np.ndarray  # per explained dimension: sum of relevance - top value
    rules: RuleConfig


def _divide(R: np.ndarray, z: np.ndarray, eps: float, diag: Optional[Diagnostics]) -> np.ndarray:
    """R / z with |z| floored at eps (sign kept); zero where the denominator vanishes.

    Flooring rather than adding eps leaves every denominator above eps
    untouched, so near-cancelling sums do not amplify the stabilizer.
    """
    denom = np.where(z >= 0, 1.0, -1.0) * np.maximum(np.abs(z), eps)
    zero = denom == 0
    if zero.any():
        if diag is not None:
            diag.zero_denominators += int(zero.sum())
        denom = np.where(zero, 1.0, denom)
        return np.where(zero, 0.0, R / denom)
    return R / denom


# ---------------------------------------------------------------------------
# rule steps


def lrp_linear_step(a, W, b, R_out, eps: float = 0.0, diag: Optional[Diagnostics] = None):
    """LRP-0 through ``z = a @ W + b``.

    Relevance of output k is split over inputs j in proportion to
    ``a_j * W_jk``; the bias share is absorbed.  *R_out* may carry extra
    leading batch axes beyond those of *a*.
    """
    a = np.asarray(a, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    z = a @ W
    if b is not None:
        z = z + b
    ratio = _divide(R_out, z, eps, diag)
    return a * (ratio @ W.T)


def lrp_attention_step(probs, values, R_out, eps: float = 0.0, diag: Optional[Diagnostics] = None):
    """Relevance through the value path of ``y_j = sum_i p_ji v_i`` with p frozen.

    *probs* is ``(sq, sk)`` or ``(heads, sq, sk)`` with rows indexed by the
    output position; *values* is ``(sk, d)`` with heads concatenated along d.
    Nothing is assigned to the query/key paths.
    """
    probs = np.asarray(probs, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    heads, sq, sk = probs.shape
    d = values.shape[-1]
    vh = values.reshape(sk, heads, d // heads)
    y = np.einsum("hji,ihc->jhc", probs, vh)
    lead = R_out.shape[:-2]
    ratio = _divide(R_out.reshape(*lead, sq, heads, d // heads), y, eps, diag)
    back = np.einsum("hji,...jhc->...ihc", probs, ratio)
    return (vh * back).reshape(*lead, sk, d)


def lrp_layernorm_step(
    trace: LayerNormTrace, gamma, beta, R_out, ln_eps: float, eps: float = 0.0, diag=None
):
    """LRP-0 through layer norm with the denominator frozen.

    With ``sigma = sqrt(ln_eps + var)`` fixed, ``y = gamma * (h - mean(h)) / sigma
    + beta`` is linear in h; the shift beta is the bias of that map.
    """
    sigma = np.sqrt(trace.var + ln_eps)[:, None]
    y = trace.out
    ratio = _divide(R_out, y, eps, diag)
    w = ratio * (np.asarray(gamma) / sigma)
    return trace.h * (w - w.mean(axis=-1, keepdims=True))


def lrp_gelu_step(pre, R_out, gain_eps: float = DEFAULT_GELU_EPS):
    """Proportional rule for an elementwise nonlinearity.

    Freezing the gain ``g(h) / h`` makes the map linear and one-to-one, so
    LRP-0 passes each neuron's relevance through unchanged; the stabilized
    gain cancels in the quotient, including at ``h == 0``.
    """
    return np.array(R_out, dtype=np.float64, copy=True)


def lrp_residual_step(u, v, R_out, eps: float = 0.0, diag: Optional[Diagnostics] = None):
    """Split relevance of ``y = u + v`` elementwise in proportion to the branches."""
    ratio = _divide(R_out, np.asarray(u) + np.asarray(v), eps, diag)
    return u * ratio, v * ratio


def lrp_pool_step(model: Model, pooled: PoolTrace, R_out, eps: float = 0.0, diag=None):
    """Relevance from the sentence embedding ``(B, d)`` to token states ``(B, s, d)``."""
    states = pooled.states
    s, d = states.shape
    B = R_out.shape[0]
    if pooled.strategy == "cls":
        R = np.zeros((B, s, d))
        R[:, 0, :] = R_out
        return R
    R_out = R_out[:, None, :]
    if pooled.strategy == "mean":
        return lrp_attention_step(np.full((1, s), 1.0 / s), states, R_out, eps, diag)
    if pooled.strategy == "sum":
        return lrp_attention_step(np.ones((1, s)), states, R_out, eps, diag)
    # qkv: frozen coefficients over the value projections, keys detached
    R_values = lrp_attention_step(pooled.weights[None], pooled.values, R_out, eps, diag)
    return lrp_linear_step(states, model["pool.Wv"], model["pool.bv"], R_values, eps, diag)


# ---------------------------------------------------------------------------
# full passes


def _lrp_backward(model: Model, trace: ActivationTrace, R: np.ndarray, rules: RuleConfig, diag):
    cfg = model.config
    eps = rules.lrp_denominator_eps
    R = lrp_pool_step(model, trace.pool, R, eps, diag)
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}"
        lt = trace.layers[i]
        if lt.ffn_ln is not None:
            R = lrp_layernorm_step(
                lt.ffn_ln, model[f"{p}.ffn.ln.gamma"], model[f"{p}.ffn.ln.beta"], R, cfg.ln_eps,
                eps, diag,
            )
        R_skip, R_ffn = lrp_residual_step(lt.ffn_residual.u, lt.ffn_residual.v, R, eps, diag)
        ffn = lt.ffn
        R_act = lrp_linear_step(ffn.act, model[f"{p}.ffn.W2"], model[f"{p}.ffn.b2"], R_ffn, eps, diag)
        R_pre = lrp_gelu_step(ffn.pre, R_act, rules.gelu_gain_eps)
        R = R_skip + lrp_linear_step(ffn.h, model[f"{p}.ffn.W1"], model[f"{p}.ffn.b1"], R_pre, eps, diag)
        if lt.attn_ln is not None:
            R = lrp_layernorm_step(
                lt.attn_ln, model[f"{p}.attn.ln.gamma"], model[f"{p}.attn.ln.beta"], R,
                cfg.ln_eps, eps, diag,
            )
        R_skip, R_attn = lrp_residual_step(lt.attn_residual.u, lt.attn_residual.v, R, eps, diag)
        at = lt.attn
        R_ctx = lrp_linear_step(at.context, model[f"{p}.attn.Wo"], model[f"{p}.attn.bo"], R_attn, eps, diag)
        R_v = lrp_attention_step(at.probs, at.v, R_ctx, eps, diag)
        R = R_skip + lrp_linear_step(at.h, model[f"{p}.attn.Wv"], model[f"{p}.attn.bv"], R_v, eps, diag)
    return R


def _gelu_grad(x):
    from scipy.special import erf

    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _layernorm_grad(ln: LayerNormTrace, gamma, g, ln_eps):
    sigma = np.sqrt(ln.var + ln_eps)[:, None]
    xhat = (ln.h - ln.mean[:, None]) / sigma
    gg = g * gamma
    return (
        gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
    ) / sigma


def _pool_grad(model: Model, pooled: PoolTrace, g):
    s, d = pooled.states.shape
    B = g.shape[0]
    if pooled.strategy == "cls":
        G = np.zeros((B, s, d))
        G[:, 0, :] = g
        return G
    if pooled.strategy == "mean":
        return np.broadcast_to(g[:, None, :] / s, (B, s, d)).copy()
    if pooled.strategy == "sum":
        return np.broadcast_to(g[:, None, :], (B, s, d)).copy()
    alpha = pooled.weights
    g_values = alpha[None, :, None] * g[:, None, :]
    g_alpha = g @ pooled.values.T  # (B, s)
    g_scores = alpha * (g_alpha - (g_alpha * alpha).sum(axis=-1, keepdims=True))
    g_keys = g_scores[:, :, None] * (model["pool.query"] / math.sqrt(model.config.head_dim))
    return g_keys @ model["pool.Wk"].T + g_values @ model["pool.Wv"].T


def _attention_grad(model: Model, prefix: str, at, g):
    cfg = model.config
    s = at.h.shape[0]
    H, dh = cfg.n_heads, cfg.head_dim
    heads = lambda a: a.reshape(s, H, dh)
    g_ctx = (g @ model[f"{prefix}.Wo"].T).reshape(g.shape[0], s, H, dh)
    q, k, v = heads(at.q), heads(at.k), heads(at.v)
    p = at.probs
    g_v = np.einsum("hji,bjhc->bihc", p, g_ctx)
    g_p = np.einsum("bjhc,ihc->bhji", g_ctx, v)
    g_scores = p * (g_p - (g_p * p).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(dh)
    g_q = np.einsum("bhji,ihc->bjhc", g_scores, k) * scale
    g_k = np.einsum("bhji,jhc->bihc", g_scores, q) * scale
    flat = lambda a: a.reshape(a.shape[0], s, H * dh)
    return (
        flat(g_q) @ model[f"{prefix}.Wq"].T
        + flat(g_k) @ model[f"{prefix}.Wk"].T
        + flat(g_v) @ model[f"{prefix}.Wv"].T
    )


def _grad_backward(model: Model, trace: ActivationTrace, g: np.ndarray):
    """Exact gradient of the unmodified forward, batched over cotangents ``(B, d)``."""
    cfg = model.config
    G = _pool_grad(model, trace.pool, g)
    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}"
        lt = trace.layers[i]
        if lt.ffn_ln is not None:
            G = _layernorm_grad(lt.ffn_ln, model[f"{p}.ffn.ln.gamma"], G, cfg.ln_eps)
        g_act = G @ model[f"{p}.ffn.W2"].T
        if cfg.activation == "gelu":
            g_pre = g_act * _gelu_grad(lt.ffn.pre)
        else:
            g_pre = g_act * (lt.ffn.pre > 0)
        G = G + g_pre @ model[f"{p}.ffn.W1"].T
        if lt.attn_ln is not None:
            G = _layernorm_grad(lt.attn_ln, model[f"{p}.attn.ln.gamma"], G, cfg.ln_eps)
        G = G + _attention_grad(model, f"{p}.attn", lt.attn, G)
    return G


# ---------------------------------------------------------------------------
# public entry points


@dataclass(frozen=True)
class DimensionRelevance:
    """Input relevance for a set of explained embedding dimensions."""

    dims: np.ndarray  # (B,) dimension indices
    channels: np.ndarray  # (B, s, d) relevance per input channel
    tokens: np.ndarray  # (B, s) channel sums per token
    top: np.ndarray  # (B,) relevance placed at the output neuron
    report: RelevanceReport = field(repr=False)


def resolve(model: Model, seq: TokenSequence, trace: Optional[ActivationTrace], rules: RuleConfig):
    """Pick the effective model (bias-free if requested) and a matching trace."""
    if rules.zero_biases:
        model = model.without_biases()
    if trace is not None:
        if tuple(trace.ids) != tuple(seq.ids):
            raise TraceMismatch("trace was recorded for a different token sequence")
        if trace.fingerprint != model.fingerprint:
            if not rules.zero_biases:
                raise TraceMismatch("trace was recorded with a different model")
            trace = None
    if trace is None:
        _, trace = forward(model, seq)
    return model, trace


def explain_dimensions(
    model: Model,
    seq: TokenSequence,
    trace: Optional[ActivationTrace] = None,
    rules: RuleConfig = RuleConfig(),
    dims: Optional[Sequence[int]] = None,
    scale: float = 1.0,
) -> DimensionRelevance:
    """Relevance of every input token for each explained dimension in *dims*.

    In LRP mode the top relevance for dimension m is ``scale * phi_m(x)``; in
    gradient mode the result is ``x * d(scale * phi_m)/dx``.
    """
    model, trace = resolve(model, seq, trace, rules)
    d = model.config.d_model
    dims = np.arange(d) if dims is None else np.asarray(dims, dtype=np.int64)
    if dims.size and (dims.min() < 0 or dims.max() >= d):
        raise DimensionOutOfRange(f"dimension index outside [0, {d})")
    phi = trace.embedding
    B = len(dims)
    onehot = np.zeros((B, d))
    onehot[np.arange(B), dims] = 1.0
    diag = Diagnostics()
    top = scale * phi[dims]
    if rules.rules_enabled:
        channels = _lrp_backward(model, trace, onehot * top[:, None], rules, diag)
    else:
        channels = trace.embeddings * _grad_backward(model, trace, scale * onehot)
    tokens = channels.sum(axis=-1)
    gap = tokens.sum(axis=-1) - top
    report = RelevanceReport(diag.zero_denominators, gap, rules)
    return DimensionRelevance(dims, channels, tokens, top, report)


def explain_dimension(
    model: Model,
    seq: TokenSequence,
    trace: Optional[ActivationTrace],
    m: int,
    rules: RuleConfig = RuleConfig(),
) -> np.ndarray:
    """Per-token relevance vector for embedding dimension *m*."""
    d = model.config.d_model
    if not 0 <= m < d:
        raise DimensionOutOfRange(f"dimension {m} outside [0, {d})")
    return explain_dimensions(model, seq, trace, rules, dims=[m]).tokens[0]
