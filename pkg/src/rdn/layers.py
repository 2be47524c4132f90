"""Parameterized building blocks: LSTM cell, linear map, embedding, attention.

All blocks accept an optional leading batch axis on their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

INIT_RANGE = 0.08
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator, shape, name: str, scale: float = INIT_RANGE) -> Tensor:
    return ad.parameter(rng.uniform(-scale, scale, size=shape), name=name)


@dataclass
class LSTMCellParams:
    """Fused gate weights, rows ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4H, input_dim]
    w_hh: Tensor  # [4H, H]
    bias: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, prefix: str = "lstm",
             scale: float = INIT_RANGE) -> "LSTMCellParams":
        w_ih = _uniform(rng, (4 * hidden, input_dim), f"{prefix}.w_ih", scale)
        w_hh = _uniform(rng, (4 * hidden, hidden), f"{prefix}.w_hh", scale)
        bias = _uniform(rng, (4 * hidden,), f"{prefix}.bias", scale)
        bias.data[hidden:2 * hidden] = FORGET_BIAS
        return cls(w_ih, w_hh, bias)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_ih", self.w_ih
        yield f"{prefix}.w_hh", self.w_hh
        yield f"{prefix}.bias", self.bias


@dataclass
class AdditiveAttentionParams:
    w_key: Tensor    # [D_a, D_key]
    w_query: Tensor  # [D_a, D_query]
    w_score: Tensor  # [1, D_a]

    @classmethod
    def init(cls, rng, key_dim: int, query_dim: int, att_dim: int, prefix: str = "att",
             scale: float = INIT_RANGE) -> "AdditiveAttentionParams":
        return cls(
            _uniform(rng, (att_dim, key_dim), f"{prefix}.w_key", scale),
            _uniform(rng, (att_dim, query_dim), f"{prefix}.w_query", scale),
            _uniform(rng, (1, att_dim), f"{prefix}.w_score", scale),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_key", self.w_key
        yield f"{prefix}.w_query", self.w_query
        yield f"{prefix}.w_score", self.w_score


@dataclass
class EmbeddingTable:
    matrix: Tensor  # [E, V]; column v embeds token v

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def init(cls, rng, embed_dim: int, vocab_size: int, prefix: str = "embedding",
             scale: float = INIT_RANGE) -> "EmbeddingTable":
        return cls(_uniform(rng, (embed_dim, vocab_size), f"{prefix}.matrix", scale))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.matrix", self.matrix


@dataclass
class LinearParams:
    weight: Tensor             # [out, in]
    bias: Tensor | None = None  # [out]

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, bias: bool = True, prefix: str = "linear",
             scale: float = INIT_RANGE) -> "LinearParams":
        w = _uniform(rng, (out_dim, in_dim), f"{prefix}.weight", scale)
        b = _uniform(rng, (out_dim,), f"{prefix}.bias", scale) if bias else None
        return cls(w, b)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def lstm_step(p: LSTMCellParams, x, h, c) -> tuple[Tensor, Tensor]:
    """One LSTM transition; returns ``(h', c')``."""
    x, h, c = ad.as_tensor(x), ad.as_tensor(h), ad.as_tensor(c)
    H = p.hidden
    if x.shape[-1] != p.input_dim or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs "
            f"input_dim={p.input_dim}, hidden={H}"
        )
    z = x @ p.w_ih.T + h @ p.w_hh.T + p.bias
    i = ad.sigmoid(z[..., 0:H])
    f = ad.sigmoid(z[..., H:2 * H])
    g = ad.tanh(z[..., 2 * H:3 * H])
    o = ad.sigmoid(z[..., 3 * H:4 * H])
    c_next = f * c + i * g
    h_next = o * ad.tanh(c_next)
    return h_next, c_next


def linear(p: LinearParams, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {p.weight.shape}")
    y = x @ p.weight.T
    return y + p.bias if p.bias is not None else y


def embed_lookup(table: EmbeddingTable, token) -> Tensor:
    """Embedding column(s); an int gives ``[E]``, an id array gives ``[B, E]``."""
    return ad.take_columns(table.matrix, token)


def project_keys(p: AdditiveAttentionParams, keys) -> Tensor:
    """``W_key @ key`` for every key; cacheable across decoding steps."""
    return ad.as_tensor(keys) @ p.w_key.T


def _as_key_tensor(keys) -> Tensor:
    if isinstance(keys, Tensor):
        return keys
    if isinstance(keys, np.ndarray):
        return Tensor(keys)
    if len(keys) == 0:
        raise ValueError("attention over an empty key set")
    return ad.stack(list(keys), axis=-2)


def additive_attention(
    p: AdditiveAttentionParams,
    query,
    keys,
    values=None,
    mask: np.ndarray | None = None,
    key_proj: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Score each key against the query and pool the values.

    ``score_i = w_score . tanh(W_key key_i + W_query query)``; the weights
    are a softmax over the scores and the context is the weighted sum of
    the values. ``keys``/``values`` are ``[k, D]`` (or ``[B, k, D]`` with a
    batched ``query``); a list of vectors is stacked. ``values`` defaults to
    ``keys``. ``mask`` is a boolean ``[B, k]`` array marking real keys.
    """
    query = ad.as_tensor(query)
    keys = _as_key_tensor(keys)
    values = keys if values is None else _as_key_tensor(values)
    k = keys.shape[-2]
    if k == 0:
        raise ValueError("attention over an empty key set")
    if values.shape[-2] != k:
        raise DimensionError(f"attention: {k} keys but {values.shape[-2]} values")
    if key_proj is None:
        key_proj = project_keys(p, keys)
    q = query @ p.w_query.T
    q = ad.reshape(q, q.shape[:-1] + (1, q.shape[-1]))
    e = ad.tanh(key_proj + q)
    scores = e @ p.w_score.T
    scores = ad.reshape(scores, scores.shape[:-1])
    if mask is not None:
        scores = scores + np.where(mask, 0.0, -1e30)
    weights = ad.softmax(scores, axis=-1)
    w = ad.reshape(weights, weights.shape[:-1] + (1, k))
    ctx = w @ values
    ctx = ad.reshape(ctx, ctx.shape[:-2] + (ctx.shape[-1],))
    return weights, ctx


def masked_mean(features: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is None:
        return features.mean(axis=-2)
    m = mask[..., None].astype(features.dtype)
    return (features * m).sum(axis=-2) / m.sum(axis=-2)


def param_list(blocks: Sequence[tuple[str, object]]) -> list[tuple[str, Tensor]]:
    out = []
    for prefix, block in blocks:
        out.extend(block.named(prefix))
    return out
