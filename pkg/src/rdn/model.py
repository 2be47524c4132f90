"""The reflective decoder: two stacked LSTMs, visual attention over region
features, reflective attention over the decoder's own past top-layer
states, and a relative-position head.

Everything runs on a batch axis. Single-image helpers wrap inputs into a
batch of one, so ``StepOutput`` tensors always carry a leading batch axis.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .layers import (
    INIT_RANGE,
    AdditiveAttentionParams,
    EmbeddingTable,
    LinearParams,
    LSTMCellParams,
    additive_attention,
    embed_lookup,
    linear,
    lstm_step,
    project_keys,
)

VARIANTS = ("baseline", "pos_only", "ref_only", "full")
BOS_ID = 1
EOS_ID = 2


def uses_reflection(variant: str) -> bool:
    return variant in ("ref_only", "full")


def uses_position_loss(variant: str) -> bool:
    return variant in ("pos_only", "full")


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed_dim: int = 32
    hidden: int = 64
    att_dim: int = 32
    region_dim: int = 20

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# full-scale sizes; region count per image is capped at 100 by the detector
FULL_SCALE_DIMS = dict(embed_dim=1000, hidden=1000, att_dim=512, region_dim=2048)


@dataclass
class RDNParams:
    dims: ModelDims
    variant: str
    embedding: EmbeddingTable
    lstm1: LSTMCellParams
    lstm2: LSTMCellParams
    att_vis: AdditiveAttentionParams
    att_ref: AdditiveAttentionParams
    out_head: LinearParams
    pos_head: LinearParams

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def init(cls, dims: ModelDims, variant: str = "full", seed: int = 0,
             scale: float = INIT_RANGE) -> "RDNParams":
        """Uniform(-scale, scale) weights, forget-gate biases set to 1."""
        rng = np.random.default_rng(seed)
        D, E, H, A, V = dims.region_dim, dims.embed_dim, dims.hidden, dims.att_dim, dims.vocab_size
        return cls(
            dims=dims,
            variant=variant,
            embedding=EmbeddingTable.init(rng, E, V, "embedding", scale),
            lstm1=LSTMCellParams.init(rng, D + E + H, H, "lstm1", scale),
            lstm2=LSTMCellParams.init(rng, D + H, H, "lstm2", scale),
            att_vis=AdditiveAttentionParams.init(rng, D, H, A, "att_vis", scale),
            att_ref=AdditiveAttentionParams.init(rng, H, H, A, "att_ref", scale),
            out_head=LinearParams.init(rng, H, V, True, "out_head", scale),
            pos_head=LinearParams.init(rng, H, 1, False, "pos_head", scale),
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix in ("embedding", "lstm1", "lstm2", "att_vis", "att_ref", "out_head", "pos_head"):
            yield from getattr(self, prefix).named(prefix)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def with_variant(self, variant: str) -> "RDNParams":
        """Same parameter tensors, different wiring."""
        return dataclasses.replace(self, variant=variant)

    def copy(self) -> "RDNParams":
        out = RDNParams.init(self.dims, self.variant)
        for (_, dst), (_, src) in zip(out.named_parameters(), self.named_parameters()):
            dst.data[...] = src.data
        return out


@dataclass
class Regions:
    """Padded region features ``[B, k_max, D]`` with a validity mask."""

    features: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_sets(cls, sets: Sequence) -> "Regions":
        arrays = [np.asarray(s, dtype=np.float64) for s in sets]
        if not arrays:
            raise ValueError("no region sets given")
        for a in arrays:
            if a.ndim != 2 or a.shape[0] == 0:
                raise ValueError(f"each region set must be a non-empty [k, D] array, got {a.shape}")
        D = arrays[0].shape[1]
        if any(a.shape[1] != D for a in arrays):
            raise DimensionError(f"region sets disagree on D: {[a.shape for a in arrays]}")
        kmax = max(a.shape[0] for a in arrays)
        feats = np.zeros((len(arrays), kmax, D))
        mask = np.zeros((len(arrays), kmax), dtype=bool)
        for b, a in enumerate(arrays):
            feats[b, :len(a)] = a
            mask[b, :len(a)] = True
        return cls(feats, mask)

    @classmethod
    def coerce(cls, regions) -> "Regions":
        if isinstance(regions, Regions):
            return regions
        return cls.from_sets([regions])

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    def take(self, rows: np.ndarray) -> "Regions":
        return Regions(self.features[rows], self.mask[rows])

    def mean(self) -> np.ndarray:
        m = self.mask[..., None].astype(np.float64)
        return (self.features * m).sum(axis=1) / m.sum(axis=1)


def mean_pool_regions(regions) -> Tensor:
    """Coordinate-wise mean of a region set (``[D]``) or of a ``Regions`` batch."""
    if isinstance(regions, Regions):
        return Tensor(regions.mean())
    if isinstance(regions, (np.ndarray, Tensor)):
        arr = ad.as_tensor(regions).data
    else:
        arr = np.array([ad.as_tensor(r).data for r in regions])
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("mean_pool_regions needs at least one region vector")
    return Tensor(arr.mean(axis=0))


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    history: list[Tensor] = field(default_factory=list)
    history_keys: list[Tensor] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.history)

    def select(self, rows: np.ndarray) -> "DecoderState":
        """Reorder/duplicate batch rows (no gradient; used by beam search)."""
        def pick(x: Tensor) -> Tensor:
            return Tensor(x.data[rows])
        return DecoderState(
            pick(self.h1), pick(self.c1), pick(self.h2), pick(self.c2),
            [pick(h) for h in self.history], [pick(k) for k in self.history_keys],
        )


def init_state(params: RDNParams, batch: int = 1) -> DecoderState:
    H = params.dims.hidden
    z = np.zeros((batch, H))
    return DecoderState(Tensor(z), Tensor(z.copy()), Tensor(z.copy()), Tensor(z.copy()))


@dataclass
class StepOutput:
    logits: Tensor               # [B, V]
    pos_pred: Tensor             # [B], in (0, 1)
    alpha_vis: Tensor            # [B, k]
    alpha_ref: Tensor | None     # [B, t]; None when reflection is off
    h2: Tensor                   # [B, H]
    h_ref: Tensor                # [B, H]
    r_hat: Tensor                # [B, D], attended region feature


@dataclass
class StepContext:
    """Per-image quantities reused at every step of one decode."""

    regions: Regions
    features: Tensor
    mean: Tensor
    vis_keys: Tensor

    @classmethod
    def build(cls, params: RDNParams, regions) -> "StepContext":
        regions = Regions.coerce(regions)
        if regions.features.shape[-1] != params.dims.region_dim:
            raise DimensionError(
                f"region dim {regions.features.shape[-1]} != model region_dim {params.dims.region_dim}"
            )
        feats = Tensor(regions.features)
        return cls(regions, feats, Tensor(regions.mean()), project_keys(params.att_vis, feats))

    def take(self, rows: np.ndarray) -> "StepContext":
        return StepContext(
            self.regions.take(rows),
            Tensor(self.features.data[rows]),
            Tensor(self.mean.data[rows]),
            Tensor(self.vis_keys.data[rows]),
        )


def rdn_step(
    params: RDNParams,
    state: DecoderState,
    prev_token,
    regions,
) -> tuple[StepOutput, DecoderState]:
    """Advance the decoder one word.

    ``regions`` is a ``[k, D]`` region set, a ``Regions`` batch or a prebuilt
    ``StepContext``; ``prev_token`` is an int or one id per batch row.
    """
    ctx = regions if isinstance(regions, StepContext) else StepContext.build(params, regions)
    B = ctx.regions.batch
    tokens = np.broadcast_to(np.asarray(prev_token, dtype=np.intp), (B,))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.dims.vocab_size):
        raise IndexError(f"token id out of range for vocabulary of {params.dims.vocab_size}: {tokens}")
    if state.h1.shape[0] != B:
        raise DimensionError(f"state batch {state.h1.shape[0]} != region batch {B}")

    x1 = ad.concat([ctx.mean, embed_lookup(params.embedding, tokens), state.h2], axis=-1)
    h1, c1 = lstm_step(params.lstm1, x1, state.h1, state.c1)
    alpha_vis, r_hat = additive_attention(
        params.att_vis, h1, ctx.features, mask=ctx.regions.mask, key_proj=ctx.vis_keys
    )
    x2 = ad.concat([r_hat, h1], axis=-1)
    h2, c2 = lstm_step(params.lstm2, x2, state.h2, state.c2)

    history = state.history + [h2]
    history_keys = state.history_keys
    if uses_reflection(params.variant):
        history_keys = history_keys + [project_keys(params.att_ref, h2)]
        hist = ad.stack(history, axis=-2)
        keys = ad.stack(history_keys, axis=-2)
        alpha_ref, h_ref = additive_attention(params.att_ref, h1, hist, key_proj=keys)
    else:
        alpha_ref, h_ref = None, h2

    logits = linear(params.out_head, h_ref)
    pos = ad.sigmoid(linear(params.pos_head, h_ref))
    pos = ad.reshape(pos, pos.shape[:-1])
    out = StepOutput(logits, pos, alpha_vis, alpha_ref, h2, h_ref, r_hat)
    return out, DecoderState(h1, c1, h2, c2, history, history_keys)


def _gold_matrix(gold) -> np.ndarray:
    g = np.asarray(gold, dtype=np.intp)
    if g.ndim == 1:
        g = g[None, :]
    if g.ndim != 2 or g.shape[1] == 0:
        raise ValueError("gold captions must be a non-empty token sequence")
    return g


def forward_teacher(params: RDNParams, regions, gold) -> list[StepOutput]:
    """Teacher-forced pass: step t reads gold token t-1 (``<bos>`` first).

    ``gold`` is one caption ``s_1..s_n`` or a padded ``[B, n]`` id matrix.
    """
    g = _gold_matrix(gold)
    V = params.dims.vocab_size
    if g.min() < 0 or g.max() >= V:
        raise IndexError(f"gold token id out of range for vocabulary of {V}")
    ctx = StepContext.build(params, regions)
    if ctx.regions.batch != g.shape[0]:
        raise DimensionError(f"{ctx.regions.batch} region sets but {g.shape[0]} captions")
    inputs = np.concatenate([np.full((g.shape[0], 1), BOS_ID), g[:, :-1]], axis=1)
    state = init_state(params, g.shape[0])
    outputs = []
    for t in range(g.shape[1]):
        out, state = rdn_step(params, state, inputs[:, t], ctx)
        outputs.append(out)
    return outputs
