"""Greedy and beam-search decoding, attention traces and their export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    BOS_ID,
    EOS_ID,
    DecoderState,
    RDNParams,
    StepContext,
    forward_teacher,
    init_state,
    rdn_step,
)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class TraceStep:
    t: int
    token: int
    alpha_vis: list[float]
    alpha_ref: list[float]
    pos_pred: float
    word: str | None = None


@dataclass
class AttentionTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "steps": [
                {
                    "t": s.t,
                    "token": s.word if s.word is not None else str(s.token),
                    "alpha_vis": s.alpha_vis,
                    "alpha_ref": s.alpha_ref,
                    "pos_pred": s.pos_pred,
                }
                for s in self.steps
            ]
        }


def _trace_step(t: int, out, token: int, k: int, vocab) -> TraceStep:
    return TraceStep(
        t=t,
        token=int(token),
        alpha_vis=out.alpha_vis.data[0, :k].tolist(),
        alpha_ref=[] if out.alpha_ref is None else out.alpha_ref.data[0].tolist(),
        pos_pred=float(out.pos_pred.data[0]),
        word=None if vocab is None else vocab.tokens[int(token)],
    )


def greedy_decode(params: RDNParams, regions, max_len: int = 20, vocab=None) -> tuple[list[int], AttentionTrace]:
    """Argmax decoding from ``<bos>`` until ``<eos>`` or ``max_len`` steps.

    Returns the caption ids without ``<eos>``; the trace covers every step,
    including the one that emitted ``<eos>``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = StepContext.build(params, regions)
    if ctx.regions.batch != 1:
        raise ValueError("greedy_decode takes a single region set")
    k = int(ctx.regions.mask[0].sum())
    state = init_state(params, 1)
    token, tokens, trace = BOS_ID, [], AttentionTrace()
    for t in range(1, max_len + 1):
        out, state = rdn_step(params, state, token, ctx)
        token = int(np.argmax(out.logits.data[0]))
        trace.steps.append(_trace_step(t, out, token, k, vocab))
        if token == EOS_ID:
            break
        tokens.append(token)
    return tokens, trace


def trace_tokens(params: RDNParams, regions, tokens: Sequence[int], vocab=None) -> AttentionTrace:
    """Attention trace of the decoder reading back a fixed token sequence."""
    if not tokens:
        raise ValueError("nothing to trace")
    ctx = StepContext.build(params, regions)
    k = int(ctx.regions.mask[0].sum())
    outs = forward_teacher(params, ctx.regions, list(tokens))
    return AttentionTrace([_trace_step(t, o, tok, k, vocab) for t, (o, tok) in enumerate(zip(outs, tokens), 1)])


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]   # includes the final <eos> when finished by it
    log_prob: float
    finished: bool
    score: float = 0.0

    @property
    def words(self) -> list[int]:
        return [t for t in self.tokens if t != EOS_ID]


def beam_search(
    params: RDNParams,
    regions,
    beam_size: int = 5,
    max_len: int = 20,
    length_norm: bool = False,
) -> list[BeamHypothesis]:
    """Best ``beam_size`` captions, ranked by score (highest first).

    Candidates from every live hypothesis compete for ``beam_size`` slots;
    those ending in ``<eos>`` or reaching ``max_len`` tokens retire into the
    finished pool. Ties go to the lexicographically smaller token sequence.
    With ``length_norm`` the score is the log probability per token.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = StepContext.build(params, regions)
    if ctx.regions.batch != 1:
        raise ValueError("beam_search takes a single region set")
    V = params.dims.vocab_size
    ids = np.arange(V)

    def score(tokens, lp):
        return lp / len(tokens) if length_norm else lp

    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    state: DecoderState = init_state(params, 1)
    last = np.array([BOS_ID])
    pool: list[BeamHypothesis] = []
    for step in range(max_len):
        out, state = rdn_step(params, state, last, ctx)
        logp = _log_softmax(out.logits.data)
        cands = []
        for row, (tokens, lp) in enumerate(live):
            order = np.lexsort((ids, -logp[row]))[:beam_size]
            for v in order:
                new_lp = lp + float(logp[row, v])
                cands.append((-new_lp, tokens + (int(v),), row, new_lp))
        cands.sort(key=lambda c: (c[0], c[1]))
        next_live, rows = [], []
        for _, tokens, row, lp in cands[:beam_size]:
            done = tokens[-1] == EOS_ID or step == max_len - 1
            if done:
                pool.append(BeamHypothesis(tokens, lp, True, score(tokens, lp)))
            else:
                next_live.append((tokens, lp))
                rows.append(row)
        if not next_live:
            break
        if not length_norm and len(pool) >= beam_size:
            kth = sorted(h.log_prob for h in pool)[-beam_size]
            if max(lp for _, lp in next_live) < kth:
                break
        live = next_live
        sel = np.array(rows)
        state = state.select(sel)
        ctx = ctx.take(sel)
        last = np.array([t[-1] for t, _ in live])
    pool.sort(key=lambda h: (-h.score, h.tokens))
    return pool[:beam_size]


def exhaustive_search(params: RDNParams, regions, max_len: int) -> list[BeamHypothesis]:
    """Every complete sequence up to ``max_len`` tokens, best first.

    Exponential in ``max_len``; meant as a reference for small vocabularies.
    """
    ctx = StepContext.build(params, regions)
    V = params.dims.vocab_size
    results: list[BeamHypothesis] = []

    def walk(state, token, tokens, lp):
        out, nxt = rdn_step(params, state, token, ctx)
        logp = _log_softmax(out.logits.data)[0]
        for v in range(V):
            seq, total = tokens + (v,), lp + float(logp[v])
            if v == EOS_ID or len(seq) == max_len:
                results.append(BeamHypothesis(seq, total, True, total))
            else:
                walk(nxt, v, seq, total)

    walk(init_state(params, 1), BOS_ID, (), 0.0)
    results.sort(key=lambda h: (-h.score, h.tokens))
    return results


# ----------------------------------------------------------------------- export


def export_trace(trace: AttentionTrace, fmt: str = "json") -> str:
    """Serialize a trace as JSON or as a Graphviz digraph.

    In the graph, an edge ``i -> t`` carries the reflective weight of past
    step ``i`` when producing word ``t``; pen width grows with the weight
    and each step's heaviest incoming edge gets ``class="max"``.
    """
    if not trace.steps:
        raise ValueError("empty trace")
    if fmt == "json":
        return json.dumps(trace.to_dict(), indent=1)
    if fmt != "dot":
        raise ValueError(f"unknown trace format {fmt!r}")
    lines = ["digraph reflective_attention {", "  rankdir=LR;", "  node [shape=box];"]
    for s in trace.steps:
        label = s.word if s.word is not None else str(s.token)
        label = label.replace("\\", "\\\\").replace('"', '\\"')
        lines.append(f'  w{s.t} [label="{label}"];')
    for s in trace.steps:
        if not s.alpha_ref:
            continue
        best = int(np.argmax(s.alpha_ref))
        for i, a in enumerate(s.alpha_ref):
            attrs = f'weight="{a:.6f}", label="{a:.3f}", penwidth={0.5 + 4.5 * a:.3f}'
            if i == best:
                attrs += ', class="max", color="red"'
            lines.append(f"  w{i + 1} -> w{s.t} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
