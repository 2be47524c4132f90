"""Dataset scoring, the tiny-model gradient check and the variant ablation."""

from __future__ import annotations

from dataclasses import dataclass
from statistics import median
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data import ConfigError, DataConfig, DatasetRecord, Vocabulary, generate_splits, references
from .inference import beam_search
from .metrics import EvalReport, score_corpus
from .model import EOS_ID, ModelDims, RDNParams, Regions, forward_teacher
from .training import TrainConfig, loss_pos, loss_total, loss_xe, teacher_forced_stats, train

# Training defaults for the synthetic corpus. The schedule shape follows the
# TrainConfig defaults; only the step count, batch and step size shrink.
DESK_TRAIN = dict(lr0=1.0, total_iters=1500, batch_size=20)


def decode_dataset(ckpt: Checkpoint, dataset: Sequence[DatasetRecord], beam_size: int = 5,
                   max_len: int = 20) -> list[list[str]]:
    out = []
    for rec in dataset:
        best = beam_search(ckpt.params, rec.regions, beam_size, max_len)[0]
        out.append(ckpt.vocab.decode(t for t in best.tokens if t != EOS_ID))
    return out


def corpus_eval(
    ckpt: Checkpoint,
    dataset: Sequence[DatasetRecord],
    beam_size: int = 5,
    max_len: int = 20,
    vocab_fingerprint: str | None = None,
    oracle: bool = False,
) -> EvalReport:
    """Beam-decode every record and score against its reference caption.

    ``oracle`` replaces the decoder with the references themselves, which
    pins every metric at its identity value.
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    if vocab_fingerprint is not None and vocab_fingerprint != ckpt.vocab.fingerprint:
        raise ConfigError(
            f"dataset vocabulary {vocab_fingerprint} does not match checkpoint {ckpt.vocab.fingerprint}"
        )
    refs = [references(r) for r in dataset]
    if oracle:
        cands = [list(r[0]) for r in refs]
    else:
        cands = decode_dataset(ckpt, dataset, beam_size, max_len)
    report = score_corpus(cands, refs)
    report.extra["beam_size"] = beam_size
    return report


TINY_DIMS = ModelDims(vocab_size=12, embed_dim=8, hidden=10, att_dim=6, region_dim=6)


def tiny_gradcheck(seed: int = 0, eps: float = 1e-5, k: int = 3, length: int = 5,
                   lam: float = 0.02, corrupt: bool = False) -> ad.GradCheckResult:
    """Finite-difference check of the full-variant objective on one random record."""
    rng = np.random.default_rng(seed)
    params = RDNParams.init(TINY_DIMS, "full", seed, scale=0.5)
    regions = Regions.from_sets([rng.normal(size=(k, TINY_DIMS.region_dim))])
    gold = np.append(rng.integers(4, TINY_DIMS.vocab_size, size=length - 1), EOS_ID)

    def objective():
        outs = forward_teacher(params, regions, gold)
        return loss_total(loss_xe(outs, gold), loss_pos(outs, length), lam)

    perturb = None
    if corrupt:
        def perturb(name, g):
            return g * 1.01 if name == "lstm2.w_hh" else g

    return ad.grad_check(objective, dict(params.named_parameters()), eps, perturb)


# -------------------------------------------------------------------- ablation


@dataclass
class AblationRun:
    seed: int
    variant: str
    final_color_accuracy: float   # teacher-forced, test split
    token_accuracy: float         # teacher-forced, test split
    cider: float                  # beam-decoded, test split
    train_position_mae: float     # mean |I_p - t/n| over the training split
    params: RDNParams
    vocab: Vocabulary


@dataclass
class AblationSummary:
    runs: list[AblationRun]

    def by_variant(self, variant: str) -> list[AblationRun]:
        return [r for r in self.runs if r.variant == variant]

    def median(self, variant: str, field: str) -> float:
        return median(getattr(r, field) for r in self.by_variant(variant))


def ablation(
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = ("baseline", "full"),
    n_train: int = 200,
    n_test: int = 50,
    train_overrides: dict | None = None,
    beam_size: int = 5,
    on_run=None,
) -> AblationSummary:
    """Train each variant on one synthetic corpus per seed and score it.

    The corpus seed and the training seed are the same number, so every
    variant of one seed sees identical data, batches and initial weights for
    the shared parameters.
    """
    runs = []
    for seed in seeds:
        splits = generate_splits(DataConfig(n_train=n_train, n_val=0, n_test=n_test, seed=seed))
        for variant in variants:
            kw = dict(DESK_TRAIN)
            kw.update(train_overrides or {})
            kw.update(variant=variant, seed=seed)
            res = train(splits["train"], TrainConfig(**kw))
            test = teacher_forced_stats(res.params, splits["test"], res.vocab)
            fit = teacher_forced_stats(res.params, splits["train"], res.vocab)
            report = corpus_eval(Checkpoint(res.params, res.vocab), splits["test"], beam_size)
            run = AblationRun(seed, variant, test.final_color_accuracy, test.token_accuracy,
                              report.scores["cider"], fit.position_mae, res.params, res.vocab)
            runs.append(run)
            if on_run is not None:
                on_run(run)
    return AblationSummary(runs)
