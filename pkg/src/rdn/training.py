"""Losses, learning-rate schedule, SGD and the teacher-forced training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    FINAL_COLOR_POS,
    ConfigError,
    DatasetRecord,
    Vocabulary,
    batch_captions,
    build_vocab,
)
from .model import (
    VARIANTS,
    ModelDims,
    RDNParams,
    Regions,
    StepOutput,
    forward_teacher,
    uses_position_loss,
)

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class TrainingError(NumericalError):
    def __init__(self, message: str, param: str | None = None):
        super().__init__(message)
        self.param = param


# ----------------------------------------------------------------------- losses


def _step_mask(n_steps: int, lengths) -> np.ndarray:
    lengths = np.atleast_1d(np.asarray(lengths))
    return (np.arange(1, n_steps + 1)[None, :] <= lengths[:, None]).astype(np.float64)


def loss_xe(outputs: Sequence[StepOutput], gold, lengths=None) -> Tensor:
    """Summed negative log-likelihood of the gold tokens.

    ``gold`` is ``s_1..s_n`` or a padded ``[B, n]`` matrix with ``lengths``;
    the result sums over tokens and captions.
    """
    g = np.asarray(gold, dtype=np.intp)
    if g.ndim == 1:
        g = g[None, :]
    if len(outputs) != g.shape[1]:
        raise ValueError(f"{len(outputs)} step outputs for {g.shape[1]} gold tokens")
    logits = ad.stack([o.logits for o in outputs], axis=1)  # [B, n, V]
    logp = ad.pick(ad.log_softmax(logits, axis=-1), g)     # [B, n]
    if lengths is not None:
        logp = logp * _step_mask(g.shape[1], lengths)
    return -ad.tsum(logp)


def loss_pos(outputs: Sequence[StepOutput], n=None) -> Tensor:
    """Squared error between predicted and true relative positions ``t/n``.

    ``n`` is the caption length (default: number of outputs) or one length
    per batch row; steps past a row's length are ignored.
    """
    steps = len(outputs)
    n = steps if n is None else n
    lengths = np.atleast_1d(np.asarray(n, dtype=np.float64))
    if np.any(lengths <= 0):
        raise ValueError("caption length must be positive")
    pred = ad.stack([o.pos_pred for o in outputs], axis=1)  # [B, n]
    target = np.arange(1, steps + 1)[None, :] / lengths[:, None]
    diff = pred - target
    sq = diff * diff
    if np.any(lengths < steps):
        sq = sq * _step_mask(steps, lengths)
    return ad.tsum(sq)


def loss_total(xe, pos, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(xe, Tensor) or isinstance(pos, Tensor):
        return ad.as_tensor(xe) if lam == 0 else ad.add(xe, ad.scale(pos, lam))
    return xe + lam * pos


# ------------------------------------------------------------------- optimizer


def poly_decay_lr(lr0: float, it: int, total_iters: int, power: float = 1.0) -> float:
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside [0, {total_iters}]")
    return lr0 * (1.0 - it / total_iters) ** power


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def sgd_step(
    named_params: Sequence[tuple[str, Tensor]],
    grads: Sequence[np.ndarray],
    lr: float,
    grad_clip: float | None = None,
) -> float:
    """In-place ``theta -= lr * g`` after optional global-norm clipping.

    Returns the pre-clipping gradient norm.
    """
    if len(named_params) != len(grads):
        raise ValueError("parameters and gradients are not aligned")
    for (name, _), g in zip(named_params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", name)
    norm = global_norm(grads)
    factor = 1.0
    if grad_clip is not None and norm > grad_clip:
        factor = grad_clip / norm
    for (_, p), g in zip(named_params, grads):
        p.data -= (lr * factor) * g
    return norm


# ------------------------------------------------------------------ the loop


@dataclass
class TrainConfig:
    lr0: float = 0.01
    total_iters: int = 70_000
    batch_size: int = 100
    lam: float = 0.02
    decay_power: float = 1.0
    seed: int = 0
    variant: str = "full"
    grad_clip: float | None = 5.0
    embed_dim: int = 32
    hidden: int = 64
    att_dim: int = 32
    init_scale: float = 0.08
    vocab_min_count: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if not self.decay_power > 0:
            raise ConfigError("decay_power must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0 when set")

    @property
    def effective_lambda(self) -> float:
        return self.lam if uses_position_loss(self.variant) else 0.0

    def model_dims(self, vocab_size: int, region_dim: int) -> ModelDims:
        return ModelDims(vocab_size, self.embed_dim, self.hidden, self.att_dim, region_dim)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LogEntry:
    iteration: int
    lr: float
    xe: float
    pos: float
    total: float

    def line(self) -> str:
        return f"{self.iteration}\t{self.lr!r}\t{self.xe!r}\t{self.pos!r}\t{self.total!r}"


@dataclass
class TrainResult:
    params: RDNParams
    vocab: Vocabulary
    iteration: int
    config: TrainConfig
    log: list[LogEntry] = field(default_factory=list)


def batch_indices(n: int, batch_size: int, it: int, seed: int) -> np.ndarray:
    """Records for iteration ``it``: consecutive slices of per-epoch shuffles.

    Depends only on ``(n, batch_size, it, seed)``, so a resumed run sees the
    same batches as an uninterrupted one.
    """
    if batch_size >= n:
        return np.arange(n)
    start = it * batch_size
    out = np.empty(batch_size, dtype=np.intp)
    filled = 0
    while filled < batch_size:
        epoch, offset = divmod(start + filled, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - filled, n - offset)
        out[filled:filled + take] = perm[offset:offset + take]
        filled += take
    return out


def batch_loss(params: RDNParams, regions: Regions, gold: np.ndarray, lengths: np.ndarray,
               lam: float) -> tuple[Tensor, float, float]:
    """Mean-per-caption objective plus its xe and position parts (as floats)."""
    outputs = forward_teacher(params, regions, gold)
    B = gold.shape[0]
    xe = loss_xe(outputs, gold, lengths)
    if lam > 0:
        pos = loss_pos(outputs, lengths)
        total = ad.scale(loss_total(xe, pos, lam), 1.0 / B)
        pos_value = pos.item()
    else:
        pos_value = position_sq_error(outputs, lengths)
        total = ad.scale(xe, 1.0 / B)
    return total, xe.item() / B, pos_value / B


def position_sq_error(outputs: Sequence[StepOutput], lengths) -> float:
    pred = np.stack([o.pos_pred.data for o in outputs], axis=1)
    steps = pred.shape[1]
    lengths = np.asarray(lengths, dtype=np.float64)
    target = np.arange(1, steps + 1)[None, :] / lengths[:, None]
    return float(((pred - target) ** 2 * _step_mask(steps, lengths)).sum())


def _check_dataset(dataset: Sequence[DatasetRecord]) -> int:
    if not dataset:
        raise ConfigError("training set is empty")
    dims = {r.regions.shape[1] for r in dataset}
    if len(dims) != 1:
        raise ConfigError(f"records disagree on region dimension: {sorted(dims)}")
    return dims.pop()


def train(
    dataset: Sequence[DatasetRecord],
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    params: RDNParams | None = None,
    start_iter: int = 0,
    on_log: Callable[[LogEntry], None] | None = None,
    stop_iter: int | None = None,
) -> TrainResult:
    """Teacher-forced SGD with polynomial learning-rate decay.

    Pass ``params`` and ``start_iter`` to resume; the schedule and batch
    order continue from ``start_iter``. ``stop_iter`` ends the run early
    while keeping the schedule of ``config.total_iters``.
    """
    region_dim = _check_dataset(dataset)
    if vocab is None:
        vocab = build_vocab([r.caption for r in dataset], config.vocab_min_count)
    dims = config.model_dims(len(vocab), region_dim)
    if params is None:
        params = RDNParams.init(dims, config.variant, config.seed, config.init_scale)
    else:
        if params.dims != dims:
            raise ConfigError(f"model dims {params.dims} do not match data/config dims {dims}")
        params = params.with_variant(config.variant)
    stop = config.total_iters if stop_iter is None else min(stop_iter, config.total_iters)
    if not 0 <= start_iter <= stop:
        raise ConfigError(f"start iteration {start_iter} outside [0, {stop}]")

    regions_all = [r.regions for r in dataset]
    gold_all, lengths_all = batch_captions(dataset, vocab)
    named = list(params.named_parameters())
    tensors = [p for _, p in named]
    lam = config.effective_lambda
    entries: list[LogEntry] = []

    # overflow surfaces as a non-finite loss or gradient and is raised below
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(start_iter, stop):
            lr = poly_decay_lr(config.lr0, it, config.total_iters, config.decay_power)
            idx = batch_indices(len(dataset), config.batch_size, it, config.seed)
            lengths = lengths_all[idx]
            gold = gold_all[idx, : lengths.max()]
            regions = Regions.from_sets([regions_all[i] for i in idx])
            with ad.Tape() as tape:
                total, xe, pos = batch_loss(params, regions, gold, lengths, lam)
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at iteration {it}")
            grads = tape.backward(total, tensors)
            sgd_step(named, [grads[p] for p in tensors], lr, config.grad_clip)
            entry = LogEntry(it, lr, xe, pos, total.item())
            entries.append(entry)
            if on_log is not None:
                on_log(entry)
    return TrainResult(params, vocab, stop, config, entries)


# ------------------------------------------------------------------ diagnostics


@dataclass
class TeacherForcedStats:
    token_accuracy: float
    final_color_accuracy: float
    position_mae: float
    n_tokens: int


def teacher_forced_stats(
    params: RDNParams,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    batch_size: int = 100,
    target_pos: int = FINAL_COLOR_POS,
) -> TeacherForcedStats:
    """Argmax accuracy under teacher forcing, accuracy at caption position
    ``target_pos`` (1-indexed), and mean ``|I_p - t/n|`` over all tokens."""
    correct = total = pos_hits = pos_total = 0
    abs_err = 0.0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        gold, lengths = batch_captions(chunk, vocab)
        outs = forward_teacher(params, Regions.from_sets([r.regions for r in chunk]), gold)
        pred = np.stack([o.logits.data.argmax(axis=-1) for o in outs], axis=1)
        ipos = np.stack([o.pos_pred.data for o in outs], axis=1)
        mask = _step_mask(gold.shape[1], lengths).astype(bool)
        hit = (pred == gold) & mask
        correct += int(hit.sum())
        total += int(mask.sum())
        target = np.arange(1, gold.shape[1] + 1)[None, :] / lengths[:, None]
        abs_err += float((np.abs(ipos - target) * mask).sum())
        if gold.shape[1] >= target_pos:
            col = target_pos - 1
            valid = lengths >= target_pos
            pos_hits += int(hit[valid, col].sum())
            pos_total += int(valid.sum())
    return TeacherForcedStats(
        correct / total,
        pos_hits / pos_total if pos_total else float("nan"),
        abs_err / total,
        total,
    )
