"""Training loop: supervised pair training with optional distillation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import codec
from ..dataset import DescriptorSet
from ..model import AmesParams, init_params
from . import sampling
from .backprop import DivergenceError, PairBatch, loss_gradients
from .optim import AdamWState, optimizer_step

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_triplets: int = 100
    lr0: float = 2e-4
    weight_decay: float = 1e-2
    beta: float = 10.0
    length_range: tuple[int, int] = (10, 400)
    seed: int = 0
    max_steps: int | None = None
    neighbors: int = sampling.NEIGHBORS
    # arithmetic precision of forward/backward; weights and optimizer stay float64
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        lo, hi = self.length_range
        if lo < 1 or lo > hi:
            raise ValueError(f"invalid length range {self.length_range}")


@dataclass
class DistillationSetup:
    """Frozen teacher plus distillation options.

    The teacher sees ``teacher_lengths`` descriptors per image (default: all
    stored); the student's sets are prefixes of those.
    """

    teacher: AmesParams
    mode: str = "tokens"
    teacher_lengths: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in ("tokens", "scores"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")


@dataclass
class LogRecord:
    step: int
    epoch: int
    lr: float
    loss_bce: float
    loss_dis: float
    l_x: int
    l_q: int


LOG_COLUMNS = ("step", "epoch", "lr", "loss_bce", "loss_dis", "l_x", "l_q")


@dataclass
class FitResult:
    params: AmesParams
    log: list[LogRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss_bce for r in self.log]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: AmesParams, log):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


def write_log(log, path):
    lines = ["\t".join(LOG_COLUMNS)]
    for r in log:
        lines.append(
            f"{r.step}\t{r.epoch}\t{r.lr:.9e}\t{r.loss_bce:.9e}\t{r.loss_dis:.9e}\t{r.l_x}\t{r.l_q}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_log(path) -> list[LogRecord]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        s, e, lr, b, d, lx, lq = row.split("\t")
        out.append(LogRecord(int(s), int(e), float(lr), float(b), float(d), int(lx), int(lq)))
    return out


def initial_params(
    data: DescriptorSet,
    variant: str = "fp",
    dim: int = 128,
    depth: int = 5,
    heads: int = 4,
    hidden: int | None = None,
    delta: float = codec.DEFAULT_DELTA,
    seed: int = 0,
    itq_iters: int = 50,
) -> AmesParams:
    """Random init; the binary variant starts W from an ITQ fit on the data."""
    w = None
    if variant == "bin":
        sample = data.locals.reshape(-1, data.local_dim)
        w = codec.itq_fit(sample, dim, iters=itq_iters, seed=seed).weight
    return init_params(
        data.local_dim, dim=dim, depth=depth, heads=heads, hidden=hidden,
        variant=variant, delta=delta, seed=seed, binarization_weight=w,
    )


def make_batch(data: DescriptorSet, pairs, teacher_lengths=None, dtype=np.float64) -> PairBatch:
    """Gather strength-ordered prefixes for a batch of pairs (X = other, Q = anchor)."""
    l_x, l_q = pairs[0].l_x, pairs[0].l_q
    anchors = np.array([p.anchor for p in pairs])
    others = np.array([p.other for p in pairs])
    labels = np.array([p.label for p in pairs])
    x = data.locals[others, :l_x].astype(dtype)
    q = data.locals[anchors, :l_q].astype(dtype)
    xt = qt = None
    if teacher_lengths is not None:
        xt = data.locals[others, : teacher_lengths[0]].astype(dtype)
        qt = data.locals[anchors, : teacher_lengths[1]].astype(dtype)
    return PairBatch(x, q, labels, xt, qt)


def _cast(params: AmesParams, dtype) -> AmesParams:
    if dtype == np.float64:
        return params
    return params.with_tensors({k: v.astype(dtype) for k, v in params.tensors.items()})


def fit(
    data: DescriptorSet,
    config: TrainConfig,
    params: AmesParams,
    distill: DistillationSetup | None = None,
) -> FitResult:
    """Train ``params`` on triplet batches; deterministic given ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    l_max = data.l_max
    lo, hi = (min(v, l_max) for v in config.length_range)
    nn_index, nn_sims = sampling.nearest_neighbors(data.globals, config.neighbors)

    use_teacher = distill is not None and config.beta != 0.0
    t_lengths = None
    if use_teacher:
        t_lengths = distill.teacher_lengths or (l_max, l_max)
        hi = min(hi, *t_lengths)
        lo = min(lo, hi)

    n_anchor = sum(
        int(c) for lab, c in zip(*np.unique(data.labels[data.labels >= 0], return_counts=True))
        if c >= 2
    )
    if n_anchor == 0:
        raise ValueError("no class has two or more members")
    per_epoch = math.ceil(n_anchor / config.batch_triplets)
    total = config.max_steps if config.max_steps is not None else config.epochs * per_epoch

    dtype = np.dtype(config.precision)
    teacher = distill.teacher if use_teacher else None
    if teacher is not None:
        teacher = _cast(teacher, dtype)
    state = AdamWState.zeros_like(params.tensors)
    log: list[LogRecord] = []
    step, epoch = 0, 0
    while step < total:
        triplets = sampling.epoch_triplets(data.labels, nn_index, nn_sims, rng)
        for pairs in sampling.sample_triplet_batch(triplets, config.batch_triplets, (lo, hi), rng):
            if step >= total:
                break
            batch = make_batch(data, pairs, t_lengths, dtype)
            try:
                res = loss_gradients(
                    batch, _cast(params, dtype), beta=config.beta if use_teacher else 0.0,
                    teacher=teacher,
                    distill_mode=distill.mode if use_teacher else "tokens",
                )
            except DivergenceError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", params, log) from exc
            tensors, lr = optimizer_step(
                params.tensors, res.grads, state, step, total, config.lr0, config.weight_decay,
            )
            params = params.with_tensors(tensors)
            log.append(LogRecord(step, epoch, lr, res.loss_bce, res.loss_dis, pairs[0].l_x, pairs[0].l_q))
            if step % 50 == 0:
                logger.info("step %d epoch %d lr %.2e bce %.4f dis %.4f", step, epoch, lr, res.loss_bce, res.loss_dis)
            step += 1
        epoch += 1
    return FitResult(params, log)
