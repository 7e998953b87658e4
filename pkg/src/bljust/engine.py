"""Single-loop penalized bilevel training and its two baselines.

Every strategy funnels its parameter updates through :func:`bljust_step`
(or the supervised/pre-training analogues below), driven by an objective
object that exposes

* ``upper(theta, phi) -> (value, grad_theta, grad_phi)``
* ``lower(theta) -> (value, grad_theta)``

so the same arithmetic serves both the sequence task and the closed-form
analytic problems.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .data import SequencePool
from .losses import ContrastiveBatch, LabeledBatch, ctc_loss, infonce_loss, sample_contrastive_pairs
from .model import EncoderConfig, ParameterPartition, bind, classify, encode, init_params
from .optim import ReduceOnPlateau, make_optimizer

__all__ = [
    "TrainingError",
    "PenaltySchedule",
    "TrainConfig",
    "MetricRecord",
    "TrainState",
    "SequenceObjective",
    "bljust_step",
    "supervised_step",
    "pretrain_step",
    "step_count",
    "new_state",
    "train_bljust",
    "train_supervised",
    "train_ptft",
    "evaluate_ctc",
    "evaluate_nce",
    "decode_pool",
    "evaluate_ter",
]


class TrainingError(RuntimeError):
    """Non-finite gradient or objective; ``term`` names the offending loss."""

    def __init__(self, message: str, term: str | None = None, step: int | None = None):
        self.term = term
        self.step = step
        super().__init__(message)


@dataclass(frozen=True)
class PenaltySchedule:
    initial_gamma: float = 0.0
    growth_rate: float = 0.002
    mode: str = "linear"

    def __post_init__(self):
        if self.mode not in ("linear", "constant"):
            raise ValueError(f"unknown penalty mode {self.mode!r}; expected 'linear' or 'constant'")
        if self.initial_gamma < 0:
            raise ValueError("initial_gamma must be >= 0")
        if self.mode == "linear" and self.growth_rate < 0:
            raise ValueError("growth_rate must be >= 0 so gamma never decreases")

    def gamma(self, epoch: int) -> float:
        if self.mode == "constant":
            return float(self.initial_gamma)
        return float(self.initial_gamma + self.growth_rate * epoch)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; ``alpha`` drives theta, ``beta`` drives phi."""

    alpha: float = 5e-3
    beta: float = 5e-4
    epochs: int = 100
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau: bool = True
    patience: int = 20
    factor: float = 0.1
    batch_size: int = 20
    negatives: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.batch_size < 1 or self.negatives < 1:
            raise ValueError("batch_size and negatives must be >= 1")
        make_optimizer(self.optimizer)

    def make_optimizer(self):
        if self.optimizer == "adamw":
            return make_optimizer(
                "adamw",
                weight_decay=self.weight_decay,
                beta1=self.adam_beta1,
                beta2=self.adam_beta2,
                eps=self.adam_eps,
            )
        return make_optimizer(self.optimizer)


@dataclass
class MetricRecord:
    k: int
    epoch: int
    ctc_loss: float | None
    nce_loss: float | None
    objective: float
    grad_norm_sq_theta: float
    grad_norm_sq_phi: float
    gamma: float | None
    wall_clock_seconds: float
    phase: str = "bljust"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    params: ParameterPartition
    opt_theta: object
    opt_phi: object
    alpha: float
    beta: float
    k: int = 0
    epoch: int = 0
    history: list[MetricRecord] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    clock_start: float = field(default_factory=time.perf_counter)
    clock_offset: float = 0.0
    record_every: int = 1

    def elapsed(self) -> float:
        return self.clock_offset + (time.perf_counter() - self.clock_start)


def new_state(params: ParameterPartition, cfg: TrainConfig, clock_offset: float = 0.0) -> TrainState:
    return TrainState(
        params=params.copy(),
        opt_theta=cfg.make_optimizer(),
        opt_phi=cfg.make_optimizer(),
        alpha=cfg.alpha,
        beta=cfg.beta,
        clock_offset=clock_offset,
    )


# -- step counting (lets callers assert which update path ran) -----------------

_STEP_COUNTS = {"bljust": 0, "supervised": 0, "pretrain": 0}


def step_count(kind: str = "bljust") -> int:
    return _STEP_COUNTS[kind]


def _sq_norm(grads: dict[str, np.ndarray]) -> float:
    return float(sum(float(np.vdot(g, g)) for g in grads.values()))


def _check_finite(value: float, grads: dict[str, np.ndarray], term: str, k: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"step {k}: {term} loss is not finite ({value})", term, k)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"step {k}: non-finite gradient of the {term} loss w.r.t. {name}", term, k)


def _record(state: TrainState, rec: MetricRecord) -> None:
    if state.record_every == 1 or rec.k % state.record_every == 0 or rec.k == 1:
        state.history.append(rec)


def bljust_step(state: TrainState, objective, gamma: float) -> TrainState:
    """One penalized update, in place.

    Both gradients are taken at the current ``(phi_k, theta_k)`` before either
    group moves::

        theta <- theta - alpha * (grad_theta upper + gamma * grad_theta lower)
        phi   <- phi   - beta  *  grad_phi upper

    Under AdamW the combined raw gradient of each group goes through that
    group's moment state instead.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    k = state.k + 1
    theta, phi = state.params.theta, state.params.phi
    upper, gu_theta, gu_phi = objective.upper(theta, phi)
    _check_finite(upper, {**gu_theta, **gu_phi}, "upper (CTC)", k)
    lower, gl_theta = objective.lower(theta)
    _check_finite(lower, gl_theta, "lower (InfoNCE)", k)

    g_theta = {name: gu_theta[name] + gamma * gl_theta[name] for name in theta}
    new_theta = state.opt_theta.step(theta, g_theta, state.alpha)
    new_phi = state.opt_phi.step(phi, gu_phi, state.beta) if phi else {}
    state.params = ParameterPartition(new_theta, new_phi)
    state.k = k
    _STEP_COUNTS["bljust"] += 1
    _record(
        state,
        MetricRecord(
            k=k,
            epoch=state.epoch,
            ctc_loss=float(upper),
            nce_loss=float(lower),
            objective=float(upper) + gamma * float(lower),
            grad_norm_sq_theta=_sq_norm(g_theta),
            grad_norm_sq_phi=_sq_norm(gu_phi),
            gamma=float(gamma),
            wall_clock_seconds=state.elapsed(),
        ),
    )
    return state


def supervised_step(state: TrainState, objective) -> TrainState:
    """Plain joint descent on the upper loss over (theta, phi)."""
    k = state.k + 1
    theta, phi = state.params.theta, state.params.phi
    upper, gu_theta, gu_phi = objective.upper(theta, phi)
    _check_finite(upper, {**gu_theta, **gu_phi}, "upper (CTC)", k)
    new_theta = state.opt_theta.step(theta, gu_theta, state.alpha)
    new_phi = state.opt_phi.step(phi, gu_phi, state.beta) if phi else {}
    state.params = ParameterPartition(new_theta, new_phi)
    state.k = k
    _STEP_COUNTS["supervised"] += 1
    _record(
        state,
        MetricRecord(
            k=k,
            epoch=state.epoch,
            ctc_loss=float(upper),
            nce_loss=None,
            objective=float(upper),
            grad_norm_sq_theta=_sq_norm(gu_theta),
            grad_norm_sq_phi=_sq_norm(gu_phi),
            gamma=None,
            wall_clock_seconds=state.elapsed(),
            phase="supervised",
        ),
    )
    return state


def pretrain_step(state: TrainState, objective) -> TrainState:
    """Descent on the lower loss over theta only; phi is left untouched."""
    k = state.k + 1
    theta = state.params.theta
    lower, gl_theta = objective.lower(theta)
    _check_finite(lower, gl_theta, "lower (InfoNCE)", k)
    new_theta = state.opt_theta.step(theta, gl_theta, state.alpha)
    state.params = ParameterPartition(new_theta, state.params.phi)
    state.k = k
    _STEP_COUNTS["pretrain"] += 1
    _record(
        state,
        MetricRecord(
            k=k,
            epoch=state.epoch,
            ctc_loss=None,
            nce_loss=float(lower),
            objective=float(lower),
            grad_norm_sq_theta=_sq_norm(gl_theta),
            grad_norm_sq_phi=0.0,
            gamma=None,
            wall_clock_seconds=state.elapsed(),
            phase="pretrain",
        ),
    )
    return state


# -- sequence-task objective -----------------------------------------------------


class SequenceObjective:
    """CTC on a labeled batch (upper) and InfoNCE on an unlabeled batch (lower)."""

    def __init__(
        self,
        cfg: EncoderConfig,
        labeled: LabeledBatch | None = None,
        unlabeled: ContrastiveBatch | None = None,
        pairs=None,
    ):
        self.cfg = cfg
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.pairs = pairs

    def upper(self, theta, phi):
        if self.labeled is None:
            raise ValueError("no labeled batch bound")
        g = ad.Graph()
        tv = {k: g.leaf(k, v) for k, v in theta.items()}
        pv = {k: g.leaf(k, v) for k, v in phi.items()}
        x = g.constant(self.labeled.inputs)
        loss = ctc_loss(classify(pv, encode(tv, x, self.cfg), self.cfg), self.labeled, check_normalized=False)
        grads = g.backward(loss)
        return float(loss.value), {k: grads[k] for k in theta}, {k: grads[k] for k in phi}

    def lower(self, theta):
        if self.unlabeled is None:
            raise ValueError("no unlabeled batch bound")
        g = ad.Graph()
        tv = {k: g.leaf(k, v) for k, v in theta.items()}
        x = g.constant(self.unlabeled.inputs)
        context = encode(tv, x, self.cfg)
        heads = {p: tv[f"nce.head{p}"] for p in self.unlabeled.prediction_offsets}
        loss = infonce_loss(context, x, heads, self.unlabeled, pairs=self.pairs)
        grads = g.backward(loss)
        return float(loss.value), {k: grads[k] for k in theta}


def evaluate_ctc(params: ParameterPartition, pool: SequencePool, cfg: EncoderConfig, batch_size: int = 100) -> float:
    """Mean CTC loss over a labeled pool (forward only)."""
    total = 0.0
    for idx in pool.minibatches(batch_size):
        batch = pool.labeled_batch(idx)
        g = ad.Graph()
        theta, phi = bind(g, params)
        lp = classify(phi, encode(theta, g.constant(batch.inputs), cfg), cfg)
        total += float(ctc_loss(lp, batch, check_normalized=False).value) * len(idx)
    return total / len(pool)


def evaluate_nce(
    params: ParameterPartition, pool: SequencePool, cfg: EncoderConfig, negatives: int, seed: int = 0, batch_size: int = 100
) -> float:
    """Mean InfoNCE over a pool with a fixed negative-sampling seed."""
    rng = np.random.default_rng([seed, 99])
    total = 0.0
    for idx in pool.minibatches(batch_size):
        batch = pool.contrastive_batch(idx, cfg.prediction_offsets, negatives)
        g = ad.Graph()
        theta, _ = bind(g, ParameterPartition(params.theta, {}))
        x = g.constant(batch.inputs)
        heads = {p: theta[f"nce.head{p}"] for p in cfg.prediction_offsets}
        total += float(infonce_loss(encode(theta, x, cfg), x, heads, batch, rng=rng).value) * len(idx)
    return total / len(pool)


# -- training loops ----------------------------------------------------------------


def _cycle(pool: SequencePool, batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    while True:
        yield from pool.minibatches(batch_size, rng)


def _batches_per_epoch(labeled: SequencePool, batch_size: int) -> int:
    return math.ceil(len(labeled) / batch_size)


def _end_epoch(state: TrainState, cfg: TrainConfig, scheduler: ReduceOnPlateau | None, monitor: Callable | None, extra: dict):
    entry = {"epoch": state.epoch, "k": state.k, "alpha": state.alpha, "beta": state.beta, **extra}
    if monitor is not None:
        val = float(monitor(state.params))
        entry["valid_loss"] = val
        if scheduler is not None and scheduler.step(val):
            state.alpha *= cfg.factor
            state.beta *= cfg.factor
            entry["reduced"] = True
    entry["wall_clock_seconds"] = state.elapsed()
    state.epoch_log.append(entry)
    state.epoch += 1


def _labeled_rng(cfg: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1])


def train_bljust(
    model_cfg: EncoderConfig,
    labeled: SequencePool,
    unlabeled: SequencePool,
    cfg: TrainConfig = TrainConfig(),
    sched: PenaltySchedule = PenaltySchedule(),
    valid: SequencePool | None = None,
    params: ParameterPartition | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> tuple[ParameterPartition, list[MetricRecord], TrainState]:
    """Single-loop penalized training.

    An epoch is one pass over ``labeled``; the unlabeled pool is cycled
    independently with its own shuffling stream.  ``gamma`` is refreshed from
    ``sched`` at the start of every epoch.  With a ``valid`` pool the plateau
    rule watches its CTC loss and scales alpha and beta together.
    """
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("labeled and unlabeled pools must be nonempty")
    if params is None:
        params = init_params(model_cfg, np.random.default_rng([cfg.seed, 0]))
    state = new_state(params, cfg)
    if cfg.epochs == 0:
        return state.params, state.history, state
    rng_lab = _labeled_rng(cfg)
    unl_iter = _cycle(unlabeled, cfg.batch_size, np.random.default_rng([cfg.seed, 2]))
    rng_neg = np.random.default_rng([cfg.seed, 3])
    scheduler = ReduceOnPlateau(cfg.patience, cfg.factor) if (cfg.plateau and valid is not None) else None
    monitor = (lambda p: evaluate_ctc(p, valid, model_cfg)) if valid is not None else None
    for _ in range(cfg.epochs):
        gamma = sched.gamma(state.epoch)
        for idx in labeled.minibatches(cfg.batch_size, rng_lab):
            lb = labeled.labeled_batch(idx)
            ub = unlabeled.contrastive_batch(next(unl_iter), model_cfg.prediction_offsets, cfg.negatives)
            pairs = sample_contrastive_pairs(ub.input_lengths, ub.prediction_offsets, ub.negatives_per_positive, rng_neg)
            bljust_step(state, SequenceObjective(model_cfg, lb, ub, pairs), gamma)
        _end_epoch(state, cfg, scheduler, monitor, {"gamma": gamma})
        if on_epoch is not None:
            on_epoch(state)
    return state.params, state.history, state


def train_supervised(
    model_cfg: EncoderConfig,
    labeled: SequencePool,
    cfg: TrainConfig,
    valid: SequencePool | None = None,
    params: ParameterPartition | None = None,
    clock_offset: float = 0.0,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> tuple[ParameterPartition, list[MetricRecord], TrainState]:
    """Conventional CTC training of (theta, phi) on labeled data only."""
    if len(labeled) == 0:
        raise ValueError("labeled pool must be nonempty")
    if params is None:
        params = init_params(model_cfg, np.random.default_rng([cfg.seed, 0]))
    state = new_state(params, cfg, clock_offset)
    rng_lab = _labeled_rng(cfg)
    scheduler = ReduceOnPlateau(cfg.patience, cfg.factor) if (cfg.plateau and valid is not None) else None
    monitor = (lambda p: evaluate_ctc(p, valid, model_cfg)) if valid is not None else None
    for _ in range(cfg.epochs):
        for idx in labeled.minibatches(cfg.batch_size, rng_lab):
            supervised_step(state, SequenceObjective(model_cfg, labeled.labeled_batch(idx)))
        _end_epoch(state, cfg, scheduler, monitor, {})
        if on_epoch is not None:
            on_epoch(state)
    return state.params, state.history, state


def train_ptft(
    model_cfg: EncoderConfig,
    unlabeled: SequencePool,
    labeled: SequencePool,
    cfg_pt: TrainConfig,
    cfg_ft: TrainConfig,
    valid: SequencePool | None = None,
    params: ParameterPartition | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
):
    """Pre-train theta on InfoNCE, then fine-tune (theta, phi) on CTC.

    A pre-training epoch takes as many steps as a labeled epoch, so both
    phases consume data at the same per-epoch rate as the single-loop method.
    The fine-tuning clock starts where pre-training stopped.

    Returns ``(params, history_pt, history_ft, state_pt, state_ft)``.
    """
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("labeled and unlabeled pools must be nonempty")
    if params is None:
        params = init_params(model_cfg, np.random.default_rng([cfg_ft.seed, 0]))
    state_pt = new_state(params, cfg_pt)
    steps = _batches_per_epoch(labeled, cfg_pt.batch_size)
    unl_iter = _cycle(unlabeled, cfg_pt.batch_size, np.random.default_rng([cfg_pt.seed, 2]))
    rng_neg = np.random.default_rng([cfg_pt.seed, 3])
    scheduler = ReduceOnPlateau(cfg_pt.patience, cfg_pt.factor) if (cfg_pt.plateau and valid is not None) else None
    monitor = (
        (lambda p: evaluate_nce(p, valid, model_cfg, cfg_pt.negatives, cfg_pt.seed)) if valid is not None else None
    )
    for _ in range(cfg_pt.epochs):
        for _ in range(steps):
            ub = unlabeled.contrastive_batch(next(unl_iter), model_cfg.prediction_offsets, cfg_pt.negatives)
            pairs = sample_contrastive_pairs(ub.input_lengths, ub.prediction_offsets, ub.negatives_per_positive, rng_neg)
            pretrain_step(state_pt, SequenceObjective(model_cfg, None, ub, pairs))
        _end_epoch(state_pt, cfg_pt, scheduler, monitor, {"phase": "pretrain"})
        if on_epoch is not None:
            on_epoch(state_pt)
    pt_params = state_pt.params
    _, _, state_ft = train_supervised(
        model_cfg, labeled, cfg_ft, valid=valid, params=pt_params, clock_offset=state_pt.elapsed(), on_epoch=on_epoch
    )
    for rec in state_ft.history:
        rec.phase = "finetune"
    return state_ft.params, state_pt.history, state_ft.history, state_pt, state_ft


def decode_pool(params: ParameterPartition, pool: SequencePool, cfg: EncoderConfig, batch_size: int = 100) -> list[list[int]]:
    """Greedy CTC transcripts for every sequence in ``pool``."""
    from .data import greedy_ctc_decode
    from .model import predict_log_probs

    hyps = []
    for idx in pool.minibatches(batch_size):
        x, lengths = pool.padded(idx)
        lp = predict_log_probs(params, x, cfg)
        hyps.extend(greedy_ctc_decode(lp[i], lengths[i]) for i in range(len(idx)))
    return hyps


def evaluate_ter(params: ParameterPartition, pool: SequencePool, cfg: EncoderConfig) -> float:
    from .data import corpus_token_error_rate

    return corpus_token_error_rate(decode_pool(params, pool, cfg), pool.labels)
