"""CTC and InfoNCE losses as differentiable tape fragments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var

BLANK = 0

__all__ = [
    "BLANK",
    "CTCError",
    "LabeledBatch",
    "ContrastiveBatch",
    "ctc_feasible",
    "ctc_nll",
    "ctc_loss",
    "sample_contrastive_pairs",
    "infonce_loss",
]


class CTCError(ValueError):
    """Raised for infeasible labels or degenerate frames; ``index`` is the sequence."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"sequence {index}: {message}")


@dataclass
class LabeledBatch:
    """Padded inputs ``[batch, time, feature_dim]`` with label strings over ``1..V``."""

    inputs: np.ndarray
    labels: list[list[int]]
    input_lengths: list[int]
    label_lengths: list[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = [[int(s) for s in y] for y in self.labels]
        self.input_lengths = [int(t) for t in self.input_lengths]
        if self.label_lengths is None:
            self.label_lengths = [len(y) for y in self.labels]
        else:
            self.label_lengths = [int(n) for n in self.label_lengths]
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be [batch, time, feature], got shape {self.inputs.shape}")
        b = self.inputs.shape[0]
        if not (len(self.labels) == len(self.input_lengths) == len(self.label_lengths) == b):
            raise ValueError("labels, input_lengths and label_lengths must all match the batch size")
        for i, (y, n, t) in enumerate(zip(self.labels, self.label_lengths, self.input_lengths)):
            if len(y) != n:
                raise ValueError(f"sequence {i}: label_lengths says {n}, label has {len(y)}")
            if not 1 <= t <= self.inputs.shape[1]:
                raise ValueError(f"sequence {i}: input length {t} outside 1..{self.inputs.shape[1]}")
            if any(s < 1 for s in y):
                raise ValueError(f"sequence {i}: label symbols must be >= 1 (0 is the blank)")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ContrastiveBatch:
    """Unlabeled padded inputs plus the InfoNCE sampling recipe."""

    inputs: np.ndarray
    input_lengths: list[int]
    prediction_offsets: list[int] = field(default_factory=lambda: [1])
    negatives_per_positive: int = 4

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.input_lengths = [int(t) for t in self.input_lengths]
        self.prediction_offsets = [int(p) for p in self.prediction_offsets]
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be [batch, time, feature], got shape {self.inputs.shape}")
        if len(self.input_lengths) != self.inputs.shape[0]:
            raise ValueError("input_lengths must match the batch size")
        if not self.prediction_offsets or any(p < 1 for p in self.prediction_offsets):
            raise ValueError("prediction offsets must be positive integers")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        longest = max(self.input_lengths)
        for p in self.prediction_offsets:
            if p >= longest:
                raise ValueError(f"offset {p} leaves no anchor in a batch whose longest sequence is {longest}")

    def __len__(self) -> int:
        return self.inputs.shape[0]


# -- CTC -----------------------------------------------------------------------


def ctc_feasible(label: Sequence[int], length: int) -> bool:
    """``length >= len(label) + number of adjacent repeats``."""
    repeats = sum(1 for a, b in zip(label[:-1], label[1:]) if a == b)
    return length >= len(label) + repeats


def _extended_labels(labels: Sequence[Sequence[int]]):
    batch = len(labels)
    lmax = max((len(y) for y in labels), default=0)
    n_states = 2 * lmax + 1
    ext = np.full((batch, n_states), BLANK, dtype=np.int64)
    valid = np.zeros((batch, n_states), dtype=bool)
    skip = np.zeros((batch, n_states), dtype=bool)
    for b, y in enumerate(labels):
        s_b = 2 * len(y) + 1
        valid[b, :s_b] = True
        ext[b, 1:s_b:2] = y
        for s in range(3, s_b, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, valid, skip


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """Shift along the state axis towards higher indices, filling with -inf."""
    out = np.full_like(a, -np.inf)
    out[:, k:] = a[:, :-k]
    return out


def _unshift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, -np.inf)
    out[:, :-k] = a[:, k:]
    return out


def _ctc_alpha_beta(lp: np.ndarray, ext, valid, skip, lengths: np.ndarray):
    batch, tmax, _ = lp.shape
    n_states = ext.shape[1]
    emit = lp[np.arange(batch)[:, None, None], np.arange(tmax)[None, :, None], ext[:, None, :]]
    emit = np.where(valid[:, None, :], emit, -np.inf)

    alpha = np.full((tmax, batch, n_states), -np.inf)
    alpha[0, :, 0] = emit[:, 0, 0]
    if n_states > 1:
        alpha[0, :, 1] = emit[:, 0, 1]
    for t in range(1, tmax):
        a = alpha[t - 1]
        s2 = np.where(skip, _shift(a, 2), -np.inf) if n_states > 2 else np.full_like(a, -np.inf)
        s1 = _shift(a, 1) if n_states > 1 else np.full_like(a, -np.inf)
        new = np.logaddexp(np.logaddexp(a, s1), s2) + emit[:, t, :]
        alpha[t] = np.where((t < lengths)[:, None], new, a)

    last = 2 * np.array([int(v.sum()) // 2 for v in valid])  # index of final blank
    final = alpha[lengths - 1, np.arange(batch)]
    end_blank = final[np.arange(batch), last]
    end_label = np.where(last > 0, final[np.arange(batch), np.maximum(last - 1, 0)], -np.inf)
    log_p = np.logaddexp(end_blank, end_label)

    init = np.full((batch, n_states), -np.inf)
    init[np.arange(batch), last] = 0.0
    has_label = last > 0
    init[np.arange(batch)[has_label], last[has_label] - 1] = 0.0
    beta = np.full((tmax, batch, n_states), -np.inf)
    beta[tmax - 1] = init
    skip_from = _unshift(skip.astype(np.float64), 2) > 0 if n_states > 2 else np.zeros_like(skip)
    for t in range(tmax - 2, -1, -1):
        nxt = beta[t + 1] + emit[:, t + 1, :]
        u1 = _unshift(nxt, 1) if n_states > 1 else np.full_like(nxt, -np.inf)
        u2 = np.where(skip_from, _unshift(nxt, 2), -np.inf) if n_states > 2 else np.full_like(nxt, -np.inf)
        new = np.logaddexp(np.logaddexp(nxt, u1), u2)
        new = np.where(valid, new, -np.inf)
        beta[t] = np.where((t >= lengths - 1)[:, None], init, new)
    return alpha, beta, log_p


def ctc_nll(log_probs: Var, labels: Sequence[Sequence[int]], input_lengths: Sequence[int]) -> Var:
    """Per-sequence CTC negative log-likelihood ``[batch]`` as one tape primitive.

    Runs the log-domain forward (alpha) and backward (beta) recursions over the
    blank-interleaved label.  The vector-Jacobian product w.r.t. ``log_probs``
    is minus the state-occupancy posterior summed per output symbol.
    """
    lp = log_probs.value
    if lp.ndim != 3:
        raise ad.ShapeError(f"log_probs must be [batch, time, classes], got {lp.shape}", node=len(log_probs.graph), op="ctc")
    batch, tmax, n_classes = lp.shape
    lengths = np.asarray(input_lengths, dtype=np.int64)
    if len(labels) != batch or lengths.shape != (batch,):
        raise ad.ShapeError("labels and input_lengths must match the batch size", node=len(log_probs.graph), op="ctc")
    for b, y in enumerate(labels):
        if not 1 <= lengths[b] <= tmax:
            raise CTCError(f"input length {lengths[b]} outside 1..{tmax}", b)
        if any(not 1 <= s < n_classes for s in y):
            raise CTCError(f"label symbols must lie in 1..{n_classes - 1}", b)
        if not ctc_feasible(y, int(lengths[b])):
            raise CTCError(f"label of length {len(y)} cannot be aligned to {lengths[b]} frames", b)
        frames = lp[b, : lengths[b]]
        dead = np.all(np.isneginf(frames), axis=1)
        if dead.any():
            raise CTCError(f"frame {int(np.argmax(dead))} has probability zero for every class", b)

    ext, valid, skip = _extended_labels(labels)
    alpha, beta, log_p = _ctc_alpha_beta(lp, ext, valid, skip, lengths)
    for b in range(batch):
        if not np.isfinite(log_p[b]):
            raise CTCError("label has zero probability under log_probs", b)

    def vjp(go):
        occ = np.exp(alpha + beta - log_p[None, :, None])  # [T, B, S]
        tmask = np.arange(tmax)[:, None] < lengths[None, :]
        occ = np.where(tmask[:, :, None], occ, 0.0)
        grad = np.zeros((batch, tmax, n_classes))
        bi = np.broadcast_to(np.arange(batch)[None, :, None], occ.shape)
        ti = np.broadcast_to(np.arange(tmax)[:, None, None], occ.shape)
        ki = np.broadcast_to(ext[None, :, :], occ.shape)
        np.add.at(grad, (bi, ti, ki), -occ * go[None, :, None])
        return (grad,)

    return log_probs.graph.record("ctc", (log_probs,), -log_p, vjp)


def ctc_loss(log_probs: Var, batch: LabeledBatch, check_normalized: bool = True) -> Var:
    """Mean CTC negative log-likelihood over the batch (blank index 0)."""
    if check_normalized:
        lp = log_probs.value
        for b, t in enumerate(batch.input_lengths):
            row = ad._lse(lp[b, :t], 1)
            if np.max(np.abs(row)) > 1e-8:
                raise ValueError(f"sequence {b}: log_probs frames are not log-softmax normalized")
    return ad.mean(ctc_nll(log_probs, batch.labels, batch.input_lengths))


# -- InfoNCE -------------------------------------------------------------------


def sample_contrastive_pairs(
    input_lengths: Sequence[int],
    offsets: Sequence[int],
    num_negatives: int,
    rng: np.random.Generator,
) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Anchors and candidate time steps for every valid ``(sequence, t, p)``.

    Returns ``{p: (seq_idx[N], anchor_t[N], candidates[N, 1 + num_negatives])}``
    with the positive ``t + p`` in column 0 and negatives drawn uniformly
    without replacement from the same sequence's other time steps.
    """
    lengths = np.asarray(input_lengths, dtype=np.int64)
    tmax = int(lengths.max())
    out = {}
    for p in offsets:
        seq, anchor = [], []
        for b, t_len in enumerate(lengths):
            if t_len - p <= 0:
                continue
            if t_len - 1 < num_negatives:
                raise ValueError(
                    f"sequence {b} has {t_len - 1} candidate time steps, fewer than {num_negatives} negatives"
                )
            seq.append(np.full(t_len - p, b))
            anchor.append(np.arange(t_len - p))
        if not seq:
            continue
        seq_idx = np.concatenate(seq)
        anchor_t = np.concatenate(anchor)
        positive = anchor_t + p
        keys = rng.random((len(seq_idx), tmax))
        steps = np.arange(tmax)[None, :]
        keys[steps >= lengths[seq_idx][:, None]] = np.inf
        keys[steps == positive[:, None]] = np.inf
        negatives = np.argsort(keys, axis=1, kind="stable")[:, :num_negatives]
        out[p] = (seq_idx, anchor_t, np.concatenate([positive[:, None], negatives], axis=1))
    return out


def infonce_loss(
    context: Var,
    targets: Var | np.ndarray,
    heads: Mapping[int, Var],
    batch: ContrastiveBatch,
    rng: np.random.Generator | None = None,
    pairs=None,
) -> Var:
    """Mean over all (anchor, offset) pairs of the contrastive cross-entropy.

    The score of a candidate frame ``x`` for anchor ``t`` and offset ``p`` is
    ``dot(C_t @ heads[p], x)``; the similarity is its exponential, so the loss
    per pair is ``logsumexp(scores) - score_positive``.
    """
    g = context.graph
    targets = g.wrap(targets)
    if pairs is None:
        if rng is None:
            raise ValueError("either rng or precomputed pairs is required")
        pairs = sample_contrastive_pairs(
            batch.input_lengths, batch.prediction_offsets, batch.negatives_per_positive, rng
        )
    per_offset = []
    for p in batch.prediction_offsets:
        if p not in pairs:
            continue
        seq_idx, anchor_t, cand = pairs[p]
        ctx = ad.gather(context, (seq_idx, anchor_t))  # [N, ctx]
        pred = ad.matmul(ctx, heads[p])  # [N, tgt]
        n, k1 = cand.shape
        rows = np.broadcast_to(np.arange(n)[:, None], (n, k1))
        pred_rep = ad.gather(pred, (rows,))  # [N, K+1, tgt]
        cand_vecs = ad.gather(targets, (np.broadcast_to(seq_idx[:, None], (n, k1)), cand))
        scores = ad.sum(ad.mul(pred_rep, cand_vecs), axis=-1)  # [N, K+1]
        per_offset.append(ad.sub(ad.logsumexp(scores, axis=-1), ad.slice_(scores, (slice(None), 0))))
    if not per_offset:
        raise ValueError("no valid (anchor, offset) pairs in batch")
    losses = per_offset[0] if len(per_offset) == 1 else ad.concat(per_offset, axis=0)
    return ad.mean(losses)
