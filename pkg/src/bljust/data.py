"""Synthetic prototype-plus-noise sequence pools, greedy CTC decoding and TER."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .losses import BLANK, ContrastiveBatch, LabeledBatch

__all__ = [
    "GeneratorSpec",
    "SequencePool",
    "generate",
    "generate_eval",
    "greedy_ctc_decode",
    "edit_distance",
    "token_error_rate",
    "corpus_token_error_rate",
    "save_pool",
    "load_pool",
]

_SPLIT_IDS = {"labeled": 1, "unlabeled": 2, "valid": 3, "test": 4}


@dataclass(frozen=True)
class GeneratorSpec:
    vocab_size: int = 5
    feature_dim: int = 8
    frames_per_symbol: tuple[int, int] = (2, 4)
    label_length: tuple[int, int] = (2, 8)
    noise_sigma: float = 0.1
    prototype_scale: float = 1.0
    labeled_count: int = 500
    unlabeled_count: int = 4000
    valid_count: int = 100
    test_count: int = 200
    disjoint: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames_per_symbol", tuple(int(v) for v in self.frames_per_symbol))
        object.__setattr__(self, "label_length", tuple(int(v) for v in self.label_length))
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        lo, hi = self.frames_per_symbol
        if not 1 <= lo <= hi:
            raise ValueError("frames_per_symbol must satisfy 1 <= min <= max")
        lo, hi = self.label_length
        if not 1 <= lo <= hi:
            raise ValueError("label_length must satisfy 1 <= min <= max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("labeled_count", "unlabeled_count", "valid_count", "test_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def prototypes(self) -> np.ndarray:
        """``[V + 1, feature_dim]``; row 0 is unused (blank)."""
        rng = np.random.default_rng([self.seed, 0])
        while True:
            protos = rng.normal(scale=self.prototype_scale, size=(self.vocab_size, self.feature_dim))
            diffs = protos[:, None, :] - protos[None, :, :]
            dist = np.sqrt((diffs**2).sum(-1)) + np.eye(self.vocab_size)
            if dist.min() > 1e-6:
                break
        return np.vstack([np.zeros((1, self.feature_dim)), protos])


@dataclass
class SequencePool:
    """Variable-length frame sequences, optionally labeled."""

    frames: list[np.ndarray]
    labels: list[list[int]] | None = None
    feature_dim: int = field(default=0)

    def __post_init__(self):
        if not self.feature_dim and self.frames:
            self.feature_dim = self.frames[0].shape[1]
        if self.labels is not None and len(self.labels) != len(self.frames):
            raise ValueError("labels and frames must have the same count")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def lengths(self) -> list[int]:
        return [f.shape[0] for f in self.frames]

    def padded(self, indices: Sequence[int]) -> tuple[np.ndarray, list[int]]:
        lengths = [self.frames[i].shape[0] for i in indices]
        out = np.zeros((len(indices), max(lengths), self.feature_dim))
        for row, i in enumerate(indices):
            out[row, : lengths[row]] = self.frames[i]
        return out, lengths

    def labeled_batch(self, indices: Sequence[int]) -> LabeledBatch:
        if self.labels is None:
            raise ValueError("pool has no labels")
        x, lengths = self.padded(indices)
        return LabeledBatch(x, [self.labels[i] for i in indices], lengths)

    def contrastive_batch(self, indices: Sequence[int], offsets=(1,), negatives: int = 4) -> ContrastiveBatch:
        x, lengths = self.padded(indices)
        return ContrastiveBatch(x, lengths, list(offsets), negatives)

    def minibatches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[list[int]]:
        """One pass in shuffled (or natural) order."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield [int(i) for i in order[start : start + batch_size]]


def _sample_sequence(spec: GeneratorSpec, protos: np.ndarray, rng: np.random.Generator):
    n = int(rng.integers(spec.label_length[0], spec.label_length[1] + 1))
    label = []
    for _ in range(n):
        # adjacent symbols differ so every symbol survives the CTC collapse
        choices = [s for s in range(1, spec.vocab_size + 1) if not label or s != label[-1]]
        label.append(int(choices[rng.integers(len(choices))]))
    durations = rng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1, size=n)
    frames = np.repeat(protos[label], durations, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
    return frames, label


def _make_pool(spec: GeneratorSpec, split: str, count: int, protos, seen: set, keep_labels: bool) -> SequencePool:
    frames, labels = [], []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], i])
        while True:
            x, y = _sample_sequence(spec, protos, rng)
            key = x.tobytes()
            if not spec.disjoint or key not in seen:
                break
        seen.add(key)
        frames.append(x)
        labels.append(y)
    return SequencePool(frames, labels if keep_labels else None, spec.feature_dim)


def generate(spec: GeneratorSpec) -> tuple[SequencePool, SequencePool]:
    """Labeled training pool and unlabeled pool (labels discarded)."""
    protos = spec.prototypes()
    seen: set = set()
    labeled = _make_pool(spec, "labeled", spec.labeled_count, protos, seen, True)
    unlabeled = _make_pool(spec, "unlabeled", spec.unlabeled_count, protos, seen, False)
    return labeled, unlabeled


def generate_eval(spec: GeneratorSpec) -> tuple[SequencePool, SequencePool]:
    """Held-out labeled validation and test pools."""
    protos = spec.prototypes()
    seen: set = set()
    if spec.disjoint:
        labeled, unlabeled = generate(spec)
        seen.update(f.tobytes() for f in labeled.frames)
        seen.update(f.tobytes() for f in unlabeled.frames)
    valid = _make_pool(spec, "valid", spec.valid_count, protos, seen, True)
    test = _make_pool(spec, "test", spec.test_count, protos, seen, True)
    return valid, test


# -- decoding and scoring --------------------------------------------------------


def greedy_ctc_decode(log_probs: np.ndarray, length: int | None = None) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    lp = np.asarray(log_probs)
    if length is not None:
        lp = lp[:length]
    best = np.argmax(lp, axis=-1)
    out = []
    prev = None
    for s in best:
        s = int(s)
        if s != prev and s != BLANK:
            out.append(s)
        prev = s
    return out


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    return edit_distance(hyp, ref) / max(1, len(ref))


def corpus_token_error_rate(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """Total edits over total reference tokens."""
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return edits / max(1, sum(len(r) for r in refs))


# -- pool container ---------------------------------------------------------------
#
# magic  b"BLJPOOL1"            8 bytes
# hlen   uint64 little-endian   8 bytes
# header JSON utf-8: {"count", "feature_dim", "lengths", "label_lengths" | null}
# frames float64 little-endian, sum(lengths) * feature_dim values, row-major
# labels int64 little-endian, sum(label_lengths) values (absent if unlabeled)

POOL_MAGIC = b"BLJPOOL1"


def save_pool(path, pool: SequencePool) -> None:
    header = {
        "count": len(pool),
        "feature_dim": pool.feature_dim,
        "lengths": pool.lengths,
        "label_lengths": None if pool.labels is None else [len(y) for y in pool.labels],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(POOL_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for f in pool.frames:
            fh.write(np.ascontiguousarray(f, dtype="<f8").tobytes())
        if pool.labels is not None:
            for y in pool.labels:
                fh.write(np.asarray(y, dtype="<i8").tobytes())


def load_pool(path) -> SequencePool:
    raw = Path(path).read_bytes()
    if raw[:8] != POOL_MAGIC:
        raise ValueError(f"{path}: not a pool file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    pos = 16 + hlen
    d = header["feature_dim"]
    frames = []
    for t in header["lengths"]:
        n = t * d
        frames.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(t, d).astype(np.float64))
        pos += 8 * n
    labels = None
    if header["label_lengths"] is not None:
        labels = []
        for n in header["label_lengths"]:
            labels.append([int(v) for v in np.frombuffer(raw, dtype="<i8", count=n, offset=pos)])
            pos += 8 * n
    return SequencePool(frames, labels, d)
