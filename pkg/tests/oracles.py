"""Independent reference computations used by the test suite."""

from __future__ import annotations

import itertools

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def collapse(path, blank: int = 0) -> list[int]:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def brute_force_ctc(log_probs: np.ndarray, label) -> float:
    """-log of the summed probability of every frame path collapsing to ``label``."""
    steps, classes = log_probs.shape
    total = -np.inf
    target = [int(s) for s in label]
    for path in itertools.product(range(classes), repeat=steps):
        if collapse(path) == target:
            total = np.logaddexp(total, sum(log_probs[t, s] for t, s in enumerate(path)))
    return float(-total)


def random_log_softmax(rng: np.random.Generator, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def infonce_reference(context, targets, heads, pairs) -> float:
    """Plain numpy softmax cross-entropy with the positive as class 0."""
    losses = []
    for p, (seq, anchor, cand) in sorted(pairs.items()):
        for n in range(len(seq)):
            pred = context[seq[n], anchor[n]] @ heads[p]
            scores = np.array([pred @ targets[seq[n], t] for t in cand[n]])
            m = scores.max()
            losses.append(m + np.log(np.exp(scores - m).sum()) - scores[0])
    return float(np.mean(losses))
