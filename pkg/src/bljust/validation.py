"""Input checks shared by the estimator API and the command-line runner."""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = ["check_sequences", "check_label_sequences", "check_positive", "check_fraction"]


def check_sequences(X, feature_dim: int | None = None, name: str = "X") -> list[np.ndarray]:
    """Coerce ``X`` to a list of finite float64 ``[time, feature_dim]`` arrays.

    Accepts a list of 2-D arrays or a single 3-D array (equal lengths).
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence) and not isinstance(X, np.ndarray):
        raise TypeError(f"{name} must be a sequence of 2-D arrays")
    out = []
    for i, x in enumerate(X):
        a = np.asarray(x, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"{name}[{i}] must be 2-D [time, features], got shape {a.shape}")
        if a.shape[0] < 1:
            raise ValueError(f"{name}[{i}] is empty")
        if feature_dim is not None and a.shape[1] != feature_dim:
            raise ValueError(f"{name}[{i}] has {a.shape[1]} features, expected {feature_dim}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}[{i}] contains non-finite values")
        out.append(a)
    if not out:
        raise ValueError(f"{name} is empty")
    if feature_dim is None and len({a.shape[1] for a in out}) > 1:
        raise ValueError(f"{name}: sequences disagree on feature count")
    return out


def check_label_sequences(y, n: int, vocab_size: int | None = None, name: str = "y") -> list[list[int]]:
    """Coerce ``y`` to ``n`` integer label lists with symbols in ``1..vocab_size``."""
    if len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries, expected {n}")
    out = []
    for i, seq in enumerate(y):
        arr = np.asarray(seq)
        if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
            raise ValueError(f"{name}[{i}] must be a 1-D integer sequence")
        labels = [int(v) for v in arr]
        if any(v < 1 for v in labels):
            raise ValueError(f"{name}[{i}]: symbols start at 1 (0 is the blank)")
        if vocab_size is not None and any(v > vocab_size for v in labels):
            raise ValueError(f"{name}[{i}]: symbol above vocab_size={vocab_size}")
        out.append(labels)
    return out


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    v = float(value)
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return v


def check_fraction(value, name: str) -> float:
    v = float(value)
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")
    return v
