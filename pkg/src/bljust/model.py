"""Causal tanh-RNN encoder with a linear CTC classification head.

Parameters are split into the backbone ``theta`` (recurrent layers and the
InfoNCE prediction heads) and the head ``phi`` (the final classification
layer only).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Var

__all__ = [
    "EncoderConfig",
    "ParameterPartition",
    "init_params",
    "encode",
    "classify",
    "bind",
    "predict_log_probs",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int
    hidden_dim: int = 16
    context_dim: int = 16
    num_layers: int = 1
    vocab_size: int = 5
    prediction_offsets: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "context_dim", "num_layers", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "prediction_offsets", tuple(int(p) for p in self.prediction_offsets))
        if any(p < 1 for p in self.prediction_offsets):
            raise ValueError("prediction offsets must be positive")

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        d_in = self.feature_dim
        for layer in range(self.num_layers):
            d_out = self.context_dim if layer == self.num_layers - 1 else self.hidden_dim
            dims.append((d_in, d_out))
            d_in = d_out
        return dims


@dataclass
class ParameterPartition:
    """Backbone ``theta`` and classification head ``phi`` as name -> array maps."""

    theta: dict[str, np.ndarray] = field(default_factory=dict)
    phi: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.theta) & set(self.phi)
        if overlap:
            raise ValueError(f"theta and phi share names: {sorted(overlap)}")

    def copy(self) -> "ParameterPartition":
        return ParameterPartition(
            {k: v.copy() for k, v in self.theta.items()},
            {k: v.copy() for k, v in self.phi.items()},
        )

    def names(self) -> set[str]:
        return set(self.theta) | set(self.phi)

    def flat(self) -> np.ndarray:
        parts = [self.theta[k].ravel() for k in sorted(self.theta)]
        parts += [self.phi[k].ravel() for k in sorted(self.phi)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def equal(self, other: "ParameterPartition") -> bool:
        """Bitwise equality of every tensor."""
        if set(self.theta) != set(other.theta) or set(self.phi) != set(other.phi):
            return False
        return all(np.array_equal(self.theta[k], other.theta[k]) for k in self.theta) and all(
            np.array_equal(self.phi[k], other.phi[k]) for k in self.phi
        )


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParameterPartition:
    """Uniform(-s, s) with s = 1/sqrt(fan_in) for every tensor."""

    def uniform(fan_in, shape):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    theta = {}
    for layer, (d_in, d_out) in enumerate(cfg.layer_dims()):
        theta[f"rnn{layer}.W_x"] = uniform(d_in, (d_in, d_out))
        theta[f"rnn{layer}.W_h"] = uniform(d_out, (d_out, d_out))
        theta[f"rnn{layer}.b"] = uniform(d_in, (d_out,))
    for p in cfg.prediction_offsets:
        theta[f"nce.head{p}"] = uniform(cfg.context_dim, (cfg.context_dim, cfg.feature_dim))
    phi = {
        "cls.W": uniform(cfg.context_dim, (cfg.context_dim, cfg.num_classes)),
        "cls.b": uniform(cfg.context_dim, (cfg.num_classes,)),
    }
    return ParameterPartition(theta, phi)


def bind(graph: Graph, params: ParameterPartition) -> tuple[dict[str, Var], dict[str, Var]]:
    """Register every parameter as a named leaf on ``graph``."""
    theta = {k: graph.leaf(k, v) for k, v in params.theta.items()}
    phi = {k: graph.leaf(k, v) for k, v in params.phi.items()}
    return theta, phi


def encode(theta: Mapping[str, Var], inputs: Var, cfg: EncoderConfig) -> Var:
    """Context ``[batch, time, context_dim]``; frame t sees only frames <= t."""
    if inputs.ndim != 3 or inputs.shape[2] != cfg.feature_dim:
        raise ad.ShapeError(
            f"expected inputs [batch, time, {cfg.feature_dim}], got {inputs.shape}", node=len(inputs.graph), op="encode"
        )
    steps = inputs.shape[1]
    seq = inputs
    for layer in range(cfg.num_layers):
        w_h = theta[f"rnn{layer}.W_h"]
        proj = ad.add(ad.matmul(seq, theta[f"rnn{layer}.W_x"]), theta[f"rnn{layer}.b"])
        h = None
        outs = []
        for t in range(steps):
            pre = ad.slice_(proj, (slice(None), t))
            if h is not None:
                pre = ad.add(pre, ad.matmul(h, w_h))
            h = ad.tanh(pre)
            outs.append(h)
        seq = ad.stack(outs, axis=1)
    return seq


def classify(phi: Mapping[str, Var], context: Var, cfg: EncoderConfig) -> Var:
    """Per-frame log-softmax over blank + vocabulary."""
    if context.ndim != 3 or context.shape[2] != cfg.context_dim:
        raise ad.ShapeError(
            f"expected context [batch, time, {cfg.context_dim}], got {context.shape}", node=len(context.graph), op="classify"
        )
    logits = ad.add(ad.matmul(context, phi["cls.W"]), phi["cls.b"])
    return ad.log_softmax(logits, axis=-1)


def predict_log_probs(params: ParameterPartition, inputs: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Forward-only evaluation on a throwaway tape."""
    g = Graph()
    theta, phi = bind(g, params)
    x = g.constant(inputs)
    return classify(phi, encode(theta, x, cfg), cfg).value


# -- checkpoint file -------------------------------------------------------------
#
# magic  b"BLJCKPT1"            8 bytes
# hlen   uint64 little-endian   8 bytes
# header JSON utf-8             hlen bytes
# data   float64 little-endian, tensors back to back; offsets are relative to
#        the start of the data block.

MAGIC = b"BLJCKPT1"


def save_checkpoint(path, params: ParameterPartition, meta: Mapping | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for group, tensors in (("theta", params.theta), ("phi", params.phi)):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"format": 1, "tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ParameterPartition, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    data = memoryview(raw)[16 + hlen :]
    params = ParameterPartition()
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=entry["offset"]).reshape(entry["shape"]).astype(np.float64)
        getattr(params, entry["group"])[entry["name"]] = arr
    return params, header.get("meta", {})
