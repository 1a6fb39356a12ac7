"""Minimal differentiable numerics: linear heads, softmax/sigmoid, SGD, checks.

Everything runs in float64; matrices are plain numpy arrays. Losses elsewhere
in the package hand out closed-form gradients (cross-entropy and binary
cross-entropy through softmax/sigmoid, smooth-L1), so there is no autodiff
tape here — just the forward kernels, the optimizer, a central-difference
gradient checker and a binary checkpoint format for head parameters.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

# A "Matrix" throughout the package is a 2-D float64 ndarray.
Matrix = np.ndarray


@dataclass
class LinearHead:
    """Affine scoring head with SGD momentum buffers.

    ``w`` has shape (feature_dim, out_dim), ``b`` shape (out_dim,). Momentum
    buffers mirror the parameter shapes and start at zero.
    """

    w: np.ndarray
    b: np.ndarray
    vw: np.ndarray = field(default=None)  # type: ignore[assignment]
    vb: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.vw is None:
            self.vw = np.zeros_like(self.w)
        if self.vb is None:
            self.vb = np.zeros_like(self.b)
        if self.vw.shape != self.w.shape or self.vb.shape != self.b.shape:
            raise ValueError("momentum buffer shapes must match parameter shapes")

    @classmethod
    def init(
        cls, feature_dim: int, out_dim: int, rng: np.random.Generator, scale: float = 0.01
    ) -> "LinearHead":
        w = rng.normal(0.0, scale, size=(feature_dim, out_dim))
        return cls(w=w, b=np.zeros(out_dim))

    @property
    def feature_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "LinearHead":
        return LinearHead(self.w.copy(), self.b.copy(), self.vw.copy(), self.vb.copy())


@dataclass
class HeadGrads:
    """Parameter gradients for one LinearHead."""

    dw: np.ndarray
    db: np.ndarray

    @classmethod
    def zeros_like(cls, head: LinearHead) -> "HeadGrads":
        return cls(np.zeros_like(head.w), np.zeros_like(head.b))

    def add_(self, other: "HeadGrads", factor: float = 1.0) -> None:
        self.dw += factor * other.dw
        self.db += factor * other.db

    def scale_(self, factor: float) -> None:
        self.dw *= factor
        self.db *= factor


@dataclass
class LossValue:
    """A scalar loss plus its gradient w.r.t. the scores the loss consumed.

    For losses applied after a softmax or sigmoid the gradient is w.r.t. the
    pre-activation logits (the closed form through the nonlinearity); for the
    image-score loss it is w.r.t. the aggregated image scores. Each loss
    documents which.
    """

    value: float
    grad: np.ndarray


def linear_forward(head: LinearHead, features: Matrix) -> Matrix:
    """Affine map ``features @ w + b`` for (N, feature_dim) inputs."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise ValueError(
            f"feature shape {features.shape} does not match head input dim {head.feature_dim}"
        )
    return features @ head.w + head.b


def softmax_over_classes(x: Matrix) -> Matrix:
    """Column-wise softmax of a (classes, proposals) matrix; columns sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_over_proposals(x: Matrix) -> Matrix:
    """Row-wise softmax; implemented as the exact transpose of the column form."""
    return softmax_over_classes(np.asarray(x).T).T


def softmax_backward_columns(probs: Matrix, grad_probs: Matrix) -> Matrix:
    """Gradient through a column-wise softmax given dL/dprobs."""
    inner = (grad_probs * probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - inner)


def softmax_backward_rows(probs: Matrix, grad_probs: Matrix) -> Matrix:
    """Gradient through a row-wise softmax given dL/dprobs."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def sigmoid(x: Matrix) -> Matrix:
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sgd_step(
    head: LinearHead,
    grads: HeadGrads,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """One SGD-with-momentum update, in place.

    Classic formulation: decay is added to the gradient before the momentum
    accumulation, i.e. ``buf = momentum * buf + grad + weight_decay * param``
    followed by ``param -= lr * buf``.
    """
    if grads.dw.shape != head.w.shape or grads.db.shape != head.b.shape:
        raise ValueError("gradient shapes must match parameter shapes")
    head.vw *= momentum
    head.vw += grads.dw + weight_decay * head.w
    head.vb *= momentum
    head.vb += grads.db + weight_decay * head.b
    head.w -= lr * head.vw
    head.b -= lr * head.vb


def finite_diff_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: np.ndarray,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(x)`` must deterministically return ``(value, grad)`` with ``grad``
    shaped like ``x``. The relative error per coordinate uses an absolute
    floor of 1e-8 in the denominator.
    """
    point = np.asarray(point, dtype=np.float64)
    _, analytic = fn(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ValueError("analytic gradient shape must match the probed point")
    flat = point.ravel().copy()
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + epsilon
        up, _ = fn(flat.reshape(point.shape))
        flat[k] = orig - epsilon
        down, _ = fn(flat.reshape(point.shape))
        flat[k] = orig
        numeric = (up - down) / (2.0 * epsilon)
        ana = analytic.ravel()[k]
        err = abs(numeric - ana) / max(abs(numeric), abs(ana), 1e-8)
        worst = max(worst, err)
    return worst


# Checkpoint format (little-endian throughout):
#   magic b"LNHD", uint32 version=1, uint32 head count, then per head:
#   uint32 name length, utf-8 name bytes, uint32 in_dim, uint32 out_dim,
#   in_dim*out_dim float64 weights (row-major), out_dim float64 biases.
_MAGIC = b"LNHD"
_VERSION = 1


def save_checkpoint(heads: dict[str, LinearHead], path: str | Path) -> None:
    """Serialize head parameters (weights and biases, not momentum) to ``path``."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(heads)))
    for name, head in heads.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", head.feature_dim, head.out_dim))
        buf.write(np.ascontiguousarray(head.w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(head.b, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, LinearHead]:
    """Read a checkpoint written by :func:`save_checkpoint`; buffers start at zero."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"not a head checkpoint: {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    heads: dict[str, LinearHead] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        in_dim, out_dim = struct.unpack_from("<II", data, offset)
        offset += 8
        w = np.frombuffer(data, dtype="<f8", count=in_dim * out_dim, offset=offset)
        offset += 8 * in_dim * out_dim
        b = np.frombuffer(data, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        heads[name] = LinearHead(
            w.reshape(in_dim, out_dim).astype(np.float64), b.astype(np.float64)
        )
    return heads
