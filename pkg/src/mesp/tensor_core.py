"""Dense tensor kernels with hand-derived backward passes.

Every kernel here is a pure function of numpy arrays.  There is no autograd:
each forward has a matching ``*_backward`` that takes the upstream gradient
and whatever the forward saved, and returns input gradients.

Two precision modes exist.  ``TEST`` (float64) is used for finite-difference
and equivalence checks, ``RUN`` (float32) for benchmark-style runs.  Kernels
keep the dtype of their inputs and never broadcast beyond leading batch dims.
"""

from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import dataclass

import numpy as np

_ids = itertools.count(1)


class DType(enum.Enum):
    TEST = "float64"
    RUN = "float32"

    @property
    def np(self) -> np.dtype:
        return np.dtype(self.value)

    @property
    def width(self) -> int:
        return self.np.itemsize

    @classmethod
    def parse(cls, value: "str | DType") -> "DType":
        if isinstance(value, DType):
            return value
        aliases = {"64": cls.TEST, "float64": cls.TEST, "test": cls.TEST,
                   "32": cls.RUN, "float32": cls.RUN, "run": cls.RUN}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown dtype mode {value!r}; use float64 or float32") from None


@dataclass(eq=False)
class Tensor:
    """A numpy buffer with an identity the memory ledger can follow."""

    data: np.ndarray
    tag: str = "intermediate"
    block: int | None = None
    id: int = 0

    def __post_init__(self):
        if not self.id:
            self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def elem_width(self) -> int:
        return self.data.dtype.itemsize

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.elem_width


class InvalidRowWarning(RuntimeWarning):
    """A softmax row had no unmasked entry and was returned as zeros."""


class EmptyBatchWarning(RuntimeWarning):
    """Every target in a cross-entropy call was the ignore index."""


def _check_same(name: str, *arrays: np.ndarray) -> None:
    shapes = [a.shape for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ValueError(f"{name}: shape mismatch {' vs '.join(map(str, shapes))}")


# === MATMUL ===

def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched ``x @ w`` for x of shape [..., p] and a 2-D w of shape [p, q]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: cannot multiply {x.shape} by {w.shape}")
    return np.matmul(x, w)


def matmul_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (dx, dw) for y = x @ w given g = dL/dy.

    dx = g wᵀ and dw = Σ_batch xᵀ g, with every leading axis flattened into
    the batch sum.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or g.shape != x.shape[:-1] + (w.shape[1],):
        raise ValueError(f"matmul_backward: inconsistent shapes g={g.shape} x={x.shape} w={w.shape}")
    dx = np.matmul(g, w.T)
    dw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return dx, dw


# === SOFTMAX ===

def softmax_row(s: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    ``-inf`` entries get probability exactly zero.  A row in which every entry
    is ``-inf`` comes back as all zeros and raises :class:`InvalidRowWarning`.
    """
    m = np.max(s, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    if dead.any():
        warnings.warn(f"softmax_row: {int(dead.sum())} fully masked row(s) returned as zeros",
                      InvalidRowWarning, stacklevel=2)
        m = np.where(dead, 0.0, m).astype(s.dtype)
    e = np.exp(s - m)
    z = np.sum(e, axis=-1, keepdims=True)
    z = np.where(z == 0, 1.0, z).astype(s.dtype)
    return e / z


def softmax_backward(dalpha: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """dscores = α ⊙ (dα − Σ_row(dα ⊙ α))."""
    _check_same("softmax_backward", dalpha, alpha)
    return alpha * (dalpha - np.sum(dalpha * alpha, axis=-1, keepdims=True))


# === RMSNORM ===

def rmsnorm_forward(x: np.ndarray, gamma: np.ndarray, eps: float):
    """Return (xhat, out, rms) with rms = sqrt(mean(x²) + eps) over the last axis."""
    if gamma.shape != (x.shape[-1],):
        raise ValueError(f"rmsnorm_forward: gamma {gamma.shape} does not match features of {x.shape}")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        xhat = x / rms
    xhat = np.where(rms == 0, 0.0, xhat).astype(x.dtype)
    return xhat, xhat * gamma, rms


def rmsnorm_backward(dout: np.ndarray, xhat: np.ndarray, gamma: np.ndarray, rms: np.ndarray) -> np.ndarray:
    # gamma is frozen: fold it into the upstream gradient, then apply the unscaled rule
    _check_same("rmsnorm_backward", dout, xhat)
    if rms.shape != xhat.shape[:-1] + (1,):
        raise ValueError(f"rmsnorm_backward: rms {rms.shape} does not match {xhat.shape}")
    dxhat = dout * gamma
    return (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)) / rms


# === SILU ===

def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """g ⊙ σ(x)(1 + x(1 − σ(x)))."""
    _check_same("silu_backward", g, x)
    sig = sigmoid(x)
    return g * (sig * (1.0 + x * (1.0 - sig)))


# === LOSS ===

IGNORE_INDEX = -1


def cross_entropy(logits: np.ndarray, targets: np.ndarray, grad: bool = True):
    """Mean token cross-entropy and its gradient (``None`` when ``grad=False``).

    ``targets`` equal to :data:`IGNORE_INDEX` are skipped; the mean runs over
    the remaining positions only.  If nothing remains the loss is 0, the
    gradient is zeros and :class:`EmptyBatchWarning` is raised.
    """
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    bad = (targets != IGNORE_INDEX) & ((targets < 0) | (targets >= V))
    if bad.any():
        raise ValueError(f"cross_entropy: target {int(targets[bad][0])} outside [0, {V})")
    keep = targets != IGNORE_INDEX
    count = int(keep.sum())
    if count == 0:
        warnings.warn("cross_entropy: every target is ignored", EmptyBatchWarning, stacklevel=2)
        return 0.0, (np.zeros_like(logits) if grad else None)

    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - lse
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(np.where(keep, picked, 0.0)) / count)
    if not grad:
        return loss, None

    probs = np.exp(logp)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    dlogits = np.where(keep[..., None], (probs - onehot) / count, 0.0).astype(logits.dtype)
    return loss, dlogits
