"""Score / probability / binary-mask machinery and the sparsity regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

EPS = 1e-4


def sigmoid(s) -> np.ndarray:
    return expit(np.asarray(s, dtype=np.float64))


def sigmoid_derivative(s) -> np.ndarray:
    theta = sigmoid(s)
    return theta * (1.0 - theta)


def clamp_for_inverse(theta, eps: float = EPS) -> np.ndarray:
    return np.clip(np.asarray(theta, dtype=np.float64), eps, 1.0 - eps)


def sigmoid_inverse(theta, eps: float = EPS) -> np.ndarray:
    """Scores for a probability mask, after clamping into [eps, 1 - eps]."""
    return logit(clamp_for_inverse(theta, eps))


@dataclass(frozen=True)
class BinaryMask:
    """A length-``n`` bit vector stored packed, little-endian within each byte."""

    packed: bytes
    n: int

    def __post_init__(self):
        if len(self.packed) != (self.n + 7) // 8:
            raise ValueError(f"{len(self.packed)} bytes cannot hold exactly {self.n} bits")

    @classmethod
    def from_bits(cls, bits) -> BinaryMask:
        arr = np.asarray(bits)
        if arr.ndim != 1:
            raise ValueError("mask bits must be one-dimensional")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        return cls(np.packbits(arr.astype(np.uint8), bitorder="little").tobytes(), arr.size)

    @classmethod
    def from_bytes(cls, data: bytes, n: int) -> BinaryMask:
        mask = cls(bytes(data), n)
        if n % 8 and mask.packed[-1] >> (n % 8):
            raise ValueError("nonzero pad bits after the last mask entry")
        return mask

    def bits(self) -> np.ndarray:
        raw = np.frombuffer(self.packed, dtype=np.uint8)
        return np.unpackbits(raw, count=self.n, bitorder="little")

    def ones(self) -> int:
        return int(np.unpackbits(np.frombuffer(self.packed, dtype=np.uint8)).sum())

    def __len__(self) -> int:
        return self.n


def sample_mask(theta, stream: np.random.Generator) -> BinaryMask:
    """One Bernoulli(theta_j) draw per entry; consumes exactly ``len(theta)`` uniforms."""
    theta = np.asarray(theta, dtype=np.float64)
    return BinaryMask.from_bits(stream.random(theta.shape[0]) < theta)


def sample_bits(theta, stream: np.random.Generator) -> np.ndarray:
    """Same draws as :func:`sample_mask`, returned unpacked as float multipliers."""
    theta = np.asarray(theta, dtype=np.float64)
    return (stream.random(theta.shape[0]) < theta).astype(np.float64)


@dataclass(frozen=True)
class RegularizerConfig:
    lam: float
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"parameter count must be positive, got {self.n}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


def score_gradient(loss_grad_multiplier, s, reg: RegularizerConfig, count: int = 1) -> np.ndarray:
    """Chain a multiplier gradient through the straight-through estimator to the scores.

    ``count`` is the number of examples summed into ``loss_grad_multiplier``.
    The regularizer enters once per example, so after :func:`apply_update`
    divides by the batch size it contributes ``(lam / n) * sigma'(s)`` exactly once.
    """
    ds = sigmoid_derivative(s)
    return (np.asarray(loss_grad_multiplier, dtype=np.float64) + count * reg.lam / reg.n) * ds


def apply_update(s, g, eta: float, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    s_new = np.asarray(s, dtype=np.float64) - (eta / batch_size) * np.asarray(g, dtype=np.float64)
    return s_new, sigmoid(s_new)


def regularizer_value(s, reg: RegularizerConfig) -> float:
    return reg.lam / reg.n * float(np.sum(sigmoid(s)))
