"""Bias-free dense/convolutional networks over frozen signed-constant weights.

The trainable quantity is a per-weight multiplier: layer ``l`` computes with
``W_l * M_l`` where ``W_l`` is frozen and ``M_l`` is the slice of a flat
multiplier vector.  The flat layout concatenates every weighted layer's
multiplier in topology order, each in row-major order of its weight tensor
(Dense ``(out, in)``, Conv2D ``(out_ch, in_ch, k, k)``).

All inputs carry a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fedsparse.rng import layer_stream


class TopologyError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2D:
    window: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2D, ReLU, MaxPool2D, Flatten]


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise TopologyError(f"{layer} expects input ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise TopologyError(f"{layer} expects input ({layer.in_channels}, H, W), got {shape}")
        _, h, w = shape
        oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise TopologyError(f"{layer} leaves no output positions for input {shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3:
            raise TopologyError(f"{layer} expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        if h // layer.window < 1 or w // layer.window < 1:
            raise TopologyError(f"{layer} window larger than input {shape}")
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    if isinstance(layer, ReLU):
        return shape
    raise TopologyError(f"unknown layer spec {layer!r}")


def _weight_shape(layer: LayerSpec) -> tuple[int, ...] | None:
    if isinstance(layer, Dense):
        return (layer.out_features, layer.in_features)
    if isinstance(layer, Conv2D):
        return (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
    return None


@dataclass(frozen=True)
class NetworkTopology:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes (without batch axis): input, then after every layer."""
        if not self.layers:
            raise TopologyError("topology has no layers")
        out = [self.input_shape]
        for layer in self.layers:
            out.append(_out_shape(layer, out[-1]))
        if len(out[-1]) != 1:
            raise TopologyError(f"network output must be a flat logit vector, got {out[-1]}")
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    @property
    def weighted(self) -> list[tuple[int, tuple[int, ...]]]:
        """(layer index, weight shape) for every Dense/Conv2D layer."""
        return [(i, s) for i, layer in enumerate(self.layers) if (s := _weight_shape(layer))]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.weighted)


def mlp_s() -> NetworkTopology:
    return NetworkTopology((784,), (Dense(784, 256), ReLU(), Dense(256, 10)))


def conv_s() -> NetworkTopology:
    return NetworkTopology(
        (1, 28, 28),
        (
            Conv2D(1, 16, 3, padding=1), ReLU(),
            Conv2D(16, 32, 3, padding=1), ReLU(),
            MaxPool2D(2),
            Flatten(),
            Dense(32 * 14 * 14, 10),
        ),
    )


REFERENCE_TOPOLOGIES = {"mlp-s": mlp_s, "conv-s": conv_s}


@dataclass
class FixedWeights:
    topology: NetworkTopology
    seed: int
    tensors: list[np.ndarray]
    sigma_per_layer: list[float]
    offsets: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.offsets[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])


def build_network(seed: int, topology: NetworkTopology) -> FixedWeights:
    """Draw every weight uniformly from {-sigma, +sigma}, sigma = sqrt(2 / fan_in).

    Each weighted layer gets its own stream keyed by (seed, layer index), so the
    result depends only on ``(seed, topology)``.
    """
    topology.shapes()
    tensors, sigmas, offsets = [], [], [0]
    for idx, shape in topology.weighted:
        fan_in = math.prod(shape[1:])
        sigma = math.sqrt(2.0 / fan_in)
        bits = layer_stream(seed, idx).integers(0, 2, size=shape, dtype=np.int8)
        tensors.append(np.where(bits == 1, sigma, -sigma))
        sigmas.append(sigma)
        offsets.append(offsets[-1] + math.prod(shape))
    return FixedWeights(topology, seed, tensors, sigmas, offsets)


@dataclass
class ActivationCache:
    """Per-layer state captured by one forward pass; consumed by one backward pass."""

    weights: FixedWeights
    records: list = field(default_factory=list)
    consumed: bool = False


def _im2col(x: np.ndarray, layer: Conv2D) -> tuple[np.ndarray, tuple[int, int]]:
    p, k, st = layer.padding, layer.kernel, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::st, ::st]
    # (B, C, OH, OW, k, k) -> (B, C*k*k, OH*OW)
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow), (oh, ow)


def _col2im(cols: np.ndarray, layer: Conv2D, in_shape: tuple[int, ...]) -> np.ndarray:
    b = cols.shape[0]
    c, h, w = in_shape
    p, k, st = layer.padding, layer.kernel, layer.stride
    oh = (h + 2 * p - k) // st + 1
    ow = (w + 2 * p - k) // st + 1
    cols = cols.reshape(b, c, k, k, oh, ow)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + st * oh:st, j:j + st * ow:st] += cols[:, :, i, j]
    return out[:, :, p:p + h, p:p + w]


def _check_multiplier(weights: FixedWeights, multiplier) -> np.ndarray:
    m = np.asarray(multiplier, dtype=np.float64)
    if m.ndim != 1 or m.shape[0] != weights.n:
        raise ValueError(f"multiplier must have length {weights.n}, got shape {m.shape}")
    return m


def forward_masked(weights: FixedWeights, multiplier, x) -> tuple[np.ndarray, ActivationCache]:
    """Evaluate the network with each weight scaled by its multiplier entry.

    ``x`` has shape ``(batch, *input_shape)``; returns ``(batch, classes)`` logits.
    """
    m = _check_multiplier(weights, multiplier)
    topo = weights.topology
    a = np.asarray(x, dtype=np.float64)
    if a.shape[1:] != topo.input_shape:
        raise ValueError(f"input must have shape (batch, {topo.input_shape}), got {a.shape}")
    cache = ActivationCache(weights)
    widx = 0
    for layer in topo.layers:
        if isinstance(layer, (Dense, Conv2D)):
            w = weights.tensors[widx]
            lo, hi = weights.offsets[widx], weights.offsets[widx + 1]
            w_eff = w * m[lo:hi].reshape(w.shape)
            widx += 1
            if isinstance(layer, Dense):
                cache.records.append((a, w_eff))
                a = a @ w_eff.T
            else:
                cols, (oh, ow) = _im2col(a, layer)
                cache.records.append((cols, w_eff, a.shape[1:]))
                a = np.matmul(w_eff.reshape(w.shape[0], -1), cols).reshape(a.shape[0], w.shape[0], oh, ow)
        elif isinstance(layer, ReLU):
            cache.records.append(a)
            a = np.where(a > 0, a, 0.0)
        elif isinstance(layer, MaxPool2D):
            b, c, h, w_ = a.shape
            k = layer.window
            oh, ow = h // k, w_ // k
            blocks = a[:, :, :oh * k, :ow * k].reshape(b, c, oh, k, ow, k)
            blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
            arg = blocks.argmax(axis=-1)
            gap = math.inf
            if k > 1:
                top2 = np.sort(blocks, axis=-1)[..., -2:]
                # exact 0/0 ties come from upstream ReLU clamps and carry no gradient
                live = (top2[..., 1] != 0) | (top2[..., 0] != 0)
                if live.any():
                    gap = float((top2[..., 1] - top2[..., 0])[live].min())
            cache.records.append((arg, a.shape, gap))
            a = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            cache.records.append(a.shape)
            a = a.reshape(a.shape[0], -1)
    return a, cache


def backward_multiplier(cache: ActivationCache, loss_grad_logits) -> np.ndarray:
    """Gradient of the (batch-summed) loss with respect to every multiplier entry.

    Gates (ReLU, MaxPool) stay frozen at their forward-pass values.  A cache can
    be consumed only once.
    """
    if cache.consumed:
        raise StaleCacheError("activation cache already consumed by a backward pass")
    cache.consumed = True
    weights = cache.weights
    topo = weights.topology
    d = np.asarray(loss_grad_logits, dtype=np.float64)
    grads: list[np.ndarray] = [None] * len(weights.tensors)
    widx = len(weights.tensors)
    for layer, rec in zip(reversed(topo.layers), reversed(cache.records)):
        if isinstance(layer, Dense):
            widx -= 1
            a_in, w_eff = rec
            grads[widx] = (d.T @ a_in) * weights.tensors[widx]
            d = d @ w_eff
        elif isinstance(layer, Conv2D):
            widx -= 1
            cols, w_eff, in_shape = rec
            b, oc = d.shape[:2]
            d2 = d.reshape(b, oc, -1)
            g_eff = np.einsum("bop,bqp->oq", d2, cols).reshape(w_eff.shape)
            grads[widx] = g_eff * weights.tensors[widx]
            dcols = np.matmul(w_eff.reshape(oc, -1).T, d2)
            d = _col2im(dcols, layer, in_shape)
        elif isinstance(layer, ReLU):
            d = d * (rec > 0)
        elif isinstance(layer, MaxPool2D):
            arg, in_shape, _ = rec
            b, c, h, w_ = in_shape
            k = layer.window
            oh, ow = h // k, w_ // k
            blocks = np.zeros((b, c, oh, ow, k * k))
            np.put_along_axis(blocks, arg[..., None], d[..., None], axis=-1)
            blocks = blocks.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
            full = np.zeros(in_shape)
            full[:, :, :oh * k, :ow * k] = blocks.reshape(b, c, oh * k, ow * k)
            d = full
        elif isinstance(layer, Flatten):
            d = d.reshape(rec)
    return np.concatenate([g.ravel() for g in grads])


def kink_margin(cache: ActivationCache) -> float:
    """Distance of the cached forward pass from the nearest gate switch.

    Smallest |ReLU input| or MaxPool top-two gap; finite-difference checks are
    only meaningful when this is comfortably larger than the probe step.
    """
    margin = math.inf
    for layer, rec in zip(cache.weights.topology.layers, cache.records):
        if isinstance(layer, ReLU) and rec.size:
            margin = min(margin, float(np.abs(rec).min()))
        elif isinstance(layer, MaxPool2D):
            margin = min(margin, rec[2])
    return margin


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Batch-summed softmax cross-entropy and its gradient w.r.t. the logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    c = z.shape[1]
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"label out of range for {c} classes: {y[(y < 0) | (y >= c)][:5]}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.sum(log_norm - shifted[rows, y]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    return loss, grad
