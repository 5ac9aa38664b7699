"""Comparison methods: deterministic Top-k masking and majority-vote SignSGD."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from fedsparse import rng
from fedsparse.mask import BinaryMask, sigmoid_inverse
from fedsparse.metrics import RoundMetrics, predict
from fedsparse.nn import FixedWeights
from fedsparse.protocol import (
    ClientState,
    RoundConfig,
    UplinkMessage,
    cross_entropy_grad,
    select_clients,
    train_scores,
    uplink_metrics,
)


@dataclass(frozen=True)
class TopKConfig:
    k_fraction: float

    def __post_init__(self):
        if not 0 < self.k_fraction <= 1:
            raise ValueError(f"k_fraction must lie in (0, 1], got {self.k_fraction}")

    def count(self, n: int) -> int:
        # tolerance keeps e.g. k = 1/3, n = 3 from rounding up to 2
        return min(n, math.ceil(self.k_fraction * n - 1e-9))


def topk_bits(s, k: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    # stable sort on -s: equal scores keep index order, so lower index wins ties
    keep = np.argsort(-s, kind="stable")[:k]
    bits = np.zeros(s.shape[0])
    bits[keep] = 1.0
    return bits


def topk_mask(s, cfg: TopKConfig) -> BinaryMask:
    s = np.asarray(s, dtype=np.float64)
    return BinaryMask.from_bits(topk_bits(s, cfg.count(s.shape[0])).astype(np.uint8))


def topk_client_train(client: ClientState, theta_down, weights: FixedWeights, cfg: RoundConfig,
                      stream: np.random.Generator, topk: TopKConfig,
                      data_grad=cross_entropy_grad) -> UplinkMessage:
    """Edge-popup style local training: forward with the current top-k mask, STE to all scores."""
    k = topk.count(weights.n)
    s = train_scores(client, theta_down, weights, cfg, stream, lambda s, _g: topk_bits(s, k), data_grad)
    return UplinkMessage(client.client_id, topk_mask(s, topk), client.dataset_size)


def sign_with_zero_positive(v) -> np.ndarray:
    return np.where(np.asarray(v) >= 0, 1, -1).astype(np.int8)


@dataclass
class SignSGDServerState:
    weights: np.ndarray  # real-valued, trainable
    eta_server: float
    round: int = 0
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("SignSGD weights must be finite")
        if not self.eta_server > 0:
            raise ValueError(f"eta_server must be positive, got {self.eta_server}")


def weight_gradient(net: FixedWeights, w, x, y, batch_size: int) -> np.ndarray:
    """Summed cross-entropy gradient w.r.t. real weights ``w`` (same topology as ``net``).

    The network is run as ``net`` with multiplier ``w / w_init``; since every
    frozen weight is nonzero this reproduces ``w`` exactly, and the multiplier
    gradient divided by ``w_init`` is the weight gradient.
    """
    w_init = net.flat()
    mult = np.asarray(w, dtype=np.float64) / w_init
    total = np.zeros(net.n)
    for lo in range(0, len(y), batch_size):
        total += cross_entropy_grad(net, mult, x[lo:lo + batch_size], y[lo:lo + batch_size])
    return total / w_init


def mv_signsgd_client(weights, client: ClientState, net: FixedWeights, cfg: RoundConfig) -> np.ndarray:
    """Sign of the local cross-entropy gradient accumulated over the local pass.

    Weights stay fixed during the pass, so every local epoch adds the same
    gradient and the sign equals that of a single pass.
    """
    if client.dataset_size == 0:
        raise ValueError(f"client {client.client_id} has an empty partition")
    g = weight_gradient(net, weights, client.data.features, client.data.labels, cfg.batch_size)
    return sign_with_zero_positive(g)


def mv_signsgd_aggregate(signs: list, state: SignSGDServerState) -> SignSGDServerState:
    if not signs:
        raise ValueError("majority vote needs at least one sign vector")
    n = state.weights.shape[0]
    votes = np.zeros(n, dtype=np.int64)
    for sv in signs:
        sv = np.asarray(sv)
        if sv.shape != (n,):
            raise ValueError(f"sign vector has shape {sv.shape}, expected ({n},)")
        votes += sv
    step = sign_with_zero_positive(votes)
    return SignSGDServerState(state.weights - state.eta_server * step, state.eta_server, state.round + 1, state.seed)


def signs_to_mask(signs) -> BinaryMask:
    return BinaryMask.from_bits((np.asarray(signs) > 0).astype(np.uint8))


def mv_signsgd_accuracy(state: SignSGDServerState, net: FixedWeights, eval_set) -> float:
    pred = predict(net, state.weights / net.flat(), eval_set.features)
    return float(np.mean(pred == eval_set.labels))


def run_signsgd_round(state: SignSGDServerState, clients: list[ClientState], net: FixedWeights, cfg: RoundConfig,
                      master_stream: np.random.Generator, evaluator=None,
                      workers: int = 1) -> tuple[SignSGDServerState, RoundMetrics]:
    chosen = [clients[i] for i in select_clients(len(clients), cfg.participation, master_stream)]

    def job(client):
        return mv_signsgd_client(state.weights, client, net, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            signs = list(pool.map(job, chosen))
    else:
        signs = [job(c) for c in chosen]
    nxt = mv_signsgd_aggregate(signs, state)
    acc = evaluator(nxt) if evaluator else float("nan")
    uplinks = [UplinkMessage(c.client_id, signs_to_mask(sv), c.dataset_size) for c, sv in zip(chosen, signs)]
    # theta_mean column reports the fraction of +1 votes in the aggregated step
    vote_bits = (nxt.weights < state.weights).astype(np.float64)
    return nxt, uplink_metrics(nxt.round, uplinks, vote_bits, acc)


def initial_signsgd_state(net: FixedWeights, eta_server: float, seed: int) -> SignSGDServerState:
    return SignSGDServerState(net.flat().copy(), eta_server, 0, seed)


def topk_uplink_from_theta(theta, topk: TopKConfig) -> BinaryMask:
    """Uplink a client would send with a zero learning rate."""
    return topk_mask(sigmoid_inverse(theta), topk)


__all__ = [
    "TopKConfig", "topk_mask", "topk_client_train", "mv_signsgd_client", "mv_signsgd_aggregate",
    "SignSGDServerState", "run_signsgd_round", "initial_signsgd_state", "signs_to_mask",
    "sign_with_zero_positive", "mv_signsgd_accuracy", "weight_gradient",
]
