"""Rounds of federated mask training: downlink, local training, uplink, aggregation."""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fedsparse import rng
from fedsparse.data import Dataset
from fedsparse.mask import (
    BinaryMask,
    RegularizerConfig,
    apply_update,
    sample_bits,
    sample_mask,
    score_gradient,
    sigmoid,
    sigmoid_inverse,
)
from fedsparse.metrics import RoundMetrics, packed_bpp, round_bpp
from fedsparse.nn import FixedWeights, backward_multiplier, cross_entropy, forward_masked


@dataclass(frozen=True)
class RoundConfig:
    local_epochs: int = 3
    batch_size: int = 128
    eta: float = 0.1
    lam: float = 0.0
    participation: float = 1.0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be positive, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")


@dataclass
class ClientState:
    client_id: int
    data: Dataset

    @property
    def dataset_size(self) -> int:
        return len(self.data)


@dataclass
class ServerState:
    theta: np.ndarray
    round: int
    seed: int


@dataclass(frozen=True)
class UplinkMessage:
    client_id: int
    mask: BinaryMask
    dataset_size: int


@dataclass
class HistoryLog:
    initial_theta_hash: str = ""
    entries: list[tuple[str, RoundMetrics]] = field(default_factory=list)

    def append(self, theta_hash: str, metrics: RoundMetrics) -> None:
        self.entries.append((theta_hash, metrics))

    def __len__(self) -> int:
        return len(self.entries)


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def initial_theta(seed: int, n: int) -> np.ndarray:
    return rng.stream(seed, rng.INIT).random(n)


def cross_entropy_grad(weights: FixedWeights, multiplier, x, y) -> np.ndarray:
    """Batch-summed cross-entropy gradient with respect to the multiplier."""
    logits, cache = forward_masked(weights, multiplier, x)
    _, dlogits = cross_entropy(logits, y)
    return backward_multiplier(cache, dlogits)


DataGrad = Callable[[FixedWeights, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def local_batches(n_examples: int, cfg: RoundConfig, stream: np.random.Generator):
    """Index arrays for ``local_epochs`` reshuffled passes; the short last batch is kept."""
    for _ in range(cfg.local_epochs):
        order = stream.permutation(n_examples)
        for lo in range(0, n_examples, cfg.batch_size):
            yield order[lo:lo + cfg.batch_size]


def _check_down(client: ClientState, theta_down, weights: FixedWeights) -> np.ndarray:
    if client.dataset_size == 0:
        raise ValueError(f"client {client.client_id} has an empty partition")
    theta_down = np.asarray(theta_down, dtype=np.float64)
    if theta_down.shape != (weights.n,):
        raise ValueError(f"downlink mask has shape {theta_down.shape}, network has {weights.n} parameters")
    return theta_down


def train_scores(client, theta_down, weights, cfg, stream, choose_mask, data_grad: DataGrad = cross_entropy_grad):
    """Shared local loop: per mini-batch, pick a mask from the scores, backprop, update."""
    theta_down = _check_down(client, theta_down, weights)
    reg = RegularizerConfig(cfg.lam, weights.n)
    s = sigmoid_inverse(theta_down)
    x, y = client.data.features, client.data.labels
    for idx in local_batches(client.dataset_size, cfg, stream):
        m = choose_mask(s, stream)
        g = score_gradient(data_grad(weights, m, x[idx], y[idx]), s, reg, count=len(idx))
        s, _ = apply_update(s, g, cfg.eta, len(idx))
    return s


def client_local_train(client: ClientState, theta_down, weights: FixedWeights, cfg: RoundConfig,
                       stream: np.random.Generator, data_grad: DataGrad = cross_entropy_grad) -> UplinkMessage:
    """Regularized stochastic-mask training on one client; uplinks a sampled binary mask."""
    s = train_scores(client, theta_down, weights, cfg, stream,
                     lambda s, g: sample_bits(sigmoid(s), g), data_grad)
    return UplinkMessage(client.client_id, sample_mask(sigmoid(s), stream), client.dataset_size)


def server_aggregate(uplinks: list[UplinkMessage]) -> np.ndarray:
    """Dataset-size-weighted average of the uplinked bits."""
    if not uplinks:
        raise ValueError("cannot aggregate an empty list of uplinks")
    n = uplinks[0].mask.n
    total = np.zeros(n)
    size = 0
    for up in uplinks:
        if up.mask.n != n:
            raise ValueError(f"client {up.client_id} sent {up.mask.n} bits, expected {n}")
        total += up.dataset_size * up.mask.bits().astype(np.float64)
        size += up.dataset_size
    if size <= 0:
        raise ValueError("total dataset size of the uplinks must be positive")
    return total / size


def select_clients(n_clients: int, participation: float, stream: np.random.Generator) -> list[int]:
    """Positions of ``ceil(participation * K)`` clients, uniform without replacement."""
    k = math.ceil(participation * n_clients - 1e-12)
    return sorted(int(i) for i in stream.choice(n_clients, size=k, replace=False))


def uplink_metrics(round_index: int, uplinks: list[UplinkMessage], theta: np.ndarray, accuracy: float) -> RoundMetrics:
    per, avg = round_bpp([u.mask for u in uplinks])
    density = [u.mask.ones() / u.mask.n for u in uplinks]
    return RoundMetrics(
        round=round_index,
        accuracy=accuracy,
        bpp_per_client=per,
        bpp_avg=avg,
        mask_density_avg=float(np.mean(density)),
        theta_mean=float(np.mean(theta)),
        client_ids=[u.client_id for u in uplinks],
        density_per_client=density,
        packed_bpp_per_client=[packed_bpp(u.mask) for u in uplinks],
    )


Evaluator = Callable[[np.ndarray, int], float]


def collect_uplinks(server: ServerState, clients: list[ClientState], weights: FixedWeights, cfg: RoundConfig,
                    master_stream: np.random.Generator, client_fn=client_local_train,
                    workers: int = 1) -> list[UplinkMessage]:
    if not clients:
        raise ValueError("a round needs at least one client")
    chosen = [clients[i] for i in select_clients(len(clients), cfg.participation, master_stream)]

    def job(client: ClientState) -> UplinkMessage:
        stream = rng.client_stream(server.seed, client.client_id, server.round)
        return client_fn(client, server.theta, weights, cfg, stream)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, chosen))
    return [job(c) for c in chosen]


def run_round(server: ServerState, clients: list[ClientState], weights: FixedWeights, cfg: RoundConfig,
              master_stream: np.random.Generator, evaluator: Evaluator | None = None,
              client_fn=client_local_train, workers: int = 1,
              uplink_sink: list | None = None) -> tuple[ServerState, RoundMetrics]:
    """One communication round. Results depend only on the seeds, never on ``workers``."""
    uplinks = collect_uplinks(server, clients, weights, cfg, master_stream, client_fn, workers)
    if uplink_sink is not None:
        uplink_sink.extend(uplinks)
    theta = server_aggregate(uplinks)
    nxt = ServerState(theta, server.round + 1, server.seed)
    acc = evaluator(theta, nxt.round) if evaluator else float("nan")
    return nxt, uplink_metrics(nxt.round, uplinks, theta, acc)
