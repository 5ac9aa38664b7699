"""Uplink entropy accounting, model evaluation and CSV emission."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsparse.mask import BinaryMask, sample_bits
from fedsparse.nn import FixedWeights, forward_masked

METRICS_HEADER = ["round", "method", "lambda", "accuracy", "bpp_avg", "mask_density_avg", "theta_mean"]
CLIENT_HEADER = ["round", "client_id", "bpp", "density", "packed_bpp"]
EVAL_MODES = ("sampled", "expected", "thresholded")


def binary_entropy(p1: float) -> float:
    """Entropy in bits of a Bernoulli(p1) source, with 0 log 0 = 0."""
    h = 0.0
    for p in (p1, 1.0 - p1):
        if p > 0.0:
            h -= p * math.log2(p)
    return h


def estimate_entropy(mask: BinaryMask) -> float:
    """Empirical bits per parameter: binary entropy of the observed fraction of ones."""
    if mask.n <= 0:
        raise ValueError("entropy of an empty mask is undefined")
    return binary_entropy(mask.ones() / mask.n)


def round_bpp(masks: list[BinaryMask]) -> tuple[list[float], float]:
    """Per-client entropies and their unweighted mean."""
    if not masks:
        raise ValueError("round_bpp needs at least one uplink")
    per = [estimate_entropy(m) for m in masks]
    return per, float(np.mean(per))


def packed_bpp(mask: BinaryMask) -> float:
    return 8.0 * len(mask.packed) / mask.n


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    bpp_per_client: list[float]
    bpp_avg: float
    mask_density_avg: float
    theta_mean: float
    client_ids: list[int] = field(default_factory=list)
    density_per_client: list[float] = field(default_factory=list)
    packed_bpp_per_client: list[float] = field(default_factory=list)


def eval_multiplier(theta: np.ndarray, mode: str, stream) -> np.ndarray:
    if mode == "sampled":
        return sample_bits(theta, stream)
    if mode == "expected":
        return np.asarray(theta, dtype=np.float64)
    if mode == "thresholded":
        return (np.asarray(theta) > 0.5).astype(np.float64)
    raise ValueError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")


def predict(weights: FixedWeights, multiplier, x, chunk: int = 1024) -> np.ndarray:
    out = []
    for lo in range(0, len(x), chunk):
        logits, _ = forward_masked(weights, multiplier, x[lo:lo + chunk])
        # argmax returns the first maximum, i.e. ties go to the lowest class index
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.empty(0, np.int64)


def evaluate(theta, weights: FixedWeights, eval_set, mode: str = "sampled", stream=None) -> float:
    """Accuracy of the network masked per ``mode`` on ``eval_set``.

    ``sampled`` draws one mask from ``stream`` for the whole pass; ``expected``
    uses ``theta`` itself as the multiplier; ``thresholded`` keeps entries above 1/2.
    """
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    if mode == "sampled" and stream is None:
        raise ValueError("sampled evaluation needs a random stream")
    m = eval_multiplier(theta, mode, stream)
    pred = predict(weights, m, eval_set.features)
    return float(np.mean(pred == eval_set.labels))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


class MetricsWriter:
    """Appends one row per round to ``metrics.csv`` and per-client rows to ``client_bpp.csv``."""

    def __init__(self, out_dir, method: str, lam: float, append: bool = False):
        self.out_dir = Path(out_dir)
        self.method = method
        self.lam = lam
        self.metrics_path = self.out_dir / "metrics.csv"
        self.client_path = self.out_dir / "client_bpp.csv"
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if not (append and self.metrics_path.exists()):
                self._write(self.metrics_path, "w", [METRICS_HEADER])
                self._write(self.client_path, "w", [CLIENT_HEADER])
        except OSError as exc:
            raise OSError(f"cannot initialise metrics files in {self.out_dir}: {exc}") from exc

    @staticmethod
    def _write(path: Path, mode: str, rows) -> None:
        with open(path, mode, newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)

    def append(self, m: RoundMetrics) -> None:
        row = [m.round, self.method, _fmt(self.lam), _fmt(m.accuracy), _fmt(m.bpp_avg),
               _fmt(m.mask_density_avg), _fmt(m.theta_mean)]
        clients = [
            [m.round, cid, _fmt(b), _fmt(d), _fmt(p)]
            for cid, b, d, p in zip(m.client_ids, m.bpp_per_client, m.density_per_client, m.packed_bpp_per_client)
        ]
        try:
            self._write(self.metrics_path, "a", [row])
            self._write(self.client_path, "a", clients)
        except OSError as exc:
            raise OSError(f"round {m.round}: cannot append metrics under {self.out_dir}: {exc}") from exc


def write_metrics_csv(history, out_dir, method: str, lam: float) -> Path:
    """Write a whole history at once, in the format :class:`MetricsWriter` appends."""
    writer = MetricsWriter(out_dir, method, lam)
    for _, metrics in history.entries:
        writer.append(metrics)
    return writer.metrics_path
