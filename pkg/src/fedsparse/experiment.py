"""End-to-end experiment driver, checkpoints and resume."""

from __future__ import annotations

import functools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsparse import config as config_mod
from fedsparse import rng
from fedsparse.baselines import (
    SignSGDServerState,
    TopKConfig,
    initial_signsgd_state,
    mv_signsgd_accuracy,
    run_signsgd_round,
    topk_client_train,
)
from fedsparse.config import ExperimentConfig
from fedsparse.data import (
    Dataset,
    PartitionSpec,
    generate_synthetic,
    load_cifar_binary,
    load_idx,
    partition,
    split_holdout,
)
from fedsparse.metrics import MetricsWriter, RoundMetrics, eval_multiplier, predict
from fedsparse.nn import FixedWeights, build_network
from fedsparse.protocol import (
    ClientState,
    HistoryLog,
    RoundConfig,
    ServerState,
    client_local_train,
    initial_theta,
    run_round,
    theta_hash,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    seed: int
    round: int
    state: np.ndarray  # theta for mask methods, real weights for mv_signsgd
    config_text: str


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian: magic, version u32, seed u64, round u64, n u64, config length u32,
    UTF-8 config, then n float64 values."""
    path = Path(path)
    cfg = ckpt.config_text.encode("utf-8")
    state = np.ascontiguousarray(ckpt.state, dtype="<f8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQQQI", CKPT_VERSION, ckpt.seed, ckpt.round, state.size, len(cfg)))
        fh.write(cfg)
        fh.write(state.tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IQQQI")
    if len(raw) < head or raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, seed, rnd, n, clen = struct.unpack("<IQQQI", raw[4:head])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) != head + clen + 8 * n:
        raise ValueError(f"{path}: truncated checkpoint")
    text = raw[head:head + clen].decode("utf-8")
    state = np.frombuffer(raw[head + clen:], dtype="<f8").astype(np.float64)
    return Checkpoint(seed, rnd, state, text)


@dataclass
class EvalTarget:
    """Where accuracy is measured: one global set, or per-client held-out sets (averaged)."""

    sets: list[Dataset]


@dataclass
class Setup:
    cfg: ExperimentConfig
    weights: FixedWeights
    clients: list[ClientState]
    eval_target: EvalTarget
    round_cfg: RoundConfig
    client_fn: object = None


def _load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    kind = cfg["dataset"]
    seed = cfg["seed"]
    if kind in ("mnist", "idx"):
        train = load_idx(cfg["dataset.train_images"], cfg["dataset.train_labels"])
        test = None
        if cfg.get("dataset.test_images"):
            test = load_idx(cfg["dataset.test_images"], cfg["dataset.test_labels"])
    elif kind in ("cifar10", "cifar100"):
        fine = kind == "cifar100"
        train = load_cifar_binary(cfg["dataset.cifar_train"], fine)
        test = load_cifar_binary(cfg["dataset.cifar_test"], fine) if cfg.get("dataset.cifar_test") else None
    else:
        train = generate_synthetic(cfg["dataset.classes"], cfg["dataset.dims"], cfg["dataset.per_class"],
                                   seed, cfg["dataset.noise"])
        test = None
    if cfg.get("dataset.train_limit"):
        train = train.subset(np.arange(min(cfg["dataset.train_limit"], len(train))))
    if test is not None and cfg.get("dataset.test_limit"):
        test = test.subset(np.arange(min(cfg["dataset.test_limit"], len(test))))
    return train, test


def build_setup(cfg: ExperimentConfig) -> Setup:
    seed = cfg["seed"]
    topo = cfg.topology()
    weights = build_network(seed, topo)
    train, test = _load_dataset(cfg)
    train = train.reshape(topo.input_shape)
    if test is not None:
        test = test.reshape(topo.input_shape)
    frac = cfg["validation.fraction"]
    mode = cfg["partition.mode"]
    k = cfg["partition.clients"]

    if mode == "iid":
        if test is None and frac > 0:
            keep, held = split_holdout(np.arange(len(train)), frac, seed, key=0)
            test, train = train.subset(held), train.subset(keep)
        part = partition(train, PartitionSpec("iid", k, seed))
        clients = [ClientState(i, train.subset(ix)) for i, ix in enumerate(part.indices)]
        target = EvalTarget([test if test is not None else train])
    else:
        part = partition(train, PartitionSpec("label_limited", k, seed, cfg["partition.c"]))
        clients, evals = [], []
        for i, ix in enumerate(part.indices):
            keep, held = split_holdout(ix, frac, seed, key=i + 1)
            if len(keep) == 0:
                raise ValueError(f"client {i} has no training data left after the validation split")
            clients.append(ClientState(i, train.subset(keep)))
            evals.append(train.subset(held) if len(held) else train.subset(keep))
        target = EvalTarget(evals)

    round_cfg = RoundConfig(cfg["local_epochs"], cfg["batch_size"], cfg["eta"], cfg.lam, cfg["participation"])
    client_fn = client_local_train
    if cfg.method == "topk":
        client_fn = functools.partial(topk_client_train, topk=TopKConfig(cfg["topk.k_fraction"]))
    return Setup(cfg, weights, clients, target, round_cfg, client_fn)


def mask_evaluator(setup: Setup):
    """Accuracy of a probability mask, averaged over ``eval_draws`` passes.

    Each pass draws one multiplier (per ``eval_mode``) and scores every
    evaluation set with it; the stream is fresh per round.
    """
    cfg = setup.cfg

    def run(theta: np.ndarray, round_index: int) -> float:
        stream = rng.stream(cfg["seed"], rng.EVAL, round_index)
        accs = []
        for _ in range(cfg["eval_draws"]):
            m = eval_multiplier(theta, cfg["eval_mode"], stream)
            accs.append(np.mean([np.mean(predict(setup.weights, m, ds.features) == ds.labels)
                                 for ds in setup.eval_target.sets]))
        return float(np.mean(accs))

    return run


@dataclass
class RunResult:
    history: HistoryLog
    output_dir: Path
    final_state: np.ndarray = field(repr=False, default=None)


def _checkpoint_dir(out: Path) -> Path:
    return out / "checkpoints"


def checkpoint_path(out: Path, round_index: int) -> Path:
    return _checkpoint_dir(out) / f"round_{round_index:04d}.ckpt"


def _prune_checkpoints(out: Path, keep: int) -> None:
    files = sorted(_checkpoint_dir(out).glob("round_*.ckpt"))
    for old in files[:-keep]:
        old.unlink()


def _truncate_csv(path: Path, last_round: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_round]
    path.write_text("".join(kept), encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, resume_from: Checkpoint | None = None) -> RunResult:
    """Run ``cfg['rounds']`` rounds, appending metrics and checkpoints as each round finishes."""
    setup = build_setup(cfg)
    out = cfg.output_dir.resolve()
    workers = workers or cfg["workers"]
    seed = cfg["seed"]
    n = setup.weights.n
    method = cfg.method
    ckpt_cfg = config_mod.from_text(cfg.to_text())
    ckpt_cfg.values["output"] = str(out)
    ckpt_text = ckpt_cfg.to_text()

    if resume_from is not None:
        if resume_from.state.shape != (n,):
            raise ValueError(f"checkpoint holds {resume_from.state.size} values, network has {n}")
        start, state0 = resume_from.round, resume_from.state
        _truncate_csv(out / "metrics.csv", start)
        _truncate_csv(out / "client_bpp.csv", start)
        writer = MetricsWriter(out, method, cfg.lam, append=True)
    else:
        start = 0
        state0 = initial_signsgd_state(setup.weights, cfg["signsgd.eta_server"], seed).weights \
            if method == "mv_signsgd" else initial_theta(seed, n)
        writer = MetricsWriter(out, method, cfg.lam)
        _checkpoint_dir(out).mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_path(out, 0), Checkpoint(seed, 0, state0, ckpt_text))
        _prune_checkpoints(out, cfg["checkpoint.keep"])

    history = HistoryLog(initial_theta_hash=theta_hash(state0))
    _checkpoint_dir(out).mkdir(parents=True, exist_ok=True)
    evaluator = mask_evaluator(setup)
    rounds = cfg["rounds"]

    if method == "mv_signsgd":
        state = SignSGDServerState(state0, cfg["signsgd.eta_server"], start, seed)
        sets = setup.eval_target.sets

        def sg_eval(st):
            return float(np.mean([mv_signsgd_accuracy(st, setup.weights, ds) for ds in sets]))

        for t in range(start, rounds):
            try:
                state, metrics = run_signsgd_round(state, setup.clients, setup.weights, setup.round_cfg,
                                                   rng.stream(seed, rng.SELECT, t), sg_eval, workers)
            except Exception as exc:
                raise RuntimeError(f"round {t + 1}: {exc}") from exc
            _finish_round(out, writer, history, metrics, state.weights, seed, ckpt_text, cfg)
        return RunResult(history, out, state.weights)

    server = ServerState(state0, start, seed)
    for t in range(start, rounds):
        sink: list = [] if cfg["dump_masks"] else None
        try:
            server, metrics = run_round(server, setup.clients, setup.weights, setup.round_cfg,
                                        rng.stream(seed, rng.SELECT, t), evaluator, setup.client_fn,
                                        workers, sink)
        except Exception as exc:
            raise RuntimeError(f"round {t + 1}: {exc}") from exc
        if sink:
            mdir = out / "masks" / f"round_{server.round:04d}"
            mdir.mkdir(parents=True, exist_ok=True)
            for up in sink:
                (mdir / f"client_{up.client_id:04d}.mask").write_bytes(up.mask.packed)
        _finish_round(out, writer, history, metrics, server.theta, seed, ckpt_text, cfg)
    return RunResult(history, out, server.theta)


def _finish_round(out, writer, history, metrics: RoundMetrics, state, seed, ckpt_text, cfg) -> None:
    writer.append(metrics)
    history.append(theta_hash(state), metrics)
    save_checkpoint(checkpoint_path(out, metrics.round), Checkpoint(seed, metrics.round, state, ckpt_text))
    _prune_checkpoints(out, cfg["checkpoint.keep"])
    log.info("round %d acc=%.4f bpp=%.4f density=%.4f", metrics.round, metrics.accuracy,
             metrics.bpp_avg, metrics.mask_density_avg)


def resume(path, workers: int | None = None) -> RunResult:
    ckpt = load_checkpoint(path)
    cfg = config_mod.from_text(ckpt.config_text)
    if cfg["seed"] != ckpt.seed:
        raise ValueError(f"{path}: header seed {ckpt.seed} disagrees with embedded config seed {cfg['seed']}")
    return run_experiment(cfg, workers=workers, resume_from=ckpt)
