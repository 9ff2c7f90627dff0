"""Synchronous round-based federated simulation.

Every message between clients and server is serialized through
:mod:`cepfed.wire`; the byte counts in the metrics are the lengths of the
buffers actually produced.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import wire
from .collab import (
    CollabConfig,
    RiskMatrix,
    alignment_score,
    correct_gradient,
    historical_average_gradient,
    historical_risk_gradient,
    update_risk_row,
)
from .data import (
    Dataset,
    PartitionSpec,
    SyntheticSpec,
    dirichlet_partition,
    generate,
    shift_for_client,
    split_train_test,
)
from .hsvd import Codec, ConfigError, EnergyConfig, decompress, compress, ranks_by_part
from .model import (
    Batch,
    LayerSpec,
    NumericError,
    OptimizerState,
    ParameterSet,
    Part,
    adam_step,
    dot,
    forward,
    init_params,
    loss_and_grad,
    predict,
    tinyconv_specs,
    validate_partition,
    weighted_sum,
)

log = logging.getLogger(__name__)

MODES = ("ceperfed", "fedavg", "fixed_rank", "no_alpha", "no_hsvd")


class ProtocolError(RuntimeError):
    pass


class RoundFailure(RuntimeError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class DatasetConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    concentration: float = 0.5
    train_fraction: float = 0.8


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 5
    local_epochs: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-4
    rounds: int = 100
    patience: Optional[int] = 10  # None disables early stopping
    mode: str = "ceperfed"
    rank: Optional[int] = None  # fixed_rank mode only
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    collab: CollabConfig = field(default_factory=CollabConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    widths: tuple = (8, 16, 16, 64, 64)
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "fixed_rank" and (self.rank is None or self.rank < 1):
            raise ConfigError("fixed_rank mode needs a positive rank")
        if self.n_clients < 1 or self.local_epochs < 0 or self.batch_size < 1 or self.rounds < 0:
            raise ConfigError("n_clients/batch_size must be positive, local_epochs/rounds non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be positive or None")
        if self.collab.n_clients != self.n_clients:
            object.__setattr__(self, "collab", replace(self.collab, n_clients=self.n_clients))
        object.__setattr__(self, "widths", tuple(self.widths))

    @property
    def codec(self) -> Codec:
        if self.mode in ("fedavg", "no_hsvd"):
            return Codec("dense", self.energy)
        if self.mode == "fixed_rank":
            return Codec("fixed_rank", self.energy, self.rank)
        return Codec("hsvd", self.energy)

    @property
    def risk_enabled(self) -> bool:
        return self.mode != "fedavg"

    @property
    def alpha_frozen(self) -> bool:
        return self.mode == "no_alpha"

    def layer_specs(self) -> tuple[LayerSpec, ...]:
        syn = self.dataset.synthetic
        specs = tinyconv_specs(syn.channels, syn.n_classes, self.widths)
        if syn.height < 11 or syn.width < 11:
            raise ConfigError("TinyConv needs images of at least 11x11")
        validate_partition(specs, self.energy.group_channels)
        return specs


# -- states and messages ------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    model: ParameterSet
    optimizer: OptimizerState
    train: Dataset
    test: Dataset
    rng: np.random.Generator
    avg_gradient: Optional[ParameterSet] = None
    risk_gradient: Optional[ParameterSet] = None


@dataclass
class ServerState:
    model: ParameterSet
    risk: RiskMatrix
    prev_avg_gradient: ParameterSet
    sample_counts: list
    round_index: int = 0

    @property
    def total_samples(self) -> int:
        return int(sum(self.sample_counts))


@dataclass
class ClientReport:
    """Client-side bookkeeping for a round (not transmitted)."""

    client_id: int
    train_loss: float
    test_accuracy: float
    upload_bytes: int
    transmission_ratio: float
    ranks: dict
    alignment: float


@dataclass
class RoundMetrics:
    round_index: int
    train_loss: list
    client_accuracy: list
    global_accuracy: float
    global_loss: float
    upload_bytes: list
    download_bytes: list
    client_ratio: list
    transmission_ratio: float
    client_ranks: list  # per client: {part: mean rank or None}
    mean_rank: dict


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def accuracy(model: ParameterSet, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(model, data.inputs) == data.labels))


def _mean_rank(ranks: dict) -> dict:
    return {p.value: (float(np.mean(v)) if v else None) for p, v in ranks.items()}


# -- client -------------------------------------------------------------------

def local_train(state: ClientState, global_model: ParameterSet, risk_gradient: Optional[ParameterSet],
                epochs: int, batch_size: int):
    """Run local epochs from ``global_model``; returns (model, optimizer, final-epoch loss)."""
    model, opt = global_model, state.optimizer
    last_loss = None
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in iterate_batches(len(state.train), batch_size, state.rng):
            batch = Batch(state.train.inputs[idx], state.train.labels[idx])
            loss, grad = loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise NumericError(f"client {state.client_id}: non-finite loss")
            if risk_gradient is not None:
                grad = correct_gradient(grad, risk_gradient)
            model, opt = adam_step(model, grad, opt)
            total += loss * len(idx)
            count += len(idx)
        last_loss = total / count
    if last_loss is None:
        _, last_loss = forward(model, Batch(state.train.inputs, state.train.labels))
    return model, opt, float(last_loss)


def client_round(state: ClientState, global_model: ParameterSet, avg_gradient, risk_gradient,
                 config: ExperimentConfig, round_index: int = 0):
    """Local training, then compression of the pseudo-gradient and parameters.

    Returns ``(encoded upload, report, new state)``.
    """
    specs = global_model.specs
    rg = risk_gradient if config.risk_enabled else None
    model, opt, loss = local_train(state, global_model, rg, config.local_epochs, config.batch_size)
    delta = global_model - model
    m_i = alignment_score(loss, delta, model)
    codec = config.codec
    c_grad = compress(delta, codec, "gradient")
    c_params = compress(model, codec, "parameters")
    payload = wire.UploadPayload(c_grad, c_params, m_i, len(state.train), round_index, state.client_id)
    parts = [s.part for s in specs]
    buf = wire.encode_upload(payload, parts)
    ratio = (wire.scalar_bytes(wire.encode_update(c_grad, parts))
             + wire.scalar_bytes(wire.encode_update(c_params, parts))) / (8 * global_model.size)
    ranks = ranks_by_part(c_grad, specs)
    for part, values in ranks_by_part(c_params, specs).items():
        ranks[part].extend(values)
    new_state = replace(state, model=model, optimizer=opt, avg_gradient=avg_gradient, risk_gradient=risk_gradient)
    report = ClientReport(state.client_id, loss, accuracy(model, state.test), len(buf), ratio,
                          _mean_rank(ranks), m_i)
    return buf, report, new_state


# -- server -------------------------------------------------------------------

def server_round(state: ServerState, uploads: Sequence[bytes], config: ExperimentConfig):
    """Aggregate one synchronous round. Returns ``(new state, encoded downloads)``."""
    n = len(state.sample_counts)
    if len(uploads) != n:
        raise ProtocolError(f"expected {n} uploads, got {len(uploads)}")
    decoded = [wire.decode_upload(b) for b in uploads]
    by_client = {u.client_id: u for u in decoded}
    if sorted(by_client) != list(range(n)):
        raise ProtocolError(f"uploads from clients {sorted(by_client)}, expected 0..{n - 1}")
    specs = state.model.specs
    ups = [by_client[i] for i in range(n)]
    grads = [decompress(u.gradient, specs) for u in ups]
    params = [decompress(u.parameters, specs) for u in ups]
    counts = [u.n_samples for u in ups]
    total = sum(counts)
    global_model = weighted_sum([c / total for c in counts], params)

    risk = state.risk.copy()
    if config.risk_enabled:
        avg = historical_average_gradient(grads, config.collab.delta_scale)
        if not config.alpha_frozen:
            scores = np.array([u.alignment for u in ups])
            for i in range(n):
                consistency = dot(params[i], state.prev_avg_gradient)
                risk.alpha[i] = update_risk_row(risk.alpha[i], scores, consistency, config.collab.lambda_step)
        risk_grads = [historical_risk_gradient(risk.alpha[i], grads) for i in range(n)]
    else:
        avg = ParameterSet.zeros(specs)
        risk_grads = [avg] * n

    parts = [s.part for s in specs]
    g_model = wire.dense_update(global_model, "parameters")
    g_avg = wire.dense_update(avg, "gradient")
    downloads = [
        wire.encode_download(
            wire.DownloadPayload(g_model, g_avg, wire.dense_update(risk_grads[i], "gradient"),
                                 state.round_index, i),
            parts,
        )
        for i in range(n)
    ]
    new_state = ServerState(global_model, risk, avg, counts, state.round_index + 1)
    return new_state, downloads


def read_download(buf: bytes, specs) -> tuple[ParameterSet, ParameterSet, ParameterSet]:
    msg = wire.decode_download(buf)
    return (decompress(msg.global_model, specs), decompress(msg.avg_gradient, specs),
            decompress(msg.risk_gradient, specs))


# -- experiment ---------------------------------------------------------------

@dataclass
class Federation:
    config: ExperimentConfig
    specs: tuple
    clients: list
    server: ServerState
    global_test: Dataset
    initial_model: ParameterSet


def build_clients(config: ExperimentConfig, specs) -> tuple[list, ParameterSet, Dataset]:
    syn = replace(config.dataset.synthetic, seed=config.seed)
    data = generate(syn)
    pspec = PartitionSpec(config.n_clients, config.dataset.concentration,
                          config.dataset.train_fraction, seed=config.seed)
    shards = dirichlet_partition(data.labels, pspec)
    root = np.random.SeedSequence(config.seed)
    init_seq, *client_seqs = root.spawn(config.n_clients + 1)
    init = init_params(specs, np.random.default_rng(init_seq))
    clients, tests = [], []
    for cid, shard in enumerate(shards):
        tr, te = split_train_test(shard, data.labels, config.dataset.train_fraction, seed=config.seed * 1000 + cid)
        shifted = shift_for_client(data, syn, cid)
        clients.append(ClientState(
            cid, init, OptimizerState.fresh(specs, config.learning_rate),
            shifted.subset(tr), shifted.subset(te), np.random.default_rng(client_seqs[cid]),
        ))
        tests.append(shifted.subset(te))
    union = Dataset(np.concatenate([t.inputs for t in tests]), np.concatenate([t.labels for t in tests]))
    return clients, init, union


def setup(config: ExperimentConfig) -> Federation:
    specs = config.layer_specs()
    clients, init, union = build_clients(config, specs)
    server = ServerState(
        model=init,
        risk=RiskMatrix.uniform(config.n_clients),
        prev_avg_gradient=ParameterSet.zeros(specs),
        sample_counts=[len(c.train) for c in clients],
    )
    return Federation(config, specs, clients, server, union, init)


def _thread_count(config: ExperimentConfig) -> int:
    if config.threads is not None:
        return max(1, config.threads)
    env = os.environ.get("CEPFED_THREADS")
    if env:
        return max(1, int(env))
    return 1


UploadHook = Callable[[int, int, bytes, ClientState], None]


def run_rounds(fed: Federation, on_upload: Optional[UploadHook] = None,
               on_round: Optional[Callable[[Federation, RoundMetrics], None]] = None) -> list[RoundMetrics]:
    """Drive the round loop on an already set-up federation."""
    config = fed.config
    specs = fed.specs
    zeros = ParameterSet.zeros(specs)
    downloads = [(fed.server.model, zeros, zeros)] * config.n_clients
    metrics: list[RoundMetrics] = []
    best, stale = -1.0, 0
    pool = ThreadPoolExecutor(_thread_count(config)) if _thread_count(config) > 1 else None

    def work(cid):
        g_model, g_avg, g_risk = downloads[cid]
        return client_round(fed.clients[cid], g_model, g_avg, g_risk, config, t)

    try:
        for t in range(config.rounds):
            try:
                results = list(pool.map(work, range(config.n_clients)) if pool else map(work, range(config.n_clients)))
            except (NumericError, FloatingPointError) as exc:
                raise RoundFailure(t, str(exc)) from exc
            uploads = [r[0] for r in results]
            reports = [r[1] for r in results]
            fed.clients = [r[2] for r in results]
            if on_upload:
                for cid, buf in enumerate(uploads):
                    on_upload(t, cid, buf, fed.clients[cid])
            fed.server, down_bufs = server_round(fed.server, uploads, config)
            downloads = [read_download(b, specs) for b in down_bufs]
            g_acc = accuracy(fed.server.model, fed.global_test)
            _, g_loss = forward(fed.server.model, Batch(fed.global_test.inputs, fed.global_test.labels))
            mean_rank = {}
            for p in (Part.PART1, Part.PART2, Part.PART3):
                vals = [r.ranks[p.value] for r in reports if r.ranks[p.value] is not None]
                mean_rank[p.value] = float(np.mean(vals)) if vals else None
            m = RoundMetrics(
                round_index=t,
                train_loss=[r.train_loss for r in reports],
                client_accuracy=[r.test_accuracy for r in reports],
                global_accuracy=g_acc,
                global_loss=float(g_loss),
                upload_bytes=[r.upload_bytes for r in reports],
                download_bytes=[len(b) for b in down_bufs],
                client_ratio=[r.transmission_ratio for r in reports],
                transmission_ratio=float(np.mean([r.transmission_ratio for r in reports])),
                client_ranks=[r.ranks for r in reports],
                mean_rank=mean_rank,
            )
            metrics.append(m)
            if on_round:
                on_round(fed, m)
            log.debug("round %d: global acc %.4f ratio %.4f", t, g_acc, m.transmission_ratio)
            if g_acc > best:
                best, stale = g_acc, 0
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    log.info("early stop after round %d (best %.4f)", t, best)
                    break
    finally:
        if pool:
            pool.shutdown()
    return metrics


def run_experiment(config: ExperimentConfig, on_upload: Optional[UploadHook] = None) -> list[RoundMetrics]:
    return run_rounds(setup(config), on_upload)
