"""FedAvg over trainable tensors only.

Each round the server samples clients, broadcasts the trainable tensors,
clients run local SGD from that snapshot, and the server takes the
sample-size-weighted mean. Frozen tensors never move and never travel.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .adapters import AdapterMode, AdapterSet, trainable_parameters
from .errors import ConfigError, FederaError
from .linalg import Rng, make_rng
from .model import ModelConfig, evaluate, split_update, train_epochs, trainable_view

log = logging.getLogger(__name__)

WIRE_BYTES_PER_SCALAR = 4  # float32 on the wire; training stays float64


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    num_clients: int = 20
    clients_per_round: int = 5
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.05
    eval_every: int = 1
    seed: int = 0
    optimizer: str = "sgd"
    snapshot_stride: int = 1
    threads: int = 1

    def validate(self) -> "FedConfig":
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(
                f"need 1 <= clients_per_round ({self.clients_per_round}) <= num_clients ({self.num_clients})"
            )
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.local_epochs < 1 or self.batch_size < 1 or self.eval_every < 1 or self.snapshot_stride < 1:
            raise ConfigError("local_epochs, batch_size, eval_every and snapshot_stride must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        return self


@dataclass
class GlobalState:
    round: int
    params: dict
    adapters: AdapterSet

    @property
    def trainables(self) -> dict:
        return trainable_view(self.params, self.adapters)


@dataclass
class RoundReport:
    round: int
    accuracy: float | None
    macro_f1: float | None
    loss: float | None
    uplink_bytes: int
    downlink_bytes: int
    train_seconds: float
    agg_seconds: float
    selected: list[int] = field(default_factory=list)


class ClientUpdate(NamedTuple):
    client_id: int
    trainables: dict
    num_samples: int


@dataclass
class RunResult:
    state: GlobalState
    reports: list[RoundReport]
    snapshots: list[tuple[int, dict]]


def select_clients(round: int, num_clients: int, clients_per_round: int, rng: Rng) -> list[int]:
    if not 1 <= clients_per_round <= num_clients:
        raise ConfigError(f"cannot select {clients_per_round} of {num_clients} clients")
    picked = rng.choice(num_clients, size=clients_per_round, replace=False)
    return sorted(int(c) for c in picked)


def local_train(global_trainables, frozen_params, adapters: AdapterSet, shard, dataset, config: FedConfig, round: int):
    """Run ``local_epochs`` of mini-batch training on one shard from the broadcast snapshot.

    Returns ``(updated_trainables, num_samples)``.
    """
    params, local = split_update(frozen_params, adapters, global_trainables)
    rng = make_rng(config.seed, "local-train", round=round, client=shard.client_id)
    params, local, _ = train_epochs(
        params,
        local,
        dataset.tokens,
        dataset.labels,
        shard.sample_indices,
        epochs=config.local_epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        rng=rng,
        optimizer=config.optimizer,
    )
    return trainable_view(params, local), len(shard.sample_indices)


def aggregate(updates) -> dict:
    """Sample-size weighted mean of client trainables.

    Computed as ``w_ref + sum_s p_s (w_s - w_ref)`` in ascending client-id
    order, with ``w_ref`` the lowest-id update. This equals the plain
    weighted mean but returns identical updates unchanged bit for bit.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ConfigError("aggregate needs at least one update")
    total = sum(u.num_samples for u in updates)
    if total <= 0:
        raise ConfigError("aggregate needs a positive total sample count")
    ref = updates[0].trainables
    for u in updates[1:]:
        if u.trainables.keys() != ref.keys():
            raise ConfigError(f"client {u.client_id} sent a different tensor set")
        for name, value in u.trainables.items():
            if value.shape != ref[name].shape:
                raise ConfigError(f"client {u.client_id} tensor {name!r} has shape {value.shape}, expected {ref[name].shape}")
    weights = [u.num_samples / total for u in updates]
    out = {}
    for name, base in ref.items():
        acc = np.zeros_like(base)
        for w, u in zip(weights[1:], updates[1:]):
            acc += w * (u.trainables[name] - base)
        out[name] = base + acc
    return out


def comm_cost(mode: AdapterMode, model_config: ModelConfig, clients_per_round: int, targets=("w_q", "w_v")) -> int:
    """Bytes per round in each direction (float32 wire encoding)."""
    count = trainable_parameters(mode, model_config, targets)["count"]
    return WIRE_BYTES_PER_SCALAR * count * clients_per_round


def _snapshot(trainables: dict) -> dict:
    return {k: v.copy() for k, v in trainables.items()}


def run(train, test, shards, config: FedConfig, params, adapters: AdapterSet,
        progress: Callable[[RoundReport], None] | None = None) -> RunResult:
    """FedAvg for ``config.rounds`` rounds starting from ``(params, adapters)``.

    Snapshots of the global trainables are recorded at round 0 and every
    ``snapshot_stride`` rounds (plus the final round).
    """
    config.validate()
    if len(shards) != config.num_clients:
        raise ConfigError(f"got {len(shards)} shards for num_clients={config.num_clients}")
    frozen = dict(params)
    template = adapters
    global_tr = _snapshot(trainable_view(params, adapters))
    scalars = int(sum(v.size for v in global_tr.values()))
    snapshots = [(0, _snapshot(global_tr))]
    reports = []
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for t in range(1, config.rounds + 1):
            selected = select_clients(t, config.num_clients, config.clients_per_round, make_rng(config.seed, "select", round=t))

            def work(cid, t=t, snapshot=global_tr):
                try:
                    tr, n = local_train(snapshot, frozen, template, shards[cid], train, config, t)
                except FederaError as exc:
                    raise type(exc)(f"round {t}, client {cid}: {exc}") from exc
                return ClientUpdate(cid, tr, n)

            t0 = time.perf_counter()
            updates = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
            t1 = time.perf_counter()
            global_tr = aggregate(updates)
            t2 = time.perf_counter()
            wire = WIRE_BYTES_PER_SCALAR * scalars * len(selected)
            metrics = {"accuracy": None, "macro_f1": None, "loss": None}
            if t % config.eval_every == 0 or t == config.rounds:
                p, a = split_update(frozen, template, global_tr)
                metrics = evaluate(p, a, test)
            report = RoundReport(t, metrics["accuracy"], metrics["macro_f1"], metrics["loss"], wire, wire, t1 - t0, t2 - t1, selected)
            reports.append(report)
            if t % config.snapshot_stride == 0 or t == config.rounds:
                snapshots.append((t, _snapshot(global_tr)))
            if progress is not None:
                progress(report)
    finally:
        if pool is not None:
            pool.shutdown()
    p, a = split_update(frozen, template, global_tr)
    return RunResult(GlobalState(config.rounds, p, a), reports, snapshots)


def time_to_target(reports, targets=(0.5, 0.6, 0.7, 0.8, 0.9)) -> list[dict]:
    """First round reaching each accuracy target and the cumulative simulated wall time."""
    out = []
    for target in targets:
        elapsed = 0.0
        hit = None
        for r in reports:
            elapsed += r.train_seconds + r.agg_seconds
            if r.accuracy is not None and r.accuracy >= target:
                hit = {"target": target, "round": r.round, "seconds": elapsed}
                break
        out.append(hit or {"target": target, "round": None, "seconds": None})
    return out
