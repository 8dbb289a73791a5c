"""FedAvg server: device sampling, local training, defenses, aggregation."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import attack_accuracy
from .attack import AttackConfig, AttackPlan, MaskSet, attacker_local_update, mask_size, top_k_mask, vector_digest
from .data import Dataset, DevicePartition, PoisonedDataset
from .nn import Batch, DimensionError, Differentiable, Model, TrainConfig, grad, sgd_step
from .seeding import derive_seed, rng_for


class NumericalError(RuntimeError):
    """Raised when the global model picks up NaN or Inf."""


@dataclass(frozen=True)
class DefenseConfig:
    clip_norm: float | None = None
    dp_sigma: float = 0.0
    server_topk: float | None = None

    def __post_init__(self):
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.dp_sigma < 0:
            raise ValueError("dp_sigma must be non-negative")
        if self.server_topk is not None and not 0 < self.server_topk <= 1:
            raise ValueError("server_topk must lie in (0, 1]")


def benign_local_update(
    model: Differentiable, global_params: np.ndarray, device_data: Dataset, cfg: TrainConfig, seed: int
) -> np.ndarray:
    """``e`` epochs of shuffled minibatch SGD; returns ``theta_start - theta_end``."""
    if len(device_data) == 0:
        raise ValueError("device has no data")
    rng = np.random.default_rng(seed)
    x, y = device_data.inputs, device_data.labels
    theta = np.array(global_params, dtype=np.float64, copy=True)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(y))
        for lo in range(0, len(y), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            theta = sgd_step(theta, grad(model, theta, Batch(x[idx], y[idx])), cfg.learning_rate)
    return global_params - theta


def clip_update(u: np.ndarray, p: float) -> np.ndarray:
    if p <= 0:
        raise ValueError("clip norm must be positive")
    norm = float(np.linalg.norm(u))
    if norm <= p:
        return u
    return u * (p / norm)


def pairwise_sum(vectors: list[np.ndarray]) -> np.ndarray:
    """Tree sum in list order; the result does not depend on thread scheduling."""
    if len(vectors) == 1:
        return np.array(vectors[0], dtype=np.float64, copy=True)
    mid = len(vectors) // 2
    return pairwise_sum(vectors[:mid]) + pairwise_sum(vectors[mid:])


def fedavg_aggregate(updates: list[np.ndarray]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    d = len(updates[0])
    if any(len(u) != d for u in updates):
        raise DimensionError("updates have different lengths")
    return pairwise_sum(list(updates)) / len(updates)


def add_gaussian_noise(u: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return u
    return u + np.random.default_rng(seed).normal(0.0, sigma, size=len(u))


def server_sparsify(agg: np.ndarray, topk: float) -> np.ndarray:
    """Keep the ``ceil(topk*d)`` largest-magnitude coordinates (lower index wins ties)."""
    if not 0 < topk <= 1:
        raise ValueError("topk must lie in (0, 1]")
    n = mask_size(topk, len(agg))
    if n >= len(agg):
        return agg
    keep = np.argsort(-np.abs(agg), kind="stable")[:n]
    out = np.zeros_like(agg)
    out[keep] = agg[keep]
    return out


@dataclass
class FedTask:
    model: Model | Differentiable
    train: Dataset
    partition: DevicePartition
    test: Dataset
    poison_train: PoisonedDataset
    poison_eval: PoisonedDataset
    # clean set used for benign accuracy; defaults to ``test``
    benign_eval: Dataset | None = None
    _devices: list[Dataset] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self._devices = [self.train.subset(ix) for ix in self.partition.device_indices]
        if self.benign_eval is None:
            self.benign_eval = self.test

    @property
    def n_devices(self) -> int:
        return len(self._devices)

    def device_data(self, dev: int) -> Dataset:
        return self._devices[dev]

    def benign_accuracy(self, params: np.ndarray) -> float:
        pred = self.model.predict(params, self.benign_eval.inputs)
        return float(np.mean(pred == self.benign_eval.labels))

    def attack_accuracy(self, params: np.ndarray) -> float:
        return attack_accuracy(self.model, params, self.poison_eval)


@dataclass(frozen=True)
class RoundConfig:
    devices_per_round: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    plan: AttackPlan = field(default_factory=lambda: AttackPlan(attack_num=0))


@dataclass(frozen=True)
class ServerState:
    global_params: np.ndarray
    round: int = 0
    # post-defense aggregate applied last round; None before the first round
    last_broadcast_update: np.ndarray | None = None


@dataclass(frozen=True)
class RoundLog:
    round: int
    benign_acc: float
    attack_acc: float
    attacker_present: bool
    aggregate_norm: float
    participants: tuple[int, ...] = ()
    clipped: tuple[bool, ...] = ()
    mask_size: int = 0
    mask_source_digest: str = ""
    downloaded_digest: str = ""


ATTACKER = -1


def sample_participants(n_devices: int, k: int, master_seed: int, rnd: int) -> np.ndarray:
    if k > n_devices:
        raise ValueError(f"cannot sample {k} of {n_devices} devices")
    return np.sort(rng_for(master_seed, "sampling", rnd).choice(n_devices, size=k, replace=False))


def run_round(
    state: ServerState,
    task: FedTask,
    cfg: RoundConfig,
    master_seed: int,
    evaluate: bool = True,
    workers: int = 1,
) -> tuple[ServerState, RoundLog]:
    """One FedAvg round: sample, train, clip each update, average, noise, sparsify, apply."""
    rnd = state.round
    params = state.global_params
    chosen = [int(i) for i in sample_participants(task.n_devices, cfg.devices_per_round, master_seed, rnd)]
    attacking = cfg.plan.is_attack_round(rnd)
    n_att = min(cfg.plan.attackers_per_round, len(chosen)) if attacking else 0
    benign_ids = chosen[: len(chosen) - n_att]

    def train_one(dev: int) -> np.ndarray:
        seed = derive_seed(master_seed, "device", rnd, dev)
        return benign_local_update(task.model, params, task.device_data(dev), cfg.train, seed)

    if workers > 1 and len(benign_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(train_one, benign_ids))
    else:
        updates = [train_one(dev) for dev in benign_ids]

    mask: MaskSet | None = None
    downloaded_digest = ""
    if n_att:
        downloaded = state.last_broadcast_update
        if downloaded is None:
            mask = MaskSet(np.empty(0, dtype=np.int64), cfg.attack.mask_ratio)
        else:
            mask = top_k_mask(downloaded, cfg.attack.mask_ratio)
            downloaded_digest = vector_digest(downloaded)
        evil = attacker_local_update(
            task.model, params, downloaded, task.poison_train, cfg.attack,
            derive_seed(master_seed, "attacker", rnd), mask=mask,
        )
        if len(mask) and np.any(evil[mask.indices] != 0.0):
            raise AssertionError(f"round {rnd}: attacker update touches masked coordinates")
        updates += [evil] * n_att

    participants = tuple(benign_ids) + (ATTACKER,) * n_att
    clipped = []
    if cfg.defense.clip_norm is not None:
        p = cfg.defense.clip_norm
        clipped = [float(np.linalg.norm(u)) > p for u in updates]
        updates = [clip_update(u, p) for u in updates]
    agg = fedavg_aggregate(updates)
    agg = add_gaussian_noise(agg, cfg.defense.dp_sigma, derive_seed(master_seed, "dp_noise", rnd))
    if cfg.defense.server_topk is not None:
        agg = server_sparsify(agg, cfg.defense.server_topk)

    new_params = params - agg
    if not np.all(np.isfinite(new_params)):
        raise NumericalError(f"non-finite global parameters after round {rnd}")

    if evaluate:
        benign_acc = task.benign_accuracy(new_params)
        attack_acc = task.attack_accuracy(new_params)
    else:
        benign_acc = attack_acc = math.nan
    log = RoundLog(
        round=rnd,
        benign_acc=benign_acc,
        attack_acc=attack_acc,
        attacker_present=bool(n_att),
        aggregate_norm=float(np.linalg.norm(agg)),
        participants=participants,
        clipped=tuple(clipped),
        mask_size=0 if mask is None else len(mask),
        mask_source_digest="" if mask is None or downloaded_digest == "" else mask.source_digest,
        downloaded_digest=downloaded_digest,
    )
    return ServerState(new_params, rnd + 1, agg), log
