"""Backdoor attacker: the plain PGD baseline and its top-k masked variant.

The masked attacker looks at the aggregate update the server broadcast last
round, marks its largest-magnitude coordinates as off-limits, and runs its
poisoned-data SGD with those coordinates zeroed in every step. With an empty
mask the two attacks coincide.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PoisonedDataset
from .nn import Batch, DimensionError, Differentiable, TrainConfig, grad, sgd_step


def vector_digest(v: np.ndarray) -> str:
    """Short content hash used to trace which vector a mask came from."""
    return hashlib.sha256(np.ascontiguousarray(v, dtype=np.float64).tobytes()).hexdigest()[:16]


def mask_size(ratio: float, d: int) -> int:
    """``ceil(ratio * d)``, with products that are integral up to float noise kept exact."""
    m = ratio * d
    r = round(m)
    return int(r) if abs(m - r) <= 1e-9 * max(1.0, m) else math.ceil(m)


@dataclass(frozen=True)
class MaskSet:
    indices: np.ndarray
    ratio: float
    source_digest: str = field(default="", compare=False)

    def __len__(self) -> int:
        return len(self.indices)


def top_k_mask(g: np.ndarray, k: float) -> MaskSet:
    """Indices of the ``ceil(k*d)`` largest ``|g[i]|``; ties go to the lower index."""
    if not 0.0 <= k < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {k}")
    g = np.asarray(g, dtype=np.float64)
    n = mask_size(k, len(g))
    order = np.argsort(-np.abs(g), kind="stable")
    return MaskSet(np.sort(order[:n]), k, vector_digest(g))


def project_out(g: np.ndarray, mask: MaskSet) -> np.ndarray:
    """Copy of ``g`` with the masked coordinates set to zero."""
    out = np.array(g, dtype=np.float64, copy=True)
    if len(mask.indices) and (mask.indices.max() >= len(out) or mask.indices.min() < 0):
        raise IndexError(f"mask index out of range for vector of length {len(out)}")
    out[mask.indices] = 0.0
    return out


def boost(update: np.ndarray, factor: float) -> np.ndarray:
    if factor <= 0:
        raise ValueError("boost factor must be positive")
    return update * factor


def norm_preproject(update: np.ndarray, bound: float) -> np.ndarray:
    """Shrink ``update`` onto the L2 ball of radius ``bound``; pass through if inside."""
    if bound <= 0:
        raise ValueError("bound must be positive")
    norm = float(np.linalg.norm(update))
    if norm <= bound:
        return update
    return update * (bound / norm)


@dataclass(frozen=True)
class AttackConfig:
    mask_ratio: float = 0.0
    boost: float = 1.0
    pgd_norm_bound: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.boost <= 0:
            raise ValueError("boost must be positive")
        if self.pgd_norm_bound is not None and self.pgd_norm_bound <= 0:
            raise ValueError("pgd_norm_bound must be positive")


@dataclass(frozen=True)
class AttackPlan:
    """Fixed-frequency schedule: attack at ``start_round + i*frequency`` for ``i < attack_num``.

    ``attack_num == 0`` is allowed and describes an attack-free control run.
    """

    start_round: int = 100
    attack_num: int = 20
    frequency: int = 1
    attackers_per_round: int = 1

    def __post_init__(self):
        if self.attack_num < 0 or self.start_round < 0:
            raise ValueError("attack_num and start_round must be non-negative")
        if self.frequency < 1 or self.attackers_per_round < 1:
            raise ValueError("frequency and attackers_per_round must be >= 1")

    def is_attack_round(self, rnd: int) -> bool:
        off = rnd - self.start_round
        return off >= 0 and off % self.frequency == 0 and off // self.frequency < self.attack_num

    @property
    def last_attack_round(self) -> int | None:
        if self.attack_num == 0:
            return None
        return self.start_round + (self.attack_num - 1) * self.frequency


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _check_inputs(model: Differentiable, params: np.ndarray, downloaded: np.ndarray | None, poison: PoisonedDataset):
    d = model.total_params
    if len(params) != d or (downloaded is not None and len(downloaded) != d):
        raise DimensionError(f"parameter vectors must have length {d}")
    if len(poison) == 0:
        raise ValueError("poison set is empty")


def _finish(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.pgd_norm_bound is not None:
        delta = norm_preproject(delta, cfg.pgd_norm_bound)
    return boost(delta, cfg.boost)


def baseline_local_update(
    model: Differentiable,
    global_params: np.ndarray,
    poison: PoisonedDataset,
    cfg: AttackConfig,
    seed: int,
) -> np.ndarray:
    """Unmasked attacker: plain minibatch SGD on the poisoned data."""
    _check_inputs(model, global_params, None, poison)
    rng = np.random.default_rng(seed)
    x, y = poison.base.inputs, poison.base.labels
    theta = np.array(global_params, dtype=np.float64, copy=True)
    for _ in range(cfg.train.local_epochs):
        for idx in _minibatches(len(y), cfg.train.batch_size, rng):
            g = grad(model, theta, Batch(x[idx], y[idx]))
            theta = sgd_step(theta, g, cfg.train.learning_rate)
    return _finish(global_params - theta, cfg)


def attacker_local_update(
    model: Differentiable,
    global_params: np.ndarray,
    downloaded_grad: np.ndarray | None,
    poison: PoisonedDataset,
    cfg: AttackConfig,
    seed: int,
    mask: MaskSet | None = None,
) -> np.ndarray:
    """Masked PGD on the poisoned data, starting from the freshly broadcast model.

    ``global_params`` is the model after the downloaded aggregate has been
    applied. The mask is the top ``cfg.mask_ratio`` fraction of
    ``downloaded_grad`` by magnitude (empty when nothing has been broadcast
    yet) and stays fixed for every step of this call. Returns the upload
    ``boost * preproject(global_params - theta_end)``.
    """
    _check_inputs(model, global_params, downloaded_grad, poison)
    if mask is None:
        if downloaded_grad is None:
            mask = MaskSet(np.empty(0, dtype=np.int64), cfg.mask_ratio)
        else:
            mask = top_k_mask(downloaded_grad, cfg.mask_ratio)
    rng = np.random.default_rng(seed)
    x, y = poison.base.inputs, poison.base.labels
    theta = np.array(global_params, dtype=np.float64, copy=True)
    for _ in range(cfg.train.local_epochs):
        for idx in _minibatches(len(y), cfg.train.batch_size, rng):
            g = grad(model, theta, Batch(x[idx], y[idx]))
            g = project_out(g, mask)
            theta = sgd_step(theta, g, cfg.train.learning_rate)
    return _finish(global_params - theta, cfg)
