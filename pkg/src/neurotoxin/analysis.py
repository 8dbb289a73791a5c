"""Backdoor durability and loss-curvature metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import Differentiable, hvp
from .seeding import rng_for

HvpFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AccuracySeries:
    """Attack accuracy indexed from the first round the attacker is gone."""

    values: tuple[float, ...]
    kappa: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("accuracies must lie in [0, 1]")

    def lifespan(self) -> int:
        return lifespan(self.values, self.kappa)


def lifespan(values: Sequence[float], kappa: float = 0.5) -> int:
    """Largest index ``t`` with ``values[t] > kappa``, or -1 if there is none.

    This is the max-index rule, so a series that dips below ``kappa`` and
    recovers is credited with the later crossing.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("empty accuracy series")
    above = np.flatnonzero(vals > kappa)
    return int(above[-1]) if above.size else -1


def attack_accuracy(model, params: np.ndarray, poison_eval) -> float:
    """Fraction of poisoned inputs the model assigns to the attacker's target."""
    if len(poison_eval) == 0:
        raise ValueError("empty poison evaluation set")
    pred = model.predict(params, poison_eval.base.inputs)
    return float(np.mean(pred == poison_eval.target_label))


def hutchinson_trace(hvp_fn: HvpFn, d: int, n_samples: int = 100, seed: int = 0) -> tuple[float, float]:
    """Rademacher trace estimate; returns (mean of v.Hv, standard error).

    Probe ``i`` is drawn from its own stream keyed on ``(seed, i)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    samples = np.empty(n_samples)
    for i in range(n_samples):
        v = rng_for(seed, "hutchinson", i).choice((-1.0, 1.0), size=d)
        samples[i] = float(v @ hvp_fn(v))
    stderr = float(samples.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(samples.mean()), stderr


@dataclass(frozen=True)
class EigResult:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def power_iter_top_eig(hvp_fn: HvpFn, d: int, iters: int = 100, tol: float = 1e-6, seed: int = 0) -> EigResult:
    """Largest-magnitude eigenvalue by power iteration; reports ``|rayleigh quotient|``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    restarts = 0
    v = rng_for(seed, "power", restarts).normal(size=d)
    v /= np.linalg.norm(v)
    prev = None
    est = 0.0
    for it in range(1, iters + 1):
        w = hvp_fn(v)
        est = abs(float(v @ w))
        norm = float(np.linalg.norm(w))
        if norm < 1e-12:
            restarts += 1
            if restarts > 3:
                return EigResult(0.0, True, it)
            v = rng_for(seed, "power", restarts).normal(size=d)
            v /= np.linalg.norm(v)
            prev = None
            continue
        v = w / norm
        if prev is not None and abs(est - prev) < tol:
            return EigResult(est, True, it)
        prev = est
    return EigResult(est, False, iters)


@dataclass(frozen=True)
class HessianConfig:
    n_samples: int = 100
    power_iters: int = 100
    tol: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class HessianReport:
    trace_estimate: float
    trace_stderr: float
    top_eigenvalue: float
    eig_converged: bool
    n_hutchinson_samples: int
    power_iters: int


def stability_report(model: Differentiable, params: np.ndarray, poison, cfg: HessianConfig = HessianConfig()) -> HessianReport:
    """Trace and top eigenvalue of the poisoned-data loss Hessian at ``params``."""
    batch = poison.as_batch() if poison is not None else None

    def fn(v):
        return hvp(model, params, batch, v)

    d = model.total_params
    trace, stderr = hutchinson_trace(fn, d, cfg.n_samples, cfg.seed)
    eig = power_iter_top_eig(fn, d, cfg.power_iters, cfg.tol, cfg.seed)
    return HessianReport(trace, stderr, eig.value, eig.converged, cfg.n_samples, eig.iterations)
