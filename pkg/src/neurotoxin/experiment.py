"""Experiment configuration, orchestration, sweeps, and log emission."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .analysis import HessianConfig, HessianReport, lifespan, stability_report
from .attack import AttackConfig, AttackPlan
from .data import (
    Dataset,
    PoisonKind,
    TriggerPatch,
    gen_blobs,
    load_digits_dataset,
    load_ftds,
    make_base_case_poison,
    make_edge_case_poison,
    make_pixel_trigger_poison,
    partition_dirichlet,
)
from .nn import Model, TrainConfig, lenet_spec, mlp_spec
from .seeding import derive_seed
from .server import DefenseConfig, FedTask, RoundConfig, RoundLog, ServerState, run_round

CSV_COLUMNS = ("round", "benign_acc", "attack_acc", "attacker_present", "aggregate_norm")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass(frozen=True)
class TaskConfig:
    dataset: str = "blobs"
    num_classes: int = 10
    dims: int = 32
    per_class: int = 200
    test_per_class: int = 100
    spread: float = 1.0
    hidden: tuple[int, ...] = (64,)
    # "mlp" flattens image inputs; "lenet" needs (c, h, w) inputs
    model: str = "mlp"
    n_devices: int = 200
    alpha: float = 0.5
    poison_kind: str = "edge_case"
    source_class: int = 5
    target_class: int = 9
    poison_train_n: int = 64
    poison_eval_n: int = 200
    trigger_width: int = 2
    trigger_height: int = 1
    trigger_value: float = 4.0
    # OOD centres sit this many ``spread`` units off the clean centres, per coordinate
    ood_shift: float = 2.0
    data_file: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    total_rounds: int = 300
    devices_per_round: int = 10
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.3))
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig(clip_norm=1.0))
    # the PGD bound matches the clip so the server clip never rescales the attacker
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(mask_ratio=0.05, pgd_norm_bound=1.0))
    # attacking every other round keeps the attacker's own last update out of the aggregate it masks against
    plan: AttackPlan = field(default_factory=lambda: AttackPlan(start_round=100, attack_num=20, frequency=2))
    master_seed: int = 0
    eval_every: int = 1
    kappa: float = 0.5
    output_dir: str | None = None

    def validate(self) -> None:
        t = self.task
        checks = [
            (self.total_rounds >= 1, "total_rounds", "must be >= 1"),
            (self.eval_every >= 1, "eval_every", "must be >= 1"),
            (0 < self.kappa < 1, "kappa", "must lie in (0, 1)"),
            (1 <= self.devices_per_round <= t.n_devices, "devices_per_round", f"must lie in [1, {t.n_devices}]"),
            (
                self.plan.attack_num == 0 or self.total_rounds > self.plan.last_attack_round + 1,
                "total_rounds",
                "must leave at least one round after the last attack",
            ),
            (t.dataset in ("blobs", "digits", "ftds"), "task.dataset", "must be blobs, digits or ftds"),
            (t.dataset != "ftds" or bool(t.data_file), "task.data_file", "required for the ftds dataset"),
            (t.poison_kind in {k.value for k in PoisonKind}, "task.poison_kind", "unknown poison kind"),
            (t.source_class != t.target_class, "task.source_class", "must differ from target_class"),
            (0 <= t.target_class < t.num_classes, "task.target_class", "out of range"),
            (t.poison_train_n >= 1 and t.poison_eval_n >= 1, "task.poison_train_n", "poison sizes must be >= 1"),
            (t.alpha > 0, "task.alpha", "must be positive"),
            (t.model in ("mlp", "lenet"), "task.model", "must be mlp or lenet"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}")

    def round_config(self) -> RoundConfig:
        return RoundConfig(self.devices_per_round, self.train, self.defense, self.attack, self.plan)

    def replace(self, **changes) -> ExperimentConfig:
        """``dataclasses.replace`` that also accepts dotted keys such as ``attack.mask_ratio``."""
        return config_from_dict(_merge(config_to_dict(self), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = json.loads(json.dumps(base))
    for key, value in changes.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = value
    return out


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d["task"]["hidden"] = list(cfg.task.hidden)
    return d


_SECTIONS = {
    "task": TaskConfig,
    "train": TrainConfig,
    "defense": DefenseConfig,
    "attack": AttackConfig,
    "plan": AttackPlan,
}


def _build(cls, data: dict, prefix: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{prefix}{sorted(unknown)[0]}: unknown field")
    kwargs = dict(data)
    if cls is AttackConfig and "train" in kwargs:
        kwargs["train"] = _build(TrainConfig, kwargs["train"], f"{prefix}train.")
    if cls is TaskConfig and "hidden" in kwargs:
        kwargs["hidden"] = tuple(int(h) for h in kwargs["hidden"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), f"{name}.")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    cfg = ExperimentConfig(**kwargs, **data)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def load_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def _load_dataset(t: TaskConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """(train, test, attacker_pool) with disjoint samples."""
    if t.dataset == "blobs":
        train = gen_blobs(t.num_classes, t.per_class, t.dims, t.spread, derive_seed(seed, "data", "train"))
        test = gen_blobs(t.num_classes, t.test_per_class, t.dims, t.spread, derive_seed(seed, "data", "test"), means=train.means)
        pool_n = max(t.poison_train_n + t.poison_eval_n, t.per_class)
        pool = gen_blobs(t.num_classes, pool_n, t.dims, t.spread, derive_seed(seed, "data", "pool"), means=train.means)
        return train, test, pool
    full = load_digits_dataset() if t.dataset == "digits" else load_ftds(t.data_file)
    perm = np.random.default_rng(derive_seed(seed, "data", "split")).permutation(len(full))
    n_test = len(full) // 5
    n_pool = len(full) // 5
    return full.subset(perm[n_test + n_pool :]), full.subset(perm[:n_test]), full.subset(perm[n_test : n_test + n_pool])


def build_task(cfg: ExperimentConfig) -> FedTask:
    t = cfg.task
    seed = cfg.master_seed
    train, test, pool = _load_dataset(t, seed)
    n_poison = t.poison_train_n + t.poison_eval_n
    poison_seed = derive_seed(seed, "poison")
    kind = PoisonKind(t.poison_kind)
    benign_eval = test
    if kind is PoisonKind.BASE_CASE:
        poison = make_base_case_poison(pool, t.source_class, t.target_class, n_poison, poison_seed)
        # the backdoor deliberately flips the source class; score the main task on the rest
        benign_eval = test.subset(np.flatnonzero(test.labels != t.source_class))
    elif kind is PoisonKind.PIXEL_TRIGGER:
        patch = TriggerPatch(0, 0, t.trigger_height, t.trigger_width, t.trigger_value)
        poison = make_pixel_trigger_poison(pool, patch, t.target_class, n_poison, poison_seed)
    else:
        if train.means is None:
            raise ConfigError("task.poison_kind: edge_case needs a blobs dataset")
        per = -(-n_poison // t.num_classes)
        ood = gen_blobs(t.num_classes, per, t.dims, t.spread, derive_seed(seed, "data", "ood"), means=train.means, shift=t.ood_shift * t.spread)
        ood = ood.subset(np.random.default_rng(poison_seed).permutation(len(ood))[:n_poison])
        poison = make_edge_case_poison(ood, t.target_class)
    poison_train, poison_eval = poison.split(t.poison_train_n)

    if t.model == "lenet":
        if len(train.input_shape) != 3:
            raise ConfigError("task.model: lenet needs image inputs")
        spec = lenet_spec(train.input_shape, t.num_classes)
    else:
        spec = mlp_spec(int(np.prod(train.input_shape)), t.hidden, t.num_classes)
    partition = partition_dirichlet(train, t.n_devices, t.alpha, derive_seed(seed, "partition"))
    return FedTask(Model(spec), train, partition, test, poison_train, poison_eval, benign_eval)


@dataclass
class ExperimentLog:
    rounds: list[RoundLog]
    config: ExperimentConfig
    lifespan: int | None
    post_attack_series: list[float]
    # global model right after the last attacked round
    attack_stop_params: np.ndarray | None = field(default=None, repr=False)
    final_params: np.ndarray | None = field(default=None, repr=False)
    wall_seconds: float = 0.0
    hessian: HessianReport | None = None

    def benign_acc_at(self, rnd: int) -> float:
        for r in self.rounds:
            if r.round == rnd:
                return r.benign_acc
        raise KeyError(rnd)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rounds:
            writer.writerow([r.round, repr(r.benign_acc), repr(r.attack_acc), int(r.attacker_present), repr(r.aggregate_norm)])
        return buf.getvalue()

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "config": config_to_dict(self.config),
            "lifespan": self.lifespan,
            "n_rounds_logged": len(self.rounds),
        }
        if self.hessian is not None:
            out["hessian"] = dataclasses.asdict(self.hessian)
        return out

    def write(self, out_dir: str | Path) -> Path:
        """Write ``rounds.csv`` and ``summary.json`` (both deterministic) plus ``timing.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rounds.csv").write_text(self.to_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_seconds": self.wall_seconds}) + "\n")
        return out


def run_experiment(
    cfg: ExperimentConfig,
    task: FedTask | None = None,
    workers: int = 1,
    hessian: HessianConfig | None = None,
) -> ExperimentLog:
    cfg.validate()
    started = time.perf_counter()
    task = task or build_task(cfg)
    state = ServerState(task.model.init_params(derive_seed(cfg.master_seed, "init")))
    rcfg = cfg.round_config()
    last_attack = cfg.plan.last_attack_round
    logs: list[RoundLog] = []
    stop_params = None
    for rnd in range(cfg.total_rounds):
        evaluate = rnd % cfg.eval_every == 0
        state, log = run_round(state, task, rcfg, cfg.master_seed, evaluate=evaluate, workers=workers)
        if evaluate:
            logs.append(log)
        if rnd == last_attack:
            stop_params = state.global_params.copy()
    series = [r.attack_acc for r in logs if last_attack is not None and r.round > last_attack]
    span = lifespan(series, cfg.kappa) if series else None
    report = None
    if hessian is not None and stop_params is not None:
        report = stability_report(task.model, stop_params, task.poison_train, hessian)
    log = ExperimentLog(logs, cfg, span, series, stop_params, state.global_params, time.perf_counter() - started, report)
    if cfg.output_dir:
        log.write(cfg.output_dir)
    return log


def median(values: Iterable[float]) -> float:
    return float(statistics.median(list(values)))


def sweep_mask_ratio(base_cfg: ExperimentConfig, ratios: Sequence[float], seeds: Sequence[int] | None = None) -> list[dict]:
    """One row per (ratio, seed) with the run's lifespan."""
    seeds = [base_cfg.master_seed] if seeds is None else list(seeds)
    rows = []
    for k in ratios:
        if not 0 <= k < 1:
            raise ConfigError(f"attack.mask_ratio: {k} outside [0, 1)")
        for s in seeds:
            log = run_experiment(base_cfg.replace(**{"attack.mask_ratio": k, "master_seed": s, "output_dir": None}))
            rows.append({"mask_ratio": k, "seed": s, "lifespan": log.lifespan})
    return rows


def sweep_attack_num(
    base_cfg: ExperimentConfig,
    nums: Sequence[int],
    mask_ratio: float = 0.05,
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    """Lifespan for the baseline (ratio 0) and the masked attack at each AttackNum.

    The number of rounds after the last attack is held at the base config's value,
    so every AttackNum is measured against the same lifespan ceiling.
    """
    seeds = [base_cfg.master_seed] if seeds is None else list(seeds)
    plan = base_cfg.plan
    horizon = base_cfg.total_rounds - plan.start_round - max(plan.attack_num, 1) * plan.frequency
    rows = []
    for num in nums:
        if num < 1:
            raise ConfigError(f"plan.attack_num: {num} must be >= 1")
        total = plan.start_round + num * plan.frequency + max(horizon, 1)
        for method, k in (("baseline", 0.0), ("neurotoxin", mask_ratio)):
            for s in seeds:
                cfg = base_cfg.replace(
                    **{"plan.attack_num": num, "attack.mask_ratio": k, "master_seed": s, "total_rounds": total, "output_dir": None}
                )
                rows.append({"attack_num": num, "method": method, "seed": s, "lifespan": run_experiment(cfg).lifespan})
    return rows


def _attack_free_acc(base_cfg: ExperimentConfig, **changes) -> float:
    cfg = base_cfg.replace(**{"plan.attack_num": 0, "output_dir": None}, **changes)
    return run_experiment(cfg).rounds[-1].benign_acc


def tune_clip(base_cfg: ExperimentConfig, candidates: Sequence[float], tolerance: float = 0.01) -> tuple[float, list[dict]]:
    """Attack-free runs per clip norm; pick the smallest whose final benign accuracy
    is within ``tolerance`` of the unclipped run."""
    if not candidates:
        raise ConfigError("candidates: at least one clip norm is required")
    if any(p <= 0 for p in candidates):
        raise ConfigError("candidates: clip norms must be positive")
    ref_acc = _attack_free_acc(base_cfg, **{"defense.clip_norm": None})
    table = [{"clip_norm": None, "benign_acc": ref_acc}]
    ok = []
    for p in candidates:
        acc = _attack_free_acc(base_cfg, **{"defense.clip_norm": float(p)})
        table.append({"clip_norm": float(p), "benign_acc": acc})
        if acc >= ref_acc - tolerance:
            ok.append(float(p))
    chosen = min(ok) if ok else max(table[1:], key=lambda r: (r["benign_acc"], r["clip_norm"]))["clip_norm"]
    return chosen, table


def calibrate_dp_sigma(
    base_cfg: ExperimentConfig, multipliers: Sequence[float], tolerance: float = 0.01
) -> tuple[float, list[dict]]:
    """Pick the largest weak-DP noise level that leaves benign accuracy intact.

    Candidates are ``m * p / devices_per_round`` for the configured clip norm ``p``,
    i.e. multiples of one clipped update's share of the average. Each is scored
    on an attack-free run against the noise-free one, keeping the clip.
    """
    p = base_cfg.defense.clip_norm
    if p is None:
        raise ConfigError("defense.clip_norm: DP calibration needs a clip norm")
    if not multipliers or any(m <= 0 for m in multipliers):
        raise ConfigError("multipliers: need at least one positive multiplier")
    ref_acc = _attack_free_acc(base_cfg, **{"defense.dp_sigma": 0.0})
    table = [{"dp_sigma": 0.0, "benign_acc": ref_acc}]
    ok = [0.0]
    for m in multipliers:
        sigma = float(m) * p / base_cfg.devices_per_round
        acc = _attack_free_acc(base_cfg, **{"defense.dp_sigma": sigma})
        table.append({"dp_sigma": sigma, "benign_acc": acc})
        if acc >= ref_acc - tolerance:
            ok.append(sigma)
    return max(ok), table


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
