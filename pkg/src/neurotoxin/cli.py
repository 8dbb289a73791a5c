"""Command-line entry point: ``neurotoxin <subcommand> [options]``.

Every ExperimentConfig field is exposed as a dotted flag, e.g.
``--attack.mask_ratio 0.05`` or ``--task.poison_kind edge_case``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .analysis import HessianConfig
from .experiment import (
    ConfigError,
    calibrate_dp_sigma,
    ExperimentConfig,
    config_to_dict,
    load_config,
    median,
    rows_to_csv,
    run_experiment,
    sweep_attack_num,
    sweep_mask_ratio,
    tune_clip,
)
from .server import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _value(text: str):
    """JSON scalars and lists pass through; anything else stays a string."""
    if text.lower() == "none":
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _leaves(d: dict, prefix: str = ""):
    for key, value in d.items():
        if isinstance(value, dict):
            yield from _leaves(value, f"{prefix}{key}.")
        else:
            yield prefix + key


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurotoxin", description="Durable-backdoor federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    fields = common.add_argument_group("config fields")
    for key in _leaves(config_to_dict(ExperimentConfig())):
        if key in ("master_seed", "output_dir"):
            continue
        fields.add_argument(f"--{key}", dest=f"cfg:{key}", type=_value, metavar="VALUE")

    sub.add_parser("run", parents=[common], help="run one experiment")

    p = sub.add_parser("sweep-mask", parents=[common], help="lifespan vs. mask ratio")
    p.add_argument("--ratios", type=_floats, default=[0.0, 0.01, 0.05, 0.45])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])

    p = sub.add_parser("sweep-attacknum", parents=[common], help="lifespan vs. AttackNum for both methods")
    p.add_argument("--nums", type=_ints, default=[10, 20, 40])
    p.add_argument("--mask-ratio", type=float, default=0.05)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])

    p = sub.add_parser("tune-clip", parents=[common], help="choose a clip norm from attack-free runs")
    p.add_argument("--candidates", type=_floats, required=True)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument(
        "--dp-multipliers",
        type=_floats,
        help="also calibrate a weak-DP sigma as multiples of clip/devices_per_round at the chosen clip",
    )

    p = sub.add_parser("hessian-report", parents=[common], help="loss-curvature report at the attack-stop model")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--power-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(Path(args.config).read_text()) if args.config else ExperimentConfig()
    changes = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.out is not None and args.command in ("run", "hessian-report"):
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def _emit_table(rows: list[dict], out: str | None, name: str) -> None:
    text = rows_to_csv(rows)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    sys.stdout.write(text)


def _medians(rows: list[dict], key: str) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key] if key != "attack_num" else (r["method"], r[key]), []).append(r["lifespan"])
    return {str(k): median(v) for k, v in groups.items()}


def dispatch(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    if args.command == "run":
        log = run_experiment(cfg)
        print(json.dumps({"lifespan": log.lifespan, "final_benign_acc": log.rounds[-1].benign_acc}))
    elif args.command == "sweep-mask":
        rows = sweep_mask_ratio(cfg, args.ratios, args.seeds)
        _emit_table(rows, args.out, "sweep_mask.csv")
        print(json.dumps({"median_lifespan": _medians(rows, "mask_ratio")}), file=sys.stderr)
    elif args.command == "sweep-attacknum":
        rows = sweep_attack_num(cfg, args.nums, args.mask_ratio, args.seeds)
        _emit_table(rows, args.out, "sweep_attacknum.csv")
        print(json.dumps({"median_lifespan": _medians(rows, "attack_num")}), file=sys.stderr)
    elif args.command == "tune-clip":
        chosen, table = tune_clip(cfg, args.candidates, args.tolerance)
        _emit_table(table, args.out, "tune_clip.csv")
        result = {"chosen_clip_norm": chosen}
        if args.dp_multipliers:
            sigma, dp_table = calibrate_dp_sigma(cfg.replace(**{"defense.clip_norm": chosen}), args.dp_multipliers, args.tolerance)
            _emit_table(dp_table, args.out, "calibrate_dp.csv")
            result["chosen_dp_sigma"] = sigma
        print(json.dumps(result))
    elif args.command == "hessian-report":
        if cfg.plan.attack_num == 0:
            raise ConfigError("plan.attack_num: the report is taken at the attack-stop round, so an attack is required")
        log = run_experiment(cfg, hessian=HessianConfig(args.samples, args.power_iters, args.tol, cfg.master_seed))
        print(json.dumps(log.summary()["hessian"], indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
