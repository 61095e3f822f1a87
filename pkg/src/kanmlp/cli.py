"""Command-line interface: ``train``, ``bench``, ``analyze`` and ``verify``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .bench import (
    DEFAULT_SEEDS,
    DEFAULT_WIDTHS,
    ExperimentConfig,
    benchmark_suite,
    emit_flops,
    emit_history,
    emit_report,
    gen_dataset,
    run_experiment,
)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL", "EXIT_VERIFY"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("kanmlp")


class ConfigError(ValueError):
    pass


def _positive_scale(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"scale must lie in (0, 1], got {text}")
    return value


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, help="single model seed (overrides the config list)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--scale", type=_positive_scale, default=1.0, help="shrink epochs and data by this factor")
    p.add_argument("--problem", choices=["nonsmooth", "xor"])
    p.add_argument("--basis", choices=["spline", "relu"])
    p.add_argument("--free-knots", action="store_true", default=None)
    p.add_argument("--schedule", help="epochs per level, e.g. 32,16,8,4")
    p.add_argument("--order", type=int, help="spline order r")
    p.add_argument("--grid", type=int, help="initial grid size n")
    p.add_argument("--line-search", choices=["strong_wolfe", "none"], dest="line_search")
    p.add_argument("--timing", choices=["wall", "none"], default="wall",
                   help="'none' writes 0 seconds so reports are byte-reproducible")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kanmlp", description="KANs as multichannel MLPs: training and analysis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _add_experiment_flags(p)
    p.add_argument("--arch", choices=["kan", "mlp"])
    p.add_argument("--widths", help="layer widths, e.g. 2,5,1")

    p = sub.add_parser("bench", help="reproduce the benchmark tables")
    _add_experiment_flags(p)
    p.add_argument("--problems", default=None, help="comma list (default: both problems)")

    p = sub.add_parser("analyze", help="conditioning and NTK sweeps")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ntk-nets", type=int, default=5)

    p = sub.add_parser("verify", help="run the numerical property suite")
    p.add_argument("--only", default=None, help="comma list of check ids")
    return parser


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(t) for t in text.strip("[] ").split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"invalid {what}: {text!r}") from exc


def config_from_args(args, apply_scale: bool = True) -> ExperimentConfig:
    """Merge a config file (if any) with explicit flags; flags win."""
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in ("problem", "basis", "order", "grid", "line_search", "free_knots", "arch"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.schedule is not None:
        data["schedule"] = _int_list(args.schedule, "schedule")
    if getattr(args, "widths", None):
        data["widths"] = _int_list(args.widths, "widths")
    problem = data.get("problem", "nonsmooth")
    if problem in DEFAULT_SEEDS:
        data.setdefault("model_seeds", list(DEFAULT_SEEDS[problem]))
        if data.get("arch", "kan") == "kan":
            data.setdefault("widths", list(DEFAULT_WIDTHS[problem]))
    if args.seed is not None:
        data["model_seeds"] = [args.seed]
    try:
        cfg = ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.scaled(args.scale) if apply_scale else cfg


def _row_failed(row) -> bool:
    return row.failed > 0 or not math.isfinite(row.mse_mean)


def _write_histories(row, out: Path, stem: str) -> None:
    for seed, hist in row.histories.items():
        emit_history(hist, out / f"history_{stem}_seed{seed}.csv")


def _write_normalization(cfgs, out: Path) -> None:
    seen = {}
    for cfg in cfgs:
        key = (cfg.problem, cfg.data_seed, cfg.data_count, tuple(cfg.domain), cfg.rotation)
        if key not in seen:
            data = gen_dataset(cfg)
            seen[key] = {"problem": cfg.problem, "y_min": data.y_min, "y_max": data.y_max}
    (out / "normalization.json").write_text(json.dumps(list(seen.values()), indent=2) + "\n")


def _cmd_train(args) -> int:
    cfg = config_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.to_json() + "\n")
    row = run_experiment(cfg, timing=args.timing == "wall")
    emit_report([row], args.out / "results.csv")
    emit_flops([row], args.out / "flops.csv")
    _write_histories(row, args.out, cfg.digest())
    _write_normalization([cfg], args.out)
    print(f"{row.arch} {row.basis} {row.schedule} params={row.params} mse={row.mse_mean:.3e} "
          f"std={row.mse_std:.1e} failed={row.failed}/{row.seeds}")
    return EXIT_NUMERICAL if _row_failed(row) else EXIT_OK


def _cmd_bench(args) -> int:
    base = config_from_args(args, apply_scale=False)
    problems = ("nonsmooth", "xor") if args.problems is None else tuple(args.problems.split(","))
    if args.problem is not None and args.problems is None:
        problems = (args.problem,)
    for prob in problems:
        if prob not in DEFAULT_SEEDS:
            raise ConfigError(f"unknown problem {prob!r}")
    cfgs = benchmark_suite(base, problems)
    if args.scale != 1:
        cfgs = [c.scaled(args.scale) for c in cfgs]
    if args.seed is not None:
        cfgs = [c.replace(model_seeds=[args.seed]) for c in cfgs]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cfg in enumerate(cfgs):
        row = run_experiment(cfg, timing=args.timing == "wall")
        rows.append(row)
        free = " free" if row.free_knots else ""
        print(f"{row.problem:9s} {row.arch:14s} {row.basis:6s}{free:5s} {row.schedule:14s} "
              f"params={row.params:5d} mse={row.mse_mean:.3e} failed={row.failed}", flush=True)
        _write_histories(row, args.out, f"{i:02d}_{cfg.digest()}")
    emit_report(rows, args.out / "results.csv")
    emit_flops(rows, args.out / "flops.csv")
    _write_normalization(cfgs, args.out)
    # divergence is a reported table outcome (mse=inf, failed>0), not a run failure
    return EXIT_OK


def _cmd_analyze(args) -> int:
    from .spectra import run_analysis

    report = run_analysis(seed=args.seed, ntk_nets=args.ntk_nets)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out / "spectra.csv")
    print(f"wrote {len(report.rows)} rows to {args.out / 'spectra.csv'}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import CHECKS, run_checks

    select = None if args.only is None else args.only.split(",")
    if select is not None and not set(select) <= set(CHECKS):
        raise ConfigError(f"unknown check ids {sorted(set(select) - set(CHECKS))}; known: {list(CHECKS)}")
    results = run_checks(select)
    for res in results:
        print(res.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


COMMANDS = {"train": _cmd_train, "bench": _cmd_bench, "analyze": _cmd_analyze, "verify": _cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which would collide with the numerical-failure code
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
