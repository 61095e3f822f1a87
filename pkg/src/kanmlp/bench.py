"""Regression benchmarks: targets, datasets, experiment runner and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .knots import BasisKind
from .network import Network, build_kan, build_mlp, count_params, network_forward
from .optim import (
    AdamConfig,
    HistoryRow,
    LbfgsConfig,
    NumericalFailure,
    Schedule,
    schedule_flops,
    train_multilevel,
)

__all__ = [
    "target_nonsmooth",
    "target_xor",
    "TARGETS",
    "ExperimentConfig",
    "Dataset",
    "gen_dataset",
    "build_network",
    "ResultRow",
    "run_experiment",
    "emit_report",
    "emit_history",
    "emit_flops",
    "read_report",
    "REPORT_HEADER",
    "HISTORY_HEADER",
    "benchmark_suite",
    "COARSE",
    "FINE",
    "MULTILEVEL",
    "DEFAULT_SEEDS",
    "DEFAULT_WIDTHS",
]

log = logging.getLogger(__name__)

REPORT_HEADER = ["problem", "arch", "basis", "free_knots", "schedule", "params", "mse_mean", "mse_std", "seconds"]
HISTORY_HEADER = ["level", "epoch", "loss", "grad_norm"]
FLOPS_HEADER = ["problem", "arch", "basis", "free_knots", "schedule", "flops_per_sample_epoch"]

NONSMOOTH_ROTATION = 0.175


def target_nonsmooth(x, y, rotation: float = NONSMOOTH_ROTATION):
    """Nonsmooth target evaluated at coordinates rotated counterclockwise by ``rotation``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c, s = math.cos(rotation), math.sin(rotation)
    xr = c * x - s * y
    yr = s * x + c * y
    return (
        np.cos(4 * np.pi * xr)
        + np.sin(np.pi * yr)
        + np.sin(2 * np.pi * yr)
        + np.abs(np.sin(3 * np.pi * yr**2))
    )


def target_xor(x, y):
    """Smoothed XOR: ``tanh(20x - 10) * tanh(20x - 40y + 10)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.tanh(20 * x - 10) * np.tanh(20 * x - 40 * y + 10)


TARGETS = {"nonsmooth": target_nonsmooth, "xor": target_xor}
DEFAULT_SEEDS = {"nonsmooth": [1234, 1235, 1236, 1237, 1238], "xor": [1232, 1233, 1234, 1235, 1236]}
DEFAULT_WIDTHS = {"nonsmooth": [2, 5, 1], "xor": [2, 5, 5, 1]}


@dataclass
class ExperimentConfig:
    """Everything that determines one table row.

    ``arch`` is ``"kan"`` or ``"mlp"``; ``grid`` and ``order`` are the
    initial KAN grid size ``n`` and spline order ``r``.
    """

    problem: str = "nonsmooth"
    arch: str = "kan"
    widths: list[int] = field(default_factory=lambda: [2, 5, 1])
    order: int = 3
    grid: int = 3
    basis: str = "spline"
    free_knots: bool = False
    schedule: list[int] = field(default_factory=lambda: [32, 16, 8, 4])
    optimizer: str = "lbfgs"
    lr: float = 1.0
    line_search: str = "strong_wolfe"
    history_size: int = 10
    iters_per_epoch: int = 20
    data_seed: int = 0
    model_seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS["nonsmooth"]))
    data_count: int = 20000
    domain: list[float] = field(default_factory=lambda: [0.0001, 0.9999])
    rotation: float = NONSMOOTH_ROTATION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.problem not in TARGETS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.arch not in ("kan", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths}")
        if self.widths[0] != 2 or self.widths[-1] != 1:
            raise ValueError("benchmark networks map 2 inputs to 1 output")
        BasisKind.parse(self.basis)
        Schedule.parse(self.schedule)
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.order < 2 or self.grid < 1:
            raise ValueError("need order >= 2 and grid >= 1")
        if self.data_count < 2 or not self.model_seeds:
            raise ValueError("need at least two samples and one model seed")
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError(f"invalid domain {self.domain}")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def scaled(self, factor: float) -> "ExperimentConfig":
        """Shrink epochs and data by ``factor`` (nonzero levels stay nonzero)."""
        if not 0 < factor <= 1:
            raise ValueError(f"scale must lie in (0, 1], got {factor}")
        if factor == 1:
            return self.replace()
        sched = Schedule.parse(self.schedule).scaled(factor)
        return self.replace(schedule=list(sched.epochs), data_count=max(2, math.ceil(self.data_count * factor)))

    @property
    def arch_label(self) -> str:
        return f"{self.arch.upper()}[{','.join(str(w) for w in self.widths)}]"

    def optimizer_config(self):
        if self.optimizer == "adam":
            return AdamConfig(lr=self.lr)
        return LbfgsConfig(lr=self.lr, history_size=self.history_size, line_search=self.line_search)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    y_min: float
    y_max: float


def gen_dataset(cfg: ExperimentConfig) -> Dataset:
    """Uniform samples on the square and min-max normalized targets in ``[0, 1]``."""
    rng = np.random.default_rng(cfg.data_seed)
    lo, hi = cfg.domain
    X = rng.uniform(lo, hi, size=(cfg.data_count, 2))
    if cfg.problem == "nonsmooth":
        raw = target_nonsmooth(X[:, 0], X[:, 1], cfg.rotation)
    else:
        raw = target_xor(X[:, 0], X[:, 1])
    y_min, y_max = float(raw.min()), float(raw.max())
    Y = ((raw - y_min) / (y_max - y_min))[:, None]
    return Dataset(X, Y, y_min, y_max)


def build_network(cfg: ExperimentConfig, seed: int) -> Network:
    if cfg.arch == "mlp":
        return build_mlp(cfg.widths, seed=seed)
    return build_kan(cfg.widths, cfg.grid, cfg.order, cfg.basis, free_knots=cfg.free_knots, seed=seed)


@dataclass
class ResultRow:
    problem: str
    arch: str
    basis: str
    free_knots: bool
    schedule: str
    params: int
    mse_mean: float
    mse_std: float
    seconds: float
    seeds: int = 0
    failed: int = 0
    digest: str = ""
    flops: int = 0
    mse_per_seed: list[float] = field(default_factory=list)
    histories: dict[int, list[HistoryRow]] = field(default_factory=dict, repr=False)


def run_experiment(cfg: ExperimentConfig, timing: bool = True) -> ResultRow:
    """Train one network per model seed and summarize the final full-data MSE.

    Seeds whose training produces a non-finite loss are excluded from the
    statistics and counted in ``failed``; if every seed fails the MSE is
    reported as infinite.
    """
    data = gen_dataset(cfg)
    # trailing empty levels only refine an already-trained net: the function and
    # FLOPs are unchanged, so train and count parameters at the last trained level
    epochs = list(Schedule.parse(cfg.schedule).epochs)
    while len(epochs) > 1 and epochs[-1] == 0:
        epochs.pop()
    start = time.perf_counter()
    mses, histories, failed, params = [], {}, 0, 0
    flops = 0
    for seed in cfg.model_seeds:
        net = build_network(cfg, seed)
        if not flops:
            flops = schedule_flops(net, cfg.schedule)
        try:
            res = train_multilevel(net, data.X, data.Y, epochs, cfg.optimizer_config(), cfg.iters_per_epoch)
        except NumericalFailure as exc:
            failed += 1
            log.warning("seed %d failed: %s", seed, exc)
            continue
        pred = network_forward(res.net, data.X)
        mse = float(np.mean((pred - data.Y) ** 2))
        if not math.isfinite(mse):
            failed += 1
            continue
        mses.append(mse)
        histories[seed] = res.history
        params = count_params(res.net)
    if not params:
        from .refinement import refine_network

        net = build_network(cfg, cfg.model_seeds[0])
        for _ in range(len(epochs) - 1):
            net = refine_network(net)
        params = count_params(net)
    seconds = time.perf_counter() - start if timing else 0.0
    if failed:
        log.warning("%s: %d of %d seeds failed", cfg.arch_label, failed, len(cfg.model_seeds))
    mean = float(np.mean(mses)) if mses else math.inf
    std = float(np.std(mses)) if mses else math.inf
    basis = "relu" if cfg.arch == "mlp" else BasisKind.parse(cfg.basis).value
    return ResultRow(
        cfg.problem,
        cfg.arch_label,
        basis,
        bool(cfg.free_knots) and cfg.arch == "kan",
        str(Schedule.parse(cfg.schedule)),
        params,
        mean,
        std,
        seconds,
        len(cfg.model_seeds),
        failed,
        cfg.digest(),
        flops,
        mses,
        histories,
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def emit_report(rows: Iterable[ResultRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for row in rows:
            w.writerow([_fmt(getattr(row, name)) for name in REPORT_HEADER])


def read_report(path) -> list[dict]:
    """Parse a report written by :func:`emit_report` back into typed dicts."""
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rec["free_knots"] = rec["free_knots"] == "true"
            rec["params"] = int(rec["params"])
            for key in ("mse_mean", "mse_std", "seconds"):
                rec[key] = float(rec[key])
            out.append(rec)
    return out


def emit_history(history: Sequence[HistoryRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for h in history:
            w.writerow([h.level, h.epoch, _fmt(float(h.loss)), _fmt(float(h.grad_norm))])


def emit_flops(rows: Iterable[ResultRow], path) -> None:
    """Nominal per-sample training FLOPs of each row's schedule."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLOPS_HEADER)
        for row in rows:
            w.writerow([row.problem, row.arch, row.basis, _fmt(row.free_knots), row.schedule, row.flops])


COARSE, FINE, MULTILEVEL = [128, 0, 0, 0], [0, 0, 0, 16], [32, 16, 8, 4]


def benchmark_suite(base: ExperimentConfig | None = None, problems=("nonsmooth", "xor")) -> list[ExperimentConfig]:
    """The table rows: both bases and fidelities, free knots, and MLP baselines."""
    base = ExperimentConfig() if base is None else base
    cfgs = []
    mlps = {"nonsmooth": [[2, 5, 1], [2, 30, 1], [2, 20, 20, 1]], "xor": [[2, 5, 5, 1], [2, 40, 40, 1]]}
    for problem in problems:
        common = dict(problem=problem, widths=list(DEFAULT_WIDTHS[problem]),
                      model_seeds=list(DEFAULT_SEEDS[problem]))
        for basis in ("relu", "spline"):
            for sched in (COARSE, FINE, MULTILEVEL):
                cfgs.append(base.replace(basis=basis, schedule=list(sched), free_knots=False, **common))
        for basis in ("relu", "spline"):
            for sched in (COARSE, FINE):
                cfgs.append(base.replace(basis=basis, schedule=list(sched), free_knots=True, **common))
        for widths in mlps[problem]:
            cfgs.append(base.replace(arch="mlp", basis="relu", free_knots=False, schedule=[128],
                                     **{**common, "widths": widths}))
    return cfgs
