"""Ground-truth scoring and multi-trial experiments.

An experiment generates one data set per (sweep point, trial), runs every
requested algorithm on it and records detection and false-alarm rates. The
trial seed is ``base_seed + trial`` and is reused across sweep points, so
sweep points are paired trial by trial.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .causality import MetricConfig
from .cda import infer_cda
from .core import Adjacency, InvalidConfigError, InvalidInputError, PathLike
from .emcda import EmConfig, run_em_cda, run_em_es
from .sim import SimConfig, generate

logger = logging.getLogger(__name__)

ALGORITHMS = ("CDA-GC", "CDA-TE", "EMCDA-GC", "EMCDA-TE", "EMES")
SWEEP_PARAMS = ("loss_star", "n_slots", "link_fraction", "n_nodes", "rate_star")

RESULT_COLUMNS = ["sweep_param", "sweep_value", "algorithm", "trial", "iteration",
                  "p_d", "p_fa", "wall_ms"]


@dataclass(frozen=True)
class Confusion:
    """Link-level confusion counts over ordered pairs ``i != j``."""

    tp: int
    fp: int
    tn: int
    fn: int


def confusion(truth: Adjacency, estimate: Adjacency) -> Confusion:
    if truth.n_nodes != estimate.n_nodes:
        raise InvalidInputError(
            f"truth has {truth.n_nodes} nodes, estimate has {estimate.n_nodes}")
    off = ~np.eye(truth.n_nodes, dtype=bool)
    t = truth.matrix.astype(bool)[off]
    e = estimate.matrix.astype(bool)[off]
    return Confusion(tp=int(np.sum(t & e)), fp=int(np.sum(~t & e)),
                     tn=int(np.sum(~t & ~e)), fn=int(np.sum(t & ~e)))


def rates(c: Confusion) -> Tuple[float, float]:
    """Return ``(p_fa, p_d)``.

    With no true non-links the false-alarm rate is 0; with no true links the
    detection rate is 1, since there was nothing to miss.
    """
    p_fa = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    p_d = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return p_fa, p_d


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a simulator setting, algorithms, trials and a sweep.

    ``cda_metric`` carries the settings of the one-shot CDA test (its
    ``kind`` is overridden per algorithm); EM variants use ``em.metric``
    with the kind likewise overridden. With ``record_timing`` off every
    ``wall_ms`` is written as 0 so result files are byte-reproducible.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    algorithms: Tuple[str, ...] = ("CDA-GC",)
    em: EmConfig = field(default_factory=EmConfig)
    cda_metric: MetricConfig = field(default_factory=MetricConfig)
    n_trials: int = 1
    base_seed: int = 0
    sweep_param: Optional[str] = None
    sweep_values: Tuple[float, ...] = ()
    record_timing: bool = True

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise InvalidConfigError("n_trials must be at least 1")
        if not self.algorithms:
            raise InvalidConfigError("at least one algorithm is required")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise InvalidConfigError(
                    f"unknown algorithm {a!r} in algorithms; choose from {ALGORITHMS}")
        if self.sweep_param is not None:
            if self.sweep_param not in SWEEP_PARAMS:
                raise InvalidConfigError(
                    f"cannot sweep {self.sweep_param!r}; choose from {SWEEP_PARAMS}")
            if not self.sweep_values:
                raise InvalidConfigError("sweep_values must not be empty")
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))

    def points(self) -> List[Tuple[str, float]]:
        if self.sweep_param is None:
            return [("none", 0.0)]
        return [(self.sweep_param, v) for v in self.sweep_values]

    def jobs(self) -> List[Tuple[int, str, float, int]]:
        """Job matrix as ``(point_index, sweep_param, sweep_value, trial)``."""
        return [(p, name, value, t) for p, (name, value) in enumerate(self.points())
                for t in range(self.n_trials)]


@dataclass(frozen=True)
class ResultRow:
    sweep_param: str
    sweep_value: float
    algorithm: str
    trial: int
    iteration: int
    p_d: float
    p_fa: float
    wall_ms: float


def _sim_for(cfg: ExperimentConfig, name: str, value: float, trial: int) -> SimConfig:
    changes = {"seed": cfg.base_seed + trial}
    if name != "none":
        changes[name] = int(value) if name in ("n_slots", "n_nodes") else float(value)
    return replace(cfg.sim, **changes)


def run_algorithm(name: str, obs, truth: Adjacency, cfg: ExperimentConfig, seed: int):
    """Run one algorithm; returns the final estimate and per-iteration rates."""
    kind = name.rsplit("-", 1)[-1].lower() if name != "EMES" else cfg.em.metric.kind
    if name.startswith("CDA"):
        est = infer_cda(obs, replace(cfg.cda_metric, kind=kind), rng_seed=seed)
        return est, []
    em_cfg = replace(cfg.em, metric=replace(cfg.em.metric, kind=kind), rng_seed=seed)
    runner = run_em_es if name == "EMES" else run_em_cda
    est, history = runner(obs, em_cfg, truth=truth)
    curve = [(r.p_d, r.p_fa) for r in history]
    return est, curve


def _run_job(args) -> List[ResultRow]:
    cfg, (point, name, value, trial) = args
    sim_cfg = _sim_for(cfg, name, value, trial)
    obs, truth, _, _ = generate(sim_cfg)
    seed = cfg.base_seed + trial
    rows = []
    for algo in cfg.algorithms:
        start = time.perf_counter()
        est, curve = run_algorithm(algo, obs, truth, cfg, seed)
        wall = (time.perf_counter() - start) * 1000.0 if cfg.record_timing else 0.0
        p_fa, p_d = rates(confusion(truth, est))
        rows.append(ResultRow(name, value, algo, trial, 0, p_d, p_fa, wall))
        if curve:
            # Carry the converged estimate forward so every trial has a full curve.
            curve = curve + [curve[-1]] * (cfg.em.max_iterations - len(curve))
            for it, (cd, cf) in enumerate(curve, start=1):
                rows.append(ResultRow(name, value, algo, trial, it, cd, cf, wall))
        logger.info("%s=%s trial %d %s: p_d=%.3f p_fa=%.3f", name, value, trial, algo, p_d, p_fa)
    return rows


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> List[ResultRow]:
    """Run every (sweep point, trial) job and return the result rows.

    ``iteration`` 0 holds each run's final estimate; EM algorithms add one
    row per iteration ``1..max_iterations``, repeating the final estimate
    after convergence. Rows are sorted by sweep point, algorithm, trial and
    iteration regardless of execution order.
    """
    job_list = [(cfg, job) for job in cfg.jobs()]
    if jobs <= 1 or len(job_list) == 1:
        chunks = [_run_job(j) for j in job_list]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_job, job_list))
    order = {a: k for k, a in enumerate(cfg.algorithms)}
    point_index = {value: k for k, (_, value) in enumerate(cfg.points())}
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (point_index[r.sweep_value], order[r.algorithm], r.trial, r.iteration))
    return rows


def aggregate(rows: Sequence[ResultRow]) -> List[Dict[str, object]]:
    """Mean and sample standard deviation per (sweep value, algorithm, iteration)."""
    groups: Dict[Tuple, List[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.sweep_param, r.sweep_value, r.algorithm, r.iteration), []).append(r)
    out = []
    for (param, value, algo, it), grp in groups.items():
        pd_ = np.array([r.p_d for r in grp])
        pf = np.array([r.p_fa for r in grp])
        wm = np.array([r.wall_ms for r in grp])
        ddof = 1 if len(grp) > 1 else 0
        out.append({
            "sweep_param": param, "sweep_value": value, "algorithm": algo, "iteration": it,
            "n": len(grp),
            "p_d_mean": float(pd_.mean()), "p_d_std": float(pd_.std(ddof=ddof)),
            "p_fa_mean": float(pf.mean()), "p_fa_std": float(pf.std(ddof=ddof)),
            "wall_ms_mean": float(wm.mean()),
        })
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(float(v), 12))
    return str(v)


def write_results(rows: Sequence[ResultRow], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RESULT_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(getattr(r, c)) for c in RESULT_COLUMNS) + "\n")


def write_aggregate(rows: Sequence[ResultRow], path: PathLike) -> None:
    agg = aggregate(rows)
    cols = ["sweep_param", "sweep_value", "algorithm", "iteration", "n",
            "p_d_mean", "p_d_std", "p_fa_mean", "p_fa_std", "wall_ms_mean"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for a in agg:
            fh.write(",".join(_fmt(a[c]) for c in cols) + "\n")


def read_results(path: PathLike) -> List[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [ResultRow(r["sweep_param"], float(r["sweep_value"]), r["algorithm"],
                          int(r["trial"]), int(r["iteration"]), float(r["p_d"]),
                          float(r["p_fa"]), float(r["wall_ms"])) for r in reader]


def mean_curve(rows: Sequence[ResultRow], algorithm: str,
               sweep_value: Optional[float] = None) -> np.ndarray:
    """Per-iteration trial means as an ``(I, 2)`` array of ``(p_d, p_fa)``."""
    sel = [r for r in rows if r.algorithm == algorithm and r.iteration > 0
           and (sweep_value is None or r.sweep_value == sweep_value)]
    its = sorted({r.iteration for r in sel})
    return np.array([[np.mean([r.p_d for r in sel if r.iteration == it]),
                      np.mean([r.p_fa for r in sel if r.iteration == it])] for it in its])


def write_em_trace(history, path: PathLike) -> None:
    """One row per EM iteration: rates against truth (blank if unknown),
    mean rate and loss over active links, and adjacency edits."""
    with open(path, "w", newline="") as fh:
        fh.write("n,p_d,p_fa,mean_rate,mean_loss,edit_distance\n")
        for r in history:
            p_d = "" if r.p_d is None else _fmt(float(r.p_d))
            p_fa = "" if r.p_fa is None else _fmt(float(r.p_fa))
            fh.write(f"{r.iteration},{p_d},{p_fa},{_fmt(r.mean_rate)},{_fmt(r.mean_loss)},"
                     f"{r.edit_distance}\n")
