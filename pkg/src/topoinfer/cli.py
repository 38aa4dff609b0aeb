"""Command-line front end: ``topoinfer simulate | infer | experiment``.

Every command exits 0 on success and 1 on any error (2 for usage errors).
All randomness flows from ``--seed`` or the seeds in the config file. The
``TOPOINFER_LOG`` environment variable sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

from .causality import MetricConfig
from .cda import infer_cda
from .config import bundled_config, load_config
from .core import (InvalidConfigError, InvalidInputError, ObservationSet, TopoInferError,
                   read_adjacency, read_observations, write_adjacency, write_latent,
                   write_observations, write_params)
from .emcda import EmConfig, run_em_cda, run_em_es
from .evaluation import run_experiment, write_aggregate, write_em_trace, write_results
from .sim import generate, ingest_trace, read_trace

logger = logging.getLogger("topoinfer")

ALGOS = ("cda", "em-cda", "em-es")


def _te_windows(text: str) -> Tuple[int, int]:
    try:
        s, r = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected two integers 's,r'") from None
    return s, r


def _resolve_config(name: str) -> Path:
    """A file path, or the name of a bundled config such as ``fig3``."""
    path = Path(name)
    if path.exists() or path.suffix:
        return path
    return bundled_config(name)


def _read_input(path: Path, slot_duration: float) -> ObservationSet:
    """Observation CSV, or a ``timestamp_s,node,kind`` trace to be binned."""
    with open(path) as fh:
        header = fh.readline().strip()
    if header.startswith("timestamp_s"):
        records = read_trace(path)
        n_nodes = max((r.node for r in records), default=1)
        return ingest_trace(records, slot_duration, n_nodes)
    return read_observations(path, slot_duration)


def _metric_from_args(args) -> MetricConfig:
    fields = {"kind": args.metric}
    if args.alpha is not None:
        fields["alpha"] = args.alpha
    if args.ar_order is not None:
        fields["ar_order"] = args.ar_order
    if args.te_windows is not None:
        fields["te_src_window"], fields["te_dst_window"] = args.te_windows
    if args.permutations is not None:
        fields["permutations"] = args.permutations
    if args.tau_max is not None:
        fields["max_delay"] = args.tau_max
    return MetricConfig(**fields)


def cmd_simulate(args) -> int:
    cfg = load_config(_resolve_config(args.config)).sim
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obs, truth, params, latent = generate(cfg)
    write_observations(obs, out / "observations.csv")
    write_adjacency(truth, out / "truth_adjacency.csv")
    written = ["observations.csv", "truth_adjacency.csv"]
    if params is not None:
        write_params(params, out / "truth_params.csv")
        write_latent(latent, out / "latent.csv")
        written += ["truth_params.csv", "latent.csv"]
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_infer(args) -> int:
    obs = _read_input(Path(args.observations), args.slot_duration)
    metric = _metric_from_args(args)
    seed = 0 if args.seed is None else args.seed
    truth = read_adjacency(args.truth, obs.n_nodes) if args.truth else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.algo == "cda":
        est = infer_cda(obs, metric, rng_seed=seed)
        history = None
    else:
        em_fields = {"metric": metric, "rng_seed": seed}
        if args.samples is not None:
            em_fields["n_samples"] = args.samples
        if args.max_iters is not None:
            em_fields["max_iterations"] = args.max_iters
        if args.em_permutations is not None:
            em_fields["permutations"] = args.em_permutations
        runner = run_em_es if args.algo == "em-es" else run_em_cda
        est, history = runner(obs, EmConfig(**em_fields), truth=truth)
    write_adjacency(est, out / "adjacency.csv")
    if history is not None:
        write_em_trace(history, out / "em_trace.csv")
    print(f"{args.algo}: {est.n_links()} links written to {out / 'adjacency.csv'}")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(_resolve_config(args.config)).experiment
    if cfg is None:
        raise InvalidConfigError(f"{args.config}: no 'experiment' section")
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.dry_run:
        print("point,sweep_param,sweep_value,trial,algorithms")
        for point, name, value, trial in cfg.jobs():
            print(f"{point},{name},{value},{trial},{' '.join(cfg.algorithms)}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    rows = run_experiment(cfg, jobs=jobs)
    write_results(rows, out / "results.csv")
    write_aggregate(rows, out / "aggregate.csv")
    print(f"{len(rows)} result rows written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="topoinfer", description="Infer network topology from packet timing counts.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate observations and ground truth")
    p.add_argument("--config", required=True, help="YAML file or bundled config name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override sim.seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="estimate the adjacency from observations")
    p.add_argument("observations", help="observation CSV or timestamp trace CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--algo", choices=ALGOS, default="cda")
    p.add_argument("--metric", choices=("gc", "te"), default="gc")
    p.add_argument("--alpha", type=float)
    p.add_argument("--ar-order", type=int)
    p.add_argument("--te-windows", type=_te_windows, metavar="S,R")
    p.add_argument("--permutations", type=int, help="permutations for the CDA test")
    p.add_argument("--em-permutations", type=int, help="permutations per EM sample test")
    p.add_argument("--samples", type=int, metavar="M", help="Gibbs samples per EM iteration")
    p.add_argument("--tau-max", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--truth", help="true adjacency CSV; adds p_d and p_fa to the EM trace")
    p.add_argument("--slot-duration", type=float, default=0.0015,
                   help="slot length in seconds for trace input")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("experiment", help="run a multi-trial experiment")
    p.add_argument("--config", required=True, help="YAML file or bundled config name")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override experiment.base_seed")
    p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    p.add_argument("--dry-run", action="store_true", help="print the job matrix and exit")
    p.set_defaults(func=cmd_experiment)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TOPOINFER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "experiment" and not args.dry_run and not args.out:
        parser.error("experiment requires --out unless --dry-run is given")
    try:
        return args.func(args)
    except (TopoInferError, InvalidInputError, OSError, ValueError) as exc:
        print(f"topoinfer: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
