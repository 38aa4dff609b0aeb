"""YAML configuration files for simulations, inference and experiments.

A config file has up to four top-level sections::

    sim:          # generator settings, SimConfig fields
      n_nodes: 4
      n_slots: 5000
    metric:       # causality metric and test, MetricConfig fields
      kind: gc
    em:           # EM settings, EmConfig fields other than the metric
      n_samples: 30
    experiment:   # trials, algorithms and sweep, ExperimentConfig fields
      algorithms: [EMES, EMCDA-GC]
      n_trials: 20

``sim.n_nodes`` and ``sim.n_slots`` are required; with an ``experiment``
section so are ``experiment.algorithms`` and ``experiment.n_trials``.
Everything else falls back to the dataclass defaults. Node ids in
``sim.active_links`` are 1-based. Errors carry the file name and line.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .causality import MetricConfig
from .core import InvalidConfigError, PathLike
from .emcda import EmConfig
from .evaluation import ExperimentConfig
from .sim import SimConfig

SECTIONS = ("sim", "metric", "em", "experiment")
REQUIRED = {"sim": ("n_nodes", "n_slots"), "experiment": ("algorithms", "n_trials")}

_INT, _FLOAT, _STR, _BOOL = "int", "float", "str", "bool"
# Accepted kinds per field: scalar kinds, "matrix" (scalar or N x N list),
# "links" (list of 1-based pairs), "floats" (list of numbers), "strs".
_SCHEMA: Dict[str, Dict[str, Tuple[str, ...]]] = {
    "sim": {
        "n_nodes": (_INT,), "link_fraction": (_FLOAT,), "active_links": ("links",),
        "rate_star": ("matrix",), "loss_star": ("matrix",), "delay_star": ("matrix",),
        "n_slots": (_INT,), "slot_duration": (_FLOAT,), "mode": (_STR,),
        "retransmission_limit": (_INT,), "ack_timeout_slots": (_INT,),
        "node_capacity": (_INT, "null"), "delay_jitter": (_INT,), "seed": (_INT,),
    },
    "metric": {
        "kind": (_STR,), "ar_order": (_INT,), "te_src_window": (_INT,),
        "te_dst_window": (_INT,), "permutations": (_INT,), "alpha": (_FLOAT,),
        "max_delay": (_INT,),
    },
    "em": {
        "n_samples": (_INT,), "burn_in_sweeps": (_INT,), "max_iterations": (_INT,),
        "learning_rate": (_STR, _FLOAT), "warmup_iterations": (_INT,),
        "permutations": (_INT,), "convergence_patience": (_INT,), "rng_seed": (_INT,),
        "sampler": (_STR,), "loss_prior_weight": (_FLOAT,), "es_sampler": (_STR,),
        "es_penalty": (_FLOAT,), "max_es_nodes": (_INT,),
    },
    "experiment": {
        "algorithms": ("strs",), "n_trials": (_INT,), "base_seed": (_INT,),
        "sweep_param": (_STR, "null"), "sweep_values": ("floats",),
        "record_timing": (_BOOL,),
    },
}


@dataclasses.dataclass(frozen=True)
class Config:
    """Parsed configuration file."""

    sim: SimConfig
    metric: MetricConfig
    em: EmConfig
    experiment: Optional[ExperimentConfig]


class _Located:
    """Line (1-based) of every mapping key, for error messages."""

    def __init__(self, source: str):
        self.source = source
        self.lines: Dict[Tuple[str, ...], int] = {}

    def error(self, path: Tuple[str, ...], message: str) -> InvalidConfigError:
        line = self.lines.get(path)
        where = f"{self.source}:{line}" if line else self.source
        field = ".".join(path)
        return InvalidConfigError(f"{where}: {field + ': ' if field else ''}{message}")

    def index(self, node: yaml.Node, path: Tuple[str, ...] = ()) -> None:
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for key_node, value_node in node.value:
                sub = path + (str(key_node.value),)
                self.lines[sub] = key_node.start_mark.line + 1
                if sub in seen:
                    raise self.error(sub, "duplicate key")
                seen.add(sub)
                self.index(value_node, sub)


def _check_kind(loc: _Located, path: Tuple[str, ...], value: Any, kinds: Tuple[str, ...]):
    def is_int(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def is_num(v):
        return is_int(v) or isinstance(v, float)

    for kind in kinds:
        if kind == "null" and value is None:
            return None
        if kind == _INT and is_int(value):
            return value
        if kind == _FLOAT and is_num(value):
            return float(value)
        if kind == _STR and isinstance(value, str):
            return value
        if kind == _BOOL and isinstance(value, bool):
            return value
        if kind == "matrix":
            if is_num(value):
                return value
            if isinstance(value, list) and value and all(
                    isinstance(r, list) and all(is_num(x) for x in r) for r in value):
                return value
        if kind == "links" and isinstance(value, list) and all(
                isinstance(p, list) and len(p) == 2 and all(is_int(x) for x in p)
                for p in value):
            return tuple((i - 1, j - 1) for i, j in value)
        if kind == "floats" and isinstance(value, list) and all(is_num(x) for x in value):
            return tuple(float(x) for x in value)
        if kind == "strs" and isinstance(value, list) and all(isinstance(x, str) for x in value):
            return tuple(value)
    names = {"matrix": "number or N x N list", "links": "list of [i, j] pairs",
             "floats": "list of numbers", "strs": "list of strings", "null": "null"}
    wanted = " or ".join(names.get(k, k) for k in kinds)
    raise loc.error(path, f"expected {wanted}, got {value!r}")


def _section(loc: _Located, doc: Dict[str, Any], name: str) -> Dict[str, Any]:
    raw = doc.get(name, {})
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise loc.error((name,), "section must be a mapping")
    schema = _SCHEMA[name]
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise loc.error((name, key), f"unknown field; known fields: {', '.join(schema)}")
        out[key] = _check_kind(loc, (name, key), value, schema[key])
    for key in REQUIRED.get(name, ()):
        if key not in out and (name != "experiment" or name in doc):
            raise loc.error((name,) if name in doc else (),
                            f"missing required field '{name}.{key}'")
    return out


def _build(loc: _Located, path: Tuple[str, ...], factory, values: Dict[str, Any]):
    try:
        return factory(**values)
    except InvalidConfigError as exc:
        # Point at the first field the message names, else at the section.
        msg = str(exc)
        named = [k for k in values if k in msg and path + (k,) in loc.lines]
        raise loc.error(path + (named[0],) if named else path, msg) from None


def parse_config(text: str, source: str = "<config>") -> Config:
    """Parse config text; errors name ``source`` and the offending line."""
    loc = _Located(source)
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = f":{mark.line + 1}" if mark else ""
        raise InvalidConfigError(f"{source}{line}: invalid YAML: {exc.problem}") from None
    if node is None:
        doc: Any = {}
    else:
        loc.index(node)
        doc = yaml.SafeLoader("").construct_document(node)
    if not isinstance(doc, dict):
        raise loc.error((), "top level must be a mapping")
    for key in doc:
        if key not in SECTIONS:
            raise loc.error((key,), f"unknown section; known sections: {', '.join(SECTIONS)}")
    sim = _build(loc, ("sim",), SimConfig, _section(loc, doc, "sim"))
    metric = _build(loc, ("metric",), MetricConfig, _section(loc, doc, "metric"))
    em = _build(loc, ("em",), EmConfig, dict(_section(loc, doc, "em"), metric=metric))
    experiment = None
    if "experiment" in doc:
        values = _section(loc, doc, "experiment")
        experiment = _build(loc, ("experiment",), ExperimentConfig,
                            dict(values, sim=sim, em=em, cda_metric=metric))
    return Config(sim, metric, em, experiment)


def load_config(path: PathLike) -> Config:
    """Read and parse a YAML config file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"{p}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(p))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"fig3"``."""
    path = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not path.exists():
        raise InvalidConfigError(f"no bundled config named {name!r}")
    return path
