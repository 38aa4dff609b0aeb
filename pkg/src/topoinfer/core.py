"""Domain types and the deterministic forward observation model.

A network of ``N`` nodes is observed over ``K`` discrete time slots. Each node
reports two count series: data packets sent and ACK packets sent. Hidden
behind these aggregates are per-link transmission indicators ``D`` and error
indicators ``E``. :func:`forward_observe` maps the latent tensors to the
observable counts.

Node indices are 0-based in the Python API and 1-based in every file format.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_SLOT_DURATION = 0.0015

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class TopoInferError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TopoInferError, ValueError):
    """Input data violates a structural invariant."""


class LengthMismatchError(InvalidInputError):
    """Series that must share a length do not."""


class NegativeCountError(InvalidInputError):
    """A packet count is negative."""


class InvalidConfigError(TopoInferError, ValueError):
    """A configuration value is out of range or missing."""


class CostGuardError(TopoInferError):
    """The requested computation is too large to run."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimingSeries:
    """Per-slot packet counts for one node and one packet kind."""

    counts: np.ndarray
    slot_duration: float = DEFAULT_SLOT_DURATION

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise InvalidInputError("a timing series needs at least one slot")
        if np.any(counts < 0):
            raise NegativeCountError(
                f"negative count at slot {int(np.argmax(counts < 0)) + 1}")
        if not self.slot_duration > 0:
            raise InvalidInputError("slot_duration must be positive")
        object.__setattr__(self, "counts", _frozen_array(counts, np.int64))

    def __len__(self) -> int:
        return int(self.counts.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimingSeries):
            return NotImplemented
        return (self.slot_duration == other.slot_duration
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Data and ACK count series of every node, stored as ``(N, K)`` arrays.

    The constructor only normalises types. Structural checks live in
    :func:`validate_observations` so malformed sets can still be built and
    then diagnosed.
    """

    data: np.ndarray
    acks: np.ndarray
    slot_duration: float = DEFAULT_SLOT_DURATION

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen_array(np.atleast_2d(self.data), np.int64))
        object.__setattr__(self, "acks", _frozen_array(np.atleast_2d(self.acks), np.int64))

    @property
    def n_nodes(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_slots(self) -> int:
        return int(self.data.shape[1])

    def data_series(self, i: int) -> TimingSeries:
        return TimingSeries(self.data[i], self.slot_duration)

    def ack_series(self, i: int) -> TimingSeries:
        return TimingSeries(self.acks[i], self.slot_duration)

    @classmethod
    def from_series(cls, data: Sequence[TimingSeries],
                    acks: Sequence[TimingSeries]) -> "ObservationSet":
        """Stack per-node series, checking counts and lengths first."""
        if len(data) != len(acks):
            raise LengthMismatchError(
                f"{len(data)} data series but {len(acks)} ack series")
        if not data:
            raise InvalidInputError("no series given")
        lengths = {len(s) for s in list(data) + list(acks)}
        if len(lengths) != 1:
            raise LengthMismatchError(f"series lengths differ: {sorted(lengths)}")
        durations = {s.slot_duration for s in list(data) + list(acks)}
        if len(durations) != 1:
            raise InvalidInputError("series disagree on slot_duration")
        return cls(np.stack([s.counts for s in data]),
                   np.stack([s.counts for s in acks]),
                   durations.pop())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (self.slot_duration == other.slot_duration
                and self.data.shape == other.data.shape
                and self.acks.shape == other.acks.shape
                and np.array_equal(self.data, other.data)
                and np.array_equal(self.acks, other.acks))


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Directed link indicator matrix with a zero diagonal."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidInputError(f"adjacency must be square, got shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise InvalidInputError("adjacency entries must be 0 or 1")
        if np.any(np.diag(m) != 0):
            raise InvalidInputError("adjacency diagonal must be zero")
        object.__setattr__(self, "matrix", _frozen_array(m, np.int8))

    @property
    def n_nodes(self) -> int:
        return int(self.matrix.shape[0])

    @classmethod
    def empty(cls, n: int) -> "Adjacency":
        return cls(np.zeros((n, n), dtype=np.int8))

    @classmethod
    def full(cls, n: int) -> "Adjacency":
        return cls(1 - np.eye(n, dtype=np.int8))

    @classmethod
    def from_links(cls, n: int, links: Iterable[Tuple[int, int]]) -> "Adjacency":
        m = np.zeros((n, n), dtype=np.int8)
        for i, j in links:
            if not (0 <= i < n and 0 <= j < n):
                raise InvalidInputError(f"link ({i}, {j}) out of range for {n} nodes")
            m[i, j] = 1
        return cls(m)

    def links(self) -> List[Tuple[int, int]]:
        """Active links as 0-based ``(i, j)`` pairs in row-major order."""
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.matrix))]

    def n_links(self) -> int:
        return int(self.matrix.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Adjacency):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.matrix.tobytes())


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter set: adjacency, per-link loss and rate, and ACK delays."""

    adjacency: Adjacency
    loss: np.ndarray
    rate: np.ndarray
    delay: np.ndarray
    tau_max: Optional[int] = None

    def __post_init__(self) -> None:
        n = self.adjacency.n_nodes
        loss = np.asarray(self.loss, dtype=np.float64)
        rate = np.asarray(self.rate, dtype=np.float64)
        delay = np.asarray(self.delay, dtype=np.int64)
        for name, arr in (("loss", loss), ("rate", rate), ("delay", delay)):
            if arr.shape != (n, n):
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {(n, n)}")
        if np.any((loss < 0) | (loss > 1)) or np.any((rate < 0) | (rate > 1)):
            raise InvalidInputError("loss and rate entries must lie in [0, 1]")
        if np.any(delay < 1):
            raise InvalidInputError("delays must be at least one slot")
        if self.tau_max is not None and np.any(delay > self.tau_max):
            raise InvalidInputError(f"delays must not exceed tau_max={self.tau_max}")
        object.__setattr__(self, "loss", _frozen_array(loss, np.float64))
        object.__setattr__(self, "rate", _frozen_array(rate, np.float64))
        object.__setattr__(self, "delay", _frozen_array(delay, np.int64))

    @property
    def n_nodes(self) -> int:
        return self.adjacency.n_nodes

    def replace(self, **changes) -> "ModelParams":
        kwargs = dict(adjacency=self.adjacency, loss=self.loss, rate=self.rate,
                      delay=self.delay, tau_max=self.tau_max)
        kwargs.update(changes)
        return ModelParams(**kwargs)


@dataclass(frozen=True, eq=False)
class LatentSample:
    """One joint realisation of per-link transmissions ``d`` and errors ``e``.

    Both tensors have shape ``(N, N, K)``. An error can only occur on a slot
    where the link transmitted.
    """

    d: np.ndarray
    e: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.d).astype(bool)
        e = np.asarray(self.e).astype(bool)
        if d.ndim != 3 or d.shape[0] != d.shape[1] or d.shape != e.shape:
            raise InvalidInputError(
                f"latent tensors must be (N, N, K) and equal, got {d.shape} and {e.shape}")
        if np.any(e & ~d):
            raise InvalidInputError("error indicator set where no packet was sent")
        object.__setattr__(self, "d", _frozen_array(d, bool))
        object.__setattr__(self, "e", _frozen_array(e, bool))

    @property
    def n_nodes(self) -> int:
        return int(self.d.shape[0])

    @property
    def n_slots(self) -> int:
        return int(self.d.shape[2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LatentSample):
            return NotImplemented
        return np.array_equal(self.d, other.d) and np.array_equal(self.e, other.e)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def shift_add(target: np.ndarray, source: np.ndarray, tau: int) -> None:
    """In place ``target[..., k] += source[..., k - tau]`` for ``k >= tau``."""
    K = target.shape[-1]
    if tau < K:
        target[..., tau:] += source[..., :K - tau]


def forward_observe(sample: LatentSample, params: ModelParams,
                    slot_duration: float = DEFAULT_SLOT_DURATION) -> ObservationSet:
    """Aggregate latent link activity into per-node data and ACK counts.

    Data counts sum each node's transmissions over its active out-links. ACK
    counts at the receiver sum the successful transmissions of its active
    in-links, ``tau`` slots later. ACKs that would land past the last slot are
    dropped.
    """
    n = params.n_nodes
    if sample.n_nodes != n:
        raise InvalidInputError(
            f"sample has {sample.n_nodes} nodes, parameters have {n}")
    active = params.adjacency.matrix.astype(bool)
    d = sample.d & active[:, :, None]
    ok = d & ~sample.e
    K = sample.n_slots
    data = d.sum(axis=1, dtype=np.int64)
    acks = np.zeros((n, K), dtype=np.int64)
    for i, j in params.adjacency.links():
        shift_add(acks[j], ok[i, j].astype(np.int64), int(params.delay[i, j]))
    return ObservationSet(data, acks, slot_duration)


def validate_observations(obs: ObservationSet) -> None:
    """Raise on the first broken invariant of ``obs``; return None if valid."""
    data, acks = np.asarray(obs.data), np.asarray(obs.acks)
    if data.ndim != 2 or acks.ndim != 2:
        raise InvalidInputError("data and acks must be (N, K) arrays")
    if data.shape[0] != acks.shape[0]:
        raise LengthMismatchError(
            f"{data.shape[0]} data series but {acks.shape[0]} ack series")
    if data.shape[1] != acks.shape[1]:
        raise LengthMismatchError(
            f"data series have {data.shape[1]} slots, ack series have {acks.shape[1]}")
    if data.shape[1] < 1:
        raise InvalidInputError("series need at least one slot")
    for name, arr in (("data", data), ("ack", acks)):
        bad = np.argwhere(arr < 0)
        if bad.size:
            node, slot = bad[0]
            raise NegativeCountError(
                f"negative {name} count at node {node + 1}, slot {slot + 1}")
    if not obs.slot_duration > 0:
        raise InvalidInputError("slot_duration must be positive")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_observations(obs: ObservationSet, path: PathLike) -> None:
    """Write ``slot,node,data_count,ack_count`` rows, slot-major, 1-based."""
    validate_observations(obs)
    n, K = obs.data.shape
    slots = np.repeat(np.arange(1, K + 1), n)
    nodes = np.tile(np.arange(1, n + 1), K)
    table = np.column_stack([slots, nodes, obs.data.T.ravel(), obs.acks.T.ravel()])
    with open(path, "w", newline="") as fh:
        fh.write("slot,node,data_count,ack_count\n")
        np.savetxt(fh, table, fmt="%d", delimiter=",")


def read_observations(path: PathLike, slot_duration: float = DEFAULT_SLOT_DURATION,
                      n_nodes: Optional[int] = None) -> ObservationSet:
    """Read an observation CSV. Missing (slot, node) rows count as zero."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        expected = ["slot", "node", "data_count", "ack_count"]
        if header != expected:
            raise InvalidInputError(f"{path}: header must be {','.join(expected)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([int(v) for v in row])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: non-integer field in {row}")
            if len(row) != 4:
                raise InvalidInputError(f"{path}:{lineno}: expected 4 fields")
    if not rows:
        raise InvalidInputError(f"{path}: no observation rows")
    table = np.asarray(rows, dtype=np.int64)
    if np.any(table[:, :2] < 1):
        raise InvalidInputError(f"{path}: slot and node ids are 1-based")
    n = int(table[:, 1].max()) if n_nodes is None else n_nodes
    K = int(table[:, 0].max())
    data = np.zeros((n, K), dtype=np.int64)
    acks = np.zeros((n, K), dtype=np.int64)
    data[table[:, 1] - 1, table[:, 0] - 1] = table[:, 2]
    acks[table[:, 1] - 1, table[:, 0] - 1] = table[:, 3]
    obs = ObservationSet(data, acks, slot_duration)
    validate_observations(obs)
    return obs


def write_adjacency(adj: Adjacency, path: PathLike) -> None:
    """Write active links as 1-based ``i,j`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("i,j\n")
        for i, j in adj.links():
            fh.write(f"{i + 1},{j + 1}\n")


def read_adjacency(path: PathLike, n_nodes: int) -> Adjacency:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["i", "j"]:
            raise InvalidInputError(f"{path}: header must be i,j")
        links = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, j = (int(v) for v in row)
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: expected two integers")
            links.append((i - 1, j - 1))
    return Adjacency.from_links(n_nodes, links)


def write_params(params: ModelParams, path: PathLike) -> None:
    """Write the parameters of active links as ``i,j,rate,loss,delay`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("i,j,rate,loss,delay\n")
        for i, j in params.adjacency.links():
            fh.write(f"{i + 1},{j + 1},{float(params.rate[i, j])!r},"
                     f"{float(params.loss[i, j])!r},{int(params.delay[i, j])}\n")


def write_latent(sample: LatentSample, path: PathLike) -> None:
    """Write the sparse latent tensors as ``i,j,slot,d,e`` rows where ``d = 1``."""
    i, j, k = np.nonzero(sample.d)
    table = np.column_stack([i + 1, j + 1, k + 1, np.ones_like(i),
                             sample.e[i, j, k].astype(np.int64)])
    with open(path, "w", newline="") as fh:
        fh.write("i,j,slot,d,e\n")
        if table.size:
            np.savetxt(fh, table, fmt="%d", delimiter=",")
