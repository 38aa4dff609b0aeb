"""Seeded traffic generators and timestamped trace ingestion.

``model_faithful`` draws the latent link activity exactly as the inference
model assumes: independent Bernoulli transmissions per link and slot, and
independent losses per transmission. ``realistic`` layers the stressors a real
network adds on top of the same draws: retransmission of lost packets after a
timeout, per-transmission ACK delay jitter, and a per-node cap on
transmissions per slot with FIFO deferral.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (DEFAULT_SLOT_DURATION, Adjacency, InvalidConfigError,
                   InvalidInputError, LatentSample, ModelParams, ObservationSet,
                   PathLike, forward_observe)

MatrixOrScalar = Union[float, Sequence[Sequence[float]], np.ndarray]

# One offered packet per link every 1/122 s at 1.5 ms slots.
REALISTIC_RATE = 122.0 * DEFAULT_SLOT_DURATION


class PacketKind(str, Enum):
    DATA = "DATA"
    ACK = "ACK"


@dataclass(frozen=True)
class SimConfig:
    """Generator settings.

    ``active_links`` (0-based pairs) takes precedence over ``link_fraction``.
    Per-link values may be scalars or ``(N, N)`` matrices. ``node_capacity``
    of ``None`` means unlimited.
    """

    n_nodes: int = 4
    link_fraction: float = 0.5
    active_links: Optional[Tuple[Tuple[int, int], ...]] = None
    rate_star: MatrixOrScalar = 0.1
    loss_star: MatrixOrScalar = 0.05
    delay_star: MatrixOrScalar = 1
    n_slots: int = 5000
    slot_duration: float = DEFAULT_SLOT_DURATION
    mode: str = "model_faithful"
    retransmission_limit: int = 3
    ack_timeout_slots: int = 4
    node_capacity: Optional[int] = 1
    delay_jitter: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise InvalidConfigError("n_nodes must be at least 1")
        if self.n_slots < 1:
            raise InvalidConfigError("n_slots must be at least 1")
        if not self.slot_duration > 0:
            raise InvalidConfigError("slot_duration must be positive")
        if self.mode not in ("model_faithful", "realistic"):
            raise InvalidConfigError(f"unknown mode {self.mode!r}")
        if not 0 <= self.link_fraction <= 1:
            raise InvalidConfigError("link_fraction must lie in [0, 1]")
        rate, loss = self.link_matrix(self.rate_star), self.link_matrix(self.loss_star)
        if np.any((rate < 0) | (rate > 1)):
            raise InvalidConfigError("rate_star must lie in [0, 1]")
        if np.any((loss < 0) | (loss > 1)):
            raise InvalidConfigError("loss_star must lie in [0, 1]")
        if np.any(self.link_matrix(self.delay_star) < 1):
            raise InvalidConfigError("delay_star must be at least 1 slot")
        if self.retransmission_limit < 0 or self.ack_timeout_slots < 1 or self.delay_jitter < 0:
            raise InvalidConfigError("retransmission_limit and delay_jitter must be >= 0, "
                                     "ack_timeout_slots >= 1")
        if self.node_capacity is not None and self.node_capacity < 1:
            raise InvalidConfigError("node_capacity must be positive or unlimited")
        if self.active_links is not None:
            links = tuple((int(i), int(j)) for i, j in self.active_links)
            for i, j in links:
                if i == j:
                    raise InvalidConfigError(f"self-link ({i + 1}, {j + 1}) not allowed")
                if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                    raise InvalidConfigError(f"link ({i + 1}, {j + 1}) out of range")
            object.__setattr__(self, "active_links", links)

    def link_matrix(self, value: MatrixOrScalar) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            return np.full((self.n_nodes, self.n_nodes), float(arr))
        if arr.shape != (self.n_nodes, self.n_nodes):
            raise InvalidConfigError(
                f"per-link matrix has shape {arr.shape}, expected {(self.n_nodes,) * 2}")
        return arr

    def replace(self, **changes) -> "SimConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class TraceRecord:
    """One timestamped packet event seen by the monitor (1-based node id)."""

    timestamp: float
    node: int
    kind: PacketKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PacketKind(self.kind))


def _select_links(cfg: SimConfig, rng: np.random.Generator) -> Adjacency:
    n = cfg.n_nodes
    if cfg.active_links is not None:
        return Adjacency.from_links(n, cfg.active_links)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    m = int(round(cfg.link_fraction * len(pairs)))
    chosen = rng.choice(len(pairs), size=m, replace=False) if m else []
    return Adjacency.from_links(n, [pairs[c] for c in chosen])


def _truth_params(cfg: SimConfig, adj: Adjacency) -> ModelParams:
    delay = cfg.link_matrix(cfg.delay_star).astype(np.int64)
    return ModelParams(adj, cfg.link_matrix(cfg.loss_star), cfg.link_matrix(cfg.rate_star),
                       delay)


def _base_draws(cfg: SimConfig, rng: np.random.Generator):
    """Link selection, offered packets and loss uniforms in a fixed draw order."""
    adj = _select_links(cfg, rng)
    params = _truth_params(cfg, adj)
    n, K = cfg.n_nodes, cfg.n_slots
    active = adj.matrix.astype(bool)[:, :, None]
    offered = (rng.random((n, n, K)) < params.rate[:, :, None]) & active
    loss_u = rng.random((n, n, K))
    return adj, params, offered, loss_u


def gen_model_faithful(cfg: SimConfig) -> Tuple[ObservationSet, ModelParams, LatentSample]:
    """Draw latent activity under the inference model and observe it."""
    if cfg.mode != "model_faithful":
        raise InvalidConfigError("gen_model_faithful needs mode 'model_faithful'")
    rng = np.random.default_rng(cfg.seed)
    _, params, d, loss_u = _base_draws(cfg, rng)
    e = d & (loss_u < params.loss[:, :, None])
    latent = LatentSample(d, e)
    return forward_observe(latent, params, cfg.slot_duration), params, latent


def gen_realistic(cfg: SimConfig) -> Tuple[ObservationSet, Adjacency]:
    """Slot-by-slot simulation with retransmissions, jitter and contention.

    Each active link keeps a queue of packets ordered by the slot they become
    ready. A link sends at most one packet per slot and a node sends at most
    ``node_capacity`` packets per slot, oldest ready packet first. A
    transmission on link ``(i, j)`` at slot ``k`` is lost when the loss uniform
    drawn for ``(i, j, k)`` falls below ``L*``; otherwise ``j`` ACKs it after
    ``tau* + U{0..jitter}`` slots. Lost packets become ready again
    ``ack_timeout_slots`` later until they have been sent
    ``retransmission_limit + 1`` times.
    """
    if cfg.mode != "realistic":
        raise InvalidConfigError("gen_realistic needs mode 'realistic'")
    rng = np.random.default_rng(cfg.seed)
    adj, params, offered, loss_u = _base_draws(cfg, rng)
    n, K = cfg.n_nodes, cfg.n_slots
    jitter = (rng.integers(0, cfg.delay_jitter + 1, size=(n, n, K))
              if cfg.delay_jitter > 0 else None)
    lost = loss_u < params.loss[:, :, None]
    cap = n if cfg.node_capacity is None else cfg.node_capacity
    limit = cfg.retransmission_limit
    timeout = cfg.ack_timeout_slots
    delay = params.delay

    data = np.zeros((n, K), dtype=np.int64)
    acks = np.zeros((n, K), dtype=np.int64)
    out_links = [[j for j in range(n) if adj.matrix[i, j]] for i in range(n)]
    # Arrival slots per link, consumed in order; retries live in a heap.
    arrivals = {(i, j): np.nonzero(offered[i, j])[0].tolist()
                for i in range(n) for j in out_links[i]}
    arr_pos = {link: 0 for link in arrivals}
    fresh = {link: [] for link in arrivals}
    retries = {link: [] for link in arrivals}
    seq = 0

    for k in range(K):
        for i in range(n):
            heads = []
            for j in out_links[i]:
                link = (i, j)
                arr, pos = arrivals[link], arr_pos[link]
                while pos < len(arr) and arr[pos] <= k:
                    fresh[link].append((arr[pos], seq, 0))
                    seq += 1
                    pos += 1
                arr_pos[link] = pos
                best = None
                if retries[link] and retries[link][0][0] <= k:
                    best = retries[link][0]
                if fresh[link] and (best is None or fresh[link][0][:2] < best[:2]):
                    best = fresh[link][0]
                if best is not None:
                    heads.append((best[0], best[1], j))
            if not heads:
                continue
            heads.sort()
            for ready, s, j in heads[:cap]:
                link = (i, j)
                if fresh[link] and fresh[link][0][1] == s:
                    _, _, tries = fresh[link].pop(0)
                else:
                    _, _, tries = heapq.heappop(retries[link])
                data[i, k] += 1
                if lost[i, j, k]:
                    if tries < limit:
                        heapq.heappush(retries[link], (k + timeout, s, tries + 1))
                else:
                    tau = int(delay[i, j]) + (int(jitter[i, j, k]) if jitter is not None else 0)
                    if k + tau < K:
                        acks[j, k + tau] += 1
    return ObservationSet(data, acks, cfg.slot_duration), adj


def generate(cfg: SimConfig):
    """Dispatch on ``cfg.mode``; returns ``(obs, truth_adjacency, params, latent)``.

    ``params`` and ``latent`` are ``None`` in realistic mode.
    """
    if cfg.mode == "model_faithful":
        obs, params, latent = gen_model_faithful(cfg)
        return obs, params.adjacency, params, latent
    obs, adj = gen_realistic(cfg)
    return obs, adj, None, None


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def ingest_trace(records: Sequence[TraceRecord], slot_duration: float, n_nodes: int,
                 n_slots: Optional[int] = None) -> ObservationSet:
    """Bin packet events into per-slot counts.

    A record at time ``t`` lands in 1-based slot ``floor(t / slot_duration) + 1``.
    The number of slots is taken from the latest record unless ``n_slots`` is
    given.
    """
    if not slot_duration > 0:
        raise InvalidInputError("slot_duration must be positive")
    nodes = np.array([r.node for r in records], dtype=np.int64)
    times = np.array([r.timestamp for r in records], dtype=np.float64)
    is_data = np.array([r.kind == PacketKind.DATA for r in records], dtype=bool)
    if nodes.size and (nodes.min() < 1 or nodes.max() > n_nodes):
        bad = int(nodes[(nodes < 1) | (nodes > n_nodes)][0])
        raise InvalidInputError(f"node id {bad} outside 1..{n_nodes}")
    if times.size and times.min() < 0:
        raise InvalidInputError("negative timestamp")
    slots = np.floor(times / slot_duration).astype(np.int64)
    K = int(slots.max()) + 1 if slots.size else 1
    if n_slots is not None:
        if slots.size and slots.max() >= n_slots:
            raise InvalidInputError(f"timestamp beyond slot {n_slots}")
        K = n_slots
    data = np.zeros((n_nodes, K), dtype=np.int64)
    acks = np.zeros((n_nodes, K), dtype=np.int64)
    np.add.at(data, (nodes[is_data] - 1, slots[is_data]), 1)
    np.add.at(acks, (nodes[~is_data] - 1, slots[~is_data]), 1)
    return ObservationSet(data, acks, slot_duration)


def observations_to_trace(obs: ObservationSet) -> List[TraceRecord]:
    """Expand counts into events stamped at slot midpoints."""
    records = []
    for kind, counts in ((PacketKind.DATA, obs.data), (PacketKind.ACK, obs.acks)):
        for i, k in zip(*np.nonzero(counts)):
            t = (k + 0.5) * obs.slot_duration
            records.extend([TraceRecord(float(t), int(i) + 1, kind)] * int(counts[i, k]))
    records.sort(key=lambda r: (r.timestamp, r.node, r.kind.value))
    return records


def write_trace(records: Sequence[TraceRecord], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_s,node,kind\n")
        for r in records:
            fh.write(f"{r.timestamp!r},{r.node},{r.kind.value}\n")


def read_trace(path: PathLike) -> List[TraceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["timestamp_s", "node", "kind"]:
            raise InvalidInputError(f"{path}: header must be timestamp_s,node,kind")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(TraceRecord(float(row[0]), int(row[1]), PacketKind(row[2].strip())))
            except (ValueError, IndexError):
                raise InvalidInputError(f"{path}:{lineno}: malformed trace row {row}")
    return records
