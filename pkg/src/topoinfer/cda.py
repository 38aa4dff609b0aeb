"""Baseline causality-discovery estimator.

A link ``i -> j`` is declared when the dependence of node ``j``'s ACK series
on node ``i``'s data series, at its best delay, exceeds a permutation
threshold computed on the same delay-shifted pair.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .causality import MetricConfig, scan_and_test
from .core import Adjacency, ObservationSet, validate_observations


def ordered_pairs(n: int) -> List[Tuple[int, int]]:
    """All ordered pairs ``(i, j)`` with ``i != j`` in row-major order."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def pair_batch(data: np.ndarray, acks: np.ndarray,
               pairs: List[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack ``data[i]`` and ``acks[j]`` rows for the given pairs."""
    src = np.array([i for i, _ in pairs], dtype=np.int64)
    dst = np.array([j for _, j in pairs], dtype=np.int64)
    return data[src], acks[dst]


def cda_decisions(obs: ObservationSet, cfg: MetricConfig, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair decisions, delays and metric values as ``(N, N)`` arrays."""
    n = obs.n_nodes
    A = np.zeros((n, n), dtype=np.int8)
    T = np.ones((n, n), dtype=np.int64)
    V = np.zeros((n, n))
    pairs = ordered_pairs(n)
    if not pairs:
        return A, T, V
    X, Y = pair_batch(obs.data, obs.acks, pairs)
    taus, vals, dec = scan_and_test(X, Y, cfg, rng)
    for (i, j), t, v, d in zip(pairs, taus, vals, dec):
        A[i, j], T[i, j], V[i, j] = d, t, v
    return A, T, V


def infer_cda(obs: ObservationSet, cfg: MetricConfig, rng_seed: int = 0) -> Adjacency:
    """Estimate the adjacency by thresholded pairwise causality tests."""
    validate_observations(obs)
    if obs.n_nodes > 1:
        cfg.check_length(obs.n_slots)
    A, _, _ = cda_decisions(obs, cfg, np.random.default_rng(rng_seed))
    return Adjacency(A)
