"""Stochastic EM topology inference over latent transmissions and losses.

The latent variables are per-link transmission indicators ``D`` and loss
indicators ``E``. Each EM iteration

1. draws ``M`` latent samples under the current parameters (E-step),
2. rebuilds, for every sample, the data series each node would show and the
   ACK series each node would show had no packet been lost,
3. runs the causality test on every ordered pair of rebuilt series and keeps
   a link when at least half of the samples vote for it (M-step for ``A``,
   with delays voted the same way), and
4. moves rates ``R`` and loss probabilities ``L`` towards their empirical
   averages over the samples with a decreasing learning rate.

``run_em_es`` replaces step 3 by an exhaustive search over adjacency and
delay candidates, which is only feasible for very small networks.

E-step samplers
---------------
Both samplers use the collapsed conditional in which links other than the
one being sampled enter only through their rates. Because that conditional
does not depend on the chain's current state, every sweep is an exact draw
from it and burn-in sweeps only advance the random stream.

``site``
    Each ``(link, slot)`` site is drawn from its own three-state conditional
    (:func:`gibbs_conditional`).
``block``
    All out-links of a sender are drawn jointly for each slot, conditioned on
    the sender's observed data count exactly, with the receivers' ACK
    evidence collapsed as in ``site``. Samples therefore always reproduce the
    observed data series.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .causality import MetricConfig, delay_scan_batch, scan_and_test
from .cda import ordered_pairs, pair_batch
from .core import (Adjacency, CostGuardError, InvalidConfigError, InvalidInputError,
                   LatentSample, ModelParams, ObservationSet, TopoInferError,
                   forward_observe, validate_observations)

logger = logging.getLogger(__name__)


class InconsistentObservationError(TopoInferError):
    """The observations have zero probability under the model at a site."""


@dataclass(frozen=True)
class EmConfig:
    """Settings for EM-CDA and EM-ES.

    ``learning_rate`` is either ``"saem"`` (step 1 for the first
    ``warmup_iterations`` iterations, then ``1 / (n - warmup_iterations)``) or
    a constant in ``[0, 1]``. ``loss_prior_weight`` is a pseudo-count per
    sample that pulls each link's loss estimate towards the loss rate pooled
    over all active links; 0 gives the plain empirical average.
    """

    n_samples: int = 30
    burn_in_sweeps: int = 10
    max_iterations: int = 30
    learning_rate: Union[str, float] = "saem"
    warmup_iterations: int = 5
    metric: MetricConfig = field(default_factory=MetricConfig)
    permutations: int = 20
    convergence_patience: int = 2
    rng_seed: int = 0
    sampler: str = "block"
    loss_prior_weight: float = 500.0
    es_sampler: str = "site"
    es_penalty: float = 1e6
    max_es_nodes: int = 5

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise InvalidConfigError("n_samples must be at least 1")
        if self.max_iterations < 1:
            raise InvalidConfigError("max_iterations must be at least 1")
        if self.burn_in_sweeps < 0 or self.convergence_patience < 1 or self.permutations < 1:
            raise InvalidConfigError(
                "burn_in_sweeps must be >= 0, convergence_patience and permutations >= 1")
        if self.sampler not in ("block", "site") or self.es_sampler not in ("block", "site"):
            raise InvalidConfigError("sampler must be 'block' or 'site'")
        if self.loss_prior_weight < 0:
            raise InvalidConfigError("loss_prior_weight must be >= 0")
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "saem":
                raise InvalidConfigError(f"unknown learning rate {self.learning_rate!r}")
        elif not 0 <= float(self.learning_rate) <= 1:
            raise InvalidConfigError("a constant learning rate must lie in [0, 1]")

    @property
    def tau_max(self) -> int:
        return self.metric.max_delay

    def gamma(self, n: int) -> float:
        """Learning rate of iteration ``n`` (1-based)."""
        if isinstance(self.learning_rate, str):
            w = self.warmup_iterations
            return 1.0 if n <= w else 1.0 / (n - w)
        return float(self.learning_rate)


@dataclass(frozen=True, eq=False)
class EmState:
    """Parameters after iteration ``iteration`` and the samples that produced them.

    ``d`` and ``e`` hold the ``M`` samples stacked as ``(M, N, N, K)``.
    """

    params: ModelParams
    iteration: int
    d: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    adjacency_history: Tuple[Adjacency, ...] = ()

    @property
    def samples(self) -> List[LatentSample]:
        if self.d is None:
            return []
        return [LatentSample(dm, em) for dm, em in zip(self.d, self.e)]


@dataclass(frozen=True)
class IterationRecord:
    """Diagnostics of one EM iteration."""

    iteration: int
    adjacency: Adjacency
    mean_rate: float
    mean_loss: float
    edit_distance: int
    gamma: float
    p_d: Optional[float] = None
    p_fa: Optional[float] = None


# ---------------------------------------------------------------------------
# Poisson-binomial
# ---------------------------------------------------------------------------


def poisson_binomial_table(probs) -> np.ndarray:
    """Pmf of a sum of independent Bernoulli variables, by iterative convolution.

    ``probs`` has shape ``(..., n)``; the result has shape ``(..., n + 1)``.
    """
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim == 0:
        P = P[None]
    if np.any(~np.isfinite(P)) or np.any((P < 0) | (P > 1)):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    n = P.shape[-1]
    f = np.zeros(P.shape[:-1] + (n + 1,))
    f[..., 0] = 1.0
    for t in range(n):
        p = P[..., t:t + 1]
        f[..., 1:t + 2] = f[..., 1:t + 2] * (1 - p) + f[..., 0:t + 1] * p
        f[..., 0] = f[..., 0] * (1 - p[..., 0])
    return f


def poisson_binomial_pmf(y: int, probs: Sequence[float]) -> float:
    """Probability that independent Bernoulli(``probs``) variables sum to ``y``."""
    table = poisson_binomial_table(np.asarray(probs, dtype=np.float64).reshape(-1))
    if y < 0 or y >= table.size:
        return 0.0
    return float(table[y])


def _lookup(table: np.ndarray, y: np.ndarray) -> np.ndarray:
    ok = (y >= 0) & (y < table.size)
    return np.where(ok, table[np.clip(y, 0, table.size - 1)], 0.0)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _ack_terms(obs: ObservationSet, params: ModelParams, i: int, j: int):
    """ACK-side factors for link ``(i, j)`` with zero and one own ACK.

    Returns ``(a0, a1)`` over all send slots ``k``: the probability that the
    other active in-links of ``j`` account for ``Y_j^A[k + tau]`` or one fewer
    ACK. Slots whose ACK would fall past the window get factor 1.
    """
    A = params.adjacency.matrix
    n, K = obs.data.shape
    others = [l for l in range(n) if A[l, j] and l != i]
    table = poisson_binomial_table(
        np.array([params.rate[l, j] * (1 - params.loss[l, j]) for l in others]))
    tau = int(params.delay[i, j])
    edge = np.arange(K) + tau >= K
    ya = np.zeros(K, dtype=np.int64)
    ya[:K - tau] = obs.acks[j, tau:]
    a0 = np.where(edge, 1.0, _lookup(table, ya))
    a1 = np.where(edge, 1.0, _lookup(table, ya - 1))
    return a0, a1


def _site_mass(obs: ObservationSet, params: ModelParams, i: int, j: int) -> np.ndarray:
    """Unnormalised three-state weights of link ``(i, j)`` per slot, ``(K, 3)``."""
    A = params.adjacency.matrix
    if not A[i, j]:
        raise InvalidInputError(f"link ({i + 1}, {j + 1}) is not active")
    n = obs.n_nodes
    R, L = params.rate[i, j], params.loss[i, j]
    others = [l for l in range(n) if A[i, l] and l != j]
    table = poisson_binomial_table(np.array([params.rate[i, l] for l in others]))
    d0 = _lookup(table, obs.data[i])
    d1 = _lookup(table, obs.data[i] - 1)
    a0, a1 = _ack_terms(obs, params, i, j)
    return np.stack([(1 - R) * d0 * a0, R * (1 - L) * d1 * a1, R * L * d1 * a0], axis=1)


def _normalise(P: np.ndarray, where: str, on_inconsistent: str) -> np.ndarray:
    total = P.sum(axis=-1, keepdims=True)
    bad = ~(total > 0)
    if bad.any() and on_inconsistent == "raise":
        raise InconsistentObservationError(f"no latent state explains {where}")
    return np.where(bad, 1.0 / 3.0, P / np.where(bad, 1.0, total))


def site_conditionals(obs: ObservationSet, params: ModelParams, i: int, j: int,
                      on_inconsistent: str = "uniform") -> np.ndarray:
    """Three-state conditional of link ``(i, j)`` for every slot, shape ``(K, 3)``.

    Columns are the states ``(D, E) = (0, 0), (1, 0), (1, 1)``. Each is the
    prior weight times the probability that the sender's other active
    out-links produce the rest of its data count and the receiver's other
    active in-links produce the rest of its ACK count ``tau`` slots later.
    Slots no state can explain get the uniform distribution, or raise with
    ``on_inconsistent="raise"``.
    """
    return _normalise(_site_mass(obs, params, i, j), f"link ({i + 1}, {j + 1})",
                      on_inconsistent)


def gibbs_conditional(i: int, j: int, k: int, obs: ObservationSet, params: ModelParams,
                      on_inconsistent: str = "raise") -> np.ndarray:
    """Conditional distribution of ``(D, E)`` for link ``(i, j)`` at slot ``k``.

    Indices are 0-based. Returns probabilities of ``(0, 0), (1, 0), (1, 1)``.
    With ``on_inconsistent="uniform"`` a site with zero total mass gets the
    uniform distribution instead of raising.
    """
    if not 0 <= k < obs.n_slots:
        raise InvalidInputError(f"slot {k} outside 0..{obs.n_slots - 1}")
    return _normalise(_site_mass(obs, params, i, j)[k],
                      f"link ({i + 1}, {j + 1}) at slot {k + 1}", on_inconsistent)


def _draw_site(obs: ObservationSet, params: ModelParams, n_sweeps: int, keep: int,
               rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n, K = obs.data.shape
    D = np.zeros((keep, n, n, K), dtype=bool)
    E = np.zeros((keep, n, n, K), dtype=bool)
    links = params.adjacency.links()
    conds = {link: np.cumsum(site_conditionals(obs, params, *link), axis=1)
             for link in links}
    for sweep in range(n_sweeps):
        m = sweep - (n_sweeps - keep)
        for i, j in links:
            u = rng.random(K)
            if m < 0:
                continue
            c = conds[(i, j)]
            state = (u > c[:, 0]).astype(np.int8) + (u > c[:, 1])
            D[m, i, j] = state >= 1
            E[m, i, j] = state == 2
    return D, E


def _sender_weights(obs: ObservationSet, params: ModelParams, i: int, outs: List[int]):
    rows = [[], [], []]
    for l in outs:
        a0, a1 = _ack_terms(obs, params, i, l)
        R, L = params.rate[i, l], params.loss[i, l]
        rows[0].append((1 - R) * a0)
        rows[1].append(R * (1 - L) * a1)
        rows[2].append(R * L * a0)
    return [np.array(r) for r in rows]


def _suffix_counts(w0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``B[t, k, c]``: weight of links ``t..`` sending exactly ``c`` packets at ``k``."""
    d, K = w0.shape
    B = np.zeros((d + 1, K, d + 1))
    B[d, :, 0] = 1.0
    for t in range(d - 1, -1, -1):
        B[t, :, 0] = w0[t] * B[t + 1, :, 0]
        B[t, :, 1:] = w0[t][:, None] * B[t + 1, :, 1:] + u[t][:, None] * B[t + 1, :, :-1]
    return B


def _draw_block(obs: ObservationSet, params: ModelParams, n_sweeps: int, keep: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n, K = obs.data.shape
    A = params.adjacency.matrix
    D = np.zeros((keep, n, n, K), dtype=bool)
    E = np.zeros((keep, n, n, K), dtype=bool)
    ks = np.arange(K)
    for i in range(n):
        outs = [l for l in range(n) if A[i, l]]
        if not outs:
            continue
        d = len(outs)
        count = np.minimum(obs.data[i], d)
        w0, w1, w2 = _sender_weights(obs, params, i, outs)
        u = w1 + w2
        B = _suffix_counts(w0, u)
        bad = ~(B[0, ks, count] > 0)
        if bad.any():
            # Ignore ACK evidence where it contradicts the data count, then
            # fall back to a flat prior if even that fails.
            for t, l in enumerate(outs):
                R, L = params.rate[i, l], params.loss[i, l]
                w0[t, bad], w1[t, bad], w2[t, bad] = 1 - R, R * (1 - L), R * L
            u = w1 + w2
            B = _suffix_counts(w0, u)
            bad = ~(B[0, ks, count] > 0)
            if bad.any():
                w0[:, bad], w1[:, bad], w2[:, bad] = 1.0, 0.5, 0.5
                u = w1 + w2
                B = _suffix_counts(w0, u)
        split = w2 / np.where(u > 0, u, 1.0)
        for sweep in range(n_sweeps):
            m = sweep - (n_sweeps - keep)
            rem = count.copy()
            for t, l in enumerate(outs):
                u_send = rng.random(K)
                u_loss = rng.random(K)
                if m < 0:
                    continue
                num = np.where(rem > 0, u[t] * B[t + 1, ks, np.maximum(rem - 1, 0)], 0.0)
                den = B[t, ks, rem]
                sent = u_send * den < num
                D[m, i, l] = sent
                E[m, i, l] = sent & (u_loss < split[t])
                rem = rem - sent
    return D, E


def draw_sample_arrays(obs: ObservationSet, params: ModelParams, cfg: EmConfig,
                       rng: np.random.Generator,
                       sampler: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """E-step returning samples stacked as ``(M, N, N, K)`` boolean arrays."""
    sampler = sampler or cfg.sampler
    n_sweeps = cfg.burn_in_sweeps + cfg.n_samples
    if sampler == "site":
        return _draw_site(obs, params, n_sweeps, cfg.n_samples, rng)
    return _draw_block(obs, params, n_sweeps, cfg.n_samples, rng)


def draw_samples(obs: ObservationSet, params: ModelParams, cfg: EmConfig,
                 rng: Optional[np.random.Generator] = None) -> List[LatentSample]:
    """Draw ``cfg.n_samples`` latent samples; seeded by ``cfg.rng_seed`` by default."""
    validate_observations(obs)
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    D, E = draw_sample_arrays(obs, params, cfg, rng)
    return [LatentSample(d, e) for d, e in zip(D, E)]


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _reconstruct_arrays(D: np.ndarray, E: np.ndarray, obs: ObservationSet,
                        params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    M, n, _, K = D.shape
    est_data = D.sum(axis=2, dtype=np.int64)
    est_acks = np.repeat(obs.acks[None].astype(np.int64), M, axis=0)
    for i, j in params.adjacency.links():
        tau = int(params.delay[i, j])
        if tau < K:
            est_acks[:, j, tau:] += E[:, i, j, :K - tau]
    return est_data, est_acks


def reconstruct_sequences(sample: LatentSample, obs: ObservationSet,
                          params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Data series implied by ``sample`` and ACK series with lost packets restored.

    Returns ``(est_data, est_acks)`` as ``(N, K)`` arrays.
    """
    if sample.n_nodes != obs.n_nodes or sample.n_slots != obs.n_slots:
        raise InvalidInputError("sample and observations disagree in size")
    d, a = _reconstruct_arrays(sample.d[None], sample.e[None], obs, params)
    return d[0], a[0]


def _mode_smallest(values: np.ndarray, top: int) -> np.ndarray:
    """Column-wise most frequent value in ``1..top``, smallest on ties."""
    counts = np.stack([(values == t).sum(axis=0) for t in range(1, top + 1)])
    return np.argmax(counts, axis=0) + 1


def update_rates(R: np.ndarray, L: np.ndarray, D: np.ndarray, E: np.ndarray,
                 mask: np.ndarray, gamma: float, prior_weight: float = 0.0,
                 pooled_loss: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Learning-rate step of ``R`` and ``L`` towards their sample averages.

    Only entries where ``mask`` is true change. ``L`` keeps its value where
    the samples hold no transmissions and no prior weight is set.
    """
    M, K = D.shape[0], D.shape[-1]
    sD = D.sum(axis=(0, 3), dtype=np.float64)
    sE = E.sum(axis=(0, 3), dtype=np.float64)
    R_new = (1 - gamma) * R + gamma * sD / (M * K)
    kappa = prior_weight * M
    denom = sD + kappa
    ratio = (sE + kappa * pooled_loss) / np.where(denom > 0, denom, 1.0)
    L_new = np.where(denom > 0, (1 - gamma) * L + gamma * ratio, L)
    return np.where(mask, R_new, R), np.where(mask, L_new, L)


def m_step(samples: Union[Sequence[LatentSample], Tuple[np.ndarray, np.ndarray]],
           obs: ObservationSet, state: EmState, cfg: EmConfig,
           rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Vote on links and delays across samples, then step rates and losses.

    For each sample the rebuilt data series of ``i`` and ACK series of ``j``
    go through a delay scan and a permutation test. A link is kept when at
    least half of the samples vote for it, and its delay is the most common
    best delay. ``R`` and ``L`` move only on links active both before and
    after this step; other entries keep their values.
    """
    if isinstance(samples, tuple):
        D, E = samples
    else:
        D = np.stack([s.d for s in samples])
        E = np.stack([s.e for s in samples])
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    params = state.params
    M, n = D.shape[0], obs.n_nodes
    pairs = ordered_pairs(n)
    est_data, est_acks = _reconstruct_arrays(D, E, obs, params)
    X = np.concatenate([pair_batch(est_data[m], est_acks[m], pairs)[0] for m in range(M)])
    Y = np.concatenate([pair_batch(est_data[m], est_acks[m], pairs)[1] for m in range(M)])
    taus, _, dec = scan_and_test(X, Y, cfg.metric, rng, n_perm=cfg.permutations)
    votes = dec.reshape(M, len(pairs)).sum(axis=0)
    best = _mode_smallest(taus.reshape(M, len(pairs)), cfg.tau_max)
    A_new = np.zeros((n, n), dtype=np.int8)
    T = params.delay.copy()
    for p, (i, j) in enumerate(pairs):
        A_new[i, j] = votes[p] >= M / 2
        if A_new[i, j]:
            T[i, j] = best[p]
    old = params.adjacency.matrix.astype(bool)
    both = old & A_new.astype(bool)
    sD = D.sum(axis=(0, 3))[old].sum()
    pooled = E.sum(axis=(0, 3))[old].sum() / sD if sD > 0 else 0.0
    R, L = update_rates(params.rate, params.loss, D, E, both, cfg.gamma(state.iteration + 1),
                        cfg.loss_prior_weight, float(pooled))
    return ModelParams(Adjacency(A_new), L, R, T, params.tau_max)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _rates_vs_truth(truth: Optional[Adjacency], est: Adjacency):
    if truth is None:
        return None, None
    from .evaluation import confusion, rates
    p_fa, p_d = rates(confusion(truth, est))
    return p_d, p_fa


def _initial_params(obs: ObservationSet, cfg: EmConfig, rng: np.random.Generator) -> ModelParams:
    n = obs.n_nodes
    R = rng.random((n, n))
    L = rng.random((n, n))
    T = np.ones((n, n), dtype=np.int64)
    pairs = ordered_pairs(n)
    if pairs:
        X, Y = pair_batch(obs.data, obs.acks, pairs)
        taus, _ = delay_scan_batch(X, Y, cfg.metric)
        for (i, j), t in zip(pairs, taus):
            T[i, j] = t
    return ModelParams(Adjacency.full(n), L, R, T, cfg.tau_max)


def _record(n: int, params: ModelParams, prev: Adjacency, gamma: float,
            truth: Optional[Adjacency]) -> IterationRecord:
    A = params.adjacency
    mask = A.matrix.astype(bool)
    mean_r = float(params.rate[mask].mean()) if mask.any() else float("nan")
    mean_l = float(params.loss[mask].mean()) if mask.any() else float("nan")
    p_d, p_fa = _rates_vs_truth(truth, A)
    return IterationRecord(n, A, mean_r, mean_l,
                           int(np.sum(A.matrix != prev.matrix)), gamma, p_d, p_fa)


def run_em_cda(obs: ObservationSet, cfg: EmConfig,
               truth: Optional[Adjacency] = None) -> Tuple[Adjacency, List[IterationRecord]]:
    """Run EM-CDA from uniform random rates and losses and a full adjacency.

    Initial delays come from a delay scan on the raw observations. Iteration
    stops once the adjacency has stayed the same for
    ``cfg.convergence_patience`` consecutive iterations or after
    ``cfg.max_iterations``. ``truth``, when given, only adds detection and
    false-alarm rates to the returned per-iteration records.
    """
    validate_observations(obs)
    n = obs.n_nodes
    if n < 2:
        return Adjacency.empty(n), []
    cfg.metric.check_length(obs.n_slots)
    rng = np.random.default_rng(cfg.rng_seed)
    params = _initial_params(obs, cfg, rng)
    state = EmState(params, 0, adjacency_history=(params.adjacency,))
    history: List[IterationRecord] = []
    unchanged = 0
    for it in range(1, cfg.max_iterations + 1):
        D, E = draw_sample_arrays(obs, state.params, cfg, rng)
        new = m_step((D, E), obs, state, cfg, rng)
        prev = state.params.adjacency
        history.append(_record(it, new, prev, cfg.gamma(it), truth))
        state = EmState(new, it, D, E, state.adjacency_history + (new.adjacency,))
        logger.debug("em-cda iteration %d: %d links", it, new.adjacency.n_links())
        unchanged = unchanged + 1 if new.adjacency == prev else 0
        if unchanged >= cfg.convergence_patience:
            break
    return state.params.adjacency, history


# ---------------------------------------------------------------------------
# Exhaustive-search M-step
# ---------------------------------------------------------------------------


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x * np.log(np.where(y > 0, y, 1.0)), 0.0)


def _link_loglik(D: np.ndarray, E: np.ndarray):
    """Closed-form ``R``, ``L`` per pair and the per-sample mean log-likelihood."""
    M, K = D.shape[0], D.shape[-1]
    sD = D.sum(axis=(0, 3), dtype=np.float64)
    sE = E.sum(axis=(0, 3), dtype=np.float64)
    R = sD / (M * K)
    L = np.where(sD > 0, sE / np.where(sD > 0, sD, 1.0), 0.0)
    ll = (_xlogy(sD, R) + _xlogy(M * K - sD, 1 - R)
          + _xlogy(sE, L) + _xlogy(sD - sE, 1 - L)) / M
    return R, L, ll


def es_score(obs: ObservationSet, D: np.ndarray, E: np.ndarray, adjacency: Adjacency,
             delay: np.ndarray, penalty: float = 1e6) -> float:
    """Score of one candidate ``(A, T)`` for samples stacked as ``(M, N, N, K)``.

    Mean sample log-likelihood on the candidate's links at the closed-form
    rates and losses, minus ``penalty`` per mismatching observed slot.
    """
    M = D.shape[0]
    _, _, ll = _link_loglik(D, E)
    A = adjacency.matrix.astype(bool)
    score = float(ll[A].sum())
    for m in range(M):
        params = ModelParams(adjacency, np.zeros(A.shape), np.zeros(A.shape),
                             np.asarray(delay))
        y = forward_observe(LatentSample(D[m], E[m]), params)
        miss = np.count_nonzero(y.data != obs.data) + np.count_nonzero(y.acks != obs.acks)
        score -= penalty * miss / M
    return score


def es_search(obs: ObservationSet, D: np.ndarray, E: np.ndarray, tau_max: int,
              penalty: float = 1e6):
    """Best adjacency and delays for fixed samples by exhaustive search.

    A candidate ``(A, T)`` scores the mean over samples of the log-likelihood
    of the samples on ``A``'s links (rates and losses at their closed-form
    maximisers) minus ``penalty`` per slot where the candidate's forward model
    disagrees with the observed data or ACK count. Data mismatches of node
    ``i`` depend only on row ``i`` of ``A`` and ACK mismatches of node ``j``
    only on column ``j`` and its delays, so each row subset and each column
    subset with its best delays is scored once and candidates are summed
    from those tables. Returns ``(A, T, R, L, score)``; ties keep the
    candidate with the smallest index in row-major bit order.
    """
    M, n, _, K = D.shape
    R, L, ll = _link_loglik(D, E)
    ok = (D & ~E).astype(np.int64)
    others = [[j for j in range(n) if j != i] for i in range(n)]
    subsets = list(itertools.product((0, 1), repeat=n - 1))
    row_score = np.zeros((n, len(subsets)))
    col_score = np.zeros((n, len(subsets)))
    col_delays: List[List[Dict[int, int]]] = []
    for i in range(n):
        for s, bits in enumerate(subsets):
            S = [j for j, b in zip(others[i], bits) if b]
            est = D[:, i, S].sum(axis=1) if S else np.zeros((M, K), dtype=np.int64)
            miss = np.count_nonzero(est != obs.data[i][None]) / M
            row_score[i, s] = -penalty * miss + sum(ll[i, j] for j in S)
    for j in range(n):
        delays_j = []
        for s, bits in enumerate(subsets):
            S = [i for i, b in zip(others[j], bits) if b]
            best, best_taus = -np.inf, ()
            for taus in itertools.product(range(1, tau_max + 1), repeat=len(S)):
                est = np.zeros((M, K), dtype=np.int64)
                for i, t in zip(S, taus):
                    if t < K:
                        est[:, t:] += ok[:, i, j, :K - t]
                score = -penalty * np.count_nonzero(est != obs.acks[j][None]) / M
                if score > best:
                    best, best_taus = score, taus
            col_score[j, s] = best
            delays_j.append(dict(zip(S, best_taus)))
        col_delays.append(delays_j)

    # Enumerate all off-diagonal bit patterns; bit b of the candidate index
    # is the b-th ordered pair in row-major order.
    pairs = ordered_pairs(n)
    n_pairs = len(pairs)
    cand = np.arange(2 ** n_pairs, dtype=np.int64)
    bits = (cand[:, None] >> np.arange(n_pairs - 1, -1, -1)) & 1
    weight = 2 ** np.arange(n - 2, -1, -1)
    pair_index = {pair: p for p, pair in enumerate(pairs)}
    total = np.zeros(cand.size)
    for i in range(n):
        idx = bits[:, [pair_index[(i, j)] for j in others[i]]] @ weight
        total += row_score[i, idx]
    for j in range(n):
        idx = bits[:, [pair_index[(i, j)] for i in others[j]]] @ weight
        total += col_score[j, idx]
    best = int(np.argmax(total))
    A = np.zeros((n, n), dtype=np.int8)
    for p, (i, j) in enumerate(pairs):
        A[i, j] = bits[best, p]
    T = np.ones((n, n), dtype=np.int64)
    for j in range(n):
        s = int(A[others[j], j] @ weight)
        for i, t in col_delays[j][s].items():
            T[i, j] = t
    return A, T, R, L, float(total[best])


def run_em_es(obs: ObservationSet, cfg: EmConfig,
              truth: Optional[Adjacency] = None) -> Tuple[Adjacency, List[IterationRecord]]:
    """EM with an exhaustive search over adjacency and delays in the M-step.

    The E-step samples every ordered pair, using the current rates, losses
    and delays, so that a link dropped in one iteration can return in the
    next. Rates and losses are set to their closed-form maximisers.
    Refuses networks larger than ``cfg.max_es_nodes``.
    """
    validate_observations(obs)
    n = obs.n_nodes
    if n > cfg.max_es_nodes:
        raise CostGuardError(
            f"exhaustive search over {2 ** (n * (n - 1))} adjacencies refused for "
            f"N={n}; limit is N={cfg.max_es_nodes}")
    if n < 2:
        return Adjacency.empty(n), []
    cfg.metric.check_length(obs.n_slots)
    rng = np.random.default_rng(cfg.rng_seed)
    params = _initial_params(obs, cfg, rng)
    full = Adjacency.full(n)
    current = params.adjacency
    history: List[IterationRecord] = []
    unchanged = 0
    for it in range(1, cfg.max_iterations + 1):
        D, E = draw_sample_arrays(obs, params.replace(adjacency=full), cfg, rng,
                                  sampler=cfg.es_sampler)
        A, T_best, R, L, _ = es_search(obs, D, E, cfg.tau_max, cfg.es_penalty)
        T = np.where(A == 1, T_best, params.delay)
        new = ModelParams(Adjacency(A), L, R, T, params.tau_max)
        history.append(_record(it, new, current, 1.0, truth))
        unchanged = unchanged + 1 if new.adjacency == current else 0
        params, current = new, new.adjacency
        if unchanged >= cfg.convergence_patience:
            break
    return current, history
