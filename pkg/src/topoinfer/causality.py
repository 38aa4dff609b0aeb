"""Pairwise causal-dependence metrics, permutation thresholds and delay scans.

Two metrics quantify how much the past of a source series helps predict a
target series:

* ``gc``: a Granger-causality F-type statistic comparing least-squares AR fits
  of the target with and without ``R`` lags of the source. Both fits include an
  intercept because packet counts have a nonzero mean.
* ``te``: plug-in transfer entropy in bits, with counts clipped to the alphabet
  ``{0, 1, 2}`` (2 stands for "two or more").

Every function has a batched form working on ``(B, K)`` arrays of series
pairs, which is what the topology estimators use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .core import InvalidConfigError, InvalidInputError, TimingSeries

logger = logging.getLogger(__name__)

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    def njit(*args, **kwargs):
        def decorator(func):
            return func
        return decorator(args[0]) if args and callable(args[0]) else decorator
    HAS_NUMBA = False

SeriesLike = Union[TimingSeries, np.ndarray]

TE_ALPHABET = 3

# Chunk size (in array cells) for batched permutation work.
_CHUNK_CELLS = 1 << 22


@dataclass(frozen=True)
class MetricConfig:
    """Metric choice and test settings shared by CDA and EM-CDA."""

    kind: str = "gc"
    ar_order: int = 3
    te_src_window: int = 1
    te_dst_window: int = 1
    permutations: int = 100
    alpha: float = 0.05
    max_delay: int = 3

    def __post_init__(self) -> None:
        if self.kind not in ("gc", "te"):
            raise InvalidConfigError(f"metric kind must be 'gc' or 'te', got {self.kind!r}")
        for name in ("ar_order", "te_src_window", "te_dst_window", "permutations", "max_delay"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be a positive integer")
        if not 0 < self.alpha < 1:
            raise InvalidConfigError("alpha must lie in (0, 1)")

    def check_length(self, K: int) -> None:
        """Raise if series of length ``K`` are too short for this config."""
        if self.max_delay >= K:
            raise InvalidConfigError(f"max_delay={self.max_delay} must be below K={K}")
        shifted = K - self.max_delay + 1
        if self.kind == "gc" and shifted <= 3 * self.ar_order + 1:
            raise InvalidConfigError(
                f"K={K} too short for ar_order={self.ar_order} at max_delay={self.max_delay}")
        if self.kind == "te" and shifted <= max(self.te_src_window, self.te_dst_window):
            raise InvalidConfigError("TE window exceeds series length")


def _as_counts(series: SeriesLike) -> np.ndarray:
    if isinstance(series, TimingSeries):
        return np.asarray(series.counts)
    arr = np.asarray(series)
    if arr.ndim != 1:
        raise InvalidInputError("expected a one-dimensional series")
    return arr


def _as_batch(X, Y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    if X.shape != Y.shape:
        raise InvalidInputError(f"source and target shapes differ: {X.shape} vs {Y.shape}")
    return X, Y


# ---------------------------------------------------------------------------
# Granger causality
# ---------------------------------------------------------------------------


def _make_gram_kernel(dtype, fast):
    @njit(cache=True, fastmath=fast)
    def kernel(X, Y, R):
        B, K = X.shape
        P = 2 * R + 2
        H = K - R
        out = np.zeros((B, P, P))
        cols = np.empty((P, H), dtype)
        for b in range(B):
            for h in range(H):
                cols[0, h] = 1
                cols[P - 1, h] = Y[b, R + h]
            for r in range(1, R + 1):
                for h in range(H):
                    cols[r, h] = Y[b, R - r + h]
                    cols[R + r, h] = X[b, R - r + h]
            for a in range(P):
                ca = cols[a]
                for c in range(a, P):
                    cc = cols[c]
                    s = dtype(0)
                    for h in range(H):
                        s += ca[h] * cc[h]
                    out[b, a, c] = s
                    out[b, c, a] = s
        return out
    return kernel


# Gram matrices of the regressors [1, y lags 1..R, x lags 1..R, y]. Entries are
# sums of integer products, so both kernels are exact: the int32 one whenever
# no sum can overflow, the float64 one below 2**53.
_gram_int32 = _make_gram_kernel(np.int32, False)
_gram_float64 = _make_gram_kernel(np.float64, True)


def _gram_batch(X: np.ndarray, Y: np.ndarray, R: int) -> np.ndarray:
    X = np.ascontiguousarray(X)
    Y = np.ascontiguousarray(Y)
    top = max(int(np.abs(X).max(initial=0)), int(np.abs(Y).max(initial=0)), 1)
    integral = np.issubdtype(X.dtype, np.integer) and np.issubdtype(Y.dtype, np.integer)
    if integral and top * top * X.shape[1] < 2 ** 31:
        return _gram_int32(X, Y, R)
    return _gram_float64(X.astype(np.float64), Y.astype(np.float64), R)


def _pinv_psd(G: np.ndarray, d: np.ndarray = None, rtol: float = 1e-10) -> np.ndarray:
    """Batched pseudo-inverse of PSD matrices.

    The matrices are scaled by ``1/sqrt(d)`` (default: their own diagonal) so
    that the rank cut-off ``rtol`` is relative to each regressor's
    magnitude; columns with ``d = 0`` are treated as zero.
    """
    if d is None:
        d = np.einsum("bii->bi", G)
    scale = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    C = G * scale[:, :, None] * scale[:, None, :]
    w, V = np.linalg.eigh(C)
    keep = w > rtol * C.shape[-1]
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    Ci = (V * inv[..., None, :]) @ np.swapaxes(V, -1, -2)
    return Ci * scale[:, :, None] * scale[:, None, :]


def gc_batch(X, Y, order: int = 3) -> np.ndarray:
    """Granger statistic for each row pair ``X[b] -> Y[b]``.

    The restricted model regresses ``y[k]`` on an intercept and ``y[k-1..k-R]``;
    the full model adds ``x[k-1..k-R]``. With ``H = K - R`` residuals, the
    statistic is ``((SSR_r - SSR_u) / R) / (SSR_u / (K - 3R - 1))``, clamped
    at 0. A numerically exact full fit returns ``inf``, unless the restricted
    fit is already exact (e.g. a constant target), which returns 0.
    """
    X, Y = _as_batch(X, Y)
    B, K = X.shape
    R = int(order)
    if R < 1:
        raise InvalidConfigError("ar_order must be positive")
    if K <= 3 * R + 1:
        raise InvalidConfigError(f"K={K} must exceed 3*R+1={3 * R + 1}")
    G = _gram_batch(X, Y, R)
    raw_yy = G[:, -1, -1]
    H = K - R
    # Partial out the intercept exactly from the integer Gram: what remains is
    # the Gram of the centred regressors, far better conditioned for counts.
    G = G[:, 1:, 1:] - G[:, 0, 1:, None] * G[:, 0, None, 1:] / H
    w = slice(0, R)
    xs = slice(R, 2 * R)
    t = 2 * R
    Gww, Gwx, Gxx = G[:, w, w], G[:, w, xs], G[:, xs, xs]
    gwy, gxy, yy = G[:, w, t], G[:, xs, t], G[:, t, t]
    Wi = _pinv_psd(Gww)
    ssr_r = yy - np.einsum("bi,bij,bj->b", gwy, Wi, gwy)
    # Source lags with the restricted regressors partialled out.
    Gt = Gxx - np.swapaxes(Gwx, 1, 2) @ Wi @ Gwx
    c = gxy - np.einsum("bji,bjk,bk->bi", Gwx, Wi, gwy)
    # Scale by the raw source magnitudes so that round-off left after
    # partialling out collinear regressors is not mistaken for signal.
    Gti = _pinv_psd(Gt, np.einsum("bii->bi", Gxx))
    num = np.maximum(np.einsum("bi,bij,bj->b", c, Gti, c), 0.0)
    ssr_u = ssr_r - num
    # A target its own past already fits exactly leaves nothing to explain;
    # otherwise a numerically exact full fit is an infinite gain. Both
    # cut-offs are relative to the raw target energy, the round-off scale.
    tol = 1e-9 * np.maximum(raw_yy, 1e-300)
    flat = ssr_r <= tol
    exact = ssr_u <= tol
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = (num / R) / (ssr_u / (K - 3 * R - 1))
    return np.where(flat, 0.0, np.where(exact, np.inf, np.maximum(stat, 0.0)))


def gc_statistic(source: SeriesLike, target: SeriesLike, order: int = 3) -> float:
    """Granger statistic of ``source -> target`` with AR order ``order``."""
    return float(gc_batch(_as_counts(source), _as_counts(target), order)[0])


# ---------------------------------------------------------------------------
# Transfer entropy
# ---------------------------------------------------------------------------


@njit(cache=True)
def _te_counts(X, Y, s, r, A):
    """Joint counts of (next target, target window, source window) symbols."""
    B, K = X.shape
    m = max(s, r)
    ns = A ** s
    nd = A ** r
    out = np.zeros((B, A * nd * ns), np.int64)
    for b in range(B):
        for k in range(m, K):
            src = 0
            for lag in range(1, s + 1):
                src = src * A + min(X[b, k - lag], A - 1)
            dst = 0
            for lag in range(1, r + 1):
                dst = dst * A + min(Y[b, k - lag], A - 1)
            out[b, (min(Y[b, k], A - 1) * nd + dst) * ns + src] += 1
    return out


def te_batch(X, Y, s: int = 1, r: int = 1) -> np.ndarray:
    """Plug-in transfer entropy in bits for each row pair ``X[b] -> Y[b]``.

    Estimates ``I(y[k]; x[k-s..k-1] | y[k-r..k-1])`` from joint symbol
    frequencies over ``k = max(s, r) .. K-1`` after clipping counts at 2.
    """
    X, Y = _as_batch(X, Y)
    B, K = X.shape
    m = max(s, r)
    if s < 1 or r < 1:
        raise InvalidConfigError("TE windows must be positive")
    if K <= m:
        raise InvalidConfigError(f"TE window {m} exceeds series length {K}")
    if X.dtype.kind not in "iu" or Y.dtype.kind not in "iu":
        raise InvalidInputError("TE needs integer count series")
    A = TE_ALPHABET
    cnt = _te_counts(np.ascontiguousarray(X, dtype=np.int64) if X.dtype.kind == "u" else
                     np.ascontiguousarray(X),
                     np.ascontiguousarray(Y, dtype=np.int64) if Y.dtype.kind == "u" else
                     np.ascontiguousarray(Y), s, r, A)
    p = cnt.reshape(B, A, A ** r, A ** s) / float(K - m)
    p_dst_src = p.sum(axis=1, keepdims=True)
    p_next_dst = p.sum(axis=3, keepdims=True)
    p_dst = p.sum(axis=(1, 3), keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = p * np.log2(p * p_dst / (p_dst_src * p_next_dst))
    te = np.where(p > 0, terms, 0.0).sum(axis=(1, 2, 3))
    return np.maximum(te, 0.0)


def te_statistic(source: SeriesLike, target: SeriesLike, s: int = 1, r: int = 1) -> float:
    """Transfer entropy ``source -> target`` in bits."""
    return float(te_batch(_as_counts(source), _as_counts(target), s, r)[0])


# ---------------------------------------------------------------------------
# Shared machinery
# ---------------------------------------------------------------------------


def metric_batch(X, Y, cfg: MetricConfig) -> np.ndarray:
    """Evaluate the configured metric on each row pair."""
    if cfg.kind == "gc":
        return gc_batch(X, Y, cfg.ar_order)
    return te_batch(X, Y, cfg.te_src_window, cfg.te_dst_window)


def shift_pair(X: np.ndarray, Y: np.ndarray, tau: int) -> Tuple[np.ndarray, np.ndarray]:
    """Align ``X`` against ``Y`` so that a one-step metric tests delay ``tau``.

    Returns ``X[..., :K-tau+1]`` and ``Y[..., tau-1:]``; a lag-one dependence
    between the outputs is a lag-``tau`` dependence between the inputs.
    """
    K = X.shape[-1]
    return X[..., :K - tau + 1], Y[..., tau - 1:]


def _quantile_index(alpha: float, S: int) -> int:
    """0-based index of the ``ceil((1 - alpha) S)``-th smallest value."""
    rank = math.ceil(round((1.0 - alpha) * S, 9))
    return min(max(rank, 1), S) - 1


@njit(cache=True)
def _permute_rows(A, raw):
    """Fisher-Yates shuffle of every row of ``A`` in place.

    ``raw`` supplies one 32-bit random word per swap, mapped onto ``0..k`` by
    multiply-shift, whose bias is below ``K / 2**32``.
    """
    B, K = A.shape
    n = 0
    for b in range(B):
        row = A[b]
        for k in range(K - 1, 0, -1):
            j = (np.uint64(raw[n]) * np.uint64(k + 1)) >> np.uint64(32)
            n += 1
            t = row[k]
            row[k] = row[j]
            row[j] = t


def _permuted_copies(X: np.ndarray, S: int, rng: np.random.Generator, dtype) -> np.ndarray:
    out = np.repeat(X.astype(dtype), S, axis=0)
    if out.shape[1] > 1:
        n = out.shape[0] * (out.shape[1] - 1)
        # Both halves of each 64-bit output are used as independent words.
        raw = rng.bit_generator.random_raw((n + 1) // 2).view(np.uint32)
        _permute_rows(out, raw)
    return out


def permutation_thresholds(X, Y, cfg: MetricConfig, rng: np.random.Generator,
                           n_perm: int = None) -> np.ndarray:
    """Null thresholds for each row pair from independently permuted copies.

    Each of the ``S`` null draws permutes both series uniformly. The threshold
    is the ``ceil((1 - alpha) S)``-th smallest null value. Pairs are processed
    in order, so results depend only on ``rng``'s state.
    """
    X, Y = _as_batch(X, Y)
    S = int(cfg.permutations if n_perm is None else n_perm)
    B, K = X.shape
    top = max(int(np.abs(X).max(initial=0)), int(np.abs(Y).max(initial=0)))
    dtype = np.int16 if top < 2 ** 15 else np.int64
    out = np.empty(B)
    q = _quantile_index(cfg.alpha, S)
    per_chunk = max(1, _CHUNK_CELLS // max(1, S * K))
    for start in range(0, B, per_chunk):
        stop = min(B, start + per_chunk)
        px = _permuted_copies(X[start:stop], S, rng, dtype)
        py = _permuted_copies(Y[start:stop], S, rng, dtype)
        vals = metric_batch(px, py, cfg).reshape(stop - start, S)
        out[start:stop] = np.sort(vals, axis=1)[:, q]
    return out


def permutation_threshold(source: SeriesLike, target: SeriesLike, cfg: MetricConfig,
                          rng_seed: int = 0) -> float:
    """(1 - alpha) empirical quantile of the metric under joint permutation."""
    rng = np.random.default_rng(rng_seed)
    return float(permutation_thresholds(_as_counts(source), _as_counts(target), cfg, rng)[0])


def delay_scan_batch(X, Y, cfg: MetricConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Best delay in ``1..max_delay`` and its metric value for each row pair.

    Ties go to the smallest delay.
    """
    X, Y = _as_batch(X, Y)
    cfg.check_length(X.shape[1])
    vals = np.stack([metric_batch(*shift_pair(X, Y, tau), cfg)
                     for tau in range(1, cfg.max_delay + 1)])
    best = np.argmax(vals, axis=0)
    return best + 1, vals[best, np.arange(vals.shape[1])]


def delay_scan(source: SeriesLike, target: SeriesLike, cfg: MetricConfig) -> Tuple[int, float]:
    """Scan candidate ACK delays and return ``(best_delay, best_value)``."""
    taus, vals = delay_scan_batch(_as_counts(source), _as_counts(target), cfg)
    return int(taus[0]), float(vals[0])


def scan_and_test(X, Y, cfg: MetricConfig, rng: np.random.Generator,
                  n_perm: int = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Delay scan followed by a permutation test at each pair's best delay.

    Returns ``(best_delay, best_value, decision)`` arrays.
    """
    X, Y = _as_batch(X, Y)
    taus, vals = delay_scan_batch(X, Y, cfg)
    decision = np.zeros(len(taus), dtype=bool)
    for tau in np.unique(taus):
        rows = np.nonzero(taus == tau)[0]
        xs, ys = shift_pair(X[rows], Y[rows], int(tau))
        thr = permutation_thresholds(xs, ys, cfg, rng, n_perm)
        decision[rows] = vals[rows] > thr
    return taus, vals, decision
