"""Coreset construction and the bit-packed payload bodies.

Two summaries of a window are supported:

* clustering coresets: per channel, Lloyd k-means in the normalised
  (time, value) plane; each cluster keeps center, radius and point count;
* sampling coresets: per channel, ``m`` importance-sampled (index, value)
  pairs spaced at least ``min_gap`` apart, plus the full-window mean and
  variance.

Values are normalised with static per-channel calibration bounds
(``quant_meta``), so bodies carry no scale header. The exact bit layouts are
documented in FORMAT.md.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dataio import ConfigError, SensorWindow
from .kernels import lloyd

K_MAX = 12
COUNT_CLAMP = 16
EPS_WEIGHT = 1e-6

T_BITS, V_BITS, R_BITS, N_BITS = 6, 10, 8, 4
IDX_BITS, SV_BITS, MOMENT_BITS = 6, 10, 16
V_LEVELS = (1 << V_BITS) - 1
R_LEVELS = (1 << R_BITS) - 1
M_LEVELS = (1 << MOMENT_BITS) - 1


class FormatError(ValueError):
    """Body bytes that do not match the expected layout."""


class CodecWarning(UserWarning):
    """A field had to be clamped to fit its encoded width."""


@dataclass
class ClusterCoreset:
    """Per-channel cluster summaries; arrays are ordered by (center_t, center_v)."""

    center_t: list  # per channel, (k_c,) in [0, 1]
    center_v: list
    radius: list
    count: list  # per channel, (k_c,) int
    length: int
    quant_meta: np.ndarray  # (C, 2)
    warnings: list = field(default_factory=list)

    @property
    def n_channels(self) -> int:
        return len(self.center_t)

    @property
    def k_per_channel(self) -> list[int]:
        return [len(c) for c in self.center_t]


@dataclass
class SampleCoreset:
    indices: np.ndarray  # (C, m) int, strictly increasing per row
    values: np.ndarray  # (C, m) sensor units
    mean: np.ndarray  # (C,)
    variance: np.ndarray  # (C,)
    length: int
    quant_meta: np.ndarray  # (C, 2)

    @property
    def n_channels(self) -> int:
        return self.indices.shape[0]

    @property
    def m(self) -> int:
        return self.indices.shape[1]


@dataclass
class ClusterBudgetTable:
    """Minimum cluster count per class that keeps accuracy (AAC lookup table)."""

    entries: dict = field(default_factory=dict)
    k_max: int = K_MAX

    def __post_init__(self):
        self.entries = {int(c): int(k) for c, k in self.entries.items()}
        for c, k in self.entries.items():
            if not 1 <= k <= self.k_max:
                raise ConfigError(f"budget entry for class {c} outside [1, {self.k_max}]")

    def __getitem__(self, cls: int) -> int:
        return self.entries.get(int(cls), self.k_max)


@dataclass
class ClusterFit:
    """Raw output of clustering one channel (before dropping empty clusters)."""

    points: np.ndarray
    centers: np.ndarray
    labels: np.ndarray
    n_iter: int
    converged: bool
    objective: np.ndarray


def _ranges_for(window: SensorWindow, ranges) -> np.ndarray:
    if ranges is None:
        lo = window.values.min(axis=0)
        hi = window.values.max(axis=0)
        flat = lo >= hi
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        return np.stack([lo, hi], axis=1)
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    if ranges.shape[0] != window.n_channels:
        raise ConfigError("need one (min, max) range per channel")
    return ranges


def normalize(values, lo, hi):
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def denormalize(values, lo, hi):
    return lo + np.asarray(values, dtype=np.float64) * (hi - lo)


# --------------------------------------------------------------------------
# importance sampling
# --------------------------------------------------------------------------


def importance_weights(window: SensorWindow, channel: int) -> np.ndarray:
    """Sampling weights for one channel, favouring deviation and sharp changes.

    w_i is proportional to eps + |x_i - mean| + |x_i - x_{i-1}| with x_{-1} = x_0.
    """
    x = window.values[:, channel]
    dev = np.abs(x - x.mean())
    diff = np.abs(np.diff(x, prepend=x[0]))
    w = EPS_WEIGHT + dev + diff
    return w / w.sum()


def _gap_violations(sorted_idx, min_gap):
    keep, bad = [int(sorted_idx[0])], []
    for x in sorted_idx[1:]:
        if x - keep[-1] < min_gap:
            bad.append(int(x))
        else:
            keep.append(int(x))
    return keep, bad


def _greedy_sweep(current, weights, m, min_gap, L):
    order_cur = sorted(current, key=lambda i: (-weights[i], i))
    rest = [i for i in np.lexsort((np.arange(L), -weights)) if i not in set(current)]
    kept: list[int] = []
    for i in list(order_cur) + [int(i) for i in rest]:
        if len(kept) == m:
            break
        if all(abs(i - j) >= min_gap for j in kept):
            kept.append(i)
    if len(kept) < m:
        # greedy packing can strand slots; an even layout is always feasible here
        step = (L - 1) / (m - 1) if m > 1 else 0
        kept = [int(math.floor(j * step)) for j in range(m)]
    return sorted(kept)


def sample_indices(weights, m, min_gap, max_rounds, rng) -> np.ndarray:
    L = len(weights)
    idx = rng.choice(L, size=m, replace=False, p=weights)
    for _ in range(max_rounds):
        keep, bad = _gap_violations(np.sort(idx), min_gap)
        if not bad:
            return np.asarray(keep, dtype=np.int64)
        avail = np.setdiff1d(np.arange(L), keep)
        p = weights[avail]
        p = p / p.sum() if p.sum() > 0 else np.full(len(avail), 1.0 / len(avail))
        redraw = rng.choice(avail, size=len(bad), replace=False, p=p)
        idx = np.concatenate([keep, redraw])
    keep, bad = _gap_violations(np.sort(idx), min_gap)
    if not bad:
        return np.asarray(keep, dtype=np.int64)
    return np.asarray(_greedy_sweep([int(i) for i in idx], weights, m, min_gap, L), dtype=np.int64)


def sample_coreset(
    window: SensorWindow,
    m: int = 20,
    min_gap: int = 2,
    max_rounds: int = 7,
    seed: int = 0,
    ranges=None,
    weight_fn: Callable[[SensorWindow, int], np.ndarray] = importance_weights,
) -> SampleCoreset:
    """Importance-sampling coreset of ``window``.

    Per channel, ``m`` distinct indices are drawn by ``weight_fn``. Indices that
    sit closer than ``min_gap`` to an earlier kept index are redrawn, for up to
    ``max_rounds`` passes; whatever still violates the spacing afterwards is
    settled by a greedy sweep that keeps the heaviest points. Mean and variance
    are taken over the whole window.
    """
    L, C = window.values.shape
    if m < 1 or min_gap < 1 or m * min_gap - (min_gap - 1) > L:
        raise ConfigError(f"cannot place m={m} samples {min_gap} apart in a window of {L}")
    rng = np.random.default_rng(seed)
    idx = np.empty((C, m), dtype=np.int64)
    for ch in range(C):
        w = np.asarray(weight_fn(window, ch), dtype=np.float64)
        idx[ch] = sample_indices(w, m, min_gap, max_rounds, rng)
    vals = np.take_along_axis(window.values.T, idx, axis=1)
    return SampleCoreset(
        idx,
        vals,
        window.values.mean(axis=0),
        window.values.var(axis=0),
        L,
        _ranges_for(window, ranges),
    )


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------


def channel_points(values, lo, hi) -> np.ndarray:
    L = len(values)
    t = np.arange(L) / (L - 1) if L > 1 else np.zeros(1)
    return np.column_stack([t, normalize(values, lo, hi)])


def cluster_points(points: np.ndarray, k: int, max_iter: int = 4) -> ClusterFit:
    """Lloyd k-means of an (n, 2) point set, seeded at the largest value deviation."""
    v = points[:, 1]
    first = int(np.argmax(np.abs(v - v.mean())))
    centers, labels, n_iter, converged, objective = lloyd(points, k, max_iter, first)
    return ClusterFit(points, centers, labels, int(n_iter), bool(converged), objective)


def summarize_fit(fit: ClusterFit):
    """Centers, radii and counts of the non-empty clusters, ordered by (t, v)."""
    k = fit.centers.shape[0]
    counts = np.bincount(fit.labels, minlength=k)
    d = np.hypot(*(fit.points - fit.centers[fit.labels]).T)
    radius = np.zeros(k)
    np.maximum.at(radius, fit.labels, d)
    live = np.flatnonzero(counts > 0)
    c = fit.centers[live]
    order = np.lexsort((c[:, 1], c[:, 0]))
    live = live[order]
    return fit.centers[live, 0], fit.centers[live, 1], radius[live], counts[live]


def kmeans_coreset(
    window: SensorWindow,
    k_per_channel: Union[int, Sequence[int]] = K_MAX,
    max_iter: int = 4,
    ranges=None,
) -> ClusterCoreset:
    """Clustering coreset: per channel, at most k clusters over (t/(L-1), normalised value)."""
    L, C = window.values.shape
    ks = [int(k_per_channel)] * C if np.isscalar(k_per_channel) else [int(k) for k in k_per_channel]
    if len(ks) != C:
        raise ConfigError("k_per_channel must give one count per channel")
    meta = _ranges_for(window, ranges)
    out = ClusterCoreset([], [], [], [], L, meta)
    for ch, k in enumerate(ks):
        if not 1 <= k <= L:
            raise ConfigError(f"k={k} outside [1, {L}]")
        pts = channel_points(window.values[:, ch], *meta[ch])
        ct, cv, r, n = summarize_fit(cluster_points(pts, k, max_iter))
        out.center_t.append(ct)
        out.center_v.append(cv)
        out.radius.append(r)
        out.count.append(n.astype(np.int64))
        if n.max() > COUNT_CLAMP:
            out.warnings.append(f"channel {ch}: cluster of {int(n.max())} points exceeds {COUNT_CLAMP}")
    return out


def select_cluster_count(
    predicted_class: Optional[int], affordable_k: int, table: ClusterBudgetTable
) -> int:
    """Activity-aware cluster count: the class's budget entry, capped by energy."""
    if affordable_k < 1:
        raise ConfigError("affordable_k must be >= 1")
    if predicted_class is None:
        return min(affordable_k, table.k_max)
    return min(affordable_k, table[predicted_class])


# --------------------------------------------------------------------------
# bit packing
# --------------------------------------------------------------------------


class BitWriter:
    """MSB-first bit accumulator."""

    def __init__(self):
        self._acc = 0
        self._n = 0

    def write(self, value: int, nbits: int) -> None:
        if not 0 <= value < (1 << nbits):
            raise FormatError(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self._n += nbits

    def align(self) -> None:
        pad = -self._n % 8
        self._acc <<= pad
        self._n += pad

    def getvalue(self) -> bytes:
        self.align()
        return self._acc.to_bytes(self._n // 8, "big")


class BitReader:
    def __init__(self, data: bytes):
        self._data = int.from_bytes(data, "big")
        self._total = len(data) * 8
        self._pos = 0

    def read(self, nbits: int) -> int:
        if self._pos + nbits > self._total:
            raise FormatError("body truncated")
        shift = self._total - self._pos - nbits
        self._pos += nbits
        return (self._data >> shift) & ((1 << nbits) - 1)

    def align(self) -> None:
        self._pos += -self._pos % 8

    @property
    def remaining(self) -> int:
        return self._total - self._pos


def cluster_body_bytes(k_per_channel: Union[int, Sequence[int]], n_channels: int = 1, with_counts: bool = True) -> int:
    ks = [int(k_per_channel)] * n_channels if np.isscalar(k_per_channel) else list(k_per_channel)
    per_cluster = T_BITS + V_BITS + R_BITS + (N_BITS if with_counts else 0)
    return sum((k * per_cluster + 7) // 8 for k in ks)


def sample_body_bytes(m: int, n_channels: int = 1) -> int:
    return n_channels * ((m * (IDX_BITS + SV_BITS) + 2 * MOMENT_BITS + 7) // 8)


def encode_cluster(c: ClusterCoreset, with_counts: bool = True) -> bytes:
    """Pack a clustering coreset.

    Per channel: k records of (t:6, v:10, r:8) bits, then (if ``with_counts``)
    k fields of count-1 in 4 bits, then zero padding to a byte boundary.
    Counts above 16 are clamped and reported with :class:`CodecWarning`.
    """
    L = c.length
    if L > 1 << T_BITS or L < 2:
        raise FormatError(f"window length {L} not encodable in {T_BITS} time bits")
    w = BitWriter()
    clamped = False
    for ch in range(c.n_channels):
        k = len(c.center_t[ch])
        if not 1 <= k < 1 << T_BITS:
            raise FormatError(f"channel {ch}: k={k} outside [1, {(1 << T_BITS) - 1}]")
        for t, v, r in zip(c.center_t[ch], c.center_v[ch], c.radius[ch]):
            w.write(int(round(min(max(t, 0.0), 1.0) * (L - 1))), T_BITS)
            w.write(int(round(min(max(v, 0.0), 1.0) * V_LEVELS)), V_BITS)
            w.write(int(round(min(max(r, 0.0), 1.0) * R_LEVELS)), R_BITS)
        if with_counts:
            for n in c.count[ch]:
                if n > COUNT_CLAMP:
                    clamped = True
                w.write(min(max(int(n), 1), COUNT_CLAMP) - 1, N_BITS)
        w.align()
    if clamped:
        warnings.warn(f"cluster count clamped to {COUNT_CLAMP}", CodecWarning, stacklevel=2)
    return w.getvalue()


def decode_cluster(
    body: bytes,
    k_per_channel: Union[int, Sequence[int]],
    C: int,
    L: int,
    quant_meta,
    with_counts: bool = True,
) -> ClusterCoreset:
    ks = [int(k_per_channel)] * C if np.isscalar(k_per_channel) else [int(k) for k in k_per_channel]
    if len(ks) != C:
        raise FormatError("k_per_channel must list one count per channel")
    expected = cluster_body_bytes(ks, C, with_counts)
    if len(body) != expected:
        raise FormatError(f"body is {len(body)} bytes, layout needs {expected}")
    r = BitReader(body)
    out = ClusterCoreset([], [], [], [], L, np.asarray(quant_meta, dtype=np.float64).reshape(C, 2))
    for k in ks:
        recs = np.array([[r.read(T_BITS), r.read(V_BITS), r.read(R_BITS)] for _ in range(k)], dtype=np.float64).reshape(k, 3)
        out.center_t.append(recs[:, 0] / (L - 1))
        out.center_v.append(recs[:, 1] / V_LEVELS)
        out.radius.append(recs[:, 2] / R_LEVELS)
        if with_counts:
            out.count.append(np.array([r.read(N_BITS) + 1 for _ in range(k)], dtype=np.int64))
        else:
            out.count.append(np.zeros(k, dtype=np.int64))
        r.align()
    return out


def encode_sample(s: SampleCoreset) -> bytes:
    """Pack a sampling coreset: per channel m x (index:6, value:10), mean:16, variance:16."""
    L = s.length
    if L > 1 << IDX_BITS:
        raise FormatError(f"window length {L} not encodable in {IDX_BITS} index bits")
    w = BitWriter()
    for ch in range(s.n_channels):
        lo, hi = s.quant_meta[ch]
        span = hi - lo
        for i, v in zip(s.indices[ch], s.values[ch]):
            w.write(int(i), IDX_BITS)
            w.write(int(round(normalize(v, lo, hi) * V_LEVELS)), SV_BITS)
        w.write(int(round(normalize(s.mean[ch], lo, hi) * M_LEVELS)), MOMENT_BITS)
        # variance of a signal confined to [lo, hi] is at most span^2 / 4
        var_n = min(max(4.0 * s.variance[ch] / span**2, 0.0), 1.0)
        w.write(int(round(var_n * M_LEVELS)), MOMENT_BITS)
        w.align()
    return w.getvalue()


def decode_sample(body: bytes, m: int, C: int, L: int, quant_meta) -> SampleCoreset:
    expected = sample_body_bytes(m, C)
    if len(body) != expected:
        raise FormatError(f"body is {len(body)} bytes, layout needs {expected}")
    meta = np.asarray(quant_meta, dtype=np.float64).reshape(C, 2)
    r = BitReader(body)
    idx = np.empty((C, m), dtype=np.int64)
    vals = np.empty((C, m))
    mean = np.empty(C)
    var = np.empty(C)
    for ch in range(C):
        lo, hi = meta[ch]
        for j in range(m):
            idx[ch, j] = r.read(IDX_BITS)
            vals[ch, j] = denormalize(r.read(SV_BITS) / V_LEVELS, lo, hi)
        mean[ch] = denormalize(r.read(MOMENT_BITS) / M_LEVELS, lo, hi)
        var[ch] = r.read(MOMENT_BITS) / M_LEVELS * (hi - lo) ** 2 / 4.0
        r.align()
    if np.any(idx >= L):
        raise FormatError("sample index beyond window length")
    return SampleCoreset(idx, vals, mean, var, L, meta)


# --------------------------------------------------------------------------
# flat feature vectors for models that read coresets directly
# --------------------------------------------------------------------------


def cluster_features(c: ClusterCoreset, k_max: int = K_MAX) -> np.ndarray:
    """(t, v, r, count/16) per cluster, zero-padded to ``k_max`` clusters per channel."""
    feats = np.zeros((c.n_channels, k_max, 4))
    for ch in range(c.n_channels):
        k = min(len(c.center_t[ch]), k_max)
        feats[ch, :k, 0] = c.center_t[ch][:k]
        feats[ch, :k, 1] = c.center_v[ch][:k]
        feats[ch, :k, 2] = c.radius[ch][:k]
        feats[ch, :k, 3] = np.minimum(c.count[ch][:k], COUNT_CLAMP) / COUNT_CLAMP
    return feats.ravel()


def sample_features(s: SampleCoreset) -> np.ndarray:
    """(index/(L-1), normalised value) per sample, then normalised mean and variance."""
    parts = []
    for ch in range(s.n_channels):
        lo, hi = s.quant_meta[ch]
        parts.append(s.indices[ch] / max(s.length - 1, 1))
        parts.append(normalize(s.values[ch], lo, hi))
        parts.append([normalize(s.mean[ch], lo, hi), 4.0 * s.variance[ch] / (hi - lo) ** 2])
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
