"""Host-side reconstruction of full-length windows from coresets."""

from __future__ import annotations

from typing import Optional, Protocol

import numpy as np

from .coreset import ClusterCoreset, SampleCoreset, denormalize
from .dataio import SensorWindow


def rescale_counts(counts, total: int) -> np.ndarray:
    """Scale non-negative counts so they sum to ``total`` (largest remainder)."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        counts = np.ones_like(counts)
    exact = counts * total / counts.sum()
    out = np.floor(exact).astype(np.int64)
    short = total - out.sum()
    if short > 0:
        order = np.lexsort((np.arange(len(exact)), -(exact - out)))
        out[order[:short]] += 1
    return out


def disk_points(center_t, center_v, radius, counts, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``counts[j]`` points uniformly in disk j, clipped to the unit square.

    Returns the (n, 2) points and the cluster index of each. Clipping is a
    projection onto a convex set containing every center, so no point moves
    farther from its own center.
    """
    owner = np.repeat(np.arange(len(counts)), counts)
    n = owner.size
    rho = np.asarray(radius)[owner] * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    pts = np.column_stack(
        [np.asarray(center_t)[owner] + rho * np.cos(theta), np.asarray(center_v)[owner] + rho * np.sin(theta)]
    )
    return np.clip(pts, 0.0, 1.0), owner


def reconstruct_cluster(c: ClusterCoreset, L: Optional[int] = None, seed: int = 0) -> SensorWindow:
    """Synthesize an L-sample window by spreading each cluster's points over its disk.

    Points are sorted by time and the i-th point fills grid slot i, the
    one-to-one nearest assignment of L points to L slots (stable sort keeps
    cluster order on equal times). If a channel's counts do not sum to L they are
    rescaled and ``meta['rescaled']`` lists the channel.
    """
    L = c.length if L is None else int(L)
    rng = np.random.default_rng(seed)
    out = np.empty((L, c.n_channels))
    meta = {"points": [], "owner": [], "rescaled": []}
    for ch in range(c.n_channels):
        counts = np.asarray(c.count[ch], dtype=np.int64)
        if counts.sum() != L:
            counts = rescale_counts(counts, L)
            meta["rescaled"].append(ch)
        pts, owner = disk_points(c.center_t[ch], c.center_v[ch], c.radius[ch], counts, rng)
        order = np.argsort(pts[:, 0], kind="stable")
        lo, hi = c.quant_meta[ch]
        out[:, ch] = denormalize(pts[order, 1], lo, hi)
        meta["points"].append(pts)
        meta["owner"].append(owner)
    return SensorWindow(out, meta=meta)


class Generator(Protocol):
    """Fills the samples a sampling coreset dropped."""

    def __call__(self, coreset: SampleCoreset, L: int, rng: np.random.Generator) -> np.ndarray: ...


class MomentMatchingGenerator:
    """Linear interpolation through the kept samples plus moment-matched noise.

    Gaussian noise is added on the dropped samples only, with a single scale
    solved in closed form so that the window variance equals the transmitted
    variance. If interpolation alone already overshoots, deviations are shrunk
    instead. The mean is shifted onto the transmitted mean last.
    """

    def __call__(self, coreset: SampleCoreset, L: int, rng: np.random.Generator) -> np.ndarray:
        grid = np.arange(L)
        out = np.empty((L, coreset.n_channels))
        for ch in range(coreset.n_channels):
            idx = coreset.indices[ch]
            base = np.interp(grid, idx, coreset.values[ch])
            missing = np.ones(L, dtype=bool)
            missing[idx] = False
            noise = rng.standard_normal(L) * missing
            target = float(coreset.variance[ch])
            if target <= 0.0:
                y = np.zeros(L)
            elif not missing.any():
                y = base
            else:
                y = _match_variance(base, noise, target)
            out[:, ch] = y + (coreset.mean[ch] - y.mean())
        return out


def _match_variance(base, noise, target):
    vb = base.var()
    if vb >= target:
        return base.mean() + (base - base.mean()) * np.sqrt(target / vb) if vb > 0 else base
    vn = noise.var()
    cbn = np.mean((base - base.mean()) * (noise - noise.mean()))
    # var(base + s*noise) = vb + 2 s cbn + s^2 vn = target, positive root
    s = (-cbn + np.sqrt(cbn * cbn + vn * (target - vb))) / vn
    return base + s * noise


def reconstruct_sample(
    s: SampleCoreset, L: Optional[int] = None, seed: int = 0, generator: Optional[Generator] = None
) -> SensorWindow:
    """Fill a full-length window from a sampling coreset with ``generator``."""
    L = s.length if L is None else int(L)
    gen = generator or MomentMatchingGenerator()
    values = gen(s, L, np.random.default_rng(seed))
    return SensorWindow(values)
