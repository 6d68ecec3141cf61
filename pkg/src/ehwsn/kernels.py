"""Hot numeric loops, each in a numba flavour and a pure-numpy flavour.

The public names (``lloyd``, ``clamped_accumulate``, ``fixed_dense``) dispatch
to the numba version unless numba is missing or ``EHWSN_DISABLE_NUMBA`` is set.
Both flavours are kept importable (``*_nb`` / ``*_np``) so tests and the
benchmark can compare them directly.

Tie-breaking and summation order are identical in both flavours: nearest-center
ties go to the lowest center index, maximin/farthest ties go to the lowest point
index, and running sums are strictly sequential.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


# --------------------------------------------------------------------------
# Lloyd k-means in the plane
# --------------------------------------------------------------------------


@njit(cache=True)
def _lloyd_nb(points, k, max_iter, first):
    n = points.shape[0]
    centers = np.empty((k, 2))
    labels = np.empty(n, dtype=np.int64)
    objective = np.full(max_iter + 1, np.nan)

    # maximin (farthest-first) seeding
    centers[0, 0] = points[first, 0]
    centers[0, 1] = points[first, 1]
    mind = np.empty(n)
    for i in range(n):
        dx = points[i, 0] - centers[0, 0]
        dy = points[i, 1] - centers[0, 1]
        mind[i] = dx * dx + dy * dy
    for j in range(1, k):
        best = 0
        for i in range(1, n):
            if mind[i] > mind[best]:
                best = i
        centers[j, 0] = points[best, 0]
        centers[j, 1] = points[best, 1]
        for i in range(n):
            dx = points[i, 0] - centers[j, 0]
            dy = points[i, 1] - centers[j, 1]
            d = dx * dx + dy * dy
            if d < mind[i]:
                mind[i] = d

    obj = 0.0
    for i in range(n):
        bj = 0
        bd = np.inf
        for j in range(k):
            dx = points[i, 0] - centers[j, 0]
            dy = points[i, 1] - centers[j, 1]
            d = dx * dx + dy * dy
            if d < bd:
                bd = d
                bj = j
        labels[i] = bj
        obj += bd
    objective[0] = obj

    converged = False
    n_iter = 0
    sums = np.empty((k, 2))
    counts = np.empty(k, dtype=np.int64)
    dist = np.empty(n)
    new_labels = np.empty(n, dtype=np.int64)
    for it in range(max_iter):
        sums[:, :] = 0.0
        counts[:] = 0
        for i in range(n):
            j = labels[i]
            sums[j, 0] += points[i, 0]
            sums[j, 1] += points[i, 1]
            counts[j] += 1
        for j in range(k):
            if counts[j] > 0:
                centers[j, 0] = sums[j, 0] / counts[j]
                centers[j, 1] = sums[j, 1] / counts[j]
        reseeded = False
        for j in range(k):
            if counts[j] == 0:
                if not reseeded:
                    for i in range(n):
                        c = labels[i]
                        dx = points[i, 0] - centers[c, 0]
                        dy = points[i, 1] - centers[c, 1]
                        dist[i] = dx * dx + dy * dy
                reseeded = True
                far = 0
                for i in range(1, n):
                    if dist[i] > dist[far]:
                        far = i
                centers[j, 0] = points[far, 0]
                centers[j, 1] = points[far, 1]
                labels[far] = j
                dist[far] = 0.0
        obj = 0.0
        changed = False
        for i in range(n):
            bj = 0
            bd = np.inf
            for j in range(k):
                dx = points[i, 0] - centers[j, 0]
                dy = points[i, 1] - centers[j, 1]
                d = dx * dx + dy * dy
                if d < bd:
                    bd = d
                    bj = j
            new_labels[i] = bj
            obj += bd
            if bj != labels[i]:
                changed = True
        n_iter = it + 1
        objective[it + 1] = obj
        for i in range(n):
            labels[i] = new_labels[i]
        if not changed and not reseeded:
            converged = True
            break
    return centers, labels, n_iter, converged, objective


def _sqdist(points, centers):
    dx = points[:, 0:1] - centers[None, :, 0]
    dy = points[:, 1:2] - centers[None, :, 1]
    return dx * dx + dy * dy


def _seqsum(values):
    # strictly left-to-right, matching the numba loops
    return float(np.cumsum(values)[-1]) if len(values) else 0.0


def _lloyd_np(points, k, max_iter, first):
    n = points.shape[0]
    centers = np.empty((k, 2))
    objective = np.full(max_iter + 1, np.nan)
    centers[0] = points[first]
    mind = _sqdist(points, centers[0:1])[:, 0]
    for j in range(1, k):
        best = int(np.argmax(mind))
        centers[j] = points[best]
        mind = np.minimum(mind, _sqdist(points, centers[j : j + 1])[:, 0])

    d2 = _sqdist(points, centers)
    labels = np.argmin(d2, axis=1)
    objective[0] = _seqsum(d2[np.arange(n), labels])

    converged = False
    n_iter = 0
    for it in range(max_iter):
        counts = np.bincount(labels, minlength=k)
        sx = np.zeros(k)
        sy = np.zeros(k)
        # np.add.at accumulates in index order, i.e. sequentially per cluster
        np.add.at(sx, labels, points[:, 0])
        np.add.at(sy, labels, points[:, 1])
        live = counts > 0
        centers[live, 0] = sx[live] / counts[live]
        centers[live, 1] = sy[live] / counts[live]
        empties = np.flatnonzero(~live)
        reseeded = empties.size > 0
        if reseeded:
            diff = points - centers[labels]
            dist = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
            for j in empties:
                far = int(np.argmax(dist))
                centers[j] = points[far]
                labels[far] = j
                dist[far] = 0.0
        d2 = _sqdist(points, centers)
        new_labels = np.argmin(d2, axis=1)
        n_iter = it + 1
        objective[it + 1] = _seqsum(d2[np.arange(n), new_labels])
        changed = bool(np.any(new_labels != labels))
        labels = new_labels
        if not changed and not reseeded:
            converged = True
            break
    return centers, labels.astype(np.int64), n_iter, converged, objective


# --------------------------------------------------------------------------
# Capacitor charge trajectory with clamping at 0 and capacity
# --------------------------------------------------------------------------


@njit(cache=True)
def _clamped_accumulate_nb(stored, increments, capacity):
    n = increments.shape[0]
    out = np.empty(n)
    discarded = 0.0
    deficit = 0.0
    cur = stored
    for i in range(n):
        cur = cur + increments[i]
        if cur > capacity:
            discarded += cur - capacity
            cur = capacity
        elif cur < 0.0:
            deficit += -cur
            cur = 0.0
        out[i] = cur
    return out, discarded, deficit


def _clamped_accumulate_np(stored, increments, capacity):
    increments = np.asarray(increments, dtype=np.float64)
    n = increments.shape[0]
    out = np.empty(n)
    discarded = 0.0
    deficit = 0.0
    cur = float(stored)
    i = 0
    while i < n:
        seg = increments[i:]
        # same association order as the scalar loop: ((cur + a) + b) + ...
        cs = np.cumsum(np.concatenate(([cur], seg)))[1:]
        bad = (cs > capacity) | (cs < 0.0)
        if not bad.any():
            out[i:] = cs
            break
        j = int(np.argmax(bad))
        out[i : i + j] = cs[:j]
        v = cs[j]
        if v > capacity:
            discarded += v - capacity
            v = capacity
        else:
            deficit += -v
            v = 0.0
        out[i + j] = v
        cur = v
        i += j + 1
        # pinned at a rail: skip the run that keeps pushing into it
        if i < n:
            rest = increments[i:]
            if cur == capacity:
                run = int(np.argmax(rest < 0.0)) if (rest < 0.0).any() else rest.size
                if run:
                    # per-step excess exactly as the scalar loop rounds it
                    discarded = _seqsum(np.concatenate(([discarded], (capacity + rest[:run]) - capacity)))
                    out[i : i + run] = capacity
                    i += run
            elif cur == 0.0:
                run = int(np.argmax(rest > 0.0)) if (rest > 0.0).any() else rest.size
                if run:
                    deficit = _seqsum(np.concatenate(([deficit], -rest[:run])))
                    out[i : i + run] = 0.0
                    i += run
    return out, discarded, deficit


# --------------------------------------------------------------------------
# Fixed-point dense layer, 32-bit saturating accumulator
# --------------------------------------------------------------------------


@njit(cache=True)
def _fixed_dense_nb(wq, xq, bq, shift):
    n = xq.shape[0]
    n_out, n_in = wq.shape
    out = np.empty((n, n_out), dtype=np.int64)
    half = np.int64(1) << (shift - 1) if shift > 0 else np.int64(0)
    for r in range(n):
        for o in range(n_out):
            acc = np.int64(bq[o])
            for i in range(n_in):
                p = (np.int64(wq[o, i]) * np.int64(xq[r, i]) + half) >> shift
                acc += p
                if acc > INT32_MAX:
                    acc = INT32_MAX
                elif acc < INT32_MIN:
                    acc = INT32_MIN
            out[r, o] = acc
    return out


def _fixed_dense_np(wq, xq, bq, shift, chunk=256):
    wq = np.asarray(wq, dtype=np.int64)
    xq = np.asarray(xq, dtype=np.int64)
    bq = np.asarray(bq, dtype=np.int64)
    half = (1 << (shift - 1)) if shift > 0 else 0
    n = xq.shape[0]
    out = np.empty((n, wq.shape[0]), dtype=np.int64)
    for s in range(0, n, chunk):
        xs = xq[s : s + chunk]
        terms = (wq[None, :, :] * xs[:, None, :] + half) >> shift
        partial = np.cumsum(terms, axis=2) + bq[None, :, None]
        over = (partial > INT32_MAX) | (partial < INT32_MIN)
        res = partial[:, :, -1].copy()
        if over.any():
            # saturation is order dependent; replay only the affected rows
            for r, o in zip(*np.nonzero(over.any(axis=2))):
                acc = int(bq[o])
                for t in terms[r, o]:
                    acc = min(max(acc + int(t), INT32_MIN), INT32_MAX)
                res[r, o] = acc
        out[s : s + chunk] = res
    return out


if NUMBA_ENABLED:
    _lloyd_impl = _lloyd_nb
    _clamped_impl = _clamped_accumulate_nb
    _dense_impl = _fixed_dense_nb
else:
    _lloyd_impl = _lloyd_np
    _clamped_impl = _clamped_accumulate_np
    _dense_impl = _fixed_dense_np


def lloyd(points, k, max_iter, first):
    """Lloyd's algorithm on an (n, 2) point array.

    Seeds with farthest-first traversal starting at ``points[first]``. Returns
    ``(centers, labels, n_iter, converged, objective)`` where ``objective[i]``
    is the sum of squared distances after the i-th assignment (NaN-padded).
    ``converged`` means the last update/assign round changed nothing, so the
    result is a genuine fixed point.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    return _lloyd_impl(points, int(k), int(max_iter), int(first))


def clamped_accumulate(stored, increments, capacity):
    """Charge trajectory under per-step increments, clamped to [0, capacity].

    Returns ``(trajectory, discarded, deficit)``: energy lost to a full store and
    (negative) leakage that found the store already empty.
    """
    inc = np.ascontiguousarray(increments, dtype=np.float64)
    return _clamped_impl(float(stored), inc, float(capacity))


def fixed_dense(wq, xq, bq, shift):
    """Integer dense layer over a batch ``xq`` of shape (n, n_in).

    Each product is rounded and shifted right by ``shift`` bits before being
    added into a saturating int32 accumulator that starts at the bias.
    """
    wq = np.ascontiguousarray(wq, dtype=np.int64)
    xq = np.ascontiguousarray(np.atleast_2d(xq), dtype=np.int64)
    bq = np.ascontiguousarray(bq, dtype=np.int64)
    return _dense_impl(wq, xq, bq, int(shift))
