"""Model suites for one sensor: node models, host heads for recovered payloads, AAC table.

The host classifies offloaded coresets by reconstructing full windows and
running a model trained on reconstructions. Reconstruction is random, so the
host head is trained on several draws per training window and, at inference,
averages its probabilities over ``host_draws`` draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import coreset as cs
from . import inference as inf
from .dataio import SensorWindow
from .recovery import reconstruct_cluster, reconstruct_sample


@dataclass
class CodecParams:
    k_max: int = cs.K_MAX
    max_iter: int = 4
    m: int = 20
    min_gap: int = 2
    max_rounds: int = 7


@dataclass
class TrainParams:
    epochs: int = 30
    hidden: int = 64
    lr: float = 0.05
    recon_repeats: int = 3
    host_draws: int = 5
    # k used for the r-th augmented reconstruction of each training window
    train_ks: tuple = (12, 10, 8)
    aac_ks: tuple = (6, 8, 10, 12)
    aac_tolerance: float = 0.01
    seed: int = 0

    def hyper(self, offset: int = 0) -> inf.Hyper:
        return inf.Hyper(lr=self.lr, epochs=self.epochs, H=self.hidden, seed=self.seed + offset)


@dataclass
class ModelSuite:
    host32: inf.QuantModel
    node16: inf.QuantModel
    node12: inf.QuantModel
    host_d3: inf.QuantModel
    host_d4: inf.QuantModel
    templates: inf.TemplateBank
    budget: cs.ClusterBudgetTable
    ranges: np.ndarray
    codec: CodecParams = field(default_factory=CodecParams)
    host_draws: int = 5


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------
# payload construction and host decoding
# --------------------------------------------------------------------------


def cluster_payload(window: SensorWindow, k: int, ranges, codec: CodecParams) -> tuple[list[int], bytes]:
    c = cs.kmeans_coreset(window, k, codec.max_iter, ranges=ranges)
    return c.k_per_channel, cs.encode_cluster(c)


def sample_payload(window: SensorWindow, ranges, codec: CodecParams, seed: int) -> bytes:
    s = cs.sample_coreset(window, codec.m, codec.min_gap, codec.max_rounds, seed=seed, ranges=ranges)
    return cs.encode_sample(s)


def recover_cluster(body: bytes, ks: Sequence[int], L: int, ranges, draws: int, seed: int) -> np.ndarray:
    """(draws, L*C) reconstructions of one cluster payload."""
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    c = cs.decode_cluster(body, list(ks), len(ranges), L, ranges)
    return np.stack([reconstruct_cluster(c, L, derive_seed(seed, d)).values.ravel() for d in range(draws)])


def recover_sample(body: bytes, m: int, L: int, ranges, draws: int, seed: int) -> np.ndarray:
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    s = cs.decode_sample(body, m, len(ranges), L, ranges)
    return np.stack([reconstruct_sample(s, L, derive_seed(seed, d)).values.ravel() for d in range(draws)])


def averaged_vote(model: inf.QuantModel, draws: np.ndarray) -> tuple[int, float]:
    p = inf.predict_proba(model, draws).mean(axis=0)
    c = int(np.argmax(p))
    return c, float(p[c])


def host_classify(suite: ModelSuite, kind: str, body: bytes, shape: Sequence[int], L: int, seed: int) -> tuple[int, float]:
    """Host result for a D3 (``shape`` = k per channel) or D4 (``shape`` = [m]) payload."""
    if kind == "D3":
        draws = recover_cluster(body, shape, L, suite.ranges, suite.host_draws, seed)
        return averaged_vote(suite.host_d3, draws)
    draws = recover_sample(body, int(shape[0]), L, suite.ranges, suite.host_draws, seed)
    return averaged_vote(suite.host_d4, draws)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def recovered_set(windows, kind: str, ranges, codec: CodecParams, repeats: int, ks: Sequence[int], seed: int, shared: bool = False):
    """Reconstructions (n, repeats, L*C) and direct coreset features (n, F) for ``windows``.

    By default every repeat builds a fresh payload (for clustering, repeat r
    uses ``ks[r % len(ks)]`` clusters) and reconstructs it once. With
    ``shared`` one payload per window is reconstructed ``repeats`` times, as
    the host does at inference. Direct features come from the first payload.
    """
    recon, feats = [], []
    for i, w in enumerate(windows):
        rows = []
        for r in range(1 if shared else repeats):
            s = derive_seed(seed, i, r)
            n_draws = repeats if shared else 1
            if kind == "D3":
                shape, body = cluster_payload(w, ks[r % len(ks)], ranges, codec)
                rows.extend(recover_cluster(body, shape, w.length, ranges, n_draws, s))
                if r == 0:
                    c = cs.decode_cluster(body, shape, w.n_channels, w.length, ranges)
                    feats.append(cs.cluster_features(c, codec.k_max))
            else:
                body = sample_payload(w, ranges, codec, s)
                rows.extend(recover_sample(body, codec.m, w.length, ranges, n_draws, s))
                if r == 0:
                    smp = cs.decode_sample(body, codec.m, w.n_channels, w.length, ranges)
                    feats.append(cs.sample_features(smp))
        recon.append(rows)
    return np.asarray(recon), np.asarray(feats)


def train_recovery_head(windows, kind, ranges, codec, params: TrainParams, n_classes: int, offset: int = 0):
    y = np.array([w.label for w in windows])
    ks = params.train_ks if kind == "D3" else (codec.k_max,)
    R, F = recovered_set(windows, kind, ranges, codec, params.recon_repeats, ks, derive_seed(params.seed, offset))
    L = windows[0].length
    bounds = inf.window_bounds(ranges, L)
    head = inf.train(R.reshape(-1, R.shape[-1]), params.hyper(offset), bounds, np.repeat(y, params.recon_repeats), n_classes)
    return head, F


def calibrate_budget_table(
    head: inf.QuantModel, windows, ranges, codec: CodecParams, params: TrainParams, n_classes: int, per_class: int = 100
) -> cs.ClusterBudgetTable:
    """Smallest k per class whose host accuracy stays within ``aac_tolerance`` of k_max."""
    ks = sorted(set(params.aac_ks) | {codec.k_max})
    entries = {}
    for c in range(n_classes):
        members = [w for w in windows if w.label == c][:per_class]
        if not members:
            continue
        acc = {}
        for k in ks:
            hits = 0
            for i, w in enumerate(members):
                shape, body = cluster_payload(w, k, ranges, codec)
                draws = recover_cluster(body, shape, w.length, ranges, params.host_draws, derive_seed(params.seed, 77, c, i))
                hits += averaged_vote(head, draws)[0] == c
            acc[k] = hits / len(members)
        entries[c] = min(k for k in ks if acc[k] >= acc[codec.k_max] - params.aac_tolerance)
    return cs.ClusterBudgetTable(entries, codec.k_max)


def train_suite(
    windows: Sequence[SensorWindow],
    ranges,
    n_classes: int,
    params: Optional[TrainParams] = None,
    codec: Optional[CodecParams] = None,
    aac: bool = True,
) -> ModelSuite:
    """Train every model one sensor and its host need from labelled windows."""
    params = params or TrainParams()
    codec = codec or CodecParams()
    windows = list(windows)
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    L = windows[0].length
    y = np.array([w.label for w in windows])
    bounds = inf.window_bounds(ranges, L)
    host32 = inf.train(windows, params.hyper(), bounds, n_classes=n_classes)
    calib = (inf.as_matrix(windows), y)
    node16 = inf.quantize(host32, 16, calib, hyper=params.hyper())
    node12 = inf.quantize(host32, 12, calib, hyper=params.hyper())
    host_d3, _ = train_recovery_head(windows, "D3", ranges, codec, params, n_classes, 3)
    host_d4, _ = train_recovery_head(windows, "D4", ranges, codec, params, n_classes, 4)
    templates = inf.build_template_bank(windows, n_classes, ranges)
    budget = (
        calibrate_budget_table(host_d3, windows, ranges, codec, params, n_classes)
        if aac
        else cs.ClusterBudgetTable({}, codec.k_max)
    )
    return ModelSuite(host32, node16, node12, host_d3, host_d4, templates, budget, ranges, codec, params.host_draws)


# --------------------------------------------------------------------------
# recovery versus direct coreset inference
# --------------------------------------------------------------------------


def recovery_vs_direct(
    train_windows, test_windows, ranges, n_classes: int, params: Optional[TrainParams] = None, codec: Optional[CodecParams] = None
) -> dict:
    """Host accuracy on reconstructed payloads against a model reading coreset features.

    Both models see the same payloads (k_max clusters, or m samples) and the same
    hyperparameters; the direct model maps features in [0, 1] to classes.
    """
    params = params or TrainParams()
    codec = codec or CodecParams()
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    y_tr = np.array([w.label for w in train_windows])
    y_te = np.array([w.label for w in test_windows])
    out = {}
    for kind, offset in (("D3", 3), ("D4", 4)):
        head, F_tr = train_recovery_head(train_windows, kind, ranges, codec, params, n_classes, offset)
        unit = (np.zeros(F_tr.shape[1]), np.ones(F_tr.shape[1]))
        direct = inf.train(F_tr, params.hyper(offset + 10), unit, y_tr, n_classes)
        R_te, F_te = recovered_set(
            test_windows, kind, ranges, codec, params.host_draws, (codec.k_max,), derive_seed(params.seed, offset, 999), shared=True
        )
        n, d, D = R_te.shape
        P = inf.predict_proba(head, R_te.reshape(-1, D)).reshape(n, d, -1).mean(axis=1)
        out[kind] = {
            "recovered": float(np.mean(P.argmax(axis=1) == y_te)),
            "direct": float(inf.accuracy(direct, F_te, y_te)),
        }
    return out
