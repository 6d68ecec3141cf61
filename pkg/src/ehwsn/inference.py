"""Two-layer perceptron classifier with fixed-point variants, memoization and voting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .dataio import ConfigError, SensorWindow
from .kernels import fixed_dense

SUPPORTED_BITS = (32, 16, 12)
REQUANT_SHIFT = 24


class ShapeError(ValueError):
    pass


@dataclass
class Hyper:
    lr: float = 0.05
    epochs: int = 60
    H: int = 64
    seed: int = 0
    batch: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class QuantModel:
    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (K, H)
    b2: np.ndarray  # (K,)
    in_lo: np.ndarray  # (D,)
    in_hi: np.ndarray  # (D,)
    bits: int = 32
    act_max: float = 1.0
    # fixed-point state, empty for bits=32
    w1q: Optional[np.ndarray] = None
    w2q: Optional[np.ndarray] = None
    scales: dict = field(default_factory=dict)

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------


def window_bounds(ranges, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature (lo, hi) for a row-major flattened (length, C) window."""
    ranges = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
    return np.tile(ranges[:, 0], length), np.tile(ranges[:, 1], length)


def as_matrix(inputs) -> np.ndarray:
    if isinstance(inputs, SensorWindow):
        return inputs.values.reshape(1, -1)
    if isinstance(inputs, np.ndarray):
        return np.atleast_2d(inputs).astype(np.float64, copy=False)
    rows = [w.values.ravel() if isinstance(w, SensorWindow) else np.ravel(w) for w in inputs]
    return np.asarray(rows, dtype=np.float64)


def _scaled(m: QuantModel, X: np.ndarray) -> np.ndarray:
    if X.shape[1] != m.n_in:
        raise ShapeError(f"input has {X.shape[1]} features, model expects {m.n_in}")
    return np.clip(2.0 * (X - m.in_lo) / (m.in_hi - m.in_lo) - 1.0, -1.0, 1.0)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(params: dict, X: np.ndarray, y: np.ndarray, weight_decay: float = 0.0):
    """Mean cross-entropy (+ L2 on weights) and its gradients w.r.t. every parameter."""
    w1, b1, w2, b2 = params["w1"], params["b1"], params["w2"], params["b2"]
    n = X.shape[0]
    a = X @ w1.T + b1
    h = np.maximum(a, 0.0)
    p = softmax(h @ w2.T + b2)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    loss += 0.5 * weight_decay * (np.sum(w1 * w1) + np.sum(w2 * w2))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    d /= n
    gw2 = d.T @ h + weight_decay * w2
    gb2 = d.sum(axis=0)
    dh = (d @ w2) * (a > 0)
    gw1 = dh.T @ X + weight_decay * w1
    gb1 = dh.sum(axis=0)
    return loss, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def init_params(n_in: int, hidden: int, n_classes: int, rng: np.random.Generator) -> dict:
    return {
        "w1": rng.normal(0.0, np.sqrt(2.0 / n_in), size=(hidden, n_in)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, np.sqrt(2.0 / hidden), size=(n_classes, hidden)),
        "b2": np.zeros(n_classes),
    }


def _sgd(params, Xs, y, hyper: Hyper, rng, epochs: int):
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, hyper.batch):
            b = order[s : s + hyper.batch]
            _, g = loss_and_grads(params, Xs[b], y[b], hyper.weight_decay)
            for k in params:
                vel[k] = hyper.momentum * vel[k] - hyper.lr * g[k]
                params[k] += vel[k]
    return params


def _split_xy(train_set, labels):
    if labels is None:
        windows = list(train_set)
        X = as_matrix(windows)
        y = np.asarray([w.label for w in windows], dtype=np.int64)
    else:
        X = as_matrix(train_set)
        y = np.asarray(labels, dtype=np.int64)
    return X, y


def train(
    train_set,
    hyper: Optional[Hyper] = None,
    bounds: Optional[tuple] = None,
    labels: Optional[Sequence[int]] = None,
    n_classes: Optional[int] = None,
) -> QuantModel:
    """Fit a full-precision model with momentum mini-batch SGD on cross-entropy.

    ``train_set`` is either labelled windows or a feature matrix with ``labels``.
    ``bounds`` gives per-feature (lo, hi) used to map inputs into [-1, 1]; by
    default the observed per-feature min/max.
    """
    hyper = hyper or Hyper()
    X, y = _split_xy(train_set, labels)
    if len(np.unique(y)) < 2:
        raise ConfigError("training set needs at least two classes")
    if bounds is None:
        lo, hi = X.min(axis=0), X.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    K = int(max(y.max() + 1, n_classes or 0))
    rng = np.random.default_rng(hyper.seed)
    params = init_params(X.shape[1], hyper.H, K, rng)
    m = QuantModel(params["w1"], params["b1"], params["w2"], params["b2"], lo, hi)
    Xs = _scaled(m, X)
    params = _sgd(params, Xs, y, hyper, rng, hyper.epochs)
    act = np.maximum(Xs @ params["w1"].T + params["b1"], 0.0)
    return QuantModel(
        params["w1"], params["b1"], params["w2"], params["b2"], lo, hi, 32,
        float(max(act.max(), 1e-6)),
    )


# --------------------------------------------------------------------------
# quantization and fixed-point forward pass
# --------------------------------------------------------------------------


def _quantize_tensor(w: np.ndarray, qmax: int) -> tuple[np.ndarray, float]:
    scale = float(np.max(np.abs(w))) / qmax
    if scale == 0.0:
        scale = 1.0 / qmax
    return np.round(w / scale).astype(np.int64), scale


def _quantized(m: QuantModel, bits: int) -> QuantModel:
    qmax = (1 << (bits - 1)) - 1
    w1q, s_w1 = _quantize_tensor(m.w1, qmax)
    w2q, s_w2 = _quantize_tensor(m.w2, qmax)
    scales = {"x": 1.0 / qmax, "w1": s_w1, "h": m.act_max / qmax, "w2": s_w2}
    return replace(m, w1=w1q * s_w1, w2=w2q * s_w2, bits=bits, w1q=w1q, w2q=w2q, scales=scales)


def quantize(
    m: QuantModel,
    bits: int,
    calib: Optional[tuple] = None,
    finetune_epochs: int = 5,
    hyper: Optional[Hyper] = None,
) -> QuantModel:
    """Per-tensor symmetric linear quantization of a full-precision model.

    With a calibration set ``(inputs, labels)``, a quantized model that loses
    more than one point of accuracy is fine-tuned: a few full-precision epochs
    from the dequantized weights, then quantized again. The better of the two
    quantized models is kept.
    """
    if m.bits != 32:
        raise ConfigError("quantize expects a 32-bit model")
    if bits not in (16, 12):
        raise ConfigError("bits must be 16 or 12")
    q = _quantized(m, bits)
    if calib is None:
        return q
    X, y = calib[0], np.asarray(calib[1])
    ref = accuracy(m, X, y)
    acc_q = accuracy(q, X, y)
    if ref - acc_q <= 0.01 or finetune_epochs <= 0:
        return q
    hyper = replace(hyper or Hyper(), lr=(hyper or Hyper()).lr * 0.2)
    params = {"w1": q.w1.copy(), "b1": q.b1.copy(), "w2": q.w2.copy(), "b2": q.b2.copy()}
    Xs = _scaled(m, as_matrix(X))
    params = _sgd(params, Xs, y, hyper, np.random.default_rng(hyper.seed + 1), finetune_epochs)
    act = np.maximum(Xs @ params["w1"].T + params["b1"], 0.0)
    tuned = _quantized(
        replace(m, w1=params["w1"], b1=params["b1"], w2=params["w2"], b2=params["b2"], act_max=float(max(act.max(), 1e-6))),
        bits,
    )
    return tuned if accuracy(tuned, X, y) > acc_q else q


def _requantize(acc: np.ndarray, ratio: float, qmax: int) -> np.ndarray:
    mult = int(round(ratio * (1 << REQUANT_SHIFT)))
    h = (acc * mult + (1 << (REQUANT_SHIFT - 1))) >> REQUANT_SHIFT
    return np.clip(h, 0, qmax)


def logits(m: QuantModel, inputs) -> np.ndarray:
    """Output logits. 12/16-bit models run the whole network in integers."""
    Xs = _scaled(m, as_matrix(inputs))
    if m.bits == 32:
        h = np.maximum(Xs @ m.w1.T + m.b1, 0.0)
        return h @ m.w2.T + m.b2
    qmax = m.qmax
    shift = m.bits - 1
    sc = m.scales
    xq = np.round(Xs * qmax).astype(np.int64)
    s_a1 = sc["w1"] * sc["x"] * (1 << shift)
    acc1 = fixed_dense(m.w1q, xq, np.round(m.b1 / s_a1).astype(np.int64), shift)
    hq = _requantize(acc1, s_a1 / sc["h"], qmax)  # ReLU folded into the clip at 0
    s_a2 = sc["w2"] * sc["h"] * (1 << shift)
    acc2 = fixed_dense(m.w2q, hq, np.round(m.b2 / s_a2).astype(np.int64), shift)
    return acc2 * s_a2


def predict_proba(m: QuantModel, inputs) -> np.ndarray:
    return softmax(logits(m, inputs))


def infer(m: QuantModel, w) -> tuple[int, float]:
    """Class id and softmax confidence for one window (or feature vector)."""
    p = predict_proba(m, w)[0]
    c = int(np.argmax(p))
    return c, float(p[c])


def accuracy(m: QuantModel, inputs, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits(m, inputs), axis=1) == labels))


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

MAGIC = b"EHQM"
_HEADER = struct.Struct("<4sBBHIII d 4d")
_SCALE_KEYS = ("x", "w1", "h", "w2")


def save_model(path, m: QuantModel) -> None:
    """Flat little-endian file; layout in FORMAT.md."""
    D, H, K = m.n_in, m.hidden, m.n_classes
    head = _HEADER.pack(MAGIC, 1, m.bits, 0, D, H, K, m.act_max, *[m.scales.get(k, 0.0) for k in _SCALE_KEYS])
    parts = [head, m.in_lo.astype("<f8").tobytes(), m.in_hi.astype("<f8").tobytes()]
    if m.bits == 32:
        parts += [m.w1.astype("<f8").tobytes(), m.b1.astype("<f8").tobytes(), m.w2.astype("<f8").tobytes(), m.b2.astype("<f8").tobytes()]
    else:
        parts += [m.w1q.astype("<i4").tobytes(), m.b1.astype("<f8").tobytes(), m.w2q.astype("<i4").tobytes(), m.b2.astype("<f8").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> QuantModel:
    data = open(path, "rb").read()
    if len(data) < _HEADER.size:
        raise ShapeError(f"{path}: truncated model file")
    magic, version, bits, _, D, H, K, act_max, *sc = _HEADER.unpack_from(data)
    if magic != MAGIC or version != 1 or bits not in SUPPORTED_BITS:
        raise ShapeError(f"{path}: not a model file")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    try:
        lo, hi = take("<f8", D), take("<f8", D)
        wt = "<f8" if bits == 32 else "<i4"
        w1 = take(wt, H * D).reshape(H, D)
        b1 = take("<f8", H)
        w2 = take(wt, K * H).reshape(K, H)
        b2 = take("<f8", K)
    except ValueError:
        raise ShapeError(f"{path}: truncated model file") from None
    if off != len(data):
        raise ShapeError(f"{path}: trailing bytes")
    if bits == 32:
        return QuantModel(w1, b1, w2, b2, lo, hi, 32, act_max)
    scales = dict(zip(_SCALE_KEYS, sc))
    return QuantModel(w1 * scales["w1"], b1, w2 * scales["w2"], b2, lo, hi, bits, act_max, w1, w2, scales)


# --------------------------------------------------------------------------
# memoization
# --------------------------------------------------------------------------


@dataclass
class TemplateBank:
    """One reference window per class, stacked as (K, L, C)."""

    templates: np.ndarray
    quant_step: np.ndarray  # (C,) tolerance for "constant-equal" channels

    @property
    def n_classes(self) -> int:
        return self.templates.shape[0]


def _pearson(w: np.ndarray, T: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Channel-averaged Pearson coefficient of w (L, C) against each T[k] (L, C)."""
    wc = w - w.mean(axis=0)
    Tc = T - T.mean(axis=1, keepdims=True)
    sw = np.sqrt((wc * wc).sum(axis=0))
    sT = np.sqrt((Tc * Tc).sum(axis=1))
    num = (wc[None] * Tc).sum(axis=1)
    flat_w = sw <= 1e-12 * (1.0 + np.abs(w).max(axis=0))
    flat_T = sT <= 1e-12 * (1.0 + np.abs(T).max(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / (sw[None] * sT)
    same = np.abs(T.mean(axis=1) - w.mean(axis=0)[None]) <= step[None]
    r = np.where(flat_w[None] | flat_T, np.where(flat_w[None] & flat_T & same, 1.0, 0.0), r)
    return np.clip(r, -1.0, 1.0).mean(axis=1)


def correlate(w: SensorWindow, bank: TemplateBank) -> tuple[int, float]:
    """Best-matching class and its channel-averaged Pearson coefficient."""
    if w.values.shape != bank.templates.shape[1:]:
        raise ShapeError("window and templates differ in shape")
    r = _pearson(w.values, bank.templates, bank.quant_step)
    c = int(np.argmax(r))
    return c, float(r[c])


def build_template_bank(windows: Iterable[SensorWindow], n_classes: int, ranges=None, per_class: int = 200) -> TemplateBank:
    """Pick, per class, the window that correlates best on average with its classmates."""
    windows = list(windows)
    L, C = windows[0].values.shape
    step = np.full(C, 1e-9)
    if ranges is not None:
        r = np.asarray(ranges, dtype=np.float64).reshape(-1, 2)
        step = (r[:, 1] - r[:, 0]) / 1023.0
    out = np.empty((n_classes, L, C))
    for c in range(n_classes):
        members = [w.values for w in windows if w.label == c][:per_class]
        if not members:
            raise ConfigError(f"no window of class {c} to build a template from")
        stack = np.asarray(members)
        score = [(_pearson(m, stack, step).sum()) for m in stack]
        out[c] = stack[int(np.argmax(score))]
    return TemplateBank(out, step)


# --------------------------------------------------------------------------
# host-side voting
# --------------------------------------------------------------------------


def ensemble(results: Sequence[Optional[tuple[int, float]]]) -> int:
    """Confidence-weighted vote; ties go to the lowest class id, None entries are skipped."""
    votes: dict[int, float] = {}
    for r in results:
        if r is None:
            continue
        c, conf = r
        votes[int(c)] = votes.get(int(c), 0.0) + float(conf)
    if not votes:
        raise ValueError("ensemble needs at least one result")
    best = max(votes.values())
    return min(c for c, v in votes.items() if v == best)
