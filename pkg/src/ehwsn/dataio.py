"""Sensor streams: loading logs, synthetic generation and windowing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data (bad rows, non-finite values)."""


class ConfigError(ValueError):
    """Inconsistent configuration (missing columns, infeasible parameters)."""


@dataclass
class LabeledStream:
    samples: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)
    sample_rate_hz: float
    channel_ranges: np.ndarray  # (C, 2) rows of (min, max)
    class_names: tuple = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.channel_ranges = np.asarray(self.channel_ranges, dtype=np.float64).reshape(-1, 2)
        if len(self.samples) != len(self.labels):
            raise ConfigError("samples and labels differ in length")
        if self.samples.shape[1] < 1 or self.channel_ranges.shape[0] != self.samples.shape[1]:
            raise ConfigError("channel_ranges must have one row per channel")
        lo, hi = self.channel_ranges.T
        if not (np.all(np.isfinite(self.channel_ranges)) and np.all(lo < hi)):
            raise ConfigError("channel_ranges must be finite with min < max")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def select_channels(self, channels: Sequence[int]) -> "LabeledStream":
        channels = list(channels)
        return LabeledStream(
            self.samples[:, channels].copy(),
            self.labels.copy(),
            self.sample_rate_hz,
            self.channel_ranges[channels].copy(),
            self.class_names,
        )


@dataclass
class SensorWindow:
    values: np.ndarray  # (L, C)
    label: Optional[int] = None
    window_id: int = 0
    t0: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


# column layouts; everything here is overridable through channel_spec/label_col
_FORMATS = {
    # 23 sensor columns + label; columns 0-2 are chest acceleration
    "mhealth": {"sep": None, "channels": (0, 1, 2), "label_col": -1, "rate": 50.0},
    # timestamp, activity id, heart rate, then IMU blocks; 4-6 are hand acc (+-16g)
    "pamap2": {"sep": None, "channels": (4, 5, 6), "label_col": 1, "rate": 100.0},
    # comma separated: vibration channel(s) then fault label
    "bearing-csv": {"sep": ",", "channels": (0,), "label_col": -1, "rate": 48000.0},
}

_RANGE_PAD = 0.5


def _observed_ranges(samples: np.ndarray) -> np.ndarray:
    lo = samples.min(axis=0)
    hi = samples.max(axis=0)
    flat = lo >= hi
    # a constant channel still needs a non-empty calibration interval
    lo = np.where(flat, lo - _RANGE_PAD, lo)
    hi = np.where(flat, hi + _RANGE_PAD, hi)
    return np.stack([lo, hi], axis=1)


def load_dataset(
    path,
    format: str = "mhealth",
    channel_spec: Optional[Sequence[int]] = None,
    label_col: Optional[int] = None,
    sample_rate_hz: Optional[float] = None,
) -> LabeledStream:
    """Read a whitespace or comma separated log into a :class:`LabeledStream`.

    Labels are remapped to contiguous ids in sorted order of the raw labels.
    Rows whose selected columns are non-numeric or non-finite raise
    :class:`DataError` naming the 1-based line number; a column index beyond the
    row width raises :class:`ConfigError`.
    """
    if format not in _FORMATS:
        raise ConfigError(f"unknown dataset format {format!r}")
    layout = _FORMATS[format]
    channels = list(layout["channels"] if channel_spec is None else channel_spec)
    lcol = layout["label_col"] if label_col is None else label_col
    rate = layout["rate"] if sample_rate_hz is None else float(sample_rate_hz)
    if not channels:
        raise ConfigError("channel_spec is empty")

    rows, raw_labels = [], []
    with open(Path(path)) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(layout["sep"])
            width = len(fields)
            for col in channels + [lcol]:
                if not -width <= col < width:
                    raise ConfigError(f"line {lineno}: column {col} not present ({width} columns)")
            try:
                vals = [float(fields[c]) for c in channels]
                lab = float(fields[lcol])
            except ValueError as exc:
                raise DataError(f"line {lineno}: malformed row ({exc})") from None
            if not all(math.isfinite(v) for v in vals) or not math.isfinite(lab):
                raise DataError(f"line {lineno}: non-finite value")
            if lab != int(lab):
                raise DataError(f"line {lineno}: label {fields[lcol]!r} is not an integer")
            rows.append(vals)
            raw_labels.append(int(lab))
    if not rows:
        raise DataError(f"{path}: no data rows")

    samples = np.asarray(rows, dtype=np.float64)
    classes, labels = np.unique(np.asarray(raw_labels), return_inverse=True)
    return LabeledStream(
        samples, labels, rate, _observed_ranges(samples), tuple(str(c) for c in classes)
    )


def window_stream(stream: LabeledStream, length: int = 60, overlap: int = 30) -> list[SensorWindow]:
    """Slice ``stream`` into overlapping windows, clamping values to channel_ranges.

    The window label is the majority per-sample label (ties go to the lowest
    class id). A trailing partial window is dropped.
    """
    if not 0 <= overlap < length:
        raise ConfigError("need 0 <= overlap < length")
    n = len(stream.samples)
    if n < length:
        return []
    stride = length - overlap
    lo, hi = stream.channel_ranges[:, 0], stream.channel_ranges[:, 1]
    clamped = np.clip(stream.samples, lo, hi)
    n_classes = max(stream.n_classes, 1)
    out = []
    for i, t0 in enumerate(range(0, n - length + 1, stride)):
        counts = np.bincount(stream.labels[t0 : t0 + length], minlength=n_classes)
        out.append(
            SensorWindow(clamped[t0 : t0 + length].copy(), int(np.argmax(counts)), i, t0)
        )
    return out


def window_count(n: int, length: int, overlap: int) -> int:
    if n < length:
        return 0
    return (n - length) // (length - overlap) + 1


# --------------------------------------------------------------------------
# synthetic activity streams
# --------------------------------------------------------------------------


def class_waveform(c: int, channel: int, length: int = 60) -> tuple[float, float, float, int]:
    """(offset, amplitude, second-harmonic weight, cycles per segment) for one class/channel.

    Parameters depend only on (class, channel), so a class looks the same across
    seeds. Neighbouring patterns share amplitude and differ in cycle count, small
    offsets or harmonic content, so recognising them needs the waveform shape.
    Cycle counts are even, which keeps stride-``length/2`` windows in phase.
    """
    j = c + channel
    cycles = 2 * (1 + j % 2) + 4 * (j // 4)
    offset = 0.1 * (j % 2) + 0.05 * (j // 4)
    h2 = (0.0, 0.0, 0.5, -0.5)[j % 4]
    return offset, 0.8, h2, cycles


def gen_synthetic(
    n_classes: int,
    n_windows_per_class: int,
    C: int,
    length: int,
    noise_sigma: float,
    seed: int,
    sample_rate_hz: float = 50.0,
    phase_jitter: float = 1.0,
    amp_jitter: float = 0.15,
    bout_range: tuple[int, int] = (2, 6),
) -> LabeledStream:
    """Labelled multi-channel stream made of activity bouts.

    Each class emits, per channel, an offset sinusoid with class-specific cycle
    count and second-harmonic content (see :func:`class_waveform`). The stream is split into
    ``n_classes * n_windows_per_class`` segments of ``length`` samples grouped
    into bouts of consecutive same-class segments. Every bout draws its own phase
    (uniform in +-``phase_jitter`` rad) and amplitude scale; i.i.d. Gaussian noise
    of standard deviation ``noise_sigma`` is added on top. Fully determined by the
    arguments.
    """
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if n_windows_per_class < 1 or C < 1 or length < 2:
        raise ConfigError("n_windows_per_class, C >= 1 and length >= 2 required")
    rng = np.random.default_rng(seed)

    remaining = np.full(n_classes, n_windows_per_class)
    bouts = []
    prev = -1
    while remaining.sum() > 0:
        choices = [c for c in range(n_classes) if remaining[c] > 0 and c != prev]
        if not choices:
            choices = [prev]
        c = int(rng.choice(choices))
        n = int(min(remaining[c], rng.integers(bout_range[0], bout_range[1] + 1)))
        remaining[c] -= n
        bouts.append((c, n))
        prev = c

    params = [[class_waveform(c, ch, length) for ch in range(C)] for c in range(n_classes)]
    segs, labs = [], []
    for c, n in bouts:
        phase = rng.uniform(-phase_jitter, phase_jitter, size=C)
        scale = 1.0 + rng.uniform(-amp_jitter, amp_jitter, size=C)
        seg = np.empty((n * length, C))
        t = np.arange(n * length) / length
        for ch in range(C):
            off, amp, h2, cyc = params[c][ch]
            arg = 2 * np.pi * cyc * t + phase[ch]
            seg[:, ch] = off + scale[ch] * amp * (np.sin(arg) + h2 * np.sin(2 * arg))
        segs.append(seg)
        labs.append(np.full(n * length, c))
    samples = np.concatenate(segs)
    if noise_sigma > 0:
        samples = samples + rng.normal(0.0, noise_sigma, size=samples.shape)
    labels = np.concatenate(labs)
    # fixed calibration bounds: wide enough for every class at the default jitter
    bound = 2.5 + 4.0 * noise_sigma
    ranges = np.tile([-bound, bound], (C, 1))
    return LabeledStream(samples, labels, sample_rate_hz, ranges, tuple(f"class{c}" for c in range(n_classes)))


def save_window(path, window: SensorWindow) -> None:
    np.savetxt(path, window.values, fmt="%.9g")


def load_window(path) -> SensorWindow:
    try:
        values = np.loadtxt(path, ndmin=2, delimiter=None if not str(path).endswith(".csv") else ",")
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite value")
    return SensorWindow(values)
