"""Harvest traces, capacitor accounting, power prediction and strategy costs.

Units throughout: seconds, microwatts, microjoules (1 uW for 1 s = 1 uJ).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataio import ConfigError, DataError

# sensor / communication energy per strategy, uJ
DEFAULT_COSTS = {
    "D0": (0.54, 8.27),
    "D1": (29.23, 8.27),
    "D2": (16.58, 8.27),
    "D3": (1.07, 15.97),
    "D4": (0.87, 15.97),
    "RAW": (0.0, 70.16),
}

RESULT_COMM_UJ = 8.27
# affine payload model through (42 B, 15.97 uJ) and (240 B, 70.16 uJ)
COMM_PER_BYTE_UJ = (70.16 - 15.97) / (240 - 42)
COMM_BASE_UJ = 15.97 - 42 * COMM_PER_BYTE_UJ

ENERGY_TOL = 1e-9
TRACE_SOURCES = ("rf", "piezo", "wifi", "synthetic")


class EnergyError(RuntimeError):
    """An action tried to draw more energy than the store holds."""


@dataclass
class HarvestTrace:
    t: np.ndarray  # seconds, strictly increasing
    power_uw: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.power_uw = np.asarray(self.power_uw, dtype=np.float64)
        if self.t.shape != self.power_uw.shape or self.t.ndim != 1 or len(self.t) == 0:
            raise DataError("trace needs equal-length, non-empty t and power")
        if np.any(np.diff(self.t) <= 0):
            raise DataError("trace timestamps must be strictly increasing")
        if np.any(self.power_uw < 0) or not np.all(np.isfinite(self.power_uw)):
            raise DataError("trace power must be finite and >= 0")
        if self.source not in TRACE_SOURCES:
            raise ConfigError(f"trace source must be one of {TRACE_SOURCES}")

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else 1e-3

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0] + self.step)

    def mean_power(self) -> float:
        return float(self.power_uw.mean())

    def resample(self, n_steps: int, dt: float) -> np.ndarray:
        """Sample-and-hold power at the start of each of ``n_steps`` steps of ``dt``."""
        if n_steps * dt > self.duration + 1e-9 * max(1.0, self.duration):
            raise ConfigError(f"trace covers {self.duration:.3f} s, simulation needs {n_steps * dt:.3f} s")
        starts = self.t[0] + np.arange(n_steps) * dt
        idx = np.searchsorted(self.t, starts + 1e-12, side="right") - 1
        return self.power_uw[np.clip(idx, 0, len(self.t) - 1)]

    def scaled(self, factor: float) -> "HarvestTrace":
        return HarvestTrace(self.t.copy(), self.power_uw * factor, self.source)


def gen_trace(profile: str, params: Optional[Mapping] = None, seed: int = 0) -> HarvestTrace:
    """Synthetic harvest trace.

    profiles and their params (``duration_s`` and ``dt`` default to 10 s and 1 ms):

    ``constant``      power_uw
    ``square-wave``   low_uw, high_uw, period_s, duty (fraction of period at high)
    ``markov-burst``  on_uw, off_uw, p_on (off->on per step), p_off (on->off per
                      step), jitter (relative spread of each burst's power);
                      ``mean_uw`` rescales the trace to that expected mean
    """
    p = dict(params or {})
    duration = float(p.pop("duration_s", 10.0))
    dt = float(p.pop("dt", 1e-3))
    n = int(round(duration / dt))
    if n < 1 or dt <= 0:
        raise ConfigError("trace needs duration_s >= dt > 0")
    t = np.arange(n) * dt
    if profile == "constant":
        power = np.full(n, float(p.get("power_uw", 50.0)))
    elif profile == "square-wave":
        low, high = float(p.get("low_uw", 0.0)), float(p.get("high_uw", 100.0))
        period, duty = float(p.get("period_s", 1.0)), float(p.get("duty", 0.5))
        if period <= 0 or not 0 <= duty <= 1:
            raise ConfigError("square-wave needs period_s > 0 and 0 <= duty <= 1")
        per = int(round(period / dt))
        phase = np.arange(n) % per
        power = np.where(phase < int(round(duty * per)), high, low)
    elif profile == "markov-burst":
        on, off = float(p.get("on_uw", 200.0)), float(p.get("off_uw", 0.0))
        p_on, p_off = float(p.get("p_on", 0.002)), float(p.get("p_off", 0.004))
        jitter = float(p.get("jitter", 0.3))
        if not (0 < p_on <= 1 and 0 < p_off <= 1):
            raise ConfigError("markov-burst needs 0 < p_on, p_off <= 1")
        rng = np.random.default_rng(seed)
        power = np.empty(n)
        i = 0
        state_on = rng.random() < p_on / (p_on + p_off)
        while i < n:
            run = int(rng.geometric(p_off if state_on else p_on))
            level = on * max(0.0, 1.0 + jitter * rng.uniform(-1, 1)) if state_on else off
            power[i : i + run] = level
            i += run
            state_on = not state_on
        if "mean_uw" in p:
            expected = (on * p_on + off * p_off) / (p_on + p_off)
            power *= float(p["mean_uw"]) / expected if expected > 0 else 0.0
    else:
        raise ConfigError(f"unknown trace profile {profile!r}")
    if np.any(power < 0):
        raise ConfigError("trace power must be >= 0")
    return HarvestTrace(t, power, "synthetic")


def load_trace(path, source: str = "synthetic") -> HarvestTrace:
    """Read a two-column (t_seconds, microwatts) CSV tagged with ``source``; a non-numeric first row is a header."""
    t, pw = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                a, b = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise DataError(f"{path}: line {lineno}: expected t,microwatts") from None
            t.append(a)
            pw.append(b)
    return HarvestTrace(np.asarray(t), np.asarray(pw), source)


def save_trace(path, trace: HarvestTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "power_uw"])
        for a, b in zip(trace.t, trace.power_uw):
            w.writerow([repr(float(a)), repr(float(b))])


# --------------------------------------------------------------------------
# capacitor
# --------------------------------------------------------------------------


@dataclass
class NodeEnergyState:
    stored: float
    capacity: float = 200.0
    leakage_uw: float = 0.0
    history: tuple = ()
    # running ledger
    initial: Optional[float] = None
    harvested: float = 0.0
    consumed: float = 0.0
    discarded: float = 0.0
    leaked: float = 0.0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigError("capacity must be positive")
        if not 0.0 <= self.stored <= self.capacity:
            raise ConfigError("stored charge must lie in [0, capacity]")
        if self.initial is None:
            self.initial = float(self.stored)

    def balance_error(self) -> float:
        """Residual of initial + harvested - consumed - discarded - leaked - stored."""
        return self.initial + self.harvested - self.consumed - self.discarded - self.leaked - self.stored


def step(
    state: NodeEnergyState,
    harvested: float,
    consumed: float,
    dt: float = 1e-3,
    window: int = 16,
) -> NodeEnergyState:
    """Advance the store by one time step.

    Harvest is added and consumption drawn first, then leakage; the result is
    clamped to [0, capacity], surplus being discarded. Drawing more than
    ``stored + harvested`` raises :class:`EnergyError`.
    """
    if harvested < 0 or consumed < 0:
        raise ConfigError("harvested and consumed must be >= 0")
    avail = state.stored + harvested
    if consumed > avail + ENERGY_TOL:
        raise EnergyError(f"overdraw: {consumed:.6f} uJ requested, {avail:.6f} uJ available")
    after = max(avail - consumed, 0.0)
    leak = min(state.leakage_uw * dt, after)
    after -= leak
    discarded = max(after - state.capacity, 0.0)
    hist = (state.history + (harvested / dt,))[-window:] if dt > 0 else state.history
    return replace(
        state,
        stored=min(after, state.capacity),
        history=hist,
        harvested=state.harvested + harvested,
        consumed=state.consumed + min(consumed, avail),
        discarded=state.discarded + discarded,
        leaked=state.leaked + leak,
    )


def predict_power(history: Sequence[float], horizon: float, window: int = 16) -> float:
    """Expected income (uJ) over ``horizon`` seconds from a moving average of recent power."""
    if len(history) == 0:
        raise ConfigError("power history is empty")
    recent = np.asarray(history[-window:], dtype=np.float64)
    return float(recent.mean()) * horizon


def moving_average(power: np.ndarray, window: int = 16) -> np.ndarray:
    """Trailing mean of the last ``window`` entries at every index (shorter at the start)."""
    power = np.asarray(power, dtype=np.float64)
    cs = np.concatenate(([0.0], np.cumsum(power)))
    idx = np.arange(1, len(power) + 1)
    start = np.maximum(idx - window, 0)
    return (cs[idx] - cs[start]) / (idx - start)


# --------------------------------------------------------------------------
# strategy costs
# --------------------------------------------------------------------------


def comm_energy(body_bytes: int, kind: str = "payload") -> float:
    """Radio energy for one message: fixed for results, affine in body size for payloads."""
    if body_bytes < 0:
        raise ConfigError("body_bytes must be >= 0")
    if kind == "result":
        return RESULT_COMM_UJ
    if kind != "payload":
        raise ConfigError(f"unknown message kind {kind!r}")
    return COMM_BASE_UJ + COMM_PER_BYTE_UJ * body_bytes


@dataclass
class CostTable:
    """Per-strategy (sensor, comm) energy in uJ; ``total`` is their sum."""

    rows: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))

    @classmethod
    def with_overrides(cls, overrides: Optional[Mapping] = None) -> "CostTable":
        rows = dict(DEFAULT_COSTS)
        for name, val in (overrides or {}).items():
            if isinstance(val, Mapping):
                sensor, comm = float(val.get("sensor", rows[name][0])), float(val.get("comm", rows[name][1]))
            else:
                sensor, comm = (float(v) for v in val)
            if sensor < 0 or comm < 0:
                raise ConfigError(f"negative cost for {name}")
            rows[str(name)] = (sensor, comm)
        return cls(rows)

    def sensor(self, name: str) -> float:
        return self.rows[name][0]

    def comm(self, name: str) -> float:
        return self.rows[name][1]

    def total(self, name: str) -> float:
        s, c = self.rows[name]
        return s + c
