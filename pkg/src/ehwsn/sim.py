"""Sensor nodes deciding per window under harvested energy, plus the host and metrics.

A node advances in fixed time steps. Window i arrives at step ``i * S`` where
``S`` steps span one stride, and must be resolved before the next arrival.
At every step until then the node re-evaluates the decision flow; energy is
debited only when an action commits, atomically. Each window ends in exactly
one of D0-D4 or DROP.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import coreset as cs
from . import inference as inf
from .dataio import ConfigError, SensorWindow
from .energy import ENERGY_TOL, CostTable, HarvestTrace, comm_energy, moving_average
from .host import ModelSuite, cluster_payload, derive_seed, host_classify, sample_payload
from .kernels import clamped_accumulate

RAW_BYTES_PER_SAMPLE = 4  # float32 per channel sample
RESULT_BODY_BYTES = 2  # class id, confidence byte


class Decision(str, Enum):
    D0 = "D0"  # memoized result
    D1 = "D1"  # 16-bit local inference
    D2 = "D2"  # 12-bit local inference
    D3 = "D3"  # clustering coreset offload
    D4 = "D4"  # sampling coreset offload
    DEFER = "DEFER"
    DROP = "DROP"


COMPLETED = (Decision.D0, Decision.D1, Decision.D2, Decision.D3, Decision.D4)
FINAL = COMPLETED + (Decision.DROP,)


@dataclass
class Policy:
    """``seeker`` runs the full decision flow; ``err`` is n store windows then one
    D1 attempt; ``force`` always targets one strategy."""

    name: str = "seeker"
    order: str = "paper-flow"  # or table-greedy: D4 before D3
    err_n: int = 3
    force: str = "D3"
    memo: bool = True
    memo_threshold: float = 0.95
    aac: bool = True

    def __post_init__(self):
        if self.name not in ("seeker", "err", "force"):
            raise ConfigError(f"unknown policy {self.name!r}")
        if self.order not in ("paper-flow", "table-greedy"):
            raise ConfigError(f"unknown decision order {self.order!r}")
        if self.err_n < 0:
            raise ConfigError("err_n must be >= 0")
        if self.force not in ("D0", "D1", "D2", "D3", "D4"):
            raise ConfigError(f"cannot force {self.force!r}")

    @classmethod
    def parse(cls, text: str, **kw) -> "Policy":
        """'seeker', 'seeker:table-greedy', 'err3' / 'err:3', 'force:D3'."""
        text = text.strip().lower()
        if text.startswith("err"):
            n = text[3:].lstrip(":(").rstrip(")")
            return cls("err", err_n=int(n) if n else 3, **kw)
        if text.startswith("force:"):
            return cls("force", force=text.split(":", 1)[1].upper(), **kw)
        if text.startswith("seeker"):
            order = text.split(":", 1)[1] if ":" in text else kw.pop("order", "paper-flow")
            return cls("seeker", order=order, **kw)
        raise ConfigError(f"unknown policy {text!r}")

    @property
    def label(self) -> str:
        if self.name == "err":
            return f"err{self.err_n}"
        if self.name == "force":
            return f"force:{self.force}"
        return "seeker" if self.order == "paper-flow" else "seeker:table-greedy"


@dataclass
class Node:
    node_id: int
    suite: ModelSuite
    costs: CostTable
    policy: Policy
    capacity: float = 200.0
    stored: float = 0.0
    leakage_uw: float = 0.0
    predictor_window: int = 16
    dt: float = 1e-3
    last_class: Optional[int] = None

    @property
    def n_channels(self) -> int:
        return self.suite.ranges.shape[0]

    def d3_bytes(self, k: int) -> int:
        return cs.cluster_body_bytes(k, self.n_channels)

    def cost(self, kind: str, k: Optional[int] = None) -> float:
        """Energy a committed action draws; D3 below k_max is charged by its actual bytes."""
        if kind == "D3" and k is not None and k != self.suite.codec.k_max:
            return self.costs.sensor("D3") + comm_energy(self.d3_bytes(k), "payload")
        return self.costs.total(kind)

    def d3_costs(self) -> np.ndarray:
        """Cost of D3 for k = 1..k_max (index k-1)."""
        return np.array([self.cost("D3", k) for k in range(1, self.suite.codec.k_max + 1)])


@dataclass
class Choice:
    kind: Decision
    k: Optional[int] = None
    energy_uj: float = 0.0
    target: Optional[Decision] = None  # what a DEFER is waiting for


def _affordable_k(d3_costs: np.ndarray, budget: float) -> int:
    return int(np.searchsorted(d3_costs, budget + ENERGY_TOL, side="right"))


def decide(
    node: Node,
    window: SensorWindow,
    stored: Optional[float] = None,
    predicted_uj: float = 0.0,
    deadline: bool = True,
    corr: Optional[float] = None,
) -> Choice:
    """One evaluation of the decision flow.

    ``stored`` defaults to the node's charge, ``predicted_uj`` is the expected
    income until the deadline and ``corr`` the best template coefficient
    (computed when omitted). The first strategy the budget
    ``stored + predicted_uj`` covers becomes the target; it commits if the store
    alone covers it, otherwise the node defers, or drops at the deadline.
    """
    stored = node.stored if stored is None else stored
    budget = stored + predicted_uj
    target = _target(node, window, budget, corr)
    if target is None:
        return Choice(Decision.DROP if deadline else Decision.DEFER)
    kind, k = target
    cost = node.cost(kind.value, k)
    if stored + ENERGY_TOL >= cost:
        return Choice(kind, k, cost)
    return Choice(Decision.DROP if deadline else Decision.DEFER, target=kind)


def _target(node: Node, window, budget, corr):
    pol = node.policy
    if pol.name == "force":
        kind = Decision(pol.force)
        k = node.suite.codec.k_max if kind is Decision.D3 else None
        if kind is Decision.D3 and pol.aac:
            k = _aac_k(node, budget)
            if k is None:
                return None
        return (kind, k) if budget + ENERGY_TOL >= node.cost(kind.value, k) else None
    if pol.name == "err":
        return (Decision.D1, None) if budget + ENERGY_TOL >= node.cost("D1") else None
    if pol.memo:
        if corr is None:
            corr = inf.correlate(window, node.suite.templates)[1]
        if corr >= pol.memo_threshold:
            return Decision.D0, None
    for kind in (Decision.D1, Decision.D2):
        if budget + ENERGY_TOL >= node.cost(kind.value):
            return kind, None
    offloads = (Decision.D3, Decision.D4) if pol.order == "paper-flow" else (Decision.D4, Decision.D3)
    for kind in offloads:
        if kind is Decision.D3:
            k = _aac_k(node, budget) if pol.aac else (
                node.suite.codec.k_max if budget + ENERGY_TOL >= node.cost("D3") else None
            )
            if k is not None:
                return kind, k
        elif budget + ENERGY_TOL >= node.cost("D4"):
            return kind, None
    return None


def _aac_k(node: Node, budget: float) -> Optional[int]:
    affordable = _affordable_k(node.d3_costs(), budget)
    if affordable < 1:
        return None
    return cs.select_cluster_count(node.last_class, affordable, node.suite.budget)


# --------------------------------------------------------------------------
# one node over a window sequence
# --------------------------------------------------------------------------


@dataclass
class Record:
    window_id: int
    node: int
    decision: str
    attempted: bool
    k: Optional[int] = None
    energy_uj: float = 0.0
    body_bytes: int = 0
    commit_step: Optional[int] = None
    stored_at_arrival: float = 0.0
    local_class: Optional[int] = None
    local_conf: Optional[float] = None
    host_class: Optional[int] = None
    host_conf: Optional[float] = None
    label: Optional[int] = None
    payload: bytes = b""
    shape: tuple = ()


@dataclass
class EnergyLedger:
    initial: float
    harvested: float = 0.0
    consumed: float = 0.0
    discarded: float = 0.0
    leaked: float = 0.0
    final: float = 0.0
    min_stored: float = float("inf")
    max_stored: float = float("-inf")
    capacity: float = 0.0

    def residual(self) -> float:
        return self.initial + self.harvested - self.consumed - self.discarded - self.leaked - self.final

    def check(self) -> None:
        """Raise if the run overdrew the store or left [0, capacity] at any step."""
        if self.consumed > self.harvested + self.initial:
            raise AssertionError(f"consumed {self.consumed} exceeds harvested + initial")
        if self.min_stored < 0.0 or self.max_stored > self.capacity:
            raise AssertionError(f"stored left [0, {self.capacity}]: [{self.min_stored}, {self.max_stored}]")
        if abs(self.residual()) > 1e-6 * max(1.0, self.initial + self.harvested):
            raise AssertionError(f"ledger does not balance (residual {self.residual()})")


@dataclass
class NodeLog:
    node: int
    records: list
    ledger: EnergyLedger


def _result_byte(conf: float) -> int:
    return int(round(min(max(conf, 0.0), 1.0) * 255))


def _execute(node: Node, kind: Decision, k, window: SensorWindow, rec: Record, sim_seed: int, corr_best) -> None:
    """Run the committed action and fill the record's payload and local result."""
    suite = node.suite
    if kind in (Decision.D0, Decision.D1, Decision.D2):
        if kind is Decision.D0:
            c, conf = corr_best
        else:
            c, conf = inf.infer(suite.node16 if kind is Decision.D1 else suite.node12, window)
        b = _result_byte(conf)
        rec.payload = bytes([c, b])
        rec.local_class, rec.local_conf = c, b / 255
        node.last_class = c
    elif kind is Decision.D3:
        shape, rec.payload = cluster_payload(window, k, suite.ranges, suite.codec)
        rec.shape = tuple(shape)
    else:
        rec.payload = sample_payload(window, suite.ranges, suite.codec, derive_seed(sim_seed, node.node_id, rec.window_id, 4))
        rec.shape = (suite.codec.m,)
    rec.body_bytes = len(rec.payload)


def steps_per_stride(stride_samples: int, sample_rate_hz: float, dt: float) -> int:
    s = stride_samples / sample_rate_hz / dt
    S = int(round(s))
    if S < 1 or abs(s - S) > 1e-6 * max(1.0, s):
        raise ConfigError(f"stride of {stride_samples / sample_rate_hz} s is not a whole number of {dt} s steps")
    return S


def run_node(
    node: Node,
    windows: Sequence[SensorWindow],
    trace: HarvestTrace,
    steps_per_window: int,
    sim_seed: int = 0,
) -> NodeLog:
    """Simulate one node over consecutive windows, one stride of steps each."""
    S, dt = int(steps_per_window), node.dt
    n_steps = len(windows) * S
    power = trace.resample(n_steps, dt)  # raises if the trace is too short
    # mean of the last W per-step powers seen before each step; nothing seen yet -> 0
    ma = np.concatenate(([0.0], moving_average(power, node.predictor_window)[:-1]))
    income = power * dt - node.leakage_uw * dt
    ledger = EnergyLedger(node.stored, capacity=node.capacity)
    ledger.harvested = float(np.sum(power * dt))
    leak_total = node.leakage_uw * dt * n_steps
    deficit_total = 0.0
    records = []
    horizon = (S - 1 - np.arange(S)) * dt
    for i, w in enumerate(windows):
        g0 = i * S
        inc = income[g0 : g0 + S]
        stored0 = node.stored
        rec = Record(w.window_id, node.node_id, Decision.DROP.value, True, stored_at_arrival=stored0, label=w.label)
        traj, disc, deficit = clamped_accumulate(stored0, inc, node.capacity)
        pre = np.concatenate(([stored0], traj[:-1]))
        commit = None
        corr_best = None
        pol = node.policy
        if pol.name == "err" and i % (pol.err_n + 1) != pol.err_n:
            rec.attempted = False
        else:
            if (pol.name == "seeker" and pol.memo) or (pol.name == "force" and pol.force == "D0"):
                corr_best = inf.correlate(w, node.suite.templates)
            commit = _first_commit(node, w, pre, ma[g0 : g0 + S] * horizon, corr_best)
        if commit is not None:
            s, choice = commit
            stored_s = float(pre[s])
            if s > 0:
                head, disc, deficit = clamped_accumulate(stored0, inc[:s], node.capacity)
            else:
                disc, deficit = 0.0, 0.0
            charge = min(choice.energy_uj, stored_s)
            after = stored_s - charge
            tail, disc2, deficit2 = clamped_accumulate(after, inc[s:], node.capacity)
            traj = np.concatenate((head, tail)) if s > 0 else tail
            disc, deficit = disc + disc2, deficit + deficit2
            ledger.consumed += charge
            ledger.min_stored = min(ledger.min_stored, after)
            rec.decision, rec.k, rec.energy_uj, rec.commit_step = choice.kind.value, choice.k, choice.energy_uj, s
            _execute(node, choice.kind, choice.k, w, rec, sim_seed, corr_best)
        ledger.discarded += float(disc)
        deficit_total += float(deficit)
        ledger.min_stored = min(ledger.min_stored, stored0, float(traj.min()))
        ledger.max_stored = max(ledger.max_stored, stored0, float(traj.max()))
        node.stored = float(traj[-1])
        records.append(rec)
    ledger.leaked = leak_total - deficit_total
    ledger.final = node.stored
    ledger.check()
    return NodeLog(node.node_id, records, ledger)


def _first_commit(node: Node, window, pre: np.ndarray, predicted: np.ndarray, corr_best):
    """Earliest step whose decision commits, evaluated for all steps of a stride at once."""
    S = len(pre)
    pol = node.policy
    budget = pre + predicted
    cost = np.full(S, np.inf)
    kind = np.full(S, -1)
    ks = np.zeros(S, dtype=np.int64)
    order = [Decision.D0, Decision.D1, Decision.D2, Decision.D3, Decision.D4]
    if pol.name == "err":
        plan = [Decision.D1]
    elif pol.name == "force":
        plan = [Decision(pol.force)]
    elif pol.memo and corr_best is not None and corr_best[1] >= pol.memo_threshold:
        plan = [Decision.D0]
    else:
        off = [Decision.D3, Decision.D4] if pol.order == "paper-flow" else [Decision.D4, Decision.D3]
        plan = [Decision.D1, Decision.D2] + off
    d3 = node.d3_costs()
    k_max = node.suite.codec.k_max
    for d in plan:
        free = kind < 0
        if not free.any():
            break
        if d is Decision.D0:
            # memo hit: target regardless of budget
            sel = free
            c = np.full(S, node.cost("D0"))
        elif d is Decision.D3 and (pol.aac if pol.name != "err" else False):
            aff = np.searchsorted(d3, budget + ENERGY_TOL, side="right")
            sel = free & (aff >= 1)
            kk = np.zeros(S, dtype=np.int64)
            for a in np.unique(aff[sel]):
                kk[aff == a] = cs.select_cluster_count(node.last_class, int(a), node.suite.budget)
            c = np.where(kk >= 1, d3[np.maximum(kk, 1) - 1], np.inf)
            ks = np.where(sel, kk, ks)
        else:
            k = k_max if d is Decision.D3 else None
            c = np.full(S, node.cost(d.value, k))
            sel = free & (budget + ENERGY_TOL >= c)
            if d is Decision.D3:
                ks = np.where(sel, k_max, ks)
        cost = np.where(sel, c, cost)
        kind = np.where(sel, order.index(d), kind)
    ok = np.flatnonzero((kind >= 0) & (pre + ENERGY_TOL >= cost))
    if len(ok) == 0:
        return None
    s = int(ok[0])
    d = order[int(kind[s])]
    return s, Choice(d, int(ks[s]) if d is Decision.D3 else None, float(cost[s]))


# --------------------------------------------------------------------------
# messages and host
# --------------------------------------------------------------------------

_MSG_HEADER = struct.Struct(">BBHB")
_KIND_CODE = {"D0": 0, "D1": 1, "D2": 2, "D3": 3, "D4": 4}


def pack_message(rec: Record) -> bytes:
    """Header (kind, node, window id, shape length, shape bytes) followed by the body."""
    shape = bytes(rec.shape)
    return _MSG_HEADER.pack(_KIND_CODE[rec.decision], rec.node, rec.window_id & 0xFFFF, len(shape)) + shape + rec.payload


def unpack_message(msg: bytes) -> tuple[str, int, int, tuple, bytes]:
    kind, node, wid, n = _MSG_HEADER.unpack_from(msg)
    off = _MSG_HEADER.size
    names = {v: k for k, v in _KIND_CODE.items()}
    if kind not in names:
        raise cs.FormatError(f"unknown message kind {kind}")
    return names[kind], node, wid, tuple(msg[off : off + n]), msg[off + n :]


def host_receive(suites: Sequence[ModelSuite], msg: bytes, L: int, sim_seed: int) -> tuple[int, int, int, float]:
    """Decode one message into (node, window id, class, confidence)."""
    kind, node, wid, shape, body = unpack_message(msg)
    if kind in ("D0", "D1", "D2"):
        if len(body) != RESULT_BODY_BYTES:
            raise cs.FormatError("result body must be 2 bytes")
        return node, wid, body[0], body[1] / 255
    c, conf = host_classify(suites[node], kind, body, shape, L, derive_seed(sim_seed, node, wid, 9))
    return node, wid, c, conf


# --------------------------------------------------------------------------
# reports and metrics
# --------------------------------------------------------------------------


@dataclass
class SimReport:
    policy: str
    source: str
    n_nodes: int
    n_windows: int
    window_shape: tuple  # (L, C per node)
    records: list  # Record, node-major
    final: list  # per window: {"window_id", "label", "final_class"}
    ledgers: list  # EnergyLedger per node
    metrics: dict = field(default_factory=dict)
    name: str = ""

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            d["payload"] = r.payload.hex()
            d["shape"] = list(r.shape)
            recs.append(d)
        return {
            "name": self.name,
            "policy": self.policy,
            "source": self.source,
            "n_nodes": self.n_nodes,
            "n_windows": self.n_windows,
            "window_shape": list(self.window_shape),
            "metrics": self.metrics,
            "ledgers": [asdict(x) for x in self.ledgers],
            "final": self.final,
            "records": recs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [
            "window_id", "node", "decision", "attempted", "k", "energy_uj", "body_bytes", "commit_step",
            "stored_at_arrival", "local_class", "local_conf", "host_class", "host_conf", "label", "final_class",
        ]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        final = {f["window_id"]: f["final_class"] for f in self.final}
        for r in self.records:
            row = asdict(r)
            row["final_class"] = final.get(r.window_id)
            w.writerow(["" if row[c] is None else row[c] for c in cols])
        return buf.getvalue()


def metrics(report: SimReport) -> dict:
    """Aggregate completion, volume, accuracy, strategy histogram and energy ledger."""
    scheduled = report.n_nodes * report.n_windows
    hist = {d.value: 0 for d in FINAL}
    for r in report.records:
        hist[r.decision] += 1
    edge = hist["D0"] + hist["D1"] + hist["D2"]
    done = edge + hist["D3"] + hist["D4"]
    L, C = report.window_shape
    body = sum(r.body_bytes for r in report.records)
    answered = [f for f in report.final if f["final_class"] is not None]
    correct = sum(f["final_class"] == f["label"] for f in answered)
    for led in report.ledgers:
        led.check()
    return {
        "scheduled": scheduled,
        "strategy_histogram": hist,
        "edge_completion_fraction": edge / scheduled if scheduled else 0.0,
        "completion_fraction": done / scheduled if scheduled else 0.0,
        "body_bytes": body,
        "raw_bytes": scheduled * L * C * RAW_BYTES_PER_SAMPLE,
        "data_volume_ratio": body / (scheduled * L * C * RAW_BYTES_PER_SAMPLE) if scheduled else 0.0,
        "answered_windows": len(answered),
        "accuracy": correct / len(answered) if answered else 0.0,
        "strict_accuracy": correct / len(report.final) if report.final else 0.0,
        "energy_ledger": {
            "initial": sum(x.initial for x in report.ledgers),
            "harvested": sum(x.harvested for x in report.ledgers),
            "consumed": sum(x.consumed for x in report.ledgers),
            "discarded": sum(x.discarded for x in report.ledgers),
            "leaked": sum(x.leaked for x in report.ledgers),
            "final": sum(x.final for x in report.ledgers),
        },
    }


def assemble(
    logs: Sequence[NodeLog],
    suites: Sequence[ModelSuite],
    window_shape: tuple,
    policy: str,
    source: str,
    sim_seed: int,
    name: str = "",
) -> SimReport:
    """Deliver every committed message to the host, ensemble per window and score."""
    L = window_shape[0]
    by_window: dict[int, list] = {}
    labels: dict[int, Optional[int]] = {}
    for log in logs:
        for r in log.records:
            labels.setdefault(r.window_id, r.label)
            if r.decision == Decision.DROP.value:
                continue
            node, wid, c, conf = host_receive(suites, pack_message(r), L, sim_seed)
            r.host_class, r.host_conf = int(c), float(conf)
            by_window.setdefault(r.window_id, []).append((r.host_class, r.host_conf))
    final = []
    for wid in sorted(labels):
        votes = by_window.get(wid)
        final.append(
            {"window_id": wid, "label": labels[wid], "final_class": inf.ensemble(votes) if votes else None}
        )
    n_windows = len(labels)
    rep = SimReport(
        policy, source, len(logs), n_windows, tuple(window_shape),
        [r for log in logs for r in log.records], final, [log.ledger for log in logs], name=name,
    )
    rep.metrics = metrics(rep)
    return rep
