"""The ten acceptance criteria, each at its stated tolerance.

Every test records one ``CRITERION n: PASS|FAIL ...`` line, printed in the
terminal summary, and then asserts.
"""

import json
import subprocess
import sys
import warnings
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ehwsn import cli
from ehwsn import coreset as cs
from ehwsn import dataio as dio
from ehwsn import host, system
from ehwsn import inference as inf
from ehwsn.energy import CostTable, comm_energy, gen_trace
from ehwsn.kernels import lloyd
from ehwsn.recovery import reconstruct_cluster
from ehwsn.sim import Node, Policy, run_node


def _record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_cfg():
    return system.load_config(None)


@pytest.fixture(scope="module")
def default_scenario(default_cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return system.prepare(default_cfg)


@pytest.fixture(scope="module")
def policy_runs(default_cfg, default_scenario):
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for pol in ("seeker", "err1", "err3", "err6", "err12"):
            p = Policy.parse(pol)
            cfg = system.load_config(default_cfg, {"policy": {"name": p.name, "err_n": p.err_n}})
            out[pol] = system.run_system(cfg, default_scenario).metrics
    return out


def test_criterion_1_payload_bytes():
    x = np.sin(np.linspace(0, 6, 60))
    c = cs.kmeans_coreset(dio.SensorWindow(x), 12, ranges=[[-1.0, 1.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with_counts, without = len(cs.encode_cluster(c)), len(cs.encode_cluster(c, with_counts=False))
    raw = 60 * 1 * 4
    ratio = Fraction(raw, with_counts)
    ok = (
        with_counts == 42 == cs.cluster_body_bytes(12)
        and without == 36 == cs.cluster_body_bytes(12, with_counts=False)
        and raw == 240
        and ratio == Fraction(40, 7)
        and f"{float(ratio):.3f}" == "5.714"
    )
    _record(1, ok, f"body {with_counts} B with counts, {without} B without, raw {raw} B, ratio {ratio} = {float(ratio):.3f}")


def test_criterion_2_energy_table(small_scenario):
    table = {"D0": 8.81, "D1": 37.5, "D2": 24.85, "D3": 17.04, "D4": 16.84}
    charged = {}
    windows = dio.window_stream(small_scenario.test.select_channels([0]), 60, 30)[:4]
    for kind, total in table.items():
        node = Node(0, small_scenario.suites[0], CostTable(), Policy("force", force=kind, aac=False), 1e6, 1e6)
        trace = gen_trace("constant", {"power_uw": 0.0, "duration_s": 4 * 0.6})
        log = run_node(node, windows, trace, 600)
        per = {r.energy_uj for r in log.records}
        charged[kind] = (per, log.ledger.consumed / 4)
    ok = all(
        len(per) == 1 and abs(per.pop() - table[k]) <= 0.01 and abs(mean - table[k]) <= 0.01
        for k, (per, mean) in charged.items()
    )
    e42, e240 = comm_energy(42), comm_energy(240)
    ok = ok and abs(e42 - 15.97) <= 0.01 and abs(e240 - 70.16) <= 0.01
    got = ", ".join(f"{k} {m:.2f}" for k, (_, m) in charged.items())
    _record(2, ok, f"charged {got} uJ; comm_energy(42)={e42:.2f}, comm_energy(240)={e240:.2f}")


def test_criterion_3_kmeans_fixed_points():
    rng = np.random.default_rng(2024)
    checked = bad = 0
    while checked < 200:
        n = int(rng.integers(1, 13))
        k = int(rng.integers(1, min(3, n) + 1))
        pts = rng.random((n, 2))
        if rng.random() < 0.3:
            pts = np.round(pts * 3) / 3
        max_iter = int(rng.integers(2, 10))
        centers, labels, n_iter, converged, _ = lloyd(pts, k, max_iter, int(rng.integers(n)))
        if not (converged and n_iter < max_iter):
            continue
        checked += 1
        # exhaustive: every point against every center, every center against its members
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        nearest = d[np.arange(n), labels] <= d.min(axis=1) + 1e-12
        means = all(np.allclose(centers[j], pts[labels == j].mean(0), atol=1e-12) for j in range(k))
        bad += not (nearest.all() and means)
    _record(3, bad == 0, f"{checked} converged instances (n<=12, k<=3), {bad} violate nearest-assignment or center-as-mean")


def test_criterion_4_reconstruction_bound():
    rng = np.random.default_rng(0)
    L = 60
    q = np.hypot(0.5 / (L - 1), 0.5 / cs.V_LEVELS) + 0.5 / cs.R_LEVELS
    ranges = np.array([[-3.0, 3.0]])
    worst = 0.0
    violations = 0
    n = 10_000
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(n):
            kind = i % 3
            if kind == 0:
                v = rng.uniform(-1, 1, L)
            elif kind == 1:
                v = np.sin(np.linspace(0, rng.uniform(1, 20), L)) + rng.normal(0, rng.uniform(0, 0.5), L)
            else:
                v = np.cumsum(rng.normal(0, 0.2, L))
            k = int(rng.integers(1, 13))
            c = cs.kmeans_coreset(dio.SensorWindow(v), k, 4, ranges=ranges)
            dec = cs.decode_cluster(cs.encode_cluster(c), c.k_per_channel, 1, L, ranges)
            rec = reconstruct_cluster(dec, L, seed=i)
            orig = cs.channel_points(v, *ranges[0])
            bound = 2 * (max(c.radius[0].max(), dec.radius[0].max()) + q)
            for pts in (rec.meta["points"][0], cs.channel_points(rec.values[:, 0], *ranges[0])):
                dist = np.sqrt(((orig[:, None] - pts[None]) ** 2).sum(-1)).min(axis=1).max()
                worst = max(worst, dist / bound)
                violations += dist > bound
    _record(4, violations == 0, f"{n} windows, {violations} violations, worst distance {worst:.3f} of 2*(max radius + q)")


def test_criterion_5_recovery_beats_direct():
    margins = []
    wins = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for seed in range(5):
            tr = dio.gen_synthetic(4, 250, 1, 60, 0.1, seed)
            te = dio.gen_synthetic(4, 251, 1, 60, 0.1, seed + 1000)
            wtr, wte = dio.window_stream(tr), dio.window_stream(te)
            assert len(wte) >= 2000
            r = host.recovery_vs_direct(wtr, wte, tr.channel_ranges, 4, host.TrainParams(seed=seed))
            m3 = r["D3"]["recovered"] - r["D3"]["direct"]
            m4 = r["D4"]["recovered"] - r["D4"]["direct"]
            margins.append((m3, m4))
            wins += m3 >= 0.02 and m4 >= 0.02
    txt = ", ".join(f"D3 {a * 100:+.1f}pp / D4 {b * 100:+.1f}pp" for a, b in margins)
    _record(5, wins >= 4, f"{wins}/5 seeds with both margins >= 2pp ({txt})")


def test_criterion_6_policy_dominance(policy_runs):
    seeker = policy_runs["seeker"]
    errs = {k: v for k, v in policy_runs.items() if k.startswith("err")}
    dominates = all(seeker["completion_fraction"] >= m["completion_fraction"] for m in errs.values())
    strict_ok = seeker["strict_accuracy"] >= errs["err12"]["strict_accuracy"]
    txt = ", ".join(f"{k} {m['completion_fraction']:.3f}" for k, m in errs.items())
    _record(
        6, dominates and strict_ok,
        f"completion seeker {seeker['completion_fraction']:.3f} vs {txt}; strict accuracy seeker "
        f"{seeker['strict_accuracy']:.3f} vs err12 {errs['err12']['strict_accuracy']:.3f}",
    )


def test_criterion_7_volume_reduction(default_cfg, policy_runs):
    m = policy_runs["seeker"]
    assert default_cfg["policy"]["aac"] and default_cfg["trace"]["profile"] == "markov-burst"
    ratio = m["data_volume_ratio"]
    _record(7, ratio <= 0.2, f"AAC on markov-burst trace sends {m['body_bytes']} of {m['raw_bytes']} raw bytes, ratio {ratio:.4f} ({1 / ratio:.1f}x reduction)")


def test_criterion_8_determinism(tmp_path, default_scenario, capsys):
    paths = [tmp_path / f"r{i}.json" for i in range(3)]
    codes = [cli.main(["simulate", "--out", str(p)]) for p in paths[:2]]
    # a fresh interpreter retrains everything from the seed
    proc = subprocess.run(
        [sys.executable, "-m", "ehwsn", "simulate", "--out", str(paths[2])], capture_output=True, text=True
    )
    codes.append(proc.returncode)
    blobs = [p.read_bytes() for p in paths]
    ok = codes == [0, 0, 0] and blobs[0] == blobs[1] == blobs[2]
    json.loads(blobs[0])
    _record(8, ok, f"3 simulate runs (2 in-process, 1 fresh process), exit codes {codes}, identical JSON: {ok}")


def test_criterion_9_gradients_and_quantization(default_scenario):
    from test_inference import finite_difference_check

    grad_err = max(finite_difference_check(seed) for seed in range(3))
    worst = 0.0
    for suite in default_scenario.suites:
        m = suite.host32
        q = inf.quantize(m, 16)
        for name in ("w1", "w2"):
            err = np.max(np.abs(getattr(q, name) - getattr(m, name)))
            worst = max(worst, err / (q.scales[name] / 2))
        for name in ("b1", "b2"):  # stored in full precision
            worst = max(worst, float(np.max(np.abs(getattr(q, name) - getattr(m, name)))))
    ok = grad_err <= 1e-4 and worst <= 1.0
    _record(9, ok, f"max relative gradient error {grad_err:.2e}; worst 16-bit round-trip error {worst:.3f} of scale/2")


def test_criterion_10_energy_conservation(small_cfg, small_scenario):
    variants = [
        {},
        {"energy": {"leakage_uw": 5.0}},
        {"energy": {"capacity_uj": 20.0}},
        {"energy": {"capacity_uj": 40.0, "leakage_uw": 30.0, "initial_uj": 40.0}},
        {"trace": {"profile": "square-wave", "params": {"high_uw": 150.0, "period_s": 2.0, "duty": 0.3}}},
        {"trace": {"profile": "constant", "params": {"power_uw": 0.0}}, "energy": {"initial_uj": 200.0}},
        {"policy": {"name": "err", "err_n": 3}},
        {"policy": {"order": "table-greedy"}},
        {"policy": {"name": "force", "force": "D4"}},
    ]
    failures = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for v in variants:
            cfg = system.load_config(small_cfg, v)
            rep = system.run_system(cfg, small_scenario)
            for led in rep.ledgers:
                if not (
                    led.consumed <= led.harvested + led.initial
                    and 0.0 <= led.min_stored
                    and led.max_stored <= led.capacity
                ):
                    failures.append(v)
    _record(10, not failures, f"{len(variants)} system runs x 3 nodes, {len(failures)} ledger violations (consumed <= harvested + initial, stored in [0, capacity] at every step)")
