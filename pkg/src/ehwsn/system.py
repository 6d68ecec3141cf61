"""Config files, scenario preparation (data + trained models) and whole-system runs."""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .dataio import ConfigError, LabeledStream, gen_synthetic, load_dataset, window_stream
from .energy import CostTable, HarvestTrace, gen_trace, load_trace
from .host import CodecParams, ModelSuite, TrainParams, derive_seed, train_suite
from .sim import Node, Policy, SimReport, assemble, run_node, steps_per_stride

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "name": "",
    "seed": 0,
    "dataset": {
        "source": "synthetic",
        "n_classes": 4,
        "n_windows_per_class": 50,
        "train_windows_per_class": 250,
        "noise_sigma": 0.1,
        "sample_rate_hz": 50.0,
        "path": "",
        "format": "mhealth",
        "channels": None,
        "label_col": None,
        "train_fraction": 0.7,
    },
    "window": {"length": 60, "overlap": 30},
    "sensors": {"count": 3, "channels_per_sensor": 1},
    "energy": {
        "capacity_uj": 200.0,
        "initial_uj": 0.0,
        "leakage_uw": 0.0,
        "predictor_window": 16,
        "step_s": 1e-3,
        "cost_table": {},
    },
    "trace": {"profile": "markov-burst", "params": {"mean_uw": 40.0}, "path": "", "source": "synthetic", "scale": 1.0},
    "traces": [],
    "policy": {
        "name": "seeker",
        "order": "paper-flow",
        "err_n": 3,
        "force": "D3",
        "memo": True,
        "memo_threshold": 0.95,
        "aac": True,
    },
    "coreset": {"k_max": 12, "max_iter": 4, "m": 20, "min_gap": 2, "max_rounds": 7},
    "training": {
        "epochs": 30,
        "hidden": 64,
        "lr": 0.05,
        "recon_repeats": 3,
        "host_draws": 5,
        "aac_tolerance": 0.01,
    },
}


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict) and key not in ("cost_table", "params"):
            if not isinstance(val, Mapping):
                raise ConfigError(f"{path}{key} must be a table")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(source: Any = None, overrides: Optional[Mapping] = None) -> dict:
    """Full config from a TOML/JSON file path, a mapping or None, with defaults filled in."""
    raw: Mapping = {}
    if isinstance(source, Mapping):
        raw = source
    elif source is not None:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        try:
            raw = json.loads(text) if text.lstrip().startswith("{") else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{source}: {exc}") from None
    cfg = _merge(DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    ds, en, win = cfg["dataset"], cfg["energy"], cfg["window"]
    if ds["source"] not in ("synthetic", "file"):
        raise ConfigError("dataset.source must be 'synthetic' or 'file'")
    if ds["source"] == "file" and not ds["path"]:
        raise ConfigError("dataset.path is required for file datasets")
    if not 0 < ds["train_fraction"] < 1:
        raise ConfigError("dataset.train_fraction must lie in (0, 1)")
    if cfg["sensors"]["count"] < 1 or cfg["sensors"]["channels_per_sensor"] < 1:
        raise ConfigError("sensors.count and sensors.channels_per_sensor must be >= 1")
    if cfg["sensors"]["count"] > 255:
        raise ConfigError("at most 255 sensors")
    if en["capacity_uj"] <= 0 or not 0 <= en["initial_uj"] <= en["capacity_uj"]:
        raise ConfigError("need capacity_uj > 0 and 0 <= initial_uj <= capacity_uj")
    if en["leakage_uw"] < 0 or en["predictor_window"] < 1 or en["step_s"] <= 0:
        raise ConfigError("invalid leakage_uw, predictor_window or step_s")
    if not 0 <= win["overlap"] < win["length"]:
        raise ConfigError("window needs 0 <= overlap < length")
    if win["length"] > 64:
        raise ConfigError("window.length above 64 is not encodable")
    if cfg["traces"] and len(cfg["traces"]) != cfg["sensors"]["count"]:
        raise ConfigError("traces must list one entry per sensor")
    policy_from(cfg)
    CostTable.with_overrides(en["cost_table"])


def policy_from(cfg: dict) -> Policy:
    p = cfg["policy"]
    try:
        return Policy(
            p["name"], p["order"], int(p["err_n"]), str(p["force"]).upper(), bool(p["memo"]),
            float(p["memo_threshold"]), bool(p["aac"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"policy: {exc}") from None


# --------------------------------------------------------------------------
# scenario: data streams and trained models, cached per process
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    train: LabeledStream
    test: LabeledStream
    n_classes: int
    suites: list  # ModelSuite per sensor
    channel_groups: list


_SCENARIOS: dict = {}


def _scenario_key(cfg: dict) -> str:
    keep = {k: cfg[k] for k in ("seed", "dataset", "window", "sensors", "coreset", "training")}
    keep["aac"] = cfg["policy"]["aac"]
    return json.dumps(keep, sort_keys=True)


def _streams(cfg: dict) -> tuple[LabeledStream, LabeledStream, int]:
    ds, seed = cfg["dataset"], cfg["seed"]
    n_ch = cfg["sensors"]["count"] * cfg["sensors"]["channels_per_sensor"]
    L = cfg["window"]["length"]
    if ds["source"] == "synthetic":
        args = (ds["n_classes"], n_ch, L, ds["noise_sigma"])
        train = gen_synthetic(args[0], ds["train_windows_per_class"], *args[1:], seed=derive_seed(seed, 1), sample_rate_hz=ds["sample_rate_hz"])
        test = gen_synthetic(args[0], ds["n_windows_per_class"], *args[1:], seed=derive_seed(seed, 2), sample_rate_hz=ds["sample_rate_hz"])
        return train, test, ds["n_classes"]
    full = load_dataset(ds["path"], ds["format"], ds["channels"], ds["label_col"], ds.get("sample_rate_hz"))
    if full.n_channels < n_ch:
        raise ConfigError(f"dataset has {full.n_channels} channels, sensors need {n_ch}")
    cut = int(len(full.samples) * ds["train_fraction"])
    def part(sl):
        return LabeledStream(full.samples[sl], full.labels[sl], full.sample_rate_hz, full.channel_ranges, full.class_names)
    return part(slice(0, cut)), part(slice(cut, None)), len(full.class_names)


def prepare(cfg: dict) -> Scenario:
    """Generate or load the data and train one model suite per sensor (memoized)."""
    key = _scenario_key(cfg)
    if key in _SCENARIOS:
        return _SCENARIOS[key]
    train, test, K = _streams(cfg)
    per = cfg["sensors"]["channels_per_sensor"]
    groups = [list(range(s * per, (s + 1) * per)) for s in range(cfg["sensors"]["count"])]
    tr, cd = cfg["training"], cfg["coreset"]
    codec = CodecParams(cd["k_max"], cd["max_iter"], cd["m"], cd["min_gap"], cd["max_rounds"])
    suites = []
    for s, chans in enumerate(groups):
        sub = train.select_channels(chans)
        windows = window_stream(sub, cfg["window"]["length"], cfg["window"]["overlap"])
        present = sorted({w.label for w in windows})
        if len(present) < 2:
            raise ConfigError("training data holds fewer than two classes")
        params = TrainParams(
            tr["epochs"], tr["hidden"], tr["lr"], tr["recon_repeats"], tr["host_draws"],
            aac_tolerance=tr["aac_tolerance"], seed=derive_seed(cfg["seed"], 100 + s),
        )
        suites.append(train_suite(windows, sub.channel_ranges, K, params, codec, aac=cfg["policy"]["aac"]))
    sc = Scenario(train, test, K, suites, groups)
    _SCENARIOS[key] = sc
    return sc


def trace_for(cfg: dict, sensor: int, duration_s: float) -> HarvestTrace:
    spec = cfg["traces"][sensor] if cfg["traces"] else cfg["trace"]
    spec = _merge(DEFAULTS["trace"], spec, "trace.")
    if spec["path"]:
        tr = load_trace(spec["path"], spec["source"])
    else:
        params = dict(spec["params"])
        params.setdefault("duration_s", duration_s)
        params.setdefault("dt", cfg["energy"]["step_s"])
        tr = gen_trace(spec["profile"], params, seed=derive_seed(cfg["seed"], 200 + sensor))
    return tr.scaled(float(spec["scale"])) if spec["scale"] != 1.0 else tr


def run_system(config: Any = None, scenario: Optional[Scenario] = None) -> SimReport:
    """Run every sensor over the test stream and ensemble results at the host."""
    cfg = config if isinstance(config, dict) and "energy" in config and "window" in config else load_config(config)
    sc = scenario or prepare(cfg)
    en = cfg["energy"]
    L, ov = cfg["window"]["length"], cfg["window"]["overlap"]
    S = steps_per_stride(L - ov, sc.test.sample_rate_hz, en["step_s"])
    costs = CostTable.with_overrides(en["cost_table"])
    policy = policy_from(cfg)
    logs = []
    for s, chans in enumerate(sc.channel_groups):
        windows = window_stream(sc.test.select_channels(chans), L, ov)
        node = Node(
            s, sc.suites[s], costs, policy, en["capacity_uj"], en["initial_uj"], en["leakage_uw"],
            en["predictor_window"], en["step_s"],
        )
        trace = trace_for(cfg, s, len(windows) * S * en["step_s"])
        logs.append(run_node(node, windows, trace, S, derive_seed(cfg["seed"], 300)))
    spec = cfg["trace"] if not cfg["traces"] else {"profile": "per-sensor"}
    source = spec.get("path") or spec.get("profile", "")
    return assemble(
        logs, sc.suites, (L, len(sc.channel_groups[0])), policy.label, source,
        derive_seed(cfg["seed"], 400), cfg["name"],
    )
