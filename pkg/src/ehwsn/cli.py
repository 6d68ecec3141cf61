"""Command line entry point.

Exit codes: 0 ok, 1 usage, 2 data error, 3 config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import coreset as cs
from . import inference as inf
from .dataio import ConfigError, DataError, load_window, save_window
from .energy import EnergyError, gen_trace, save_trace
from .recovery import reconstruct_cluster, reconstruct_sample

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _kv(items: Optional[Sequence[str]]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .system import load_config, prepare

    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    sc = prepare(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": cfg["seed"], "n_classes": sc.n_classes, "sensors": []}
    for s, suite in enumerate(sc.suites):
        files = {}
        for name in ("host32", "node16", "node12", "host_d3", "host_d4"):
            path = out / f"sensor{s}_{name}.ehqm"
            inf.save_model(path, getattr(suite, name))
            files[name] = path.name
        tpl = out / f"sensor{s}_templates.npy"
        np.save(tpl, suite.templates.templates)
        files["templates"] = tpl.name
        manifest["sensors"].append(
            {
                "channels": sc.channel_groups[s],
                "ranges": suite.ranges.tolist(),
                "budget_table": {str(k): v for k, v in sorted(suite.budget.entries.items())},
                "files": files,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"trained {len(sc.suites)} sensor suites into {out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    m = inf.load_model(args.model)
    q = inf.quantize(m, args.bits)
    inf.save_model(args.out, q)
    print(f"quantized {args.model} to {args.bits} bits -> {args.out}")
    return EXIT_OK


def _ranges_arg(args, C: int):
    if args.range is None:
        return None
    lo, hi = args.range
    if not lo < hi:
        raise ConfigError("--range needs LO < HI")
    return np.tile([lo, hi], (C, 1))


def cmd_encode(args) -> int:
    w = load_window(args.input)
    ranges = _ranges_arg(args, w.n_channels)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", cs.CodecWarning)
        if args.codec == "cluster":
            c = cs.kmeans_coreset(w, args.k, args.max_iter, ranges=ranges)
            body = cs.encode_cluster(c, with_counts=not args.no_counts)
            meta = {"codec": "cluster", "k_per_channel": c.k_per_channel, "with_counts": not args.no_counts}
            quant = c.quant_meta
        else:
            s = cs.sample_coreset(w, args.m, args.min_gap, seed=args.seed, ranges=ranges)
            body = cs.encode_sample(s)
            meta = {"codec": "sample", "m": args.m}
            quant = s.quant_meta
    for wrn in caught:
        print(f"warning: {wrn.message}", file=sys.stderr)
    meta.update({"length": w.length, "channels": w.n_channels, "ranges": np.asarray(quant).tolist()})
    if args.out:
        Path(args.out).write_bytes(body)
        Path(str(args.out) + ".json").write_text(json.dumps(meta, sort_keys=True))
    print(f"body: {len(body)} bytes")
    return EXIT_OK


def cmd_decode(args) -> int:
    body = Path(args.input).read_bytes()
    meta_path = Path(args.meta or str(args.input) + ".json")
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"missing layout file {meta_path}") from None
    L, C, ranges = meta["length"], meta["channels"], meta["ranges"]
    if meta["codec"] == "cluster":
        c = cs.decode_cluster(body, meta["k_per_channel"], C, L, ranges, meta.get("with_counts", True))
        w = reconstruct_cluster(c, L, seed=args.seed)
    else:
        s = cs.decode_sample(body, meta["m"], C, L, ranges)
        w = reconstruct_sample(s, L, seed=args.seed)
    if args.out:
        save_window(args.out, w)
    print(f"body: {len(body)} bytes")
    return EXIT_OK


def cmd_trace_gen(args) -> int:
    params = _kv(args.param)
    params.setdefault("duration_s", args.duration)
    params.setdefault("dt", args.dt)
    tr = gen_trace(args.profile, params, seed=args.seed)
    save_trace(args.out, tr)
    print(f"{len(tr.t)} steps, mean {tr.mean_power():.3f} uW -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .system import load_config, run_system

    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.policy:
        from .sim import Policy

        p = Policy.parse(args.policy)
        over["policy"] = {"name": p.name, "order": p.order, "err_n": p.err_n, "force": p.force}
    if args.name:
        over["name"] = args.name
    cfg = load_config(args.config, over or None)
    report = run_system(cfg)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    m = report.metrics
    print(
        f"{report.policy}: completion {m['completion_fraction']:.4f} "
        f"edge {m['edge_completion_fraction']:.4f} volume {m['data_volume_ratio']:.4f} "
        f"accuracy {m['accuracy']:.4f} strict {m['strict_accuracy']:.4f}"
    )
    return EXIT_OK


REPORT_COLUMNS = (
    "name", "policy", "source", "completion_fraction", "edge_completion_fraction",
    "data_volume_ratio", "accuracy", "strict_accuracy",
)


def report_rows(paths: Sequence[str]) -> list[dict]:
    rows = []
    for p in paths:
        try:
            d = json.loads(Path(p).read_text())
            m = d["metrics"]
            rows.append({c: (d[c] if c in ("policy", "source") else m[c]) for c in REPORT_COLUMNS if c != "name"})
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{p}: not a simulation report ({exc})") from None
        rows[-1]["name"] = d.get("name") or Path(p).stem
    return rows


def cmd_report(args) -> int:
    rows = report_rows(args.reports)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    width = max(len(r["name"]) for r in rows)
    print(f"{'name':<{width}}  {'policy':<20} completion  edge    volume  accuracy  strict")
    for r in rows:
        print(
            f"{r['name']:<{width}}  {r['policy']:<20} {r['completion_fraction']:10.4f}  "
            f"{r['edge_completion_fraction']:.4f}  {r['data_volume_ratio']:.4f}  "
            f"{r['accuracy']:8.4f}  {r['strict_accuracy']:.4f}"
        )
    if args.plot:
        _plot(rows, args.plot)
    return EXIT_OK


def _plot(rows, path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not available; skipping chart", file=sys.stderr)
        return
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar([r["name"] for r in rows], [r["completion_fraction"] for r in rows])
    ax.set_ylabel("completion fraction")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ehwsn", description="Energy-harvesting sensor network simulator and coreset codecs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train and save every model for each sensor")
    t.add_argument("--config", help="TOML or JSON config (defaults when omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="quantize a full-precision model file")
    q.add_argument("--model", required=True)
    q.add_argument("--bits", type=int, choices=(16, 12), required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("encode", help="compress a window file into a coreset body")
    e.add_argument("--codec", choices=("cluster", "sample"), required=True)
    e.add_argument("--input", required=True, help="window file: one row per sample, one column per channel")
    e.add_argument("--out", help="body file; layout goes to <out>.json")
    e.add_argument("--k", type=int, default=cs.K_MAX)
    e.add_argument("--max-iter", type=int, default=4)
    e.add_argument("--no-counts", action="store_true", help="omit per-cluster counts")
    e.add_argument("--m", type=int, default=20)
    e.add_argument("--min-gap", type=int, default=2)
    e.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), help="calibration range (default: window min/max)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a window from a coreset body")
    d.add_argument("--input", required=True)
    d.add_argument("--meta", help="layout file (default <input>.json)")
    d.add_argument("--out", help="reconstructed window file")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_decode)

    g = sub.add_parser("trace-gen", help="write a synthetic harvest trace CSV")
    g.add_argument("--profile", choices=("constant", "square-wave", "markov-burst"), required=True)
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="profile parameter (repeatable)")
    g.add_argument("--duration", type=float, default=10.0)
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_trace_gen)

    s = sub.add_parser("simulate", help="run the sensors and host from a config")
    s.add_argument("--config", help="TOML or JSON config")
    s.add_argument("--out", help="SimReport JSON path")
    s.add_argument("--csv", help="per-window log CSV path")
    s.add_argument("--policy", help="override: seeker, seeker:table-greedy, errN, force:Dx")
    s.add_argument("--name", help="label stored in the report")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="compare SimReports in one table")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", help="CSV table path")
    r.add_argument("--plot", help="also render a bar chart to this image path")
    r.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required: " + ", ".join(
                ("train", "quantize", "encode", "decode", "trace-gen", "simulate", "report")))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, cs.FormatError, inf.ShapeError, EnergyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
