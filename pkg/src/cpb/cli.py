"""Command-line entry point (``cpb``).

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 protocol error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, CPBError, DataError, ProtocolError
from .harness import ExperimentConfig, bench_protocol, run_experiment, sweep
from .ingest import (
    read_dshield,
    read_events,
    select_contributors,
    synthesize_logs,
    write_dshield,
    write_events,
)

log = logging.getLogger("cpb")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if overrides:
        text = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = ExperimentConfig.from_text(text)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def _read_key(path: str) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read key file {path}: {exc}") from exc
    text = raw.strip()
    if len(text) == 32:
        try:
            return bytes.fromhex(text.decode("ascii"))
        except (ValueError, UnicodeDecodeError):
            pass
    if len(raw) == 16:
        return raw
    raise ConfigError("key file must hold 16 raw bytes or 32 hex characters")


def cmd_ingest(args) -> None:
    events, stats = read_dshield(args.input, args.sep)
    if args.select:
        events = events.restrict(select_contributors(events))
    write_events(events, args.output)
    print(
        f"lines={stats.lines} events={stats.events} skipped={stats.skipped} "
        f"malformed={stats.malformed} orgs={len(events.orgs)} rows={len(events.org)}"
    )


def cmd_synth(args) -> None:
    cfg = _load_config(args)
    from .harness import sub_seed

    events = synthesize_logs(cfg.synth_config(), sub_seed(cfg.seed, "synth"))
    if args.format == "dshield":
        write_dshield(events, args.output, sub_seed(cfg.seed, "dshield"))
    else:
        write_events(events, args.output)
    print(f"orgs={len(events.orgs)} days={len(events.days)} events={len(events)}")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> None:
    cfg = _load_config(args)
    result = run_experiment(cfg, _out_dir(args))
    for row in result.table():
        print(", ".join(f"{k}={v}" for k, v in row.items()))


def cmd_sweep(args) -> None:
    cfg = _load_config(args)
    rows = sweep(
        cfg,
        clusterings=_csv_list(args.clusterings),
        strategies=_csv_list(args.strategies),
        ks=_csv_list(args.ks, int),
        out_dir=_out_dir(args),
    )
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"cells={len(rows)} failed={failed} out={args.out_dir}")


def cmd_bench(args) -> None:
    out = _out_dir(args)
    reports = []
    for size in _csv_list(args.set_size, int):
        for n in _csv_list(args.orgs, int):
            rep = bench_protocol(n, size, seed=args.seed or 0)
            reports.append(rep.as_dict())
            print(json.dumps(rep.as_dict()))
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(reports[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(reports)


def cmd_serve_sta(args) -> None:
    from .collab import ClusteringSpec
    from .stanet import StaConfig, StaServer

    host, port = _addr(args.listen)
    expected = int(args.orgs) if args.orgs.isdigit() else sorted(_csv_list(args.orgs))
    spec = ClusteringSpec(args.clustering, args.k, args.threshold_pct, args.round_seed)
    server = StaServer(
        StaConfig(host, port, expected, spec, args.timeout, args.round, transcript_path=args.transcript)
    ).start()
    print(f"listening {host}:{server.port}", flush=True)
    result = server.result()
    if result.phase != "delivered":
        raise ProtocolError(f"round {args.round} {result.phase}")
    a = result.assignment
    print(json.dumps({"phase": result.phase, "orgs": list(a.orgs), "assignment": a.rows(), "o2o": result.o2o.cells.tolist()}))


def cmd_run_org(args) -> None:
    from .ingest import WindowSpec, org_datasets
    from .stanet import OrgConfig, run_org

    key = _read_key(args.key)
    events = read_events(args.dataset)
    if args.org not in events.orgs:
        raise DataError(f"{args.org} has no rows in {args.dataset}")
    events = events.restrict([args.org])
    days = events.days
    if args.days:
        lo, _, hi = args.days.partition(":")
        days = tuple(range(int(lo), int(hi) + 1))
    if not days:
        raise DataError(f"{args.org} has no events")
    dataset = org_datasets(events, days)[args.org]
    outcome = run_org(
        OrgConfig(_addr(args.sta), args.org, dataset, key, args.round, args.signal, timeout=args.timeout)
    )
    if outcome.phase != "delivered":
        raise ProtocolError(f"{args.org}: round {outcome.phase}")
    print(
        json.dumps(
            {"org": args.org, "cluster": outcome.cluster, "peers": list(outcome.peers), "outlier": outcome.outlier, "shared": len(outcome.pool)}
        )
    )
    if args.out_dir:
        out = _out_dir(args)
        with open(out / f"pool_{args.org}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["prefix", "day", "source", "count"])
            w.writerows(outcome.pool.records())
    if args.predict:
        from .forecast import predict

        spec = WindowSpec(tuple(days), (days[-1] + 1,))
        pred = predict(dataset, outcome.pool, spec, mode=args.signal)
        print(f"blacklist={len(pred.blacklist)}")


def cmd_keygen(args) -> None:
    from .privacy import generate_key

    Path(args.output).write_text(generate_key().hex() + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpb", description="Collaborative predictive blacklisting")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key = value experiment config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if out_required is not None:
            sp.add_argument("--out-dir", required=out_required, default=None)

    sp = sub.add_parser("ingest", help="parse DShield logs into the canonical event file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--sep", default="\t")
    sp.add_argument("--select", action="store_true", help="keep only the selected contributors")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="write synthetic planted-structure logs")
    common(sp, out_required=None)
    sp.add_argument("--format", choices=("events", "dshield"), default="events")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("run", help="run one experiment over all windows")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="grid over clusterings, strategies and k")
    common(sp)
    sp.add_argument("--clusterings", default="agglomerative,kmeans,knn")
    sp.add_argument("--strategies", default="local,global,intersection,ip2ip,ip2ip+intersection")
    sp.add_argument("--ks", default="1,5,10,15,20,25,30,35")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="protocol cost at the message level")
    sp.add_argument("--orgs", default="10,100")
    sp.add_argument("--set-size", default="4000")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config", help="unused; accepted for uniformity")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("serve-sta", help="run one STA round over TCP")
    sp.add_argument("--listen", default="127.0.0.1:0")
    sp.add_argument("--orgs", required=True, help="expected org ids (comma list) or a count")
    sp.add_argument("--timeout", type=float, default=60.0)
    sp.add_argument("--clustering", default="kmeans")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--threshold-pct", type=float, default=40.0)
    sp.add_argument("--round-seed", type=int, default=0)
    sp.add_argument("--round", type=int, default=0)
    sp.add_argument("--transcript", help="append received frames as hex lines")
    sp.set_defaults(func=cmd_serve_sta)

    sp = sub.add_parser("run-org", help="take part in one STA round as an organization")
    sp.add_argument("--sta", required=True, help="host:port")
    sp.add_argument("--org", required=True)
    sp.add_argument("--key", required=True, help="shared key file (hex)")
    sp.add_argument("--days", help="training days as FIRST:LAST epoch days")
    sp.add_argument("--round", type=int, default=0)
    sp.add_argument("--signal", default="presence", choices=("presence", "count"))
    sp.add_argument("--timeout", type=float, default=60.0)
    sp.add_argument("--predict", action="store_true", help="also print the blacklist size")
    sp.add_argument("--out-dir")
    sp.add_argument("dataset", help="canonical event file")
    sp.set_defaults(func=cmd_run_org)

    sp = sub.add_parser("keygen", help="write a fresh shared key")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_keygen)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CPBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
