"""End-to-end experiments: windows -> similarity -> clusters -> sharing -> EWMA -> metrics."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import privacy
from .collab import ClusteringSpec, Strategy, cluster, o2o_plain, share
from .collab.sharing import pair_partners
from .errors import ConfigError, CPBError, DataError
from .forecast import SharedPool, predict
from .ingest import (
    EventLog,
    OrgDataset,
    SynthConfig,
    Window,
    build_windows,
    read_dshield,
    read_events,
    select_contributors,
    synthesize_logs,
)
from .metrics import METRICS, TABLE_COLUMNS, aggregate, confusion, derive, table_row

log = logging.getLogger(__name__)

PRIVACY_MODES = ("plaintext-oracle", "prp-sim", "networked")


@dataclass
class ExperimentConfig:
    """Every experiment parameter; serializes to flat ``key = value`` text."""

    source: str = "synth"  # "synth" or a file path
    source_format: str = "events"  # events | dshield
    separator: str = "\t"
    seed: int = 0
    synth_orgs: int = 70
    synth_days: int = 15
    synth_events: int = 4000
    synth_unique: int = 600
    synth_clusters: int = 7
    synth_noise: float = 0.3
    synth_intermittent: int = 0
    synth_active_days: int = 8
    select: bool = False
    train_len: int = 5
    test_len: int = 1
    alpha: float = 0.9
    tau: float = 0.5
    signal: str = "presence"  # presence | count
    strategy: str = "intersection"
    clustering: str = "kmeans"
    k: int = 5
    threshold_pct: float = 40.0
    heavy_hitters: int = 1000
    k_rec: int = 50
    granularity: str = "prefix"  # prefix | element
    mutual: bool = False
    privacy_mode: str = "plaintext-oracle"
    aggregate_over: str = "collaborators"  # collaborators | all
    per_window: bool = False

    def validate(self) -> None:
        if self.source_format not in ("events", "dshield"):
            raise ConfigError(f"source_format must be events or dshield, not {self.source_format!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if self.signal not in ("presence", "count"):
            raise ConfigError("signal must be presence or count")
        if self.granularity not in ("prefix", "element"):
            raise ConfigError("granularity must be prefix or element")
        if self.privacy_mode not in PRIVACY_MODES:
            raise ConfigError(f"privacy_mode must be one of {PRIVACY_MODES}")
        if self.aggregate_over not in ("collaborators", "all"):
            raise ConfigError("aggregate_over must be collaborators or all")
        if self.heavy_hitters < 1 or self.k_rec < 1:
            raise ConfigError("heavy_hitters and k_rec must be positive")
        strategy = Strategy.parse(self.strategy)
        self.clustering_spec()
        if self.privacy_mode != "plaintext-oracle":
            if not strategy.uses_clusters:
                raise ConfigError(f"{strategy} runs pairwise and has no STA round; use plaintext-oracle")
            if "intersection" in strategy.name and self.granularity != "element":
                raise ConfigError("the PRP protocol shares matched (prefix, day) elements; set granularity = element")

    def clustering_spec(self) -> ClusteringSpec:
        return ClusteringSpec(self.clustering, self.k, self.threshold_pct, sub_seed(self.seed, "clustering"))

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_orgs=self.synth_orgs,
            n_days=self.synth_days,
            events_per_day=self.synth_events,
            unique_per_day=self.synth_unique,
            n_victim_clusters=self.synth_clusters,
            noise_rate=self.synth_noise,
            n_intermittent=self.synth_intermittent,
            active_days=self.synth_active_days,
        )

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, str):
                v = v.encode("unicode_escape").decode("ascii")
                # the reader strips whitespace around values, so protect edge spaces
                core = v.strip(" ")
                lead = len(v) - len(v.lstrip(" "))
                trail = len(v) - len(v.rstrip(" ")) if core else 0
                v = "\\x20" * lead + core + "\\x20" * trail
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ConfigError(f"config line {n}: unknown or malformed entry {raw!r}")
            values[key] = _coerce(key, types[key], value)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key: str, typ: str, value: str):
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"config {key}: cannot parse {value!r} as {typ}") from exc
    return value.encode("ascii", "backslashreplace").decode("unicode_escape")


def sub_seed(master: int, name: str) -> int:
    """Stable named seed derived from the master seed."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def load_events(config: ExperimentConfig) -> EventLog:
    if config.source == "synth":
        return synthesize_logs(config.synth_config(), sub_seed(config.seed, "synth"))
    path = Path(config.source)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    if config.source_format == "dshield":
        events, stats = read_dshield(path, config.separator)
        log.info("parsed %d lines: %d events, %d skipped, %d malformed", stats.lines, stats.events, stats.skipped, stats.malformed)
        return events
    return read_events(path)


def prepare_windows(config: ExperimentConfig, events: EventLog | None = None) -> list[Window]:
    """Load (or take) events, optionally select contributors, cut sliding windows."""
    config.validate()
    events = load_events(config) if events is None else events
    if len(events) == 0:
        raise DataError("no events to analyse")
    if config.select:
        orgs = select_contributors(events)
    else:
        orgs = list(events.orgs)
    events = events.restrict(sorted(orgs))
    return build_windows(events, config.train_len, config.test_len)


@dataclass
class WindowState:
    """Per-window data shared by every clustering/strategy cell."""

    index: int
    window: Window
    datasets: dict[str, OrgDataset]
    tests: dict[str, np.ndarray]
    baseline: dict[str, object]
    _similarity: dict = field(default_factory=dict)
    _rounds: dict = field(default_factory=dict)


def _window_state(i: int, w: Window, config: ExperimentConfig) -> WindowState:
    orgs = sorted(w.train)
    datasets = {o: w.train[o] for o in orgs}
    tests = {o: w.test[o].prefixes() for o in orgs}
    baseline = {}
    for o in orgs:
        pred = predict(datasets[o], None, w.spec, config.alpha, config.tau, config.signal)
        baseline[o] = confusion(pred, tests[o])
    return WindowState(i, w, datasets, tests, baseline)


def _similarity_and_assignment(ws: WindowState, config: ExperimentConfig):
    spec = config.clustering_spec()
    cache_key = (config.privacy_mode, spec)
    if cache_key in ws._rounds:
        return ws._rounds[cache_key]
    round_pools = None
    if config.privacy_mode == "plaintext-oracle":
        if config.signal not in ws._similarity:
            ws._similarity[config.signal] = o2o_plain(ws.datasets, config.signal)
        sim = ws._similarity[config.signal]
        assignment = cluster(sim, spec)
    elif config.privacy_mode == "prp-sim":
        result = privacy.simulate_round(ws.datasets, spec, config.signal)
        sim, assignment, round_pools = result.o2o, result.assignment, result.pools
    else:
        from .stanet import run_networked_round

        key = privacy.generate_key()
        sta, outcomes = run_networked_round(ws.datasets, spec, key, config.signal, round_id=ws.index)
        if sta.phase != "delivered":
            raise DataError(f"window {ws.index}: STA round {sta.phase}")
        sim, assignment = sta.o2o, sta.assignment
        round_pools = {o: outcomes[o].pool for o in ws.datasets}
    ws._rounds[cache_key] = (sim, assignment, round_pools)
    return ws._rounds[cache_key]


def _pools(ws: WindowState, config: ExperimentConfig, strategy: Strategy, sim, assignment, round_pools):
    kw = dict(
        granularity=config.granularity,
        mode=config.signal,
        top=config.heavy_hitters,
        k_rec=config.k_rec,
        mutual=config.mutual,
    )
    if round_pools is None or "intersection" not in strategy.name:
        return share(strategy, assignment, ws.datasets, sim, **kw)
    # intersection part comes out of the PRP round; IP2IP stays plaintext within the cluster
    if strategy.name == "intersection":
        return dict(round_pools)
    ip = share("ip2ip", assignment, ws.datasets, sim, **kw)
    return {o: SharedPool.concat(o, [ip[o], round_pools[o]]) for o in ws.datasets}


def _group_info(config, strategy, sim, assignment, orgs):
    """Collaborator flags, peer counts and average group size for one window."""
    if strategy.uses_clusters:
        collab = {o: assignment.is_collaborator(o) for o in orgs}
        peers = {o: len(assignment.peers(o)) for o in orgs}
        return collab, peers, assignment.avg_size(), assignment.degenerate
    partners = pair_partners(sim, strategy, config.mutual)
    collab = {o: bool(partners[o]) for o in orgs}
    peers = {o: len(partners[o]) for o in orgs}
    sizes = [n + 1 for n in peers.values() if n]
    return collab, peers, float(np.mean(sizes)) if sizes else 0.0, not sizes


def _run_cell(states: Sequence[WindowState], config: ExperimentConfig):
    strategy = Strategy.parse(config.strategy)
    rows, sizes, degenerate = [], [], []
    for ws in states:
        try:
            sim, assignment, round_pools = _similarity_and_assignment(ws, config)
            pools = _pools(ws, config, strategy, sim, assignment, round_pools)
            collab, peers, avg_size, degen = _group_info(config, strategy, sim, assignment, list(ws.datasets))
        except CPBError as exc:
            raise type(exc)(f"window {ws.index} ({ws.window.spec.label}): {exc}") from exc
        sizes.append(avg_size)
        degenerate.append(degen)
        spec = ws.window.spec
        for o, d in ws.datasets.items():
            pred = predict(d, pools[o], spec, config.alpha, config.tau, config.signal)
            conf = confusion(pred, ws.tests[o])
            base = ws.baseline[o]
            rep = derive(conf, base)
            rows.append(
                {
                    "strategy": str(strategy),
                    "clustering": config.clustering,
                    "k": config.k,
                    "tau": config.tau,
                    "alpha": config.alpha,
                    "threshold_pct": config.threshold_pct,
                    "privacy_mode": config.privacy_mode,
                    "window": ws.index,
                    "test_day": spec.test_day,
                    "org": o,
                    "collaborator": int(collab[o]),
                    "n_peers": peers[o],
                    "shared_events": pools[o].size(),
                    "tp": conf.tp,
                    "fp": conf.fp,
                    "fn": conf.fn,
                    "tn": conf.tn,
                    "unreachable": conf.unreachable,
                    "base_tp": base.tp,
                    "base_fp": base.fp,
                    "base_fn": base.fn,
                    "base_tn": base.tn,
                    **rep.as_dict(),
                }
            )
    return rows, sizes, degenerate


def summarize(rows: Sequence[dict], config: ExperimentConfig, sizes, degenerate) -> list[dict]:
    """Summary rows (one, or one per window with ``per_window``)."""
    groups: dict = {}
    for r in rows:
        if config.aggregate_over == "collaborators" and not r["collaborator"]:
            continue
        gk = r["window"] if config.per_window else "all"
        groups.setdefault(gk, []).append(r)
    keys = sorted({r["window"] for r in rows}) if config.per_window else ["all"]
    out = []
    for gk in keys:
        members = groups.get(gk, [])
        agg = aggregate(members)
        row = {
            "strategy": str(Strategy.parse(config.strategy)),
            "clustering": config.clustering,
            "k": config.k,
            "tau": config.tau,
            "alpha": config.alpha,
            "threshold_pct": config.threshold_pct,
            "window": gk,
            "avg_size": float(np.mean(sizes if gk == "all" else [sizes[gk]])) if sizes else 0.0,
            "n_collab": len(members),
            "degenerate": int(all(degenerate) if gk == "all" else degenerate[gk]),
        }
        for m in METRICS:
            s = agg[m]
            row[f"{m}_mean"] = None if s is None else s.mean
            row[f"{m}_std"] = None if s is None else s.std
            row[f"{m}_n"] = 0 if s is None else s.n
            row[f"{m}_excluded"] = sum(1 for r in members if r[m] is None)
        row["_table"] = table_row(config.clustering, config.k, row["avg_size"], len(members), agg)
        out.append(row)
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    summary: list[dict]

    def table(self) -> list[dict]:
        return [s["_table"] for s in self.summary]


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = [c for c in rows[0] if not c.startswith("_")] if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _cell(r.get(c)) for c in columns})


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return v


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    windows: Sequence[Window] | None = None,
) -> ExperimentResult:
    """Run one (strategy, clustering, k) configuration over every window.

    Writes ``results.csv``, ``summary.csv`` (table-shaped),
    ``summary_full.csv`` and ``config.txt`` when ``out_dir`` is given.
    """
    config.validate()
    windows = prepare_windows(config) if windows is None else windows
    states = [_window_state(i, w, config) for i, w in enumerate(windows)]
    try:
        rows, sizes, degenerate = _run_cell(states, config)
    except CPBError as exc:
        raise type(exc)(f"{exc} (while running {config.strategy}/{config.clustering} k={config.k})") from exc
    summary = summarize(rows, config, sizes, degenerate)
    result = ExperimentResult(config, rows, summary)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        _write_csv(out / "results.csv", rows)
        _write_csv(out / "summary.csv", result.table(), TABLE_COLUMNS)
        _write_csv(out / "summary_full.csv", summary)
    return result


SWEEP_STRATEGIES = ("local", "global", "intersection", "ip2ip", "ip2ip+intersection")


def sweep(
    base: ExperimentConfig,
    clusterings: Iterable[str] = ("agglomerative", "kmeans", "knn"),
    strategies: Iterable[str] = SWEEP_STRATEGIES,
    ks: Iterable[int] = (1, 5, 10, 15, 20, 25, 30, 35),
    out_dir: str | Path | None = None,
    windows: Sequence[Window] | None = None,
) -> list[dict]:
    """Grid over clustering x strategy x k; one summary row per cell.

    Ingestion, windows, baselines and per-(clustering, k) similarity and
    assignments are computed once and shared by the strategies. A failing
    cell is recorded with its error and the sweep continues.
    """
    base.validate()
    windows = prepare_windows(base) if windows is None else windows
    states = [_window_state(i, w, base) for i, w in enumerate(windows)]
    summary = []
    for method in clusterings:
        for k in ks:
            for strat in strategies:
                cfg = base.replace(clustering=method, k=k, strategy=strat)
                try:
                    cfg.validate()
                    rows, sizes, degenerate = _run_cell(states, cfg)
                    row = summarize(rows, cfg.replace(per_window=False), sizes, degenerate)[0]
                    row["status"] = "ok"
                except CPBError as exc:
                    row = {"strategy": strat, "clustering": method, "k": k, "status": f"error: {exc}"}
                summary.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(base.to_text())
        columns = ["status"] + [c for c in next((r for r in summary if r["status"] == "ok"), summary[0]) if not c.startswith("_") and c != "status"]
        _write_csv(out / "sweep_summary.csv", summary, columns)
        for strat in strategies:
            name = str(strat).replace("+", "_").replace(":", "_")
            tables = [r["_table"] for r in summary if r.get("strategy") == str(Strategy.parse(strat)) and "_table" in r]
            _write_csv(out / f"table_{name}.csv", tables, TABLE_COLUMNS)
    return summary


@dataclass
class BenchReport:
    n_orgs: int
    set_size: int
    encrypt_seconds_median: float
    upload_bytes: int  # framed HELLO + UPLOAD of the first organization
    upload_bytes_all: list[int]
    sta_compute_seconds: float
    sta_received_bytes: int
    buffer_bytes: int

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("upload_bytes_all")
        return d


def bench_datasets(n: int, set_size: int, seed: int = 0, days: int = 5, overlap: float = 0.2) -> dict[str, OrgDataset]:
    """Synthetic fixed-size sets; a fraction ``overlap`` comes from a shared pool."""
    rng = np.random.default_rng(seed)
    day0 = 16572
    shared = rng.integers(1 << 16, 1 << 23, size=set_size)
    out = {}
    for i in range(n):
        n_shared = int(set_size * overlap)
        prefix = np.concatenate([rng.choice(shared, n_shared, replace=False), rng.integers(1 << 16, 1 << 23, size=set_size - n_shared)])
        day = rng.integers(day0, day0 + days, size=set_size)
        keys = np.unique((prefix.astype(np.int64) << 16) | day)
        while len(keys) < set_size:
            extra = (rng.integers(1 << 16, 1 << 23, size=set_size - len(keys)).astype(np.int64) << 16) | day0
            keys = np.unique(np.concatenate([keys, extra]))
        keys = keys[:set_size]
        name = f"org{i:05d}"
        out[name] = OrgDataset(name, keys >> 16, keys & 0xFFFF, np.ones(set_size, dtype=np.int64))
    return out


def bench_protocol(n: int, set_size: int, seed: int = 0, spec: ClusteringSpec | None = None) -> BenchReport:
    """Time and size one PRP round at the message level (no sockets)."""
    from .stanet import buffers_body, encode_message, upload_message

    datasets = bench_datasets(n, set_size, seed)
    key = privacy.generate_key()
    spec = spec or ClusteringSpec("kmeans", min(5, n), 40.0, seed)
    enc_times, uploads, up_bytes = [], [], []
    for o, d in datasets.items():
        t0 = time.perf_counter()
        e = privacy.encrypt_dataset(d, key)
        enc_times.append(time.perf_counter() - t0)
        u = e.upload()
        uploads.append(u)
        up_bytes.append(len(encode_message("HELLO", 0, org=o)) + len(upload_message(u, 0)))
    t0 = time.perf_counter()
    outcome = privacy.sta_round(uploads, spec)
    sta_t = time.perf_counter() - t0
    buf_bytes = sum(
        len(encode_message("BUFFERS", 0, org=o, buffers=buffers_body(outcome.deliveries[o]))) for o in datasets
    )
    return BenchReport(n, set_size, statistics.median(enc_times), up_bytes[0], up_bytes, sta_t, sum(up_bytes), buf_bytes)
