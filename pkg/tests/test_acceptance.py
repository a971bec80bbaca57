"""Acceptance checks. Each prints one PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -v``) or directly with
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import csv
import math
import statistics
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from cpb import privacy
from cpb.collab import ClusteringSpec, cluster_agglomerative, cluster_kmeans, cluster_knn, o2o_plain
from cpb.forecast import ewma_score
from cpb.harness import ExperimentConfig, bench_protocol, prepare_windows, run_experiment
from cpb.ingest import (
    OrgDataset,
    SynthConfig,
    org_datasets,
    read_dshield,
    select_contributors,
    synthesize_logs,
    write_dshield,
)
from cpb.metrics import TABLE_COLUMNS, Confusion, confusion, derive
from cpb.forecast import PredictionList
from cpb.stanet import run_networked_round

ONE_CLUSTER = ClusteringSpec("agglomerative", 1)


def report(number: int, title: str, ok: bool, detail: str) -> None:
    print(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}", flush=True)


# ----------------------------------------------------------------- 1


def _random_multisets(rng, big):
    n = int(rng.integers(2, 9))
    target = 10_000 if big else int(math.exp(rng.uniform(0, math.log(10_000))))
    keys = np.unique((rng.integers(1 << 16, 1 << 24, 2 * target).astype(np.int64) << 16) | rng.integers(16572, 16577, 2 * target))
    # about half as many distinct elements as the largest multiset, so orgs overlap heavily
    universe = keys[: max(1, target // 2)]
    out = {}
    for i in range(n):
        order = rng.permutation(len(universe))
        recs, total = [], 0
        for j in order:
            if total >= target:
                break
            c = int(min(rng.integers(1, 9), target - total))
            k = int(universe[j])
            recs.append((k >> 16, k & 0xFFFF, c))
            total += c
        out[f"o{i}"] = OrgDataset.from_records(f"o{i}", recs)
    return out


def _counter(d: OrgDataset) -> Counter:
    return Counter({(int(p), int(day)): int(c) for p, day, c in zip(d.prefix, d.day, d.count)})


def check_protocol_oracle(trials=200, seed=0):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    bad, largest = [], 0
    for t in range(trials):
        ds = _random_multisets(rng, big=t % 20 == 0)
        largest = max(largest, max(d.size("count") for d in ds.values()))
        res = privacy.simulate_round(ds, ONE_CLUSTER, "count")
        counters = {o: _counter(d) for o, d in ds.items()}
        orgs = sorted(ds)
        for i, a in enumerate(orgs):
            expect_pool = []
            for j, b in enumerate(orgs):
                inter = counters[a] & counters[b]
                if res.o2o.cells[i, j] != sum(inter.values()):
                    bad.append((t, "o2o", a, b))
                if a != b:
                    expect_pool += [(p, d, b, c) for (p, d), c in inter.items()]
            if res.pools[a].records() != sorted(expect_pool):
                bad.append((t, "pool", a))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 60
    return ok, f"{trials} trials, largest multiset {largest}, mismatches {len(bad)}, {elapsed:.1f}s (limit 60s)"


# ----------------------------------------------------------------- 2


def _direct(r, alpha):
    t = len(r)
    return math.fsum(alpha * (1 - alpha) ** (t - 1 - k) * r[k] for k in range(t))


def check_ewma(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst_const = worst_direct = worst_lin = 0.0
    recency_fail = 0
    for _ in range(n):
        alpha = float(rng.uniform(0.01, 0.99))
        t = int(rng.integers(1, 60))
        c = float(rng.uniform(0, 10))
        worst_const = max(worst_const, abs(ewma_score([c] * t, alpha) - c * (1 - (1 - alpha) ** t)))
        r = rng.random(t).tolist()
        worst_direct = max(worst_direct, abs(ewma_score(r, alpha) - _direct(r, alpha)))
        # recency: a unit event one day later scores strictly higher
        if t >= 2:
            i = int(rng.integers(0, t - 1))
            older, newer = [0.0] * t, [0.0] * t
            older[i], newer[i + 1] = 1.0, 1.0
            recency_fail += not ewma_score(newer, alpha) > ewma_score(older, alpha)
        a, b = rng.random(t).tolist(), rng.random(t).tolist()
        lam = float(rng.uniform(0, 3))
        worst_lin = max(worst_lin, abs(ewma_score([x + lam * y for x, y in zip(a, b)], alpha) - ewma_score(a, alpha) - lam * ewma_score(b, alpha)))
    ok = worst_const <= 1e-12 and worst_direct <= 1e-12 and worst_lin <= 1e-12 and recency_fail == 0
    return ok, (
        f"max |err| constant {worst_const:.1e}, direct {worst_direct:.1e}, linearity {worst_lin:.1e}; "
        f"recency violations {recency_fail}/{n}"
    )


# ----------------------------------------------------------------- 3


def check_metrics(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst_f1, nonzero, size_fail = 0.0, 0, 0
    for _ in range(n):
        c = Confusion(*(int(x) for x in rng.integers(0, 1000, 4)))
        r = derive(c, c)
        if r.ppv and r.tpr:
            worst_f1 = max(worst_f1, abs(r.f1 - 2 * r.ppv * r.tpr / (r.ppv + r.tpr)))
        nonzero += any(v not in (0.0, None) for v in (r.tp_impr, r.fp_incr, r.fn_incr))
        m = int(rng.integers(1, 200))
        pred = PredictionList("a", None, float(rng.uniform(0.05, 1)), np.arange(m, dtype=np.uint32), rng.random(m))
        conf = confusion(pred, rng.integers(0, 300, int(rng.integers(0, 100))))
        size_fail += conf.tp + conf.fp != len(pred.blacklist)
    ok = worst_f1 <= 1e-12 and nonzero == 0 and size_fail == 0
    return ok, f"max f1 err {worst_f1:.1e}; nonzero self-deltas {nonzero}; tp+fp != |blacklist| {size_fail}"


# ----------------------------------------------------------------- 4


def check_constant_cost():
    small = bench_protocol(10, 4000, seed=1)
    large = bench_protocol(100, 4000, seed=1)
    same_bytes = small.upload_bytes == large.upload_bytes and len(set(large.upload_bytes_all)) == 1
    ratio = max(small.encrypt_seconds_median, large.encrypt_seconds_median) / min(
        small.encrypt_seconds_median, large.encrypt_seconds_median
    )
    ok = same_bytes and ratio < 2
    return ok, (
        f"upload bytes n=10 {small.upload_bytes}, n=100 {large.upload_bytes}; "
        f"median encrypt {small.encrypt_seconds_median * 1e3:.1f}ms vs {large.encrypt_seconds_median * 1e3:.1f}ms (ratio {ratio:.2f}, limit 2)"
    )


# ----------------------------------------------------------------- 5


def check_directional(seeds=(0, 1, 2, 3, 4)):
    t0 = time.perf_counter()
    per_seed = []
    for s in seeds:
        base = ExperimentConfig(seed=s)
        windows = prepare_windows(base)
        assert len(windows) == 10
        means = {}
        for strat in ("global", "intersection"):
            summ = run_experiment(base.replace(strategy=strat), windows=windows).summary[0]
            means[strat] = (summ["tp_impr_mean"], summ["fp_incr_mean"])
        (g_tp, g_fp), (i_tp, i_fp) = means["global"], means["intersection"]
        per_seed.append((g_tp > i_tp, i_tp > 0, g_fp > i_fp, i_fp >= 0, g_tp, i_tp, g_fp, i_fp))
    holds = [sum(p[k] for p in per_seed) for k in range(4)]
    elapsed = time.perf_counter() - t0
    ok = all(h >= 4 for h in holds) and elapsed < 600
    mean = lambda k: statistics.fmean(p[k] for p in per_seed)  # noqa: E731
    return ok, (
        f"seeds holding tp(g>i) {holds[0]}/5, tp(i>0) {holds[1]}/5, fp(g>i) {holds[2]}/5, fp(i>=0) {holds[3]}/5; "
        f"mean tp_impr g={mean(4):.3f} i={mean(5):.3f}, fp_incr g={mean(6):.3f} i={mean(7):.3f}; {elapsed:.0f}s"
    )


# ----------------------------------------------------------------- 6


def check_clustering_recovery(seeds=range(10)):
    wins = {"kmeans": 0, "agglomerative": 0, "knn": 0}
    for s in seeds:
        ev, truth = synthesize_logs(SynthConfig(n_orgs=10, n_victim_clusters=2, noise_rate=0.0), s, return_truth=True)
        m = o2o_plain(org_datasets(ev, ev.days))
        planted = {frozenset(c) for c in truth.victim_clusters}
        size = len(truth.victim_clusters[0])
        km = cluster_kmeans(m, 2, threshold_pct=100, seed=s)
        ag = cluster_agglomerative(m, 2)
        kn = cluster_knn(m, size - 1, threshold_pct=100)
        wins["kmeans"] += {frozenset(v) for v in km.members.values()} == planted
        wins["agglomerative"] += {frozenset(v) for v in ag.members.values()} == planted
        wins["knn"] += all(kn.neighbors[o] == g - {o} for g in planted for o in g)
    n = len(list(seeds))
    ok = all(w == n for w in wins.values())
    return ok, ", ".join(f"{k} {w}/{n}" for k, w in wins.items())


# ----------------------------------------------------------------- 7


def _overlapping(rng, n):
    pool = [(int(p), int(d)) for p, d in zip(rng.integers(1 << 16, 1 << 17, 120), rng.integers(16572, 16575, 120))]
    out = {}
    for i in range(n):
        pick = rng.choice(len(pool), int(rng.integers(0, 60)), replace=False)
        out[f"org{i}"] = OrgDataset.from_records(f"org{i}", [(*pool[j], int(rng.integers(1, 4))) for j in pick])
    return out


def _specs(i, n, seed):
    return [
        ClusteringSpec("kmeans", 2, 40.0, seed),
        ClusteringSpec("agglomerative", 2),
        ClusteringSpec("knn", n - 1, 60.0),
    ][i % 3]


def check_cross_mode(instances=20, seed=0):
    rng = np.random.default_rng(seed)
    mismatches = []
    for t in range(instances):
        n = int(rng.integers(3, 7))
        mode = ("presence", "count")[t % 2]
        ds = _overlapping(rng, n)
        spec = _specs(t, n, t)
        key = privacy.generate_key()
        sta, outs = run_networked_round(ds, spec, key, mode, round_id=t, timeout=30)
        sim = privacy.simulate_round(ds, spec, mode, key=key)
        if sta.phase != "delivered":
            mismatches.append((t, sta.phase))
            continue
        if sta.o2o.cells.tobytes() != sim.o2o.cells.tobytes():
            mismatches.append((t, "o2o"))
        if sta.assignment.canonical() != sim.assignment.canonical():
            mismatches.append((t, "assignment"))
        for o in ds:
            if outs[o].pool.to_bytes() != sim.pools[o].to_bytes():
                mismatches.append((t, "pool", o))
    return not mismatches, f"{instances} instances, n in 3..6, mismatches {mismatches or 0}"


# ----------------------------------------------------------------- 8


def check_blindness(rounds=50, seed=1):
    rng = np.random.default_rng(seed)
    findings, scanned = [], 0
    for t in range(rounds):
        n = int(rng.integers(2, 6))
        ds = _overlapping(rng, n)
        key = privacy.generate_key()
        sta, _ = run_networked_round(ds, _specs(t, n, t), key, ("presence", "count")[t % 2], round_id=t, timeout=30)
        scanned += sum(len(f) for f in sta.transcript)
        findings += privacy.scan_transcript(sta.transcript, key, privacy.plaintext_elements(ds.values()))
    return not findings, f"{rounds} rounds, {scanned} STA-received bytes scanned, findings {len(findings)}"


# ----------------------------------------------------------------- 9


def check_pipeline_shape(workdir: Path):
    events = synthesize_logs(SynthConfig(n_orgs=110, events_per_day=150, unique_per_day=50, n_victim_clusters=10), 7)
    raw = workdir / "dshield.tsv"
    write_dshield(events, raw, seed=7)
    cfg = ExperimentConfig(source=str(raw), source_format="dshield", select=True, strategy="intersection")
    out = workdir / "run"
    res = run_experiment(cfg, out)
    parsed, _ = read_dshield(raw)
    chosen = select_contributors(parsed)
    windows = sorted({(r["window"], r["test_day"]) for r in res.rows})
    orgs = {r["org"] for r in res.rows}
    with open(out / "summary.csv") as fh:
        header = tuple(next(csv.reader(fh)))
    problems = []
    if len(chosen) != 70 or orgs != set(chosen):
        problems.append(f"{len(orgs)} contributors")
    if [w for w, _ in windows] != list(range(10)) or [d for _, d in windows] != list(range(16577, 16587)):
        problems.append(f"windows {windows}")
    if len(res.rows) != 70 * 10:
        problems.append(f"{len(res.rows)} rows")
    if header != TABLE_COLUMNS:
        problems.append(f"header {header}")
    return not problems, (
        f"{len(orgs)} contributors, {len(windows)} windows of 5+1 days, {len(res.rows)} result rows, "
        f"summary columns {','.join(header)}" + (f"; problems {problems}" if problems else "")
    )


CHECKS = [
    (1, "protocol equals plaintext oracle", check_protocol_oracle),
    (2, "EWMA correctness", check_ewma),
    (3, "metric identities", check_metrics),
    (4, "constant per-org protocol cost", check_constant_cost),
    (5, "directional collaboration effects", check_directional),
    (6, "clustering recovers planted groups", check_clustering_recovery),
    (7, "networked round equals simulation", check_cross_mode),
    (8, "STA sees no key or plaintext", check_blindness),
    (9, "pipeline shape on DShield-format input", check_pipeline_shape),
]


@pytest.mark.parametrize("number, title, check", CHECKS, ids=[f"criterion_{n}" for n, _, _ in CHECKS])
def test_criterion(number, title, check, tmp_path, capsys):
    ok, detail = check(tmp_path) if number == 9 else check()
    with capsys.disabled():
        print()
        report(number, title, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    for number, title, check in CHECKS:
        with tempfile.TemporaryDirectory() as tmp:
            ok, detail = check(Path(tmp)) if number == 9 else check()
        report(number, title, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
