import csv

import pytest
from hypothesis import given, settings, strategies as st

from cpb.errors import ConfigError
from cpb.harness import (
    ExperimentConfig,
    bench_protocol,
    prepare_windows,
    run_experiment,
    sub_seed,
    sweep,
)
from cpb.metrics import DELTAS, TABLE_COLUMNS

SMALL = ExperimentConfig(
    seed=11,
    synth_orgs=8,
    synth_days=8,
    synth_events=300,
    synth_unique=80,
    synth_clusters=2,
    synth_active_days=4,
    k=2,
)


@pytest.fixture(scope="module")
def small_windows():
    return prepare_windows(SMALL)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**40),
    st.floats(0.001, 0.999),
    st.floats(0, 2),
    st.sampled_from(["\t", ",", ";", " "]),
    st.booleans(),
    st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126, blacklist_characters="="), min_size=1, max_size=20),
)
def test_config_text_round_trip(seed, alpha, tau, sep, select, source):
    cfg = ExperimentConfig(seed=seed, alpha=alpha, tau=tau, separator=sep, select=select, source=source)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["nosuchkey = 1", "k = five", "select = maybe", "garbage"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


@pytest.mark.parametrize(
    "changes",
    [
        {"alpha": 1.0},
        {"strategy": "bogus"},
        {"clustering": "dbscan"},
        {"privacy_mode": "prp-sim"},  # intersection needs element granularity under PRP
        {"privacy_mode": "prp-sim", "strategy": "pair-local:2"},
        {"threshold_pct": 120.0},
    ],
)
def test_invalid_combinations(changes):
    with pytest.raises(ConfigError):
        SMALL.replace(**changes).validate()


def test_named_sub_seeds_differ():
    assert sub_seed(0, "synth") != sub_seed(0, "clustering")
    assert sub_seed(5, "synth") == sub_seed(5, "synth")


def test_local_strategy_has_zero_deltas(small_windows):
    res = run_experiment(SMALL.replace(strategy="local"), windows=small_windows)
    assert len(res.rows) == 8 * 3
    for r in res.rows:
        for m in DELTAS:
            assert r[m] in (0.0, None)
        assert (r["tp"], r["fp"], r["fn"], r["tn"]) == (r["base_tp"], r["base_fp"], r["base_fn"], r["base_tn"])


def test_baseline_matches_local_run(small_windows):
    local = run_experiment(SMALL.replace(strategy="local", aggregate_over="all"), windows=small_windows)
    shared = run_experiment(SMALL.replace(strategy="global"), windows=small_windows)
    base = {(r["window"], r["org"]): (r["tp"], r["fp"], r["fn"], r["tn"]) for r in local.rows}
    for r in shared.rows:
        assert (r["base_tp"], r["base_fp"], r["base_fn"], r["base_tn"]) == base[(r["window"], r["org"])]


def _strip(rows):
    return [{k: v for k, v in r.items() if k != "privacy_mode"} for r in rows]


@pytest.mark.parametrize("strategy", ["intersection", "ip2ip+intersection"])
def test_prp_sim_rows_equal_plaintext(small_windows, strategy):
    cfg = SMALL.replace(strategy=strategy, granularity="element")
    plain = run_experiment(cfg, windows=small_windows)
    prp = run_experiment(cfg.replace(privacy_mode="prp-sim"), windows=small_windows)
    assert _strip(prp.rows) == _strip(plain.rows)


def test_networked_rows_equal_plaintext(small_windows):
    cfg = SMALL.replace(granularity="element")
    plain = run_experiment(cfg, windows=small_windows[:2])
    net = run_experiment(cfg.replace(privacy_mode="networked"), windows=small_windows[:2])
    assert _strip(net.rows) == _strip(plain.rows)


def test_outputs_are_deterministic(tmp_path):
    cfg = SMALL.replace(strategy="ip2ip+intersection")
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("results.csv", "summary.csv", "summary_full.csv", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "summary.csv") as fh:
        assert tuple(next(csv.reader(fh))) == TABLE_COLUMNS
    assert ExperimentConfig.load(tmp_path / "a" / "config.txt") == cfg


def test_per_window_summary(small_windows):
    res = run_experiment(SMALL.replace(per_window=True), windows=small_windows)
    assert [s["window"] for s in res.summary] == [0, 1, 2]


def test_sweep_grid_cardinality(tmp_path):
    base = SMALL.replace(synth_orgs=40, synth_days=6, synth_events=120, synth_unique=40, synth_clusters=4)
    rows = sweep(base, out_dir=tmp_path)
    assert len(rows) == 3 * 5 * 8
    assert all(r["status"] == "ok" for r in rows)
    for strat in ("local", "global", "intersection", "ip2ip", "ip2ip_intersection"):
        with open(tmp_path / f"table_{strat}.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 3 * 8


def test_sweep_flags_degenerate_and_records_failures(tmp_path):
    base = SMALL.replace(synth_orgs=6, synth_clusters=2)
    rows = sweep(base, clusterings=["agglomerative", "knn"], strategies=["global"], ks=[2, 6], out_dir=tmp_path / "a")
    by = {(r["clustering"], r["k"]): r for r in rows}
    assert by[("agglomerative", 6)]["degenerate"] == 1
    assert by[("agglomerative", 2)]["degenerate"] == 0
    assert by[("knn", 6)]["status"].startswith("error")
    assert by[("knn", 2)]["status"] == "ok"
    sweep(base, clusterings=["agglomerative", "knn"], strategies=["global"], ks=[2, 6], out_dir=tmp_path / "b")
    for f in ("sweep_summary.csv", "table_global.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_bench_upload_bytes():
    a = bench_protocol(4, 500)
    b = bench_protocol(8, 500)
    c = bench_protocol(4, 1000)
    assert a.upload_bytes == b.upload_bytes
    assert len(set(b.upload_bytes_all)) == 1
    assert abs(c.upload_bytes / a.upload_bytes - 2) < 0.01
    assert b.sta_received_bytes == 2 * a.sta_received_bytes
