from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpb.collab import (
    ClusteringSpec,
    SimilarityMatrix,
    Strategy,
    cluster,
    cluster_agglomerative,
    cluster_kmeans,
    cluster_knn,
    correlate_attackers,
    heavy_hitters,
    intersection_events,
    o2o_plain,
    pair_partners,
    share,
)
from cpb.errors import ConfigError
from cpb.ingest import OrgDataset

records = st.lists(st.tuples(st.integers(0, 30), st.integers(0, 3), st.integers(1, 8)), max_size=25)


def _ds(name, recs):
    return OrgDataset.from_records(name, recs)


def _multiset(recs, mode):
    c = Counter()
    for p, d, n in recs:
        c[(p, d)] += n
    return c if mode == "count" else Counter(dict.fromkeys(c, 1))


@settings(max_examples=100, deadline=None)
@given(st.lists(records, min_size=1, max_size=5), st.sampled_from(["presence", "count"]))
def test_o2o_matches_counter_intersection(all_recs, mode):
    ds = [_ds(f"o{i}", r) for i, r in enumerate(all_recs)]
    m = o2o_plain(ds, mode)
    for i, j in combinations(range(len(ds)), 2):
        expect = sum((_multiset(all_recs[i], mode) & _multiset(all_recs[j], mode)).values())
        assert m.cells[i, j] == m.cells[j, i] == expect
    for i in range(len(ds)):
        assert m.cells[i, i] == sum(_multiset(all_recs[i], mode).values())


def test_normalized_distance_by_hand():
    m = SimilarityMatrix(("a", "b", "c"), [[10, 5, 0], [5, 4, 2], [0, 2, 0]])
    d = m.normalized_distance()
    assert d[0, 1] == 0.0  # clipped: cell exceeds the smaller diagonal
    assert d[1, 2] == 1.0  # c is empty
    assert d[0, 0] == 0.0


def _blocks(sizes, inside=100, across=1, seed=0):
    rng = np.random.default_rng(seed)
    n = sum(sizes)
    cells = np.full((n, n), across, dtype=np.int64)
    start = 0
    for s in sizes:
        cells[start : start + s, start : start + s] = inside + rng.integers(0, 5, (s, s))
        start += s
    cells = np.triu(cells) + np.triu(cells, 1).T
    np.fill_diagonal(cells, 2 * inside)
    orgs = tuple(f"o{i:02d}" for i in range(n))
    truth = []
    start = 0
    for s in sizes:
        truth.append(frozenset(orgs[start : start + s]))
        start += s
    return SimilarityMatrix(orgs, cells), set(truth)


@pytest.mark.parametrize("method", ["kmeans", "agglomerative"])
def test_partitions_recover_blocks(method):
    m, truth = _blocks([4, 6, 5])
    a = cluster(m, ClusteringSpec(method, 3, threshold_pct=100, seed=3))
    assert set(a.members.values()) == truth
    assert not a.outliers


def test_knn_recovers_blocks():
    m, truth = _blocks([5, 5])
    a = cluster_knn(m, 4, threshold_pct=100)
    for group in truth:
        for o in group:
            assert a.neighbors[o] == group - {o}


def test_kmeans_outliers_follow_percentile():
    m, _ = _blocks([5, 5])
    a = cluster_kmeans(m, 2, threshold_pct=40, seed=0)
    n_out = len(a.outliers)
    assert 0 < n_out <= 6
    assert all(not a.is_collaborator(o) for o in a.outliers)
    assert all(a.peers(o) == frozenset() for o in a.outliers)


def test_kmeans_is_seeded():
    m, _ = _blocks([3, 3, 4], inside=20, across=10, seed=2)
    assert cluster_kmeans(m, 3, 40, seed=9).canonical() == cluster_kmeans(m, 3, 40, seed=9).canonical()


def test_knn_ties_take_lowest_index():
    cells = np.array([[9, 1, 1, 1], [1, 9, 1, 1], [1, 1, 9, 1], [1, 1, 1, 9]])
    a = cluster_knn(SimilarityMatrix(tuple("abcd"), cells), 2, threshold_pct=100)
    assert a.neighbors["a"] == {"b", "c"}
    assert a.neighbors["d"] == {"a", "b"}


def test_knn_percentile_prunes_far_links():
    cells = np.array([[10, 9, 1], [9, 10, 1], [1, 1, 10]])
    a = cluster_knn(SimilarityMatrix(tuple("abc"), cells), 1, threshold_pct=50)
    assert a.neighbors == {"a": {"b"}, "b": {"a"}, "c": frozenset()}
    assert not a.is_collaborator("c")


@pytest.mark.parametrize("k", [0, 4])
def test_knn_bad_k(k):
    with pytest.raises(ConfigError):
        cluster_knn(SimilarityMatrix(tuple("abcd"), np.eye(4, dtype=int)), k)


def _naive_average_linkage(D, k):
    clusters = [[i] for i in range(len(D))]
    while len(clusters) > k:
        best = None
        for x, y in combinations(range(len(clusters)), 2):
            d = np.mean([D[i, j] for i in clusters[x] for j in clusters[y]])
            if best is None or d < best[0]:
                best = (d, x, y)
        _, x, y = best
        clusters[x] += clusters.pop(y)
    return {frozenset(c) for c in clusters}


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), st.integers(0, 2**32 - 1))))
def test_agglomerative_matches_naive_average_linkage(args):
    n, k, seed = args
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, 10**6, (n, n))
    cells = np.triu(cells, 1) + np.triu(cells, 1).T
    np.fill_diagonal(cells, 10**6)
    m = SimilarityMatrix(tuple(range(n)), cells)
    got = {frozenset(ms) for ms in cluster_agglomerative(m, k).members.values()}
    assert got == _naive_average_linkage(m.normalized_distance(), k)


def test_agglomerative_k_equals_n_is_singletons():
    m, _ = _blocks([2, 2])
    a = cluster_agglomerative(m, 4)
    assert a.degenerate
    assert all(len(a.peers(o)) == 0 for o in m.orgs)


def test_heavy_hitters_order():
    a = _ds("a", [(5, 0, 3), (7, 0, 2), (9, 0, 3)])
    b = _ds("b", [(7, 1, 1)])
    assert heavy_hitters([a, b], top=2).tolist() == [5, 7]  # 5 and 7 and 9 all total 3
    assert heavy_hitters([a, b], top=3).tolist() == [5, 7, 9]


def test_ip2ip_recommends_co_occurring_unseen_prefixes():
    # prefixes 1 and 2 always hit the same victim on the same day; 3 is elsewhere
    a = _ds("a", [(1, 0, 1), (2, 0, 1), (1, 1, 1), (2, 1, 1)])
    b = _ds("b", [(1, 2, 1), (3, 3, 1)])
    c = _ds("c", [(2, 2, 1)])
    rec = correlate_attackers([a, b, c], days=[0, 1, 2, 3], k_rec=1)
    assert rec["b"].tolist() == [2]
    assert rec["c"].tolist() == [1]
    assert rec["a"].tolist() == []  # 3 shares no victim-day with 1 or 2


def test_strategy_parsing():
    assert str(Strategy.parse("pair-global:3")) == "pair-global:3"
    assert Strategy.parse("pair-local:2").param == 2
    for bad in ("nope", "pair-global", "pair-global:0", "pair-local:1.5", "global:3"):
        with pytest.raises(ConfigError):
            Strategy.parse(bad)


def _three():
    a = _ds("a", [(1, 0, 1), (2, 1, 2)])
    b = _ds("b", [(1, 1, 4), (2, 1, 1), (3, 0, 1)])
    c = _ds("c", [(9, 0, 1)])
    return {"a": a, "b": b, "c": c}


def test_intersection_granularities():
    ds = _three()
    by_prefix = intersection_events(ds["a"], ds["b"], "prefix")
    assert by_prefix.records() == [(1, 1, "b", 4), (2, 1, "b", 1)]
    by_element = intersection_events(ds["a"], ds["b"], "element", "count")
    assert by_element.records() == [(2, 1, "b", 1)]
    assert intersection_events(ds["a"], ds["c"]).records() == []


def test_share_strategies():
    ds = _three()
    a = cluster(o2o_plain(ds), ClusteringSpec("agglomerative", 1))
    assert all(len(p) == 0 for p in share("local", a, ds).values())
    g = share("global", a, ds)
    assert g["c"].size() == ds["a"].size("count") + ds["b"].size("count")
    inter = share("intersection", a, ds)
    assert inter["c"].size() == 0
    assert {r[2] for r in inter["b"].records()} == {"a"}


def test_pair_global_takes_top_percent_of_pairs():
    cells = np.array([[9, 5, 1, 0], [5, 9, 2, 3], [1, 2, 9, 4], [0, 3, 4, 9]])
    m = SimilarityMatrix(tuple("abcd"), cells)
    # 6 pairs, 34% -> round(2.04) = 2 pairs: (a,b)=5 and (c,d)=4
    p = pair_partners(m, Strategy.parse("pair-global:34"))
    assert p == {"a": {"b"}, "b": {"a"}, "c": {"d"}, "d": {"c"}}


def test_pair_local_mutual():
    cells = np.array([[9, 5, 1], [5, 9, 6], [1, 6, 9]])
    m = SimilarityMatrix(tuple("abc"), cells)
    one_way = pair_partners(m, Strategy.parse("pair-local:1"))
    assert one_way == {"a": {"b"}, "b": {"c"}, "c": {"b"}}
    mutual = pair_partners(m, Strategy.parse("pair-local:1"), mutual=True)
    assert mutual == {"a": set(), "b": {"c"}, "c": {"b"}}
