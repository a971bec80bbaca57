"""One encrypted sharing round over localhost sockets.

Three organizations upload encrypted multisets, the authority clusters them
by intersection size without seeing any address, and each member decrypts
only what it shares with its cluster peers.
"""
from cpb import privacy, stanet
from cpb.collab import ClusteringSpec
from cpb.ingest import OrgDataset, format_prefix, parse_prefix

P = parse_prefix
datasets = {
    "alpha": OrgDataset.from_records("alpha", [(P("203.0.113.0"), 0, 1), (P("198.51.100.0"), 1, 1), (P("192.0.2.0"), 1, 1)]),
    "bravo": OrgDataset.from_records("bravo", [(P("203.0.113.0"), 0, 1), (P("198.51.100.0"), 1, 1)]),
    "charlie": OrgDataset.from_records("charlie", [(P("100.64.7.0"), 2, 1)]),
}
key = privacy.generate_key()
sta, outcomes = stanet.run_networked_round(datasets, ClusteringSpec("agglomerative", 2), key, timeout=20)

print("authority phase:", sta.phase)
print("intersection sizes:\n", sta.o2o.cells)
for org, out in outcomes.items():
    got = sorted({format_prefix(p) for p in out.pool.prefix.tolist()})
    print(f"{org:>8} peers={sorted(out.peers)} learned={got}")

leaks = privacy.scan_transcript(sta.transcript, key, privacy.plaintext_elements(datasets.values()))
print("plaintext found in authority transcript:", leaks or "none")
