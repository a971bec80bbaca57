"""How upload size and authority work scale with members and set size."""
from cpb.harness import bench_protocol

print(f"{'orgs':>5}{'set':>7}{'upload KiB':>12}{'encrypt s':>11}{'sta s':>8}")
for n, size in [(4, 1000), (8, 1000), (16, 1000), (8, 4000)]:
    r = bench_protocol(n, size)
    print(f"{n:>5}{size:>7}{r.upload_bytes / 1024:>12.1f}{r.encrypt_seconds_median:>11.3f}{r.sta_compute_seconds:>8.3f}")
