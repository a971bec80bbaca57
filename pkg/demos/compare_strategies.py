"""Compare sharing strategies on a synthetic corpus with planted clusters.

Run: python demos/compare_strategies.py [out_dir]
"""
import sys

from cpb.harness import ExperimentConfig, prepare_windows, run_experiment

base = ExperimentConfig(seed=3, synth_orgs=30, synth_days=9, synth_clusters=4, k=4)
windows = prepare_windows(base)
print(f"{len(windows)} windows over {base.synth_orgs} organizations\n")

print(f"{'strategy':<22}{'tpr':>7}{'tp gain':>9}{'fp gain':>9}{'avg size':>10}")
for strategy in ("local", "global", "intersection", "ip2ip", "ip2ip+intersection"):
    res = run_experiment(base.replace(strategy=strategy), windows=windows)
    s = res.summary[0]
    fmt = lambda v: "NA" if v is None else f"{v:.3f}"
    print(f"{strategy:<22}{fmt(s['tpr_mean']):>7}{fmt(s['tp_impr_mean']):>9}{fmt(s['fp_incr_mean']):>9}{s['avg_size']:>10}")

if len(sys.argv) > 1:
    run_experiment(base, sys.argv[1], windows=windows)
    print(f"\nintersection run written to {sys.argv[1]}")
