"""Budgeted bit-width allocation: exact DP against brute force.

A small synthetic sensitivity profile makes the trade-off visible:
sensitive clusters buy more bits, cheap clusters pay for them, and the
dynamic program matches exhaustive enumeration exactly.
"""

import numpy as np

import quantsep.alloc as alloc
from quantsep.sensitivity import SensitivityProfile

counts = [3000, 1200, 150, 600, 60]
labels = ["proj", "conv_a", "dconv", "head", "tiny"]
# per-cluster sensitivity curves: the head and the depthwise conv hurt
# badly below 8 bits, the projection barely notices 2 bits
curves = {
    "proj": [0.8, 0.5, 0.45, 0.44],
    "conv_a": [6.0, 2.0, 0.5, 0.4],
    "dconv": [30.0, 9.0, 0.6, 0.05],
    "head": [80.0, 22.0, 1.0, 0.1],
    "tiny": [12.0, 4.0, 0.5, 0.02],
}
omega = {
    lab: {n: float(v) for n, v in zip((2, 4, 8, 16), curves[lab])} for lab in labels
}

profile = SensitivityProfile(
    metric="Hes", granularity="sublayer", candidates=[2, 4, 8, 16],
    clusters=list(zip(labels, counts)), omega=omega, traces={}, m=0, seed=0,
    probe_fingerprint="demo", checkpoint_sha256="",
)

print(f"{'budget':>6} | " + " ".join(f"{lab:>7}" for lab in labels)
      + " |   avg bits   objective")
for budget in (2, 3, 4, 8, 16):
    a = alloc.allocate(profile, budget_avg_bits=budget)
    oracle = alloc.brute_force_allocate(profile, budget_avg_bits=budget)
    assert a.bits == oracle.bits and a.objective == oracle.objective
    row = " ".join(f"{a.bits[lab]:>7}" for lab in labels)
    print(f"{budget:>6} | {row} |   {a.avg_bits:>7.3f} {a.objective:>11.4f}")
print("every row verified against exhaustive enumeration")
print("the sensitive 'head' and 'dconv' clusters grab high precision first;"
      " the big, robust 'proj' cluster pays for them at tight budgets")
