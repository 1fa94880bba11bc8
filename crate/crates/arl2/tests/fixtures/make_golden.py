"""Regenerates scores.csv and selection_golden.json.

The golden replacement set comes from a plain full sort of (p, layer) pairs,
independent of the Rust selection code.
"""
import csv
import json
import random
from pathlib import Path

HERE = Path(__file__).parent
DIMS = ["subject", "background", "motion", "dynamic", "aesthetic", "imaging"]
LAYERS = 30
BUDGET = 15
THRESHOLD = 0.85
BETA = 0.5
EPS = 1e-9

rng = random.Random(7)
baseline = {d: round(rng.uniform(60, 98), 2) for d in DIMS}
rows = []
for layer in range(LAYERS):
    for d in DIMS:
        b = baseline[d]
        skip = round(b - rng.uniform(0.5, 12), 2)
        recovery = rng.uniform(0.05, 0.45) if d == "imaging" else rng.uniform(0.8, 1.05)
        if layer == 4 and d == "dynamic":
            skip = b  # degenerate denominator
        rows.append((layer, d, b, round(skip + recovery * (b - skip), 2), skip))
# layers 12 and 21 score identically
for i, r in enumerate(rows):
    if r[0] == 21:
        twin = next(x for x in rows if x[0] == 12 and x[1] == r[1])
        rows[i] = (21,) + twin[1:]

with open(HERE / "scores.csv", "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["layer", "dimension", "baseline", "replace", "skip"])
    w.writerows(rows)

cell = {(r[0], r[1]): r for r in rows}
means = {}
for d in DIMS:
    vals = []
    for layer in range(LAYERS):
        _, _, b, rep, s = cell[(layer, d)]
        if abs(b - s) >= EPS:
            vals.append((rep - s) / (b - s))
    means[d] = sum(vals) / len(vals)
hr = [d for d in DIMS if means[d] >= THRESHOLD]
hs = [d for d in DIMS if means[d] < THRESHOLD]


def degradation(layer, dims):
    if not dims:
        return 0.0
    return sum(cell[(layer, d)][2] - cell[(layer, d)][3] for d in dims) / len(dims)


p = {l: degradation(l, hs) + BETA * max(degradation(l, hr), 0.0) for l in range(LAYERS)}
ranked = sorted(range(LAYERS), key=lambda l: (p[l], l))
golden = {
    "threshold_hr": THRESHOLD,
    "beta": BETA,
    "budget": BUDGET,
    "hr_dims": hr,
    "hs_dims": hs,
    "p": [p[l] for l in range(LAYERS)],
    "replaced": sorted(ranked[:BUDGET]),
}
(HERE / "selection_golden.json").write_text(json.dumps(golden, indent=2) + "\n")
print(golden["replaced"], hs, sorted(p.values())[BUDGET - 2 : BUDGET + 2])
