"""
How much data to keep
=====================

Keeping fewer samples raises their average quality but lowers coverage. The
objective multiplies a saturating richness term by a quality term and the
sweep tabulates it over retain fractions.
"""

import numpy as np

from resofilter import objective as O
from resofilter.diffscore import ScoreEntry

rng = np.random.default_rng(0)
dirty = rng.random(200) < 0.2
# pretend scores: junk moves the weights more
scores = [ScoreEntry(i, float(s)) for i, s in enumerate(np.where(dirty, 2.0, 1.0) + rng.random(200))]
quality = (~dirty).astype(float)

grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
for lam in (0.005, 0.02, 0.1):
    rows = O.sweep(scores, grid, O.ObjectiveParams(beta=1.0, lam=lam), values=quality)
    best = max(rows, key=lambda r: r["E"])
    print(f"lambda={lam}: best retain {best['p']} (E={best['E']:.4f})")

print()
print(O.rows_to_csv(O.sweep(scores, grid, O.ObjectiveParams.for_dataset(200), values=quality)))
