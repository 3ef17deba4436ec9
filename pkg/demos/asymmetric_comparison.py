"""Each loss and its asymmetric twin, trained on 5% of the cases, three seeds.

    python demos/asymmetric_comparison.py     # about a minute on one core
"""

from dataclasses import replace

import numpy as np

from asymloss.data import make_splits
from asymloss.experiment import PAIRS, ExperimentConfig, run

SEEDS = (0, 1, 2)

base = ExperimentConfig()
train_images, test_images = make_splits(base.data)


def medians(preset):
    rows = []
    for seed in SEEDS:
        cfg = replace(base, preset=preset, seed=seed, train=replace(base.train, fraction=0.05))
        m = run(cfg, train_images, test_images).test_metrics
        rows.append((m.dsc, m.sensitivity, m.precision))
    return np.median(rows, axis=0)


print(f"{'method':34s}  DSC    SENS   PRC")
for preset in ("vanilla-ce", *[p for pair in PAIRS.items() for p in pair], "asymmetric-combination"):
    dsc, sens, prc = medians(preset)
    print(f"{preset:34s}  {dsc:.3f}  {sens:.3f}  {prc:.3f}")

# the asymmetric rows trade some precision for sensitivity; the combination
# pushes that trade furthest.
