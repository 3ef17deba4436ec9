"""Train plain cross-entropy on 5% and on 100% of the training cases and compare logits.

With few cases the network still fits its training foreground, but on
unseen cases the foreground logits drift toward the decision boundary
while background logits barely move.

    python demos/logit_shift.py
"""

from dataclasses import replace

from asymloss.data import make_splits
from asymloss.experiment import ExperimentConfig, run

base = ExperimentConfig(preset="vanilla-ce", seed=0)
train_images, test_images = make_splits(base.data)
print(f"{len(train_images)} training cases, foreground share {train_images.fg_ratio:.3f}")

for fraction in (0.05, 1.0):
    cfg = replace(base, train=replace(base.train, fraction=fraction))
    r = run(cfg, train_images, test_images)
    means = r.shift.means
    print(f"\nfraction {fraction:g}: trained on {len(r.trained.train_case_ids)} cases")
    print(f"  train DSC {r.train_metrics.dsc:.3f}  test DSC {r.test_metrics.dsc:.3f}  "
          f"test SENS {r.test_metrics.sensitivity:.3f}  test PRC {r.test_metrics.precision:.3f}")
    for cls, name in ((1, "foreground"), (0, "background")):
        print(f"  {name}: mean true-class logit train {means[(cls, 'train')]:+.3f} "
              f"test {means[(cls, 'test')]:+.3f}")
    print(f"  shift: foreground {r.shift.delta_fg:+.3f}  background {r.shift.delta_bg:+.3f}")

# the full histograms (r.shift.histograms) are what `asymloss analyze` writes to histograms.json
