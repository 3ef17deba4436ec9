"""Evaluate each loss on a handful of logits and watch what the asymmetric versions change.

    python demos/loss_walkthrough.py
"""

import numpy as np

from asymloss import losses as L
from asymloss.tensor import Tensor, grad

# four pixels: two confident and right, one borderline foreground, one wrong background
z = Tensor(np.array([[3.0, -3.0], [-2.0, 2.0], [0.2, -0.2], [-1.0, 1.0]]), requires_grad=True)
labels = np.array([0, 1, 1, 0])
y = L.one_hot(labels)

print("per-pixel CE       ", np.round(L.sample_losses(z, y).data, 4))

for name, loss in [
    ("cross-entropy", L.cross_entropy(z, y)),
    ("margin m=1", L.large_margin_loss(z, y, 1.0)),
    ("asym margin m=1", L.asym_large_margin_loss(z, y, 1.0)),
    ("focal g=2", L.focal_loss(z, y, 2.0)),
    ("asym focal g=2", L.asym_focal_loss(z, y, 2.0)),
    ("soft dice", L.soft_dice_loss(z, y)),
]:
    (g,) = grad(loss, [z])
    # gradient on the true-class logit, row by row
    push = -g[np.arange(4), labels]
    print(f"{name:18s} loss {loss.item():.4f}   push on true logit {np.round(push, 4)}")

# the asymmetric margin only moves the foreground rows (1 and 2); the
# background rows get exactly the plain cross-entropy gradient.
# the asymmetric focal loss keeps full weight on the foreground rows and
# damps only the easy background ones.

# mixing: the hard-label rule with margin 0.3
for lam in (0.1, 0.5, 0.9):
    print(f"lam={lam}: fg mixed into bg ->", L.asym_mixup_label(1, 0, lam, 0.3),
          " bg mixed into fg ->", L.asym_mixup_label(0, 1, lam, 0.3))
