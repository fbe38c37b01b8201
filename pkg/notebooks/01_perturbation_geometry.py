# %% [markdown]
# # Where do l1, l2 and linf attacks push a linear model?
#
# For a linear score `w.x + b` and label `y`, the strongest perturbation of
# size `eps` in a given norm has a closed form. This demo prints those
# perturbations for `w = (3, 4)` and the pairwise W2 distance between the
# shifted data distributions, checked against the direct shift difference.

# %%
import math

import numpy as np

from gbnlab.geometry import (LinearClassifier, all_pairs, brute_force_best, dual_optimum,
                             optimal_perturbation, sample_ball_boundary)

clf = LinearClassifier([3.0, 4.0])
eps = 1.0
for p in (1, 2, math.inf):
    print(f"p={p}: delta = {optimal_perturbation(clf, 1, eps, p)}")

# %% [markdown]
# linf moves every coordinate by eps, l1 spends the whole budget on the
# largest weight, l2 moves along `-w/|w|`. The three shifts differ, so the
# three adversarial distributions sit at different places.

# %%
for p, q, closed, oracle in all_pairs(clf, eps):
    print(f"W2(p={p}, q={q}) closed form {closed:.6f}  oracle {oracle:.6f}")

# %% [markdown]
# Random search over a million boundary points never beats the closed form.

# %%
rng = np.random.default_rng(0)
for p in (1, 2, math.inf):
    cands = sample_ball_boundary(rng, 1_000_000, 2, p)
    best = brute_force_best(clf, 1, eps, p, cands)
    print(f"p={p}: brute force {best:.6f}  dual optimum {dual_optimum(clf, eps, p):.6f}")

# %% [markdown]
# Distances grow linearly with the budget.

# %%
for scale in (0.5, 1.0, 2.0):
    print(scale, [round(d, 6) for _, _, d, _ in all_pairs(clf, scale)])
