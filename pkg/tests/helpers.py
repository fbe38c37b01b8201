"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from gbnlab import autodiff as ad
from gbnlab.autodiff import Tensor
from gbnlab.gbn import ConvGate, FcGate, GatedBatchNorm

FD_STEP = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


class GradcheckStats:
    skipped = 0  # coordinates rejected as non-smooth, summed over all calls


def gradcheck(loss_fn, tensors, rng, coords: int = 8, step: float = FD_STEP, kink_tol: float = 1e-3) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``loss_fn()`` must rebuild the scalar loss from the current data of
    ``tensors``. Up to ``coords`` random entries of each tensor are probed.
    A coordinate whose forward and backward one-sided differences disagree
    by more than ``kink_tol`` sits within one step of a ReLU or max-pool
    kink, where finite differences measure nothing; it is replaced by
    another random coordinate and counted in ``GradcheckStats.skipped``.
    """
    analytic = ad.grad(loss_fn(), tensors)
    base = loss_fn().item()
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size)
        picks, numeric = [], []
        for i in order:
            if len(picks) == coords:
                break
            old = flat[i]
            flat[i] = old + step
            up = loss_fn().item()
            flat[i] = old - step
            down = loss_fn().item()
            flat[i] = old
            forward, backward = (up - base) / step, (base - down) / step
            if abs(forward - backward) > kink_tol * max(1.0, abs(forward), abs(backward)):
                GradcheckStats.skipped += 1
                continue
            picks.append(i)
            numeric.append((up - down) / (2 * step))
        if picks:
            worst = max(worst, relative_error(g.reshape(-1)[picks], np.array(numeric)))
    return worst


def qp_projection(v: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Nearest point of the l_p ball by an interior-point QP solve."""
    import cvxpy as cp

    x = cp.Variable(v.size)
    if norm == "L2":
        constraint = cp.sum_squares(x) <= epsilon ** 2
    else:
        constraint = cp.norm(x, 1 if norm == "L1" else "inf") <= epsilon
    problem = cp.Problem(cp.Minimize(cp.sum_squares(x - v)), [constraint])
    problem.solve(solver="CLARABEL", tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)
    return np.asarray(x.value)


def random_feasible(rng, n: int, d: int, norm: str, epsilon: float) -> np.ndarray:
    """``n`` random points inside the l_p ball (interior and boundary)."""
    radius = epsilon * rng.random((n, 1))
    if norm == "Linf":
        return rng.uniform(-1, 1, (n, d)) * radius
    if norm == "L2":
        v = rng.standard_normal((n, d))
        return v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    v = rng.laplace(size=(n, d)) ** 3
    return v / np.abs(v).sum(axis=1, keepdims=True) * radius


def randomize_branches(block, rng):
    for br in block.branches:
        br.gamma.data = rng.normal(1, 0.3, br.channels)
        br.beta.data = rng.normal(0, 0.3, br.channels)
        br.running_mean = rng.normal(0, 0.5, br.channels)
        br.running_var = rng.uniform(0.5, 2.0, br.channels)


def small_block(rng, kind="fc", channels=2, hw=6, branches=4):
    if kind == "conv":
        gate = ConvGate(channels, hw, hw, branches, hidden=3, rng=rng)
        gate.fc.weight.data = rng.normal(0, 0.3, gate.fc.weight.shape)
    else:
        gate = FcGate(channels * hw * hw, branches, hidden=5, rng=rng)
        gate.fc2.weight.data = rng.normal(0, 0.3, gate.fc2.weight.shape)
    block = GatedBatchNorm(channels, branches, gate)
    randomize_branches(block, rng)
    return block
