"""Optimal l_p perturbations of a binary linear classifier and the W2
distances between the resulting shifted data distributions.

For ``f(x) = sign(w.x + b)`` the loss-maximizing perturbation in an l_p ball
does not depend on ``x``, so every adversarial domain is the clean
distribution translated by a constant vector and the 2-Wasserstein distance
between two such domains is the Euclidean distance between the shifts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

NORMS = (1, 2, math.inf)


class DegenerateClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class LinearClassifier:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "w", w)
        if w.size == 0 or not np.any(w):
            raise DegenerateClassifierError("weight vector must be nonzero")
        if not np.all(np.isfinite(w)):
            raise DegenerateClassifierError("weight vector must be finite")

    @property
    def dim(self) -> int:
        return self.w.size


def _norm_key(p) -> float:
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "linf", "∞"):
            return math.inf
        p = float(key.lstrip("l"))
    p = float(p)
    if p not in NORMS:
        raise ValueError(f"p must be one of 1, 2, inf; got {p}")
    return p


def _check_label(y):
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y}")


def top_index(w: np.ndarray) -> int:
    """Index of the largest |w_j|; ties go to the lowest index."""
    return int(np.argmax(np.abs(w)))


def optimal_perturbation(clf: LinearClassifier, y: int, epsilon: float, p) -> np.ndarray:
    """Maximizer of -y * w.delta over the l_p ball of radius ``epsilon``."""
    _check_label(y)
    p = _norm_key(p)
    v = -y * clf.w
    if p == math.inf:
        return epsilon * np.sign(v)
    if p == 2:
        return epsilon * v / np.linalg.norm(v)
    i = top_index(clf.w)
    delta = np.zeros(clf.dim)
    delta[i] = epsilon * np.sign(v[i])
    return delta


def dual_optimum(clf: LinearClassifier, epsilon: float, p) -> float:
    """max of -y w.delta over the l_p ball, i.e. epsilon * ||w||_q with 1/p + 1/q = 1."""
    p = _norm_key(p)
    q = {1: math.inf, 2: 2, math.inf: 1}[p]
    return float(epsilon * np.linalg.norm(clf.w, ord=q))


def _pair(p, q) -> tuple:
    p, q = _norm_key(p), _norm_key(q)
    if p == q:
        raise ValueError("distance between a domain and itself is not defined here; pick p != q")
    return tuple(sorted((p, q)))


def wasserstein_pair(clf: LinearClassifier, epsilon: float, p, q) -> float:
    """Closed-form W2 distance between the l_p and l_q adversarial domains."""
    pair = _pair(p, q)
    w = clf.w
    d = clf.dim
    l2 = np.linalg.norm(w)
    if pair == (1, math.inf):
        value = d - 1.0
    elif pair == (1, 2):
        value = 2.0 - 2.0 * abs(w[top_index(w)]) / l2
    else:
        value = d + 1.0 - 2.0 * np.abs(w).sum() / l2
    # rounding can push an exact zero slightly negative
    return float(epsilon * math.sqrt(max(value, 0.0)))


def wasserstein_oracle(clf: LinearClassifier, epsilon: float, p, q) -> float:
    """W2 between two translates of one distribution: the length of the shift difference."""
    p, q = _pair(p, q)
    dp = optimal_perturbation(clf, 1, epsilon, p)
    dq = optimal_perturbation(clf, 1, epsilon, q)
    return float(np.linalg.norm(dp - dq))


def all_pairs(clf: LinearClassifier, epsilon: float) -> list:
    """``[(p, q, closed_form, oracle)]`` for the three unordered pairs."""
    return [(p, q, wasserstein_pair(clf, epsilon, p, q), wasserstein_oracle(clf, epsilon, p, q))
            for p, q in combinations(NORMS, 2)]


def sample_ball_boundary(rng: np.random.Generator, n: int, d: int, p) -> np.ndarray:
    """``n`` random points on the unit l_p sphere in ``d`` dimensions."""
    p = _norm_key(p)
    if p == math.inf:
        pts = rng.uniform(-1.0, 1.0, (n, d))
        face = rng.integers(0, d, n)
        pts[np.arange(n), face] = rng.choice([-1.0, 1.0], n)
        return pts
    if p == 2:
        pts = rng.standard_normal((n, d))
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)
    pts = rng.exponential(1.0, (n, d)) * rng.choice([-1.0, 1.0], (n, d))
    return pts / np.abs(pts).sum(axis=1, keepdims=True)


def brute_force_best(clf: LinearClassifier, y: int, epsilon: float, p, candidates: np.ndarray) -> float:
    """Best value of -y w.delta among ``epsilon * candidates`` (unit-ball points)."""
    return float((epsilon * candidates @ (-y * clf.w)).max())
