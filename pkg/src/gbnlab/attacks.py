"""White-box attacks and l_p-ball projections.

All attacks work on a batch ``x`` with pixel values in [0, 1] and return an
:class:`AdversarialBatch` whose perturbation lies in the requested ball and
whose pixels stay in [0, 1]. Randomness (random starts, noise) is drawn from
per-sample generators seeded with ``(seed, restart, sample index)``, so
splitting a batch never changes the result.
"""
from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gbn import GatingMode, forced

FEASIBILITY_TOL = 1e-6


class Norm(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    LINF = "Linf"

    @classmethod
    def parse(cls, text) -> "Norm":
        if isinstance(text, Norm):
            return text
        key = str(text).strip().lower().replace("ℓ", "l").replace("_", "")
        for norm in cls:
            if norm.value.lower() == key or (norm is cls.LINF and key in ("linf", "l∞", "inf")):
                return norm
        raise ValueError(f"unknown norm {text!r}")


# branch index of each perturbation type in a model trained on all of them
DEFAULT_DOMAIN = {Norm.L1: 1, Norm.L2: 2, Norm.LINF: 3}


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    norm: Norm
    epsilon: float
    step_size: float
    iterations: int = 1
    restarts: int = 1
    decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm.parse(self.norm))
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.step_size < 0:
            raise ValueError(f"step size must be non-negative, got {self.step_size}")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")

    def with_(self, **changes) -> "AttackSpec":
        return replace(self, **changes)


def full_scale_mnist_specs(seed: int = 0) -> dict:
    """PGD settings used for MNIST in the full-scale protocol."""
    return {
        Norm.L1: AttackSpec(Norm.L1, 10.0, 1.0, 50, seed=seed),
        Norm.L2: AttackSpec(Norm.L2, 2.0, 0.1, 100, seed=seed),
        Norm.LINF: AttackSpec(Norm.LINF, 0.3, 0.01, 50, seed=seed),
    }


def scaled_specs(iterations: int, seed: int = 0, restarts: int = 1,
                 step_factor: Optional[float] = None) -> dict:
    """MNIST budgets with fewer iterations.

    The full-scale step sizes are kept unless ``step_factor`` is given, in
    which case step = step_factor * eps / iterations.
    """
    out = {}
    for norm, spec in full_scale_mnist_specs(seed).items():
        step = spec.step_size if step_factor is None else step_factor * spec.epsilon / iterations
        out[norm] = spec.with_(iterations=iterations, step_size=step, restarts=restarts)
    return out


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    x_clean: np.ndarray
    norm: Norm
    epsilon: float
    success_mask: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(1.0 - self.success_mask.mean()) if self.success_mask.size else 1.0


# -- norms and projections ---------------------------------------------------
def _rows(delta) -> tuple:
    arr = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    if arr.ndim <= 1:
        return arr.reshape(1, -1), arr.shape
    return arr.reshape(arr.shape[0], -1), arr.shape


def lp_norm(delta, norm) -> np.ndarray:
    """Per-sample norm over all axes but the first (a 1-D input is one sample)."""
    rows, _ = _rows(delta)
    norm = Norm.parse(norm)
    if norm is Norm.LINF:
        return np.abs(rows).max(axis=1) if rows.shape[1] else np.zeros(len(rows))
    if norm is Norm.L2:
        return np.sqrt((rows * rows).sum(axis=1))
    return np.abs(rows).sum(axis=1)


def project_linf(delta, epsilon: float) -> np.ndarray:
    rows, shape = _rows(delta)
    return np.clip(rows, -epsilon, epsilon).reshape(shape)


def project_l2(delta, epsilon: float) -> np.ndarray:
    rows, shape = _rows(delta)
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    factor = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return (rows * factor).reshape(shape)


def project_l1(delta, epsilon: float) -> np.ndarray:
    """Euclidean projection onto the l1 ball by sort-based soft thresholding."""
    rows, shape = _rows(delta)
    out = rows.copy()
    mags = np.abs(rows)
    outside = mags.sum(axis=1) > epsilon
    if not outside.any():
        return out.reshape(shape)
    if epsilon <= 0:
        out[outside] = 0.0
        return out.reshape(shape)
    u = -np.sort(-mags[outside], axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, u.shape[1] + 1)
    active = u - (css - epsilon) / j > 0
    active[:, 0] = True  # exact arithmetic always keeps the largest entry
    rho = active.shape[1] - 1 - np.argmax(active[:, ::-1], axis=1)
    theta = (css[np.arange(len(rho)), rho] - epsilon) / (rho + 1)
    shrunk = np.maximum(mags[outside] - theta[:, None], 0.0)
    out[outside] = np.sign(rows[outside]) * shrunk
    return out.reshape(shape)


def project(delta, norm, epsilon: float) -> np.ndarray:
    norm = Norm.parse(norm)
    if norm is Norm.LINF:
        return project_linf(delta, epsilon)
    if norm is Norm.L2:
        return project_l2(delta, epsilon)
    return project_l1(delta, epsilon)


# -- helpers -------------------------------------------------------------------
def _frozen(model):
    return model.frozen() if hasattr(model, "frozen") else contextlib.nullcontext()


def _gating(model, gating: Optional[GatingMode]):
    if gating is not None and hasattr(model, "gating"):
        return model.gating(gating)
    return contextlib.nullcontext()


def _cross_entropy(outputs: Tensor, y) -> Tensor:
    return ad.softmax_cross_entropy(outputs, y, reduction="none")


def predict(model, x: np.ndarray) -> np.ndarray:
    with _frozen(model):
        return model(Tensor(x)).data.argmax(axis=1)


def _sample_rng(seed: int, restart: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, restart, index])


def random_start(shape: tuple, norm: Norm, epsilon: float, seed: int, restart: int,
                 index_offset: int = 0) -> np.ndarray:
    """Random point in the ball, one generator per sample.

    Linf: uniform in the cube. L2: uniform in the ball (direction times
    radius eps * u^(1/d)). L1: a sparse vector on ~5% of the coordinates with
    random signs, Dirichlet weights and radius eps * u.
    """
    n, d = shape[0], int(np.prod(shape[1:]))
    out = np.zeros((n, d))
    for i in range(n):
        rng = _sample_rng(seed, restart, index_offset + i)
        if norm is Norm.LINF:
            out[i] = rng.uniform(-epsilon, epsilon, d)
        elif norm is Norm.L2:
            v = rng.standard_normal(d)
            out[i] = v / np.linalg.norm(v) * epsilon * rng.random() ** (1.0 / d)
        else:
            k = max(1, d // 20)
            idx = rng.choice(d, size=k, replace=False)
            weights = rng.dirichlet(np.ones(k)) * epsilon * rng.random()
            out[i, idx] = weights * rng.choice([-1.0, 1.0], size=k)
    return out.reshape(shape)


def _ascent_direction(g: np.ndarray, norm: Norm) -> np.ndarray:
    if norm is Norm.LINF:
        return np.sign(g)
    rows = g.reshape(g.shape[0], -1)
    scale = np.abs(rows).sum(axis=1) if norm is Norm.L1 else np.sqrt((rows * rows).sum(axis=1))
    safe = np.where(scale > 0, scale, 1.0)
    return (rows / safe[:, None]).reshape(g.shape)


def _clip_to_image(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(x + delta, 0.0, 1.0) - x


def _loss_and_grad(per_sample_loss: Callable, x_adv: np.ndarray, step: int) -> tuple:
    xt = Tensor(x_adv, requires_grad=True)
    losses = per_sample_loss(xt)
    total = ad.tsum(losses)
    (g,) = ad.grad(total, [xt])
    if not np.all(np.isfinite(g)):
        raise AttackError(f"non-finite input gradient at step {step}")
    return losses.data.copy(), g


def _evaluate_losses(per_sample_loss: Callable, x_adv: np.ndarray) -> np.ndarray:
    return per_sample_loss(Tensor(x_adv)).data.copy()


def check_feasible(x_adv: np.ndarray, x: np.ndarray, norm: Norm, epsilon: float):
    dist = lp_norm(x_adv - x, norm)
    if dist.size and dist.max() > epsilon + FEASIBILITY_TOL:
        raise AttackError(f"{norm.value} perturbation {dist.max():.8g} exceeds budget {epsilon}")
    if x_adv.size and (x_adv.min() < 0.0 or x_adv.max() > 1.0):
        raise AttackError("adversarial pixels left [0, 1]")


def run_pgd(per_sample_loss: Callable, x: np.ndarray, spec: AttackSpec, keep_best: bool = False,
            init: Optional[np.ndarray] = None, index_offset: int = 0) -> np.ndarray:
    """Projected gradient ascent on ``per_sample_loss`` inside the spec's ball.

    The first restart starts from ``init`` (default: the clean point); later
    restarts start from a random point in the ball. Each sample keeps the
    restart with the highest final loss; with ``keep_best`` every iterate,
    including the start, is a candidate.
    """
    norm = spec.norm
    best_x = None
    best_loss = np.full(x.shape[0], -np.inf)
    for restart in range(spec.restarts):
        if restart == 0:
            delta = np.zeros_like(x) if init is None else project(init - x, norm, spec.epsilon)
        else:
            delta = random_start(x.shape, norm, spec.epsilon, spec.seed, restart, index_offset)
        delta = _clip_to_image(x, delta)
        for step in range(spec.iterations):
            losses, g = _loss_and_grad(per_sample_loss, x + delta, step)
            if keep_best:
                best_x, best_loss = _keep_better(best_x, best_loss, x + delta, losses)
            delta = delta + spec.step_size * _ascent_direction(g, norm)
            delta = _clip_to_image(x, project(delta, norm, spec.epsilon))
        x_adv = x + delta
        final = _evaluate_losses(per_sample_loss, x_adv)
        best_x, best_loss = _keep_better(best_x, best_loss, x_adv, final)
    return best_x


def _keep_better(best_x, best_loss, cand_x, cand_loss):
    if best_x is None:
        return cand_x.copy(), cand_loss.copy()
    better = cand_loss > best_loss
    if better.any():
        best_x = best_x.copy()
        best_x[better] = cand_x[better]
        best_loss = np.where(better, cand_loss, best_loss)
    return best_x, best_loss


def _finish(model, x, y, x_adv, norm, epsilon) -> AdversarialBatch:
    x_adv = np.clip(x_adv, 0.0, 1.0)
    check_feasible(x_adv, x, norm, epsilon)
    success = predict(model, x_adv) != np.asarray(y)
    return AdversarialBatch(x_adv, x, norm, float(epsilon), success)


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


# -- attacks -------------------------------------------------------------------
def pgd(model, x, y, spec: AttackSpec, gating: Optional[GatingMode] = None,
        loss: Optional[Callable] = None, keep_best: bool = False, init=None,
        index_offset: int = 0) -> AdversarialBatch:
    """Untargeted PGD on the per-sample cross-entropy.

    ``gating`` overrides the gating of every gated block while gradients are
    taken; success is always judged with the model's own gating. ``loss``
    replaces the objective and receives ``(outputs, y)``.
    """
    x = _as_array(x)
    y = np.asarray(y)
    loss = loss or _cross_entropy

    def objective(xt):
        return loss(model(xt), y)

    with _frozen(model), _gating(model, gating):
        x_adv = run_pgd(objective, x, spec, keep_best=keep_best,
                        init=None if init is None else _as_array(init), index_offset=index_offset)
    return _finish(model, x, y, x_adv, spec.norm, spec.epsilon)


def fgsm(model, x, y, epsilon: float) -> AdversarialBatch:
    """Single signed-gradient step of size ``epsilon``."""
    spec = AttackSpec(Norm.LINF, epsilon, epsilon, iterations=1, restarts=1)
    return pgd(model, x, y, spec)


def mi_fgsm(model, x, y, spec: AttackSpec) -> AdversarialBatch:
    """Momentum iterative FGSM: step eps/k along sign of the l1-normalized momentum."""
    x = _as_array(x)
    y = np.asarray(y)
    alpha = spec.epsilon / spec.iterations
    momentum = np.zeros_like(x)
    delta = np.zeros_like(x)
    with _frozen(model):
        for step in range(spec.iterations):
            _, g = _loss_and_grad(lambda xt: _cross_entropy(model(xt), y), x + delta, step)
            momentum = spec.decay * momentum + _ascent_direction(g, Norm.L1)
            delta = project_linf(delta + alpha * np.sign(momentum), spec.epsilon)
            delta = _clip_to_image(x, delta)
    return _finish(model, x, y, x + delta, Norm.LINF, spec.epsilon)


def gaussian_noise_attack(x, y, model, epsilon: float, trials: int = 10, seed: int = 0,
                          index_offset: int = 0) -> AdversarialBatch:
    """Random isotropic noise scaled into the l2 ball; first fooling trial wins."""
    x = _as_array(x)
    y = np.asarray(y)
    n = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    rngs = [_sample_rng(seed, 0, index_offset + i) for i in range(n)]
    x_adv = x.copy()
    fooled = np.zeros(n, dtype=bool)
    for _ in range(max(1, trials)):
        noise = np.stack([r.standard_normal(d) for r in rngs]).reshape(x.shape) if n else x.copy()
        cand = x + _clip_to_image(x, project_l2(noise, epsilon))
        pending = ~fooled
        x_adv[pending] = cand[pending]
        if pending.any():
            fooled[pending] = predict(model, cand[pending]) != y[pending]
    return _finish(model, x, y, x_adv, Norm.L2, epsilon)


def _require_gates(model):
    blocks = [b for b in getattr(model, "gated_blocks", []) if b.gate is not None]
    if not blocks:
        raise ValueError("model has no gated batch-norm block to attack")
    return blocks


def gate_fooling_pgd(model, x, y, spec: AttackSpec, domain: Optional[int] = None, init=None,
                     keep_best: bool = False, index_offset: int = 0) -> AdversarialBatch:
    """PGD that pushes every gate away from the true domain.

    The objective is the per-sample domain-prediction cross-entropy summed
    over all gates, evaluated under soft gating so later gates see mixed
    features. ``domain`` defaults to the branch of ``spec.norm``; ``init``
    lets the attack continue from an existing adversarial example.
    """
    blocks = _require_gates(model)
    domain = DEFAULT_DOMAIN[spec.norm] if domain is None else domain
    x = _as_array(x)
    y = np.asarray(y)

    def objective(xt):
        model(xt)
        total = None
        for block in blocks:
            logits = block.last_gate_logits
            term = ad.softmax_cross_entropy(logits, np.full(logits.shape[0], domain), reduction="none")
            total = term if total is None else total + term
        return total

    with _frozen(model), _gating(model, GatingMode("soft")):
        x_adv = run_pgd(objective, x, spec, keep_best=keep_best,
                        init=None if init is None else _as_array(init), index_offset=index_offset)
    return _finish(model, x, y, x_adv, spec.norm, spec.epsilon)


def branch_forced_attack(model, x, y, spec: AttackSpec, branch: int, keep_best: bool = False,
                         index_offset: int = 0) -> AdversarialBatch:
    """PGD whose gradients flow through BN branch ``branch`` in every gated block."""
    blocks = getattr(model, "gated_blocks", [])
    if not blocks:
        raise ValueError("model has no gated batch-norm block")
    if not 0 <= branch < blocks[0].num_branches:
        raise IndexError(f"branch {branch} out of range for {blocks[0].num_branches} branches")
    return pgd(model, x, y, spec, gating=forced(branch), keep_best=keep_best, index_offset=index_offset)
