"""Gated batch normalization.

A :class:`GatedBatchNorm` block owns one :class:`~gbnlab.layers.BatchNorm`
branch per input domain (clean plus one per perturbation type) and a small
gate network that predicts the domain of its input. Training routes each
domain-labelled batch through its own branch; inference mixes the branch
outputs with the gate's confidences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .layers import BatchNorm, Conv2d, Dense, LayerMode, Module, bn_forward

CLEAN = 0


@dataclass(frozen=True)
class GatingMode:
    """How a block combines its branches at inference.

    ``soft`` mixes all branches by gate confidence, ``hard`` keeps the
    top-1 branch per sample, ``forced`` ignores the gate and uses ``branch``.
    """

    kind: str = "soft"
    branch: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("soft", "hard", "forced"):
            raise ValueError(f"unknown gating kind {self.kind!r}")
        if (self.kind == "forced") != (self.branch is not None):
            raise ValueError("a branch index is required for, and only for, forced gating")
        if self.branch is not None and self.branch < 0:
            raise IndexError(f"branch index must be non-negative, got {self.branch}")

    @classmethod
    def parse(cls, text: str) -> "GatingMode":
        text = text.strip().lower()
        if text.startswith("forced:"):
            return cls("forced", int(text.split(":", 1)[1]))
        return cls(text)

    def __str__(self):
        return f"forced:{self.branch}" if self.kind == "forced" else self.kind


SOFT = GatingMode("soft")
HARD = GatingMode("hard")


def forced(k: int) -> GatingMode:
    return GatingMode("forced", k)


class ConvGate(Module):
    """Conv(7x7, s1, p3) -> ReLU -> Conv(3x3, s2, p1) -> ReLU -> FC(num_domains).

    The output layer starts at zero, so an untrained gate is uniform.
    """

    kind = "conv"

    def __init__(self, channels: int, height: int, width: int, num_domains: int,
                 hidden: int = 16, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(channels, hidden, 7, stride=1, padding=3, rng=rng)
        self.conv2 = Conv2d(hidden, hidden, 3, stride=2, padding=1, rng=rng)
        h2, w2 = (height - 1) // 2 + 1, (width - 1) // 2 + 1
        self.fc = Dense(hidden * h2 * w2, num_domains, rng=rng)
        self.fc.weight.data[:] = 0.0
        self.input_shape = (channels, height, width)
        self.num_domains = num_domains

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"conv gate expects (n, {self.input_shape}), got {x.shape}")
        h = ad.relu(self.conv1(x))
        h = ad.relu(self.conv2(h))
        return self.fc(ad.flatten(h))


class FcGate(Module):
    """FC(hidden) -> ReLU -> FC(num_domains) on flattened features; starts uniform."""

    kind = "fc"

    def __init__(self, features: int, num_domains: int, hidden: int = 512,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Dense(features, hidden, rng=rng)
        self.fc2 = Dense(hidden, num_domains, rng=rng)
        self.fc2.weight.data[:] = 0.0
        self.features = features
        self.num_domains = num_domains

    def __call__(self, x: Tensor) -> Tensor:
        flat = ad.flatten(x) if x.ndim > 2 else x
        if flat.shape[1] != self.features:
            raise DimensionError(f"fc gate expects {self.features} features, got {x.shape}")
        return self.fc2(ad.relu(self.fc1(flat)))


Gate = Union[ConvGate, FcGate]


def gate_predict(x, gate: Gate) -> Tensor:
    """Per-sample domain confidences (softmax of the gate logits)."""
    return ad.softmax(gate(ad.as_tensor(x)))


class GatedBatchNorm(Module):
    """Multi-branch batch norm with an optional domain gate.

    With ``gate=None`` the block is a plain multi-branch BN whose branch must
    always be chosen by hand (forced gating or explicit domain labels).
    """

    def __init__(self, channels: int, num_branches: int, gate: Optional[Gate] = None,
                 xi: float = 1e-5, alpha: float = 0.1, gating: GatingMode = SOFT):
        if num_branches < 1:
            raise ValueError("need at least one branch")
        if gate is not None and gate.num_domains != num_branches:
            raise ValueError(f"gate predicts {gate.num_domains} domains for {num_branches} branches")
        self.branches = [BatchNorm(channels, xi=xi, alpha=alpha) for _ in range(num_branches)]
        self.gate = gate
        self.gating = gating
        # observers called as hook(block, x_data, domain) on every training pass
        self.hooks: List[Callable] = []
        self.last_gate_input: Optional[Tensor] = None
        self.last_gate_logits: Optional[Tensor] = None

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    def set_gating(self, gating: GatingMode):
        if gating.kind == "forced":
            self._check_branch(gating.branch)
        elif self.gate is None:
            raise ValueError("a block without a gate only supports forced gating")
        self.gating = gating

    def _check_branch(self, k: int):
        if not 0 <= k < self.num_branches:
            raise IndexError(f"domain label {k} out of range for {self.num_branches} branches")

    def __call__(self, x: Tensor, mode: LayerMode, domain: Optional[int] = None) -> Tensor:
        if mode is LayerMode.TRAIN:
            if domain is None:
                raise ValueError("training a gated block needs a domain label")
            return gbn_forward_train(x, domain, self)
        return gbn_forward_infer(x, self)


def gbn_forward_train(x, label: int, block: GatedBatchNorm) -> Tensor:
    """Route a batch from domain ``label`` through its own branch only.

    The detached input is kept on the block so the gate can be fitted on it
    afterwards; the gate parameters are not touched here.
    """
    x = ad.as_tensor(x)
    block._check_branch(label)
    out = bn_forward(x, block.branches[label], LayerMode.TRAIN)
    block.last_gate_input = x.detach()
    for hook in block.hooks:
        hook(block, x.data, label)
    return out


def gbn_forward_infer(x, block: GatedBatchNorm, gating: Optional[GatingMode] = None) -> Tensor:
    """Normalize with running statistics, combining branches per ``gating``."""
    x = ad.as_tensor(x)
    gating = gating or block.gating
    block.last_gate_logits = None
    if gating.kind == "forced":
        block._check_branch(gating.branch)
        return bn_forward(x, block.branches[gating.branch], LayerMode.EVAL)
    if block.gate is None:
        raise ValueError("soft/hard gating needs a gate network")
    logits = block.gate(x)
    block.last_gate_logits = logits
    g = ad.softmax(logits)
    outputs = [bn_forward(x, branch, LayerMode.EVAL) for branch in block.branches]
    bshape = (x.shape[0],) + (1,) * (x.ndim - 1)
    if gating.kind == "hard":
        top = g.data.argmax(axis=1)
        out = None
        for k, branch_out in enumerate(outputs):
            mask = (top == k).astype(np.float64).reshape(bshape)
            term = branch_out * mask
            out = term if out is None else out + term
        return out
    out = None
    for k, branch_out in enumerate(outputs):
        term = ad.reshape(g[:, k], bshape) * branch_out
        out = term if out is None else out + term
    return out


def domain_prediction_loss(batches: Sequence, gates: Sequence[Gate]) -> Tensor:
    """Summed gate cross-entropy against the true domain.

    ``batches`` holds ``(features, k)`` pairs, one per domain. ``features`` is
    either one tensor fed to every gate or a sequence with one tensor per
    gate. Each term is the batch-mean cross-entropy; terms are summed over
    domains and gates.
    """
    if not batches:
        raise ValueError("domain prediction loss needs at least one labelled batch")
    total = None
    for features, k in batches:
        per_gate = features if isinstance(features, (list, tuple)) else [features] * len(gates)
        if len(per_gate) != len(gates):
            raise ValueError(f"{len(per_gate)} feature tensors for {len(gates)} gates")
        for gate, feats in zip(gates, per_gate):
            logits = gate(ad.as_tensor(feats))
            term = ad.softmax_cross_entropy(logits, np.full(logits.shape[0], k))
            total = term if total is None else total + term
    return total


def classification_loss(batches: Sequence, model) -> Tensor:
    """Sum over domains of the batch-mean cross-entropy with branch routing.

    ``batches`` holds ``(x, y, k)`` triples; each is run through ``model`` in
    training mode with every gated block forced onto branch ``k``.
    """
    if not batches:
        raise ValueError("classification loss needs at least one labelled batch")
    domains = [k for _, _, k in batches]
    expected = getattr(model, "num_domains", None)
    if expected is not None:
        missing = sorted(set(range(expected)) - set(domains))
        if missing:
            raise ValueError(f"missing batches for domains {missing}")
    total = None
    for x, y, k in batches:
        logits = model(x, LayerMode.TRAIN, domain=k)
        term = ad.softmax_cross_entropy(logits, y)
        total = term if total is None else total + term
    return total
