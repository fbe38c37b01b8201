"""LeNet-style classifier with a pluggable normalization slot."""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .gbn import ConvGate, FcGate, GatedBatchNorm, GatingMode, SOFT
from .layers import BatchNorm, Conv2d, Dense, LayerMode, Module

NORM_KINDS = ("bn", "gbn", "multibn", "none")


@dataclass(frozen=True)
class ModelConfig:
    norm: str = "bn"
    num_branches: int = 4
    conv1: int = 6
    conv2: int = 16
    hidden: int = 120
    num_classes: int = 10
    conv_gate_hidden: int = 16
    fc_gate_hidden: int = 512
    xi: float = 1e-5
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")


class LeNet(Module):
    """conv-norm-relu-pool twice, then dense-relu-dense, on 1x28x28 inputs.

    The normalization slots hold plain :class:`BatchNorm` (``bn``), gated
    blocks (``gbn``, conv gate first and fc gate second), gate-less
    multi-branch blocks (``multibn``) or nothing (``none``).
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.conv1, config.conv2
        with_bias = config.norm == "none"
        self.conv1 = Conv2d(1, c1, 5, bias=with_bias, rng=rng)
        self.conv2 = Conv2d(c1, c2, 5, bias=with_bias, rng=rng)
        self.fc1 = Dense(c2 * 4 * 4, config.hidden, rng=rng)
        self.fc2 = Dense(config.hidden, config.num_classes, rng=rng)
        self.norm1 = self._norm(c1, (c1, 24, 24), first=True, rng=rng)
        self.norm2 = self._norm(c2, (c2, 8, 8), first=False, rng=rng)

    def _norm(self, channels, feature_shape, first, rng):
        cfg = self.config
        if cfg.norm == "none":
            return None
        if cfg.norm == "bn":
            return BatchNorm(channels, xi=cfg.xi, alpha=cfg.alpha)
        if cfg.norm == "multibn":
            return GatedBatchNorm(channels, cfg.num_branches, None, cfg.xi, cfg.alpha,
                                  gating=GatingMode("forced", 0))
        if first:
            gate = ConvGate(*feature_shape, cfg.num_branches, hidden=cfg.conv_gate_hidden, rng=rng)
        else:
            gate = FcGate(int(np.prod(feature_shape)), cfg.num_branches, hidden=cfg.fc_gate_hidden, rng=rng)
        return GatedBatchNorm(channels, cfg.num_branches, gate, cfg.xi, cfg.alpha)

    # -- structure -------------------------------------------------------
    @property
    def gated_blocks(self) -> list:
        return [m for m in (self.norm1, self.norm2) if isinstance(m, GatedBatchNorm)]

    @property
    def norm_layers(self) -> list:
        return [m for m in (self.norm1, self.norm2) if m is not None]

    @property
    def num_domains(self) -> Optional[int]:
        return self.config.num_branches if self.gated_blocks else None

    @property
    def gates(self) -> list:
        return [b.gate for b in self.gated_blocks if b.gate is not None]

    def gate_parameters(self) -> list:
        return [p for g in self.gates for p in g.parameters()]

    def main_parameters(self) -> list:
        gate_ids = {id(p) for p in self.gate_parameters()}
        return [p for p in self.parameters() if id(p) not in gate_ids]

    def set_gating(self, gating: GatingMode):
        for block in self.gated_blocks:
            block.set_gating(gating)

    @contextlib.contextmanager
    def gating(self, gating: Optional[GatingMode]):
        """Temporarily switch every gated block to ``gating``."""
        if gating is None or not self.gated_blocks:
            yield self
            return
        saved = [b.gating for b in self.gated_blocks]
        self.set_gating(gating)
        try:
            yield self
        finally:
            for block, mode in zip(self.gated_blocks, saved):
                block.gating = mode

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording parameter gradients (attacks only need d/dx)."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True

    def topology(self) -> dict:
        desc = {"arch": "lenet", **asdict(self.config)}
        desc.pop("seed")
        desc["parameters"] = [[name, list(p.shape)] for name, p in self.named_parameters()]
        return desc

    # -- forward ---------------------------------------------------------
    def _apply_norm(self, norm, h, mode, domain):
        if norm is None:
            return h
        if isinstance(norm, BatchNorm):
            return norm(h, mode)
        return norm(h, mode, domain=domain)

    def __call__(self, x, mode: LayerMode = LayerMode.EVAL, domain: Optional[int] = None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, 28, 28):
            raise DimensionError(f"LeNet expects (n, 1, 28, 28) input, got {x.shape}")
        h = self._apply_norm(self.norm1, self.conv1(x), mode, domain)
        h = ad.max_pool2d(ad.relu(h))
        h = self._apply_norm(self.norm2, self.conv2(h), mode, domain)
        h = ad.max_pool2d(ad.relu(h))
        h = ad.relu(self.fc1(ad.flatten(h)))
        return self.fc2(h)

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        out = [self(x[i:i + batch_size]).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def lenet_like_forward(x, model: LeNet, mode: LayerMode = LayerMode.EVAL, domain: Optional[int] = None) -> Tensor:
    return model(x, mode, domain)
