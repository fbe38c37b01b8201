"""Training loops for gated and baseline defenses, and robustness evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import (AttackSpec, Norm, branch_forced_attack, fgsm, gate_fooling_pgd,
                      gaussian_noise_attack, mi_fgsm, pgd, scaled_specs)
from .data import Dataset, batches, iterate, metric_record
from .gbn import GatingMode, domain_prediction_loss, forced
from .layers import LayerMode
from .models import LeNet, ModelConfig

log = logging.getLogger(__name__)

DEFENSES = ("vanilla", "gbn", "avg", "max", "separate_bn")
NORM_ORDER = (Norm.L1, Norm.L2, Norm.LINF)


class ConfigError(ValueError):
    pass


def _default_specs() -> tuple:
    specs = scaled_specs(10)
    return tuple(specs[n] for n in NORM_ORDER)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    gate_learning_rate: Optional[float] = None
    gate_clip: Optional[float] = None
    seed: int = 0
    attack_specs: tuple = field(default_factory=_default_specs)
    defense: str = "gbn"
    domains: Optional[tuple] = None

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if self.gate_learning_rate is not None and self.gate_learning_rate <= 0:
            raise ConfigError("gate_learning_rate must be positive")
        if self.gate_clip is not None and self.gate_clip <= 0:
            raise ConfigError("gate_clip must be positive")
        specs = tuple(self.attack_specs)
        object.__setattr__(self, "attack_specs", specs)
        domains = tuple(range(len(specs) + 1)) if self.domains is None else tuple(sorted(self.domains))
        object.__setattr__(self, "domains", domains)
        if any(d < 0 or d > len(specs) for d in domains) or len(set(domains)) != len(domains):
            raise ConfigError(f"domains {domains} must be distinct values in 0..{len(specs)}")
        if self.defense in ("gbn", "separate_bn") and (len(domains) < 2 or domains[0] != 0):
            raise ConfigError("gbn/separate_bn training needs the clean domain 0 and at least one attack")

    @property
    def num_branches(self) -> int:
        return len(self.domains)

    def spec_for(self, domain: int) -> AttackSpec:
        return self.attack_specs[domain - 1]


def sgd_step(params: Sequence, lr: float, weight_decay: float = 0.0):
    """theta <- theta - lr * (grad + weight_decay * theta); parameters without grads are skipped."""
    for p in params:
        if p.grad is None:
            continue
        p.data = p.data - lr * (p.grad + weight_decay * p.data)


def clip_grad_norm(params: Sequence, max_norm: float) -> float:
    """Rescale the gradients of ``params`` so their joint l2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)
    return total


def attack_seed(seed: int, epoch: int, batch: int, domain: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch, domain]).generate_state(1, np.uint64)[0])


@dataclass
class TrainResult:
    model: LeNet
    history: List[dict]
    probe: Optional["ProbeReport"] = None

    def to_records(self, run_id: str) -> list:
        records = []
        for row in self.history:
            for key, value in row.items():
                if key != "epoch":
                    records.append(metric_record(run_id, row["epoch"], key, value))
        return records


def _check_model(model: LeNet, cfg: TrainConfig):
    blocks = model.gated_blocks
    if cfg.defense in ("gbn", "separate_bn"):
        if not blocks:
            raise ConfigError(f"{cfg.defense} training needs a multi-branch model")
        if cfg.defense == "gbn" and not model.gates:
            raise ConfigError("gbn training needs gated blocks")
        for block in blocks:
            if block.num_branches != cfg.num_branches:
                raise ConfigError(f"model has {block.num_branches} branches, config has {cfg.num_branches} domains")
    elif blocks:
        raise ConfigError(f"{cfg.defense} training expects a single-branch model")


def _adversarial_batches(model, xb, yb, cfg: TrainConfig, epoch: int, b: int, per_branch: bool) -> list:
    """``[(x, branch)]`` for every training domain; domain 0 is the clean batch."""
    out = []
    for branch, domain in enumerate(cfg.domains):
        if domain == 0:
            out.append((xb, branch))
            continue
        spec = cfg.spec_for(domain).with_(seed=attack_seed(cfg.seed, epoch, b, domain))
        gating = forced(branch) if per_branch else None
        out.append((pgd(model, xb, yb, spec, gating=gating).x_adv, branch))
    return out


def _train_multibranch_step(model, advs, yb, cfg, fit_gates: bool) -> dict:
    blocks = model.gated_blocks
    total = None
    gate_inputs = []
    for x, branch in advs:
        logits = model(x, LayerMode.TRAIN, domain=branch)
        term = ad.softmax_cross_entropy(logits, yb)
        total = term if total is None else total + term
        gate_inputs.append(([b.last_gate_input for b in blocks], branch))
    model.zero_grad()
    ad.backward(total)
    stats = {"loss_cls": total.item()}
    sgd_step(model.main_parameters(), cfg.learning_rate, cfg.weight_decay)
    if fit_gates:
        loss_dp = domain_prediction_loss(gate_inputs, [b.gate for b in blocks])
        ad.backward(loss_dp)
        stats["loss_dp"] = loss_dp.item()
        gate_params = model.gate_parameters()
        if cfg.gate_clip is not None:
            clip_grad_norm(gate_params, cfg.gate_clip)
        sgd_step(gate_params, cfg.gate_learning_rate or cfg.learning_rate, cfg.weight_decay)
    return stats


def _train_joint_step(model, parts: list, yb, cfg) -> dict:
    """One TRAIN forward over the concatenated parts; loss is the sum of per-part means."""
    x = np.concatenate(parts)
    logits = model(x, LayerMode.TRAIN)
    n = len(yb)
    total = None
    for i in range(len(parts)):
        term = ad.softmax_cross_entropy(logits[i * n:(i + 1) * n], yb)
        total = term if total is None else total + term
    model.zero_grad()
    ad.backward(total)
    sgd_step(model.parameters(), cfg.learning_rate, cfg.weight_decay)
    return {"loss_cls": total.item()}


def select_max_loss(losses: np.ndarray) -> np.ndarray:
    """Per-sample index of the perturbation type with the largest loss (``losses`` is types x samples)."""
    return np.argmax(np.asarray(losses), axis=0)


def _max_batch(model, xb, yb, cfg, epoch, b) -> np.ndarray:
    candidates = []
    losses = []
    for domain in range(1, len(cfg.attack_specs) + 1):
        spec = cfg.spec_for(domain).with_(seed=attack_seed(cfg.seed, epoch, b, domain))
        x_adv = pgd(model, xb, yb, spec).x_adv
        with model.frozen():
            losses.append(ad.softmax_cross_entropy(model(x_adv), yb, reduction="none").data)
        candidates.append(x_adv)
    pick = select_max_loss(np.stack(losses))
    return np.stack(candidates)[pick, np.arange(len(yb))]


def train(model: LeNet, data: Dataset, cfg: TrainConfig, on_epoch: Optional[Callable] = None,
          probe_layer: int = 0) -> TrainResult:
    """Train ``model`` in place with ``cfg.defense``; returns per-epoch mean losses."""
    _check_model(model, cfg)
    probe = ShadowProbe(model, probe_layer) if cfg.defense == "separate_bn" else None
    history = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums: Dict[str, float] = {}
        steps = 0
        for b, (xb, yb) in enumerate(batches(data, cfg.batch_size, cfg.seed, epoch)):
            if cfg.defense == "vanilla":
                stats = _train_joint_step(model, [xb], yb, cfg)
            elif cfg.defense == "avg":
                advs = _adversarial_batches(model, xb, yb, cfg, epoch, b, per_branch=False)
                stats = _train_joint_step(model, [x for x, _ in advs], yb, cfg)
            elif cfg.defense == "max":
                stats = _train_joint_step(model, [xb, _max_batch(model, xb, yb, cfg, epoch, b)], yb, cfg)
            else:
                advs = _adversarial_batches(model, xb, yb, cfg, epoch, b, per_branch=True)
                stats = _train_multibranch_step(model, advs, yb, cfg, fit_gates=cfg.defense == "gbn")
            for key, value in stats.items():
                sums[key] = sums.get(key, 0.0) + value
            steps += 1
        row = {"epoch": epoch + 1, **{k: v / max(steps, 1) for k, v in sums.items()}}
        history.append(row)
        log.info("epoch %d %s (%.1fs)", epoch + 1,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"),
                 time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(row)
    report = probe.report(cfg.domains) if probe is not None else None
    if probe is not None:
        probe.close()
    return TrainResult(model, history, report)


def build_model(cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None) -> LeNet:
    """Model matching the defense: gated for gbn, gate-less branches for separate_bn."""
    norm = {"gbn": "gbn", "separate_bn": "multibn"}.get(cfg.defense, "bn")
    base = model_cfg or ModelConfig()
    return LeNet(ModelConfig(**{**base.__dict__, "norm": norm, "num_branches": cfg.num_branches,
                                "seed": base.seed}))


# -- separate-BN statistics probe ---------------------------------------------
class ShadowProbe:
    """Running means of two halves of every clean batch at one gated block.

    The two shadow averages use the same update rule as the real branches,
    so their gap measures how far two statistics streams drawn from the same
    clean distribution drift apart.
    """

    def __init__(self, model: LeNet, layer: int = 0):
        self.block = model.gated_blocks[layer]
        self.layer = layer
        self.model = model
        channels = self.block.branches[0].channels
        self.half_a = np.zeros(channels)
        self.half_b = np.zeros(channels)
        self.alpha = self.block.branches[0].alpha
        self.block.hooks.append(self._observe)

    def _observe(self, block, x, domain):
        if domain != 0 or x.shape[0] < 2:
            return
        half = x.shape[0] // 2
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        a = self.alpha
        self.half_a = (1 - a) * self.half_a + a * x[:half].mean(axis=axes)
        self.half_b = (1 - a) * self.half_b + a * x[half:].mean(axis=axes)

    def close(self):
        if self._observe in self.block.hooks:
            self.block.hooks.remove(self._observe)

    def report(self, domains: Sequence[int]) -> "ProbeReport":
        return ProbeReport.from_model(self.model, domains, self.layer,
                                      float(np.abs(self.half_a - self.half_b).mean()))


@dataclass
class ProbeReport:
    rows: List[tuple]  # (layer, branch, channel, running_mean, running_var)
    divergence: Dict[int, float]  # branch -> mean |mu_branch - mu_clean| at the probed layer
    control: Optional[float]
    layer: int

    @classmethod
    def from_model(cls, model: LeNet, domains: Sequence[int] = (), layer: int = 0,
                   control: Optional[float] = None) -> "ProbeReport":
        rows = []
        for li, block in enumerate(model.gated_blocks):
            for bi, branch in enumerate(block.branches):
                for c in range(branch.channels):
                    rows.append((li + 1, bi, c, float(branch.running_mean[c]), float(branch.running_var[c])))
        block = model.gated_blocks[layer]
        clean = block.branches[0].running_mean
        divergence = {bi: float(np.abs(br.running_mean - clean).mean())
                      for bi, br in enumerate(block.branches) if bi > 0}
        return cls(rows, divergence, control, layer + 1)

    def csv_lines(self) -> list:
        lines = ["layer,branch,channel,running_mean,running_var"]
        lines += [f"{l},{b},{c},{m:.17g},{v:.17g}" for l, b, c, m, v in self.rows]
        return lines


def separate_bn_probe(model: LeNet, data: Dataset, cfg: TrainConfig, layer: int = 0) -> ProbeReport:
    """Train a gate-less multi-branch model with per-domain branches; report branch statistics."""
    if cfg.defense != "separate_bn":
        cfg = TrainConfig(**{**cfg.__dict__, "defense": "separate_bn"})
    return train(model, data, cfg, probe_layer=layer).probe


# -- evaluation ----------------------------------------------------------------
ATTACK_KINDS = ("pgd", "fgsm", "mi_fgsm", "gaussian", "gate_fooling", "branch_forced")


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    kind: str
    spec: AttackSpec
    branch: Optional[int] = None
    trials: int = 10
    domain: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")

    @property
    def norm(self) -> Norm:
        return self.spec.norm


def desk_suite(iterations: int = 20, restarts: int = 1, seed: int = 0, mi_iterations: int = 10,
               step_factor: Optional[float] = None) -> list:
    """PGD for each norm plus FGSM, MI-FGSM (Linf) and Gaussian noise (L2)."""
    specs = scaled_specs(iterations, seed=seed, restarts=restarts, step_factor=step_factor)
    linf = specs[Norm.LINF]
    return [
        SuiteEntry("pgd_l1", "pgd", specs[Norm.L1]),
        SuiteEntry("pgd_l2", "pgd", specs[Norm.L2]),
        SuiteEntry("gaussian_l2", "gaussian", specs[Norm.L2].with_(iterations=1)),
        SuiteEntry("pgd_linf", "pgd", linf),
        SuiteEntry("fgsm_linf", "fgsm", linf.with_(iterations=1, step_size=linf.epsilon)),
        SuiteEntry("mi_fgsm_linf", "mi_fgsm",
                   linf.with_(iterations=mi_iterations, step_size=linf.epsilon / mi_iterations, decay=1.0)),
    ]


def adaptive_suite(num_branches: int, iterations: int = 20, seed: int = 0, norms=NORM_ORDER,
                   step_factor: Optional[float] = None) -> list:
    """Gate-fooling PGD per norm and branch-forced PGD per (norm, branch)."""
    specs = scaled_specs(iterations, seed=seed, step_factor=step_factor)
    out = []
    for norm in norms:
        tag = norm.value.lower()
        out.append(SuiteEntry(f"gate_fooling_{tag}", "gate_fooling", specs[norm]))
        for k in range(num_branches):
            out.append(SuiteEntry(f"branch{k}_{tag}", "branch_forced", specs[norm], branch=k))
    return out


@dataclass
class EvalReport:
    clean_accuracy: float
    per_attack_accuracy: Dict[str, float]
    per_attack_norm: Dict[str, str]
    per_type_worst: Dict[str, float]
    all_attacks_accuracy: float
    gate_accuracy_per_layer: Optional[Dict[int, Dict[int, float]]] = None
    num_samples: int = 0

    def check_ordering(self, tol: float = 1e-12) -> bool:
        """all-attacks <= every per-type worst <= every attack of that type; all in [0, 1]."""
        values = [self.clean_accuracy, self.all_attacks_accuracy, *self.per_attack_accuracy.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            return False
        for norm, worst in self.per_type_worst.items():
            if self.all_attacks_accuracy > worst + tol:
                return False
            members = [a for n, a in self.per_attack_accuracy.items() if self.per_attack_norm[n] == norm]
            if any(worst > a + tol for a in members):
                return False
        return True

    def to_records(self, run_id: str = "eval", epoch="final") -> list:
        rec = [metric_record(run_id, epoch, "clean_accuracy", self.clean_accuracy)]
        for name, acc in self.per_attack_accuracy.items():
            rec.append(metric_record(run_id, epoch, "attack_accuracy", acc, attack=name,
                                     domain=self.per_attack_norm[name]))
        for norm, acc in self.per_type_worst.items():
            rec.append(metric_record(run_id, epoch, "per_type_worst", acc, domain=norm))
        rec.append(metric_record(run_id, epoch, "all_attacks_accuracy", self.all_attacks_accuracy))
        for layer, per_domain in (self.gate_accuracy_per_layer or {}).items():
            for domain, acc in per_domain.items():
                rec.append(metric_record(run_id, epoch, "gate_accuracy", acc, domain=domain, layer=layer))
        return rec

    def table(self) -> str:
        rows = [(n.value if isinstance(n, Norm) else n, self.per_type_worst[n]) for n in self.per_type_worst]
        rows += [("All attacks", self.all_attacks_accuracy), ("Clean", self.clean_accuracy)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'metric':<{width}}  accuracy"]
        lines += [f"{name:<{width}}  {100 * acc:6.2f}%" for name, acc in rows]
        return "\n".join(lines)


def _run_attack(model, entry: SuiteEntry, x, y, offset: int):
    spec = entry.spec
    if entry.kind == "pgd":
        return pgd(model, x, y, spec, keep_best=True, index_offset=offset)
    if entry.kind == "fgsm":
        return fgsm(model, x, y, spec.epsilon)
    if entry.kind == "mi_fgsm":
        return mi_fgsm(model, x, y, spec)
    if entry.kind == "gaussian":
        return gaussian_noise_attack(x, y, model, spec.epsilon, entry.trials, spec.seed, index_offset=offset)
    if entry.kind == "gate_fooling":
        return gate_fooling_pgd(model, x, y, spec, domain=entry.domain, keep_best=True, index_offset=offset)
    return branch_forced_attack(model, x, y, spec, entry.branch, keep_best=True, index_offset=offset)


def gate_predictions(model: LeNet, x: np.ndarray) -> list:
    """Top-1 gate prediction of every gated block for inputs ``x`` (soft forward)."""
    with model.frozen(), model.gating(GatingMode("soft")):
        model(x)
        return [b.last_gate_logits.data.argmax(axis=1) for b in model.gated_blocks]


def evaluate(model: LeNet, data: Dataset, suite: Sequence[SuiteEntry], gating: Optional[GatingMode] = None,
             batch_size: int = 250, gate_domains: Optional[Dict[int, Norm]] = None) -> EvalReport:
    """Clean, per-attack, per-type worst and all-attacks accuracy.

    ``gate_domains`` maps branch index -> norm for adversarial branches
    (branch 0 is clean); when given, gate accuracy is measured on clean
    inputs and on the suite's PGD examples of each mapped norm.
    """
    if not suite:
        raise ConfigError("evaluation needs at least one attack")
    names = [e.name for e in suite]
    if len(set(names)) != len(names):
        raise ConfigError("attack names in a suite must be unique")
    gated = bool(model.gates)
    n = len(data)
    correct_clean = np.zeros(n, dtype=bool)
    survived = {e.name: np.zeros(n, dtype=bool) for e in suite}
    gate_hits: Dict[int, Dict[int, int]] = {}
    pgd_by_norm = {e.norm: e.name for e in suite if e.kind == "pgd"}
    with model.gating(gating):
        for start, x, y in iterate(data, batch_size):
            sl = slice(start, start + len(y))
            with model.frozen():
                correct_clean[sl] = model(x).data.argmax(axis=1) == y
            adv_x = {}
            for entry in suite:
                result = _run_attack(model, entry, x, y, start)
                survived[entry.name][sl] = ~result.success_mask
                adv_x[entry.name] = result.x_adv
            if gate_domains and gated:
                labelled = [(0, x)] + [(k, adv_x[pgd_by_norm[norm]]) for k, norm in gate_domains.items()
                                       if norm in pgd_by_norm]
                for k, xs in labelled:
                    for layer, pred in enumerate(gate_predictions(model, xs), start=1):
                        hits = gate_hits.setdefault(layer, {})
                        hits[k] = hits.get(k, 0) + int((pred == k).sum())
    per_attack = {e.name: float(survived[e.name].mean()) for e in suite}
    norms = {e.name: e.norm.value for e in suite}
    per_type = {}
    for norm in NORM_ORDER:
        members = [per_attack[e.name] for e in suite if e.norm is norm]
        if members:
            per_type[norm.value] = min(members)
    all_correct = np.logical_and.reduce([survived[e.name] for e in suite])
    gate_acc = None
    if gate_hits:
        gate_acc = {layer: {k: v / n for k, v in sorted(hits.items())} for layer, hits in gate_hits.items()}
    report = EvalReport(float(correct_clean.mean()), per_attack, norms, per_type,
                        float(all_correct.mean()), gate_acc, n)
    if not report.check_ordering():
        raise AssertionError("evaluation report violates the worst-case ordering")
    return report


def held_out_perturbation_eval(model: LeNet, data: Dataset, suite: Sequence[SuiteEntry],
                               **kwargs) -> EvalReport:
    """Evaluate a model trained on a subset of perturbation types on the full suite."""
    return evaluate(model, data, suite, **kwargs)
