"""Glue between an :class:`ExperimentConfig` and the training/evaluation code."""
from __future__ import annotations

from typing import Optional

from .attacks import Norm
from .config import ExperimentConfig
from .data import load_mnist
from .train import SuiteEntry, adaptive_suite, desk_suite


def load_data(cfg: ExperimentConfig) -> tuple:
    return load_mnist(cfg.data.mnist_dir, cfg.data.train_count, cfg.data.test_count)


def eval_suite(cfg: ExperimentConfig) -> list:
    ev = cfg.eval
    suite = desk_suite(ev.iterations, ev.restarts, cfg.seed, ev.mi_iterations, ev.step_factor)
    return [e if e.kind != "gaussian" else SuiteEntry(e.name, e.kind, e.spec, trials=ev.gaussian_trials)
            for e in suite]


def gate_domains(cfg: ExperimentConfig) -> dict:
    """Branch index -> perturbation norm for every adversarial branch."""
    return {branch: cfg.train.spec_for(domain).norm
            for branch, domain in enumerate(cfg.train.domains) if domain > 0}


def branch_of_norm(cfg: ExperimentConfig, norm: Norm) -> Optional[int]:
    for branch, n in gate_domains(cfg).items():
        if n is norm:
            return branch
    return None


def adaptive_entries(cfg: ExperimentConfig) -> list:
    """Gate-fooling attacks aimed at the branch of their own norm, plus branch-forced attacks."""
    norms = list(gate_domains(cfg).values())
    entries = adaptive_suite(cfg.train.num_branches, cfg.eval.iterations, cfg.seed, norms, cfg.eval.step_factor)
    return [e if e.kind != "gate_fooling" else
            SuiteEntry(e.name, e.kind, e.spec, domain=branch_of_norm(cfg, e.norm)) for e in entries]
