"""Command line entry point: ``gbnlab train|eval|geometry|stats-probe``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from typing import Optional

import numpy as np

from . import geometry
from .config import ConfigParseError, ExperimentConfig, load_config
from .data import load_checkpoint, metric_record, save_checkpoint, write_metrics
from .experiment import adaptive_entries, eval_suite, gate_domains, load_data
from .gbn import GatingMode
from .train import ProbeReport, build_model, evaluate, train

log = logging.getLogger("gbnlab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "model.gbnckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _prepare_out_dir(cfg: ExperimentConfig, override: Optional[str]) -> str:
    out = override or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(cfg.text)
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _prepare_out_dir(cfg, args.out_dir)
    train_set, _ = load_data(cfg)
    model = build_model(cfg.train, cfg.model)
    run_id = f"{cfg.train.defense}-seed{cfg.seed}"
    metrics_path = os.path.join(out, "train_metrics.jsonl")
    write_metrics([], metrics_path)
    result = train(model, train_set, cfg.train,
                   on_epoch=lambda row: write_metrics(_epoch_records(run_id, row), metrics_path, append=True))
    save_checkpoint(model, os.path.join(out, CHECKPOINT_NAME),
                    rng_state={"seed": cfg.seed, "epochs_done": cfg.train.epochs})
    if result.probe is not None:
        _write_probe(result.probe, out)
    print(f"trained {run_id}: checkpoint {os.path.join(out, CHECKPOINT_NAME)}")
    return EXIT_OK


def _epoch_records(run_id, row):
    return [metric_record(run_id, row["epoch"], k, v) for k, v in row.items() if k != "epoch"]


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _prepare_out_dir(cfg, args.out_dir)
    gating = GatingMode.parse(args.gating) if args.gating else cfg.gating
    model = build_model(cfg.train, cfg.model)
    load_checkpoint(model, args.checkpoint or os.path.join(cfg.out_dir, CHECKPOINT_NAME))
    if not model.gates:
        gating = None
    _, test_set = load_data(cfg)
    run_id = f"{cfg.train.defense}-seed{cfg.seed}-{gating or 'plain'}"
    report = evaluate(model, test_set, eval_suite(cfg), gating=gating, batch_size=cfg.eval.batch_size,
                      gate_domains=gate_domains(cfg) if model.gates else None)
    records = report.to_records(run_id)
    print(report.table())
    if cfg.eval.adaptive and model.gates:
        subset = test_set.subset(cfg.eval.adaptive_samples)
        adaptive_report = evaluate(model, subset, adaptive_entries(cfg), gating=gating, batch_size=cfg.eval.batch_size)
        records += adaptive_report.to_records(run_id + "-adaptive")
        print("\nadaptive attacks")
        print(adaptive_report.table())
    write_metrics(records, os.path.join(out, "eval_metrics.jsonl"))
    return EXIT_OK


def parse_vector(text: str) -> np.ndarray:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"malformed weight vector {text!r}: {exc}") from exc
    if not values or not all(math.isfinite(v) for v in values):
        raise UsageError(f"malformed weight vector {text!r}")
    return np.array(values)


def cmd_geometry(args) -> int:
    w = parse_vector(args.w)
    if not math.isfinite(args.epsilon) or args.epsilon < 0:
        raise UsageError("epsilon must be a finite non-negative number")
    clf = geometry.LinearClassifier(w)
    eps = args.epsilon
    print(f"w = {np.array2string(w, separator=', ')}  epsilon = {eps:g}")
    for p in geometry.NORMS:
        delta = geometry.optimal_perturbation(clf, 1, eps, p)
        name = "inf" if p == math.inf else str(int(p))
        print(f"delta_{name:<3} = {np.array2string(delta, precision=6, separator=', ')}")
    print(f"{'pair':<10}{'closed_form':>14}{'oracle':>14}{'residual':>12}")
    for p, q, closed, oracle in geometry.all_pairs(clf, eps):
        label = "/".join("inf" if v == math.inf else str(int(v)) for v in (p, q))
        print(f"{label:<10}{closed:>14.6f}{oracle:>14.6f}{abs(closed - oracle):>12.2e}")
    return EXIT_OK


def _write_probe(report: ProbeReport, out: str):
    with open(os.path.join(out, "branch_stats.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.csv_lines()) + "\n")


def cmd_stats_probe(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _prepare_out_dir(cfg, args.out_dir)
    if cfg.train.defense not in ("gbn", "separate_bn"):
        raise RuntimeError(f"statistics probe needs a multi-branch model, config defense is {cfg.train.defense!r}")
    model = build_model(cfg.train, cfg.model)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
        report = ProbeReport.from_model(model)
    else:
        probe_cfg = cfg.train
        if probe_cfg.defense != "separate_bn":
            raise RuntimeError("training a probe needs defense = \"separate_bn\"; pass --checkpoint for gbn models")
        train_set, _ = load_data(cfg)
        report = train(model, train_set, probe_cfg).probe
    _write_probe(report, out)
    print("\n".join(report.csv_lines()))
    for branch, value in report.divergence.items():
        print(f"# layer {report.layer} divergence branch {branch} vs clean: {value:.6g}")
    if report.control is not None:
        print(f"# layer {report.layer} clean-split control: {report.control:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gbnlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir")
        p.add_argument("--seed", type=int)
        if checkpoint:
            p.add_argument("--checkpoint")
        return p

    common(sub.add_parser("train", help="train a model from a config")).set_defaults(func=cmd_train)
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint under the attack suite"), checkpoint=True)
    ev.add_argument("--gating", help="soft, hard or forced:K")
    ev.set_defaults(func=cmd_eval)
    geo = sub.add_parser("geometry", help="closed-form perturbation geometry of a linear classifier")
    geo.add_argument("--w", required=True, help="comma-separated weights, e.g. 3,4")
    geo.add_argument("--epsilon", type=float, default=1.0)
    geo.set_defaults(func=cmd_geometry)
    probe = common(sub.add_parser("stats-probe", help="per-branch running statistics as CSV"), checkpoint=True)
    probe.set_defaults(func=cmd_stats_probe)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "gating", None):
            GatingMode.parse(args.gating)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, IndexError) as exc:
        print(f"usage error: bad --gating: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ConfigParseError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not re-raised: exit code is the contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
