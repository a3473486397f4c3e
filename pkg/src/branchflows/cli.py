"""Command line entry point: train, sample, eval, simulate, gradcheck, selftest."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .checks import SUITES, run_suites
from .conditional_path import sample_conditional_path, trajectory_header, trajectory_rows
from .config import ConfigError, RunConfig
from .data import generate, generate_budget, read_sequences, seq_to_json, write_jsonl_lines
from .estimator import BranchingFlows
from .evaluation import evaluate
from .latent import build_latent
from .model import TrainingError, collate, grad_check, init_params, write_atomic
from .sampler import make_schedule
from .training import METRIC_COLUMNS, training_example

log = logging.getLogger("branchflows")


class CliError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "schedule", None) or (args.command == "sample" and args.steps):
        cfg = cfg.with_schedule(args.schedule, args.steps if args.command == "sample" else None)
    return cfg


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = cfg.with_steps(args.steps)
    out = Path(args.out or "run")
    rng = np.random.default_rng([args.seed, 1])
    if cfg.budget.n_train:
        data = generate(cfg.data, cfg.budget.n_train, rng)
    else:
        data = generate_budget(cfg.data, cfg.budget.max_elements, rng)
    # the element budget bounds the training set; repeated (Z, t) draws are unbounded
    cfg_train = cfg if cfg.budget.n_train else _without_draw_cap(cfg)
    est = BranchingFlows(cfg_train, seed=args.seed).fit(data)
    r = est.train_result_
    if r.stopped_by == "time":
        log.warning("wall-clock limit reached; the checkpoint is not reproducible")
    est.save(out / "checkpoint.bfck")
    rows = [[m[0]] + [repr(float(v)) for v in m[1:]] for m in r.metrics]
    write_atomic(out / "metrics.csv", _csv_text(METRIC_COLUMNS, rows))
    write_atomic(out / "config.json", cfg.to_json())
    print(f"trained {r.steps} steps on {sum(len(s) for s in data)} data elements "
          f"({r.elements_seen} drawn); checkpoint {out / 'checkpoint.bfck'}")
    return 0


def _without_draw_cap(cfg: RunConfig) -> RunConfig:
    from dataclasses import replace
    return replace(cfg, budget=replace(cfg.budget, max_elements=0))


def cmd_sample(args) -> int:
    if not args.checkpoint:
        raise CliError("sample needs --checkpoint")
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint {args.checkpoint} not found")
    est = BranchingFlows.load(args.checkpoint)
    if args.schedule or args.steps:
        est.config_ = est.config_.with_schedule(args.schedule, args.steps)
    n = args.n or est.config_.sampler.n_samples
    samples, res = est.sample(n, seed=args.seed, trajectory=True) if args.trajectory else \
        (est.sample(n, seed=args.seed), None)
    records = [{"elements": seq_to_json(s), "length": len(s), "seed": args.seed} for s in samples]
    out = Path(args.out or "samples.jsonl")
    write_atomic(out, write_jsonl_lines(records))
    if args.trajectory:
        write_atomic(args.trajectory, _csv_text(trajectory_header(est.config_.data.d), res.trajectory))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.samples:
        raise CliError("eval needs --samples")
    cfg = _load_config(args)
    generated = read_sequences(args.samples)
    if args.data:
        reference = read_sequences(args.data)
    else:
        reference = generate(cfg.data, args.n or len(generated), np.random.default_rng([args.seed, 2]))
    report = evaluate(generated, reference, cfg.data.K, cfg.data.d, seed=args.seed)
    text = report.to_json()
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)
    return 0 if report.passed else 1


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    rng = np.random.default_rng([args.seed, 3])
    n = args.n or 4
    grid = make_schedule(args.schedule or "uniform", args.steps or 10)
    data = generate(cfg.data, n, rng)
    out = Path(args.out or "simulate")
    zs, rows = [], []
    for i, x1 in enumerate(data):
        z = build_latent(x1, cfg.latent, cfg.data.d, cfg.data.K, rng)
        zs.append(z.to_json())
        for state, targets in sample_conditional_path(z, grid, cfg.processes, rng):
            rows += trajectory_rows(i, state, targets)
    write_atomic(out / "latent.jsonl", write_jsonl_lines(zs))
    write_atomic(out / "trajectory.csv", _csv_text(trajectory_header(cfg.data.d), rows))
    print(f"wrote {n} latent draws and {len(rows)} trajectory rows to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    rng = np.random.default_rng([args.seed, 4])
    data = generate(cfg.data, 4, rng)
    made = [training_example(x1, cfg, rng) for x1 in data]
    batch = collate([m[0] for m in made], [m[1] for m in made], cfg.model)
    err = grad_check(init_params(cfg.model, rng), batch, cfg.model, rng, weights=cfg.weights)
    ok = err < 1e-4
    print(f"{'PASS' if ok else 'FAIL'} grad check max relative error {err:.3e}")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    names = args.suite or list(SUITES)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise CliError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    lines = []
    ok = True
    for res in run_suites(args.seed, names):
        lines.append(res.line())
        print(res.line(), flush=True)
        ok &= res.passed
    if args.out:
        write_atomic(args.out, "".join(line + "\n" for line in lines))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchflows", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, schedule: bool = True):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--steps", type=int)
        if schedule:
            p.add_argument("--schedule", choices=("uniform", "cosine"))
        return p

    common(sub.add_parser("train", help="train a model; writes checkpoint, metrics CSV and config"))
    p = common(sub.add_parser("sample", help="sample sequences from a checkpoint as JSONL"))
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--trajectory", metavar="PATH", help="also write a trajectory CSV")
    p = common(sub.add_parser("eval", help="compare samples with data; writes an EvalReport JSON"))
    p.add_argument("--samples", metavar="PATH")
    p.add_argument("--data", metavar="PATH", help="reference JSONL (default: fresh draws from the config)")
    p.add_argument("--n", type=int, help="reference size when generating")
    p = common(sub.add_parser("simulate", help="dump latent draws and conditional paths"))
    p.add_argument("--n", type=int, help="number of latent draws")
    common(sub.add_parser("gradcheck", help="compare tape gradients with finite differences"))
    p = common(sub.add_parser("selftest", help="run the oracle-equivalence suites"))
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    return parser


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "simulate": cmd_simulate,
            "gradcheck": cmd_gradcheck, "selftest": cmd_selftest}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
