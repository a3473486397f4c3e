"""Training loop and model-driven sampling.

Every training example draws its own generator from
``SeedSequence(seed, spawn_key=(step, i))`` so results do not depend on how
batch assembly is scheduled across workers.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditional_path import PathTargets, sample_conditional_state
from .config import RunConfig
from .latent import AugState, Element, build_latent
from .model import Batch, ModelConfig, collate, forward_arrays, init_optimizer, init_params, train_step
from .objective import Prediction
from .sampler import FlatState, SampleResult, sample

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "split", "delete", "continuous", "discrete", "total"]


def worker_count() -> int:
    raw = os.environ.get("BF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"BF_THREADS must be an integer, got {raw!r}") from None


def example_rng(seed: int, step: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, i)))


def training_example(x1: Sequence[Element], cfg: RunConfig, rng: np.random.Generator) -> tuple[AugState, PathTargets]:
    """Draw Z given x1, then t from the training time law, then the conditional state at t."""
    z = build_latent(x1, cfg.latent, cfg.data.d, cfg.data.K, rng)
    t = cfg.model.draw_time(rng)
    p = cfg.processes
    return sample_conditional_state(z, t, p.split_hazard, p.del_hazard, p.ou, p.dfm, rng)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    metrics: list[list]
    steps: int
    elements_seen: int
    seconds: float
    stopped_by: str = "steps"
    extra: dict = field(default_factory=dict)


def train(cfg: RunConfig, dataset: Sequence[Sequence[Element]], seed: int,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run up to ``cfg.model.steps`` optimiser steps within the element budget.

    ``elements_seen`` counts data elements (|x1|) over every training example
    drawn. The wall-clock limit is a safety stop only; runs that hit it are
    flagged in ``stopped_by`` since they are no longer reproducible.
    """
    if not dataset:
        raise ValueError("empty training set")
    mcfg = cfg.model
    params = init_params(mcfg, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,))))
    opt = init_optimizer(params)
    ema = dict(params)
    budget = cfg.budget
    metrics: list[list] = []
    seen = 0
    start = time.perf_counter()
    stopped = "steps"
    pool = ThreadPoolExecutor(worker_count()) if worker_count() > 1 else None

    def build(step: int, i: int):
        rng = example_rng(seed, step, i)
        x1 = dataset[int(rng.integers(len(dataset)))]
        return len(x1), training_example(x1, cfg, rng)

    step = 0
    try:
        for step in range(mcfg.steps):
            jobs = [(step, i) for i in range(mcfg.batch_size)]
            made = list(pool.map(lambda a: build(*a), jobs)) if pool else [build(*a) for a in jobs]
            n_elem = sum(m[0] for m in made)
            if budget.max_elements and seen + n_elem > budget.max_elements:
                stopped = "elements"
                break
            if budget.max_seconds and time.perf_counter() - start > budget.max_seconds:
                stopped = "time"
                log.warning("training stopped by the wall-clock limit after %d steps", step)
                break
            seen += n_elem
            batch = collate([m[1][0] for m in made], [m[1][1] for m in made], mcfg)
            params, opt, terms = train_step(params, opt, batch, mcfg, cfg.weights, mcfg.lr_at(step))
            if mcfg.ema:
                a = mcfg.ema
                ema = {k: a * ema[k] + (1.0 - a) * v for k, v in params.items()}
            metrics.append([step] + [terms[k] for k in METRIC_COLUMNS[1:]])
            if on_step is not None:
                on_step(step, terms)
        else:
            step = mcfg.steps
    finally:
        if pool is not None:
            pool.shutdown()
    final = ema if mcfg.ema else params
    return TrainResult(final, metrics, len(metrics), seen, time.perf_counter() - start, stopped)


class ModelPredictor:
    """Runs the regressor over a flat ragged state, in length-sorted chunks."""

    def __init__(self, params: dict[str, np.ndarray], cfg: ModelConfig, chunk: int = 512):
        self.params = params
        self.cfg = cfg
        self.chunk = chunk

    def __call__(self, t: float, state: FlatState) -> Prediction:
        n = len(state)
        cfg = self.cfg
        mu = np.zeros((n, cfg.d))
        logits = np.zeros((n, cfg.n_states))
        ls = np.zeros(n)
        dl = np.zeros(n)
        lengths = state.lengths()
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        order = np.argsort(lengths, kind="stable")
        order = order[lengths[order] > 0]
        for c in range(0, len(order), self.chunk):
            ids = order[c:c + self.chunk]
            L = int(lengths[ids].max())
            j = np.arange(L)
            valid = j[None, :] < lengths[ids][:, None]
            idx = np.where(valid, starts[ids][:, None] + j[None, :], 0)
            batch = Batch(np.full(len(ids), float(t)), state.continuous[idx] * valid[..., None],
                          np.where(valid, state.tokens[idx], cfg.K), state.fixed[idx] & valid,
                          valid.astype(float))
            out = forward_arrays(self.params, batch, cfg)
            flat = idx[valid]
            mu[flat] = out["mu"][valid]
            logits[flat] = out["logits"][valid]
            ls[flat] = out["log_splits"][valid]
            dl[flat] = out["delete_logit"][valid]
        return Prediction(mu, logits, ls, dl)


def generate(params: dict[str, np.ndarray], cfg: RunConfig, n_samples: int, seed: int,
             trajectory: bool = False, init: Sequence | None = None) -> SampleResult:
    rng = np.random.default_rng(seed)
    return sample(ModelPredictor(params, cfg.model), cfg.sampler.schedule, cfg.processes, cfg.data.d, rng,
                  n_samples=n_samples, init=init if init is not None else cfg.sampler.init, trajectory=trajectory)
