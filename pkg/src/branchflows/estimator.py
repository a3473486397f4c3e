"""scikit-learn style wrapper: ``fit`` on sequences, ``sample`` new ones."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .latent import Element, group_blocks
from .model import collate, load_checkpoint, loss_value, save_checkpoint
from .training import TrainResult, generate, train, training_example


def as_sequence(seq: Any) -> list[Element]:
    """Accept Elements or ``{"continuous": [...], "token": k}`` dicts."""
    out = []
    for e in seq:
        if isinstance(e, Element):
            out.append(e)
        elif isinstance(e, dict):
            out.append(Element.from_dict(e))
        else:
            raise TypeError(f"sequence items must be Element or dict, got {type(e).__name__}")
    return out


def check_sequences(X: Sequence, d: int, K: int) -> list[list[Element]]:
    """Validate a batch of sequences against the continuous dimension and alphabet."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of sequences")
    if len(X) == 0:
        raise ValueError("X is empty")
    out = []
    for i, seq in enumerate(X):
        seq = as_sequence(seq)
        if not seq:
            raise ValueError(f"sequence {i} is empty")
        for j, e in enumerate(seq):
            if e.continuous.shape[0] != d:
                raise ValueError(f"sequence {i} element {j}: {e.continuous.shape[0]} continuous dims, expected {d}")
            if not np.all(np.isfinite(e.continuous)):
                raise ValueError(f"sequence {i} element {j}: non-finite value")
            if K and not 0 <= e.token < K:
                raise ValueError(f"sequence {i} element {j}: token {e.token} outside [0, {K})")
        group_blocks(seq)
        out.append(seq)
    return out


class BranchingFlows(BaseEstimator):
    """Generative estimator over variable-length sequences.

    Parameters
    ----------
    config : RunConfig, dict or None
        Full run description; ``None`` uses defaults.
    seed : int
        Seeds training-example draws, initialisation and sampling.
    steps : int or None
        Overrides the number of optimiser steps in ``config``.
    """

    def __init__(self, config: RunConfig | dict | None = None, seed: int = 0, steps: int | None = None):
        self.config = config
        self.seed = seed
        self.steps = steps

    def _resolved_config(self) -> RunConfig:
        cfg = self.config
        if cfg is None:
            cfg = RunConfig()
        elif isinstance(cfg, dict):
            cfg = RunConfig.from_dict(cfg)
        elif not isinstance(cfg, RunConfig):
            raise TypeError("config must be a RunConfig, a dict or None")
        if self.steps is not None:
            cfg = cfg.with_steps(int(self.steps))
        return cfg

    def fit(self, X: Sequence, y=None) -> "BranchingFlows":
        cfg = self._resolved_config()
        data = check_sequences(X, cfg.data.d, cfg.data.K)
        result = train(cfg, data, int(self.seed))
        self.config_ = cfg
        self.params_ = result.params
        self.train_result_ = result
        self.n_features_in_ = cfg.data.d
        return self

    def sample(self, n_samples: int = 1, seed: int | None = None, init: Sequence | None = None,
               trajectory: bool = False):
        """Generate ``n_samples`` sequences (and the trajectory rows if asked)."""
        check_is_fitted(self, "params_")
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        res = generate(self.params_, self.config_, n_samples, self.seed if seed is None else seed,
                       trajectory=trajectory, init=init)
        return (res.samples, res) if trajectory else res.samples

    def score(self, X: Sequence, y=None, n_draws: int = 1) -> float:
        """Negative mean loss on fresh (Z, t) draws for each sequence; higher is better."""
        check_is_fitted(self, "params_")
        cfg = self.config_
        data = check_sequences(X, cfg.data.d, cfg.data.K)
        rng = np.random.default_rng([int(self.seed), 7919])
        made = [training_example(x1, cfg, rng) for x1 in data for _ in range(n_draws)]
        batch = collate([m[0] for m in made], [m[1] for m in made], cfg.model)
        return -loss_value(self.params_, batch, cfg.model, cfg.weights)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "params_")
        r: TrainResult = self.train_result_
        header = {"config": self.config_.to_dict(), "seed": int(self.seed), "steps": r.steps,
                  "elements_seen": r.elements_seen, "stopped_by": r.stopped_by}
        save_checkpoint(path, header, self.params_, self.config_.model)

    @classmethod
    def load(cls, path: str | Path) -> "BranchingFlows":
        header, params, mcfg = load_checkpoint(path)
        cfg = RunConfig.from_dict(header["config"])
        cfg = replace(cfg, model=mcfg)
        est = cls(config=cfg, seed=int(header.get("seed", 0)))
        est.config_ = cfg
        est.params_ = params
        est.train_result_ = TrainResult(params, [], int(header.get("steps", 0)), int(header.get("elements_seen", 0)),
                                        0.0, header.get("stopped_by", "steps"))
        est.n_features_in_ = cfg.data.d
        return est
