"""Conditional Branching Flows loss, reference (numpy) implementation.

Three per-element terms are summed: a Poisson-type Bregman term on the
expected remaining splits, a binary cross-entropy on the deletion
probability, and base-process terms (squared error on the continuous anchor,
cross-entropy on the anchor token). The differentiable twin used for
training lives in :mod:`branchflows.model`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax

from .conditional_path import PathTargets
from .hazard import HazardSpec

RHO_EPS = 1e-7


@dataclass
class Prediction:
    """Model outputs for every element of one state."""

    endpoint_mean: np.ndarray
    token_logits: np.ndarray
    log_splits: np.ndarray
    delete_logit: np.ndarray

    def __len__(self) -> int:
        return int(self.log_splits.shape[0])

    @property
    def splits(self) -> np.ndarray:
        return np.exp(self.log_splits)

    @property
    def delete_prob(self) -> np.ndarray:
        return expit(self.delete_logit)


@dataclass(frozen=True)
class LossWeights:
    """Per-term multipliers; ``time_weight="hazard"`` scales base terms by h(t)."""

    continuous: float = 1.0
    discrete: float = 1.0
    time_weight: str = "constant"
    hazard: HazardSpec | None = None
    max_time_weight: float = 100.0

    def base_scale(self, t: float) -> float:
        if self.time_weight == "constant":
            return 1.0
        if self.time_weight == "hazard":
            h = self.hazard or HazardSpec.uniform()
            return float(min(h.hazard_rate(min(t, 1.0 - 1e-12)), self.max_time_weight))
        raise ValueError(f"unknown time weighting {self.time_weight!r}")


def split_loss(R_target, R_pred):
    R_pred = np.asarray(R_pred, dtype=float)
    if np.any(R_pred <= 0):
        raise ValueError("predicted split count must be positive")
    out = R_pred - np.asarray(R_target, dtype=float) * np.log(R_pred)
    return out[()] if out.ndim == 0 else out


def deletion_loss(rho_target, rho_pred):
    rho = np.clip(np.asarray(rho_pred, dtype=float), RHO_EPS, 1.0 - RHO_EPS)
    y = np.asarray(rho_target, dtype=float)
    out = -(y * np.log(rho) + (1.0 - y) * np.log1p(-rho))
    return out[()] if out.ndim == 0 else out


def base_loss(anchor_continuous, anchor_token, endpoint_mean, token_logits, t: float = 0.0,
              weights: LossWeights = LossWeights()) -> tuple[float, float]:
    """(continuous, discrete) base terms for a single element."""
    scale = weights.base_scale(t)
    diff = np.asarray(endpoint_mean, dtype=float) - np.asarray(anchor_continuous, dtype=float)
    cont = weights.continuous * scale * float(np.sum(diff * diff))
    logits = np.asarray(token_logits, dtype=float)
    disc = 0.0
    if logits.size:
        disc = weights.discrete * scale * float(-log_softmax(logits)[int(anchor_token)])
    return cont, disc


def loss_terms(targets: PathTargets, pred: Prediction, weights: LossWeights = LossWeights()) -> dict[str, float]:
    """Summed per-term loss for one state; fixed elements contribute nothing."""
    if len(targets) != len(pred):
        raise ValueError(f"{len(targets)} targets but {len(pred)} predictions")
    live = ~np.asarray(targets.fixed, dtype=bool)
    split = float(np.sum(split_loss(targets.remaining_splits[live], pred.splits[live])))
    # logit form of the cross-entropy; equal to deletion_loss away from the clamp
    z = pred.delete_logit[live]
    y = targets.deleted[live]
    delete = float(np.sum(np.logaddexp(0.0, z) - y * z))
    cont = disc = 0.0
    for i in np.flatnonzero(live):
        c, d = base_loss(targets.anchor_continuous[i], targets.anchor_tokens[i], pred.endpoint_mean[i],
                         pred.token_logits[i], targets.t, weights)
        cont += c
        disc += d
    return {"split": split, "delete": delete, "continuous": cont, "discrete": disc,
            "total": split + delete + cont + disc}


def cbf_loss(batch: Sequence[tuple[PathTargets, Prediction]], weights: LossWeights = LossWeights()) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(np.mean([loss_terms(tg, pr, weights)["total"] for tg, pr in batch]))
