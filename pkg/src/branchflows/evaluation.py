"""Distribution-matching statistics between generated and reference sequences."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .latent import Element


def ks_overlap(samples_a, samples_b) -> float:
    """One minus the sup-distance between the two empirical CDFs."""
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(1.0 - np.max(np.abs(fa - fb)))


@dataclass
class EvalReport:
    overlaps: dict[str, float]
    token_l1: dict[str, float]
    n_generated: int
    n_reference: int
    seed: int | None = None
    thresholds: dict[str, float] = field(default_factory=lambda: {"length": 0.90, "marginal": 0.85,
                                                                   "token_l1": 0.1})

    def __post_init__(self) -> None:
        for k, v in self.overlaps.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"overlap {k}={v} outside [0, 1]")

    def failures(self) -> list[str]:
        bad = []
        for k, v in self.overlaps.items():
            need = self.thresholds["length"] if k == "length" else self.thresholds["marginal"]
            if v < need:
                bad.append(f"{k}: 1-KS {v:.4f} < {need}")
        for k, v in self.token_l1.items():
            if v > self.thresholds["token_l1"]:
                bad.append(f"{k}: L1 {v:.4f} > {self.thresholds['token_l1']}")
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures()

    def to_json(self) -> str:
        obj = asdict(self)
        obj["passed"] = self.passed
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _token_freqs(seqs: Sequence[Sequence[Element]], pos: int | None, K: int) -> tuple[np.ndarray, int]:
    if pos is None:
        toks = [e.token for s in seqs for e in s]
    else:
        toks = [s[pos].token for s in seqs if len(s) > pos]
    counts = np.bincount(np.asarray(toks, dtype=np.int64), minlength=K)[:K] if toks else np.zeros(K)
    n = len(toks)
    return (counts / n if n else counts.astype(float)), n


def pairwise_distances(seq: Sequence[Element]) -> np.ndarray:
    pts = np.array([e.continuous for e in seq])
    if len(pts) < 2:
        return np.zeros(0)
    diff = pts[:, None, :] - pts[None, :, :]
    iu = np.triu_indices(len(pts), 1)
    return np.sqrt((diff**2).sum(-1))[iu]


def evaluate(generated: Sequence[Sequence[Element]], reference: Sequence[Sequence[Element]], K: int, d: int,
             seed: int | None = None, min_support: int | None = None, tokens: bool | None = None) -> EvalReport:
    """Length and marginal statistics.

    Token frequencies (by default only for discrete-only data, ``d == 0``) are
    compared per position wherever both sets have at least ``min_support``
    sequences reaching that position (default: a fifth of the smaller set),
    and also pooled over all positions. Continuous data is compared through
    coordinate marginals and within-sequence pairwise distances.
    """
    if not generated or not reference:
        raise ValueError("need generated and reference samples")
    overlaps = {"length": ks_overlap([len(s) for s in generated], [len(s) for s in reference])}
    token_l1: dict[str, float] = {}
    if tokens is None:
        tokens = d == 0
    if K and tokens:
        fg, _ = _token_freqs(generated, None, K)
        fr, _ = _token_freqs(reference, None, K)
        token_l1["all"] = float(np.abs(fg - fr).sum())
        floor = min_support if min_support is not None else min(len(generated), len(reference)) // 5
        pos = 0
        while True:
            fg, ng = _token_freqs(generated, pos, K)
            fr, nr = _token_freqs(reference, pos, K)
            if min(ng, nr) < max(floor, 1):
                break
            token_l1[f"pos{pos}"] = float(np.abs(fg - fr).sum())
            pos += 1
    if d:
        cg = np.concatenate([[e.continuous for e in s] for s in generated if s])
        cr = np.concatenate([[e.continuous for e in s] for s in reference if s])
        for j in range(d):
            overlaps[f"x{j}"] = ks_overlap(cg[:, j], cr[:, j])
        overlaps["pair_distance"] = ks_overlap(np.concatenate([pairwise_distances(s) for s in generated] + [[]]),
                                               np.concatenate([pairwise_distances(s) for s in reference] + [[]]))
    return EvalReport(overlaps, token_l1, len(generated), len(reference), seed)
