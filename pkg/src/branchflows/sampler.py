"""Euler sampling of the marginal branching process.

Many sequences are advanced together as one flat, ragged batch: element
arrays carry a ``sample_id`` and stay grouped by sample in sequence order.
Each step moves the base state first (OU bridge toward the predicted
endpoint, token CTMC toward the predicted token law), then draws deletions
and splits, deletion taking priority.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import expit, softmax

from .base_process import DFMSpec, OUSpec, dfm_step_many, ou_bridge_params
from .conditional_path import Processes
from .hazard import HazardSpec
from .latent import AugState, BranchId, Element, LatentZ
from .objective import Prediction


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "cosine"
    n_steps: int = 200

    def grid(self) -> np.ndarray:
        return make_schedule(self.kind, self.n_steps)


def make_schedule(kind: str, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two steps")
    tau = np.arange(n + 1) / n
    if kind == "uniform":
        grid = tau
    elif kind == "cosine":
        grid = 1.0 - (np.cos(np.pi * tau) + 1.0) / 2.0
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    grid[0], grid[-1] = 0.0, 1.0
    return grid


@dataclass
class FlatState:
    """Elements of many sequences, grouped by ``sample_id`` in order."""

    sample_id: np.ndarray
    continuous: np.ndarray
    tokens: np.ndarray
    fixed: np.ndarray
    groups: np.ndarray
    branches: np.ndarray
    n_samples: int
    aux: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.sample_id.shape[0])

    def lengths(self) -> np.ndarray:
        return np.bincount(self.sample_id, minlength=self.n_samples)

    def take(self, idx: np.ndarray) -> "FlatState":
        return FlatState(self.sample_id[idx], self.continuous[idx], self.tokens[idx], self.fixed[idx],
                         self.groups[idx], self.branches[idx], self.n_samples,
                         None if self.aux is None else self.aux[idx])

    def sequence(self, b: int) -> list[Element]:
        idx = np.flatnonzero(self.sample_id == b)
        return [Element(self.continuous[i].copy(), int(self.tokens[i]), int(self.groups[i]), bool(self.fixed[i]))
                for i in idx]

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[Element]], d: int) -> "FlatState":
        sid, cont, tok, fixed, grp, br = [], [], [], [], [], []
        for b, seq in enumerate(seqs):
            tree = 0
            for e in seq:
                sid.append(b)
                cont.append(e.continuous)
                tok.append(e.token)
                fixed.append(e.fixed)
                grp.append(e.group)
                if e.fixed:
                    br.append(None)
                else:
                    br.append(BranchId(tree))
                    tree += 1
        n = len(sid)
        branches = np.empty(n, dtype=object)
        branches[:] = br
        return cls(np.asarray(sid, dtype=np.int64), np.asarray(cont, dtype=float).reshape(n, d),
                   np.asarray(tok, dtype=np.int64), np.asarray(fixed, dtype=bool),
                   np.asarray(grp, dtype=np.int64), branches, len(seqs))


class Predictor(Protocol):
    def __call__(self, t: float, state: FlatState) -> Prediction: ...


def _token_probs(logits: np.ndarray) -> np.ndarray:
    return softmax(logits, axis=-1)


def euler_step_flat(state: FlatState, pred: Prediction, t: float, dt: float, proc: Processes,
                    rng: np.random.Generator, aux_split: Callable | None = None):
    """Advance every element by one step; returns (state, splits, deletions) per sample."""
    if dt <= 0 or t + dt > 1.0 + 1e-12:
        raise ValueError("need dt > 0 and t + dt <= 1")
    v = min(t + dt, 1.0)
    live = ~state.fixed
    cont = state.continuous.copy()
    toks = state.tokens.copy()
    d = cont.shape[1]
    if d and np.any(live):
        mean, var = ou_bridge_params(proc.ou, cont[live], pred.endpoint_mean[live], t, v)
        if var > 0:
            mean = mean + math.sqrt(var) * rng.standard_normal(mean.shape)
        cont[live] = mean
    if proc.dfm.K and np.any(live):
        toks[live] = dfm_step_many(proc.dfm, toks[live], _token_probs(pred.token_logits[live]), t, v - t, rng)

    n = len(state)
    h_del = float(proc.del_hazard.hazard_rate(t))
    h_split = float(proc.split_hazard.hazard_rate(t))
    with np.errstate(over="ignore"):
        p_del = np.minimum(1.0, dt * h_del * pred.delete_prob)
        p_split = np.minimum(1.0, dt * h_split * pred.splits)
    u_del = rng.random(n)
    u_split = rng.random(n)
    dies = live & (u_del < p_del)
    splits = live & ~dies & (u_split < p_split)
    counts = 1 - dies.astype(np.int64) + splits.astype(np.int64)
    idx = np.repeat(np.arange(n), counts)
    new = replace(state, continuous=cont, tokens=toks).take(idx)
    if np.any(splits):
        first = np.cumsum(counts) - counts
        pos = first[splits]
        parents = new.branches[pos]
        new.branches[pos] = [b.child(0) for b in parents]
        new.branches[pos + 1] = [b.child(1) for b in parents]
        if new.aux is not None and aux_split is not None:
            a = new.aux[pos]
            new.aux[pos] = aux_split(a, 0)
            new.aux[pos + 1] = aux_split(a, 1)
    per_split = np.bincount(state.sample_id[splits], minlength=state.n_samples)
    per_del = np.bincount(state.sample_id[dies], minlength=state.n_samples)
    return new, per_split, per_del


def euler_step(state: AugState, prediction: Prediction, t: float, dt: float, split_hazard: HazardSpec,
               del_hazard: HazardSpec, ou: OUSpec, dfm: DFMSpec, rng: np.random.Generator) -> AugState:
    """Single-sequence Euler step (wrapper around :func:`euler_step_flat`)."""
    n = len(state)
    branches = np.empty(n, dtype=object)
    branches[:] = [b if b is not None else None for b in state.branches]
    flat = FlatState(np.zeros(n, dtype=np.int64), state.continuous, state.tokens, state.fixed, state.groups,
                     branches, 1)
    new, _, _ = euler_step_flat(flat, prediction, t, dt, Processes(split_hazard, del_hazard, ou, dfm), rng)
    return AugState(min(t + dt, 1.0), new.continuous, new.tokens, new.groups, new.fixed, list(new.branches))


def initial_state(init: Sequence[int | Element], d: int, K: int, rng: np.random.Generator) -> list[Element]:
    """x0 for one sample: ints are designable blocks of that many elements, Elements are kept fixed."""
    out = []
    group = 0
    for item in init:
        if isinstance(item, Element):
            out.append(item.copy(fixed=True))
            continue
        n = int(item)
        if n < 1:
            raise ValueError("initial lengths must be >= 1 per group")
        out += [Element(rng.standard_normal(d), K, group) for _ in range(n)]
        group += 1
    return out


@dataclass
class SampleResult:
    samples: list[list[Element]]
    initial_lengths: np.ndarray
    n_splits: np.ndarray
    n_deletions: np.ndarray
    trajectory: list[list] = field(default_factory=list)


def _snapshot(state: FlatState, t: float, pred: Prediction | None) -> list[list]:
    rows = []
    sid = state.sample_id
    starts = np.searchsorted(sid, np.arange(state.n_samples))
    for i in range(len(state)):
        b = state.branches[i]
        row = [int(sid[i]), repr(float(t)), int(i - starts[sid[i]]), -1 if b is None else b.tree,
               "" if b is None else str(b)]
        row += [repr(float(x)) for x in state.continuous[i]]
        row.append(int(state.tokens[i]))
        if pred is None:
            row += ["", ""]
        else:
            row += [repr(float(pred.splits[i])), repr(float(pred.delete_prob[i]))]
        rows.append(row)
    return rows


def sample(predictor: Predictor, schedule: StepSchedule | np.ndarray, proc: Processes, d: int,
           rng: np.random.Generator, n_samples: int = 1, init: Sequence[int | Element] = (1,),
           x0: Sequence[Sequence[Element]] | None = None, aux: np.ndarray | None = None,
           aux_split: Callable | None = None, trajectory: bool = False) -> SampleResult:
    """Generate sequences by Euler integration over ``schedule``.

    The last step is followed by a snap: continuous coordinates are set to the
    predicted endpoint and tokens are drawn from the predicted logits with the
    mask class excluded.
    """
    grid = schedule.grid() if isinstance(schedule, StepSchedule) else np.asarray(schedule, dtype=float)
    if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must increase strictly from 0 to 1")
    K = proc.dfm.K
    if x0 is None:
        x0 = [initial_state(init, d, K, rng) for _ in range(n_samples)]
    state = FlatState.from_sequences(x0, d)
    if aux is not None:
        state.aux = np.asarray(aux, dtype=np.int64).copy()
    init_len = state.lengths()
    total_splits = np.zeros(state.n_samples, dtype=np.int64)
    total_dels = np.zeros(state.n_samples, dtype=np.int64)
    rows: list[list] = []
    for k in range(len(grid) - 1):
        t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
        pred = predictor(t, state)
        if trajectory:
            rows += _snapshot(state, t, pred)
        state, s, dl = euler_step_flat(state, pred, t, dt, proc, rng, aux_split)
        total_splits += s
        total_dels += dl
    if len(state):
        pred = predictor(1.0, state)
        live = ~state.fixed
        state.continuous[live] = pred.endpoint_mean[live]
        if K:
            probs = _token_probs(pred.token_logits[live])
            probs[:, K:] = 0.0
            norm = probs.sum(axis=1, keepdims=True)
            fallback = norm[:, 0] <= 0
            probs = np.where(norm > 0, probs / np.where(norm > 0, norm, 1.0), 0.0)
            if np.any(fallback):
                probs[fallback, np.argmax(pred.token_logits[live][fallback][:, :K], axis=1)] = 1.0
            cum = np.cumsum(probs, axis=1)
            u = rng.random(cum.shape[0]) * cum[:, -1]
            state.tokens[live] = np.minimum((cum <= u[:, None]).sum(axis=1), K - 1)
        if trajectory:
            rows += _snapshot(state, 1.0, None)
    return SampleResult([state.sequence(b) for b in range(state.n_samples)], init_len, total_splits, total_dels,
                        rows)


class OraclePredictor:
    """Predictions read off known latent draws: exact targets instead of a model.

    Elements carry, in ``FlatState.aux``, the arena index of the node ahead of
    them in a forest concatenated over all the latent draws.
    """

    def __init__(self, zs: Sequence[LatentZ]):
        self.zs = list(zs)
        left, right, w, dele, ac, at, roots = [], [], [], [], [], [], []
        offset = 0
        d = self.zs[0].d
        for z in self.zs:
            arr = z.forest.arrays()
            n = arr["w"].shape[0]
            left.append(np.where(arr["left"] >= 0, arr["left"] + offset, -1))
            right.append(np.where(arr["right"] >= 0, arr["right"] + offset, -1))
            w.append(arr["w"])
            dele.append(arr["deleted"])
            ac.append(arr["anchor_cont"])
            at.append(arr["anchor_tok"])
            roots.append([r + offset for r in z.forest.roots])
            offset += n
        self.left = np.concatenate(left)
        self.right = np.concatenate(right)
        self.w = np.concatenate(w)
        self.deleted = np.concatenate(dele)
        self.anchor_cont = np.concatenate(ac).reshape(self.w.shape[0], d)
        self.anchor_tok = np.concatenate(at)
        self.roots = roots
        self.n_states = self.zs[0].K + 1

    def initial(self) -> tuple[list[list[Element]], np.ndarray]:
        """x0 of every draw and the matching root (or -1 for fixed) aux ids."""
        x0s, aux = [], []
        for z, roots in zip(self.zs, self.roots):
            x0s.append([e.copy() for e in z.x0])
            it = iter(roots)
            aux += [-1 if e.fixed else next(it) for e in z.x0]
        return x0s, np.asarray(aux, dtype=np.int64)

    def split(self, nodes: np.ndarray, choice: int) -> np.ndarray:
        return (self.right if choice else self.left)[nodes]

    def __call__(self, t: float, state: FlatState) -> Prediction:
        nodes = state.aux
        n = len(state)
        safe = np.where(nodes >= 0, nodes, 0)
        fixed = nodes < 0
        with np.errstate(divide="ignore"):
            log_splits = np.log((self.w[safe] - 1).astype(float))
        log_splits[fixed] = -np.inf
        delete_logit = np.where(self.deleted[safe] & ~fixed, np.inf, -np.inf)
        mean = self.anchor_cont[safe].copy()
        mean[fixed] = state.continuous[fixed]
        logits = np.full((n, self.n_states), -np.inf)
        tok = np.where(fixed, state.tokens, self.anchor_tok[safe])
        logits[np.arange(n), tok] = 0.0
        return Prediction(mean, logits, log_splits, delete_logit)
