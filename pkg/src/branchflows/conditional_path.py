"""Sampling the conditional state at time t given a latent draw.

Element values are dependent through shared ancestry, so there is no
per-element shortcut: each tree is walked depth-first, drawing the waiting
time to the node's split (or deletion) and bridging the element value to
that time, then recursing into the children with copies of the value.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .base_process import DFMSpec, OUSpec, dfm_interval_sample, dfm_schedulers, ou_bridge_sample
from .hazard import HazardSpec, interarrival_scalar
from .latent import AugState, BranchId, LatentZ, del_op, split_op

__all__ = [
    "AugState",
    "PathTargets",
    "Processes",
    "sample_conditional_state",
    "sample_conditional_path",
    "targets_from_state",
    "trajectory_rows",
    "split_op",
    "del_op",
]


@dataclass(frozen=True)
class Processes:
    """Everything that defines the conditional dynamics besides Z."""

    split_hazard: HazardSpec
    del_hazard: HazardSpec
    ou: OUSpec
    dfm: DFMSpec


@dataclass
class PathTargets:
    """Per-element regression targets read off the forest."""

    t: float
    remaining_splits: np.ndarray
    deleted: np.ndarray
    anchor_continuous: np.ndarray
    anchor_tokens: np.ndarray
    fixed: np.ndarray

    def __len__(self) -> int:
        return int(self.remaining_splits.shape[0])


def _evolve(z: LatentZ, proc: Processes, node: int, s: float, v: float, xc: np.ndarray, xt: int,
            rng: np.random.Generator) -> tuple[np.ndarray, int]:
    if v <= s:
        return xc, xt
    f = z.forest
    if z.d:
        xc = ou_bridge_sample(proc.ou, xc, f.anchor_cont[node], s, v, rng)
    if z.K:
        if dfm_schedulers(proc.dfm, s)[2] <= 0.0:
            # start time rounds to 1: the interpolant has already collapsed
            xt = f.anchor_tok[node]
        else:
            xt = dfm_interval_sample(proc.dfm, xt, f.anchor_tok[node], s, v, rng)
    return xc, xt


def _walk(z: LatentZ, times: Sequence[float], proc: Processes, rng: np.random.Generator,
          record: dict | None = None):
    """Depth-first event simulation; yields per query time a planar-ordered list.

    Each entry is ``(node, branch, continuous, token)``; fixed elements use
    node ``-1``. An element occupies node ``n`` on ``[start_n, event_n)``.
    """
    f = z.forest
    out: list[list[tuple]] = [[] for _ in times]
    tree_x0 = z.tree_x0
    for kind, k in z.layout:
        if kind == "fixed":
            e = z.x1_aug[k]
            for slot in out:
                slot.append((-1, None, e.continuous.copy(), e.token))
            continue
        root = f.roots[k]
        e0 = tree_x0[k]
        stack = [(root, 0.0, e0.continuous.copy(), e0.token, BranchId(k))]
        while stack:
            node, s, xc, xt, branch = stack.pop()
            w = f.w[node]
            if w > 1:
                event = s + interarrival_scalar(proc.split_hazard, s, w - 1, rng.random())
            elif f.deleted[node]:
                event = s + interarrival_scalar(proc.del_hazard, s, 1, rng.random())
            else:
                event = np.inf
            cur = s
            for q, tq in enumerate(times):
                if s <= tq < event:
                    xc, xt = _evolve(z, proc, node, cur, tq, xc, xt, rng)
                    cur = tq
                    out[q].append((node, branch, xc.copy(), xt))
            if event > times[-1]:
                continue
            if record is not None:
                record.setdefault("split_times" if w > 1 else "deletion_times", []).append(event)
            if w > 1:
                xc, xt = _evolve(z, proc, node, cur, event, xc, xt, rng)
                stack.append((f.right[node], event, xc.copy(), xt, branch.child(1)))
                stack.append((f.left[node], event, xc, xt, branch.child(0)))
    return out


def _pack(z: LatentZ, t: float, entries: list[tuple]) -> tuple[AugState, PathTargets]:
    f = z.forest
    n = len(entries)
    nodes = np.array([e[0] for e in entries], dtype=np.int64)
    cont = np.array([e[2] for e in entries], dtype=float).reshape(n, z.d)
    toks = np.array([e[3] for e in entries], dtype=np.int64)
    fixed = nodes < 0
    groups = np.empty(n, dtype=np.int64)
    R = np.zeros(n, dtype=np.int64)
    rho = np.zeros(n, dtype=np.int64)
    a_cont = cont.copy()
    a_tok = toks.copy()
    fixed_iter = (z.x1_aug[k] for kind, k in z.layout if kind == "fixed")
    for i, node in enumerate(nodes):
        if node < 0:
            groups[i] = next(fixed_iter).group
            continue
        groups[i] = f.group[node]
        R[i] = f.w[node] - 1
        rho[i] = int(f.deleted[node])
        a_cont[i] = f.anchor_cont[node]
        a_tok[i] = f.anchor_tok[node]
    state = AugState(t, cont, toks, groups, fixed, [e[1] for e in entries])
    return state, PathTargets(t, R, rho, a_cont, a_tok, fixed)


def sample_conditional_state(z: LatentZ, t: float, split_hazard: HazardSpec, del_hazard: HazardSpec,
                             ou: OUSpec, dfm: DFMSpec, rng: np.random.Generator,
                             record: dict | None = None) -> tuple[AugState, PathTargets]:
    """Draw the augmented state at ``t`` given ``z`` together with its targets.

    ``record``, when given, collects the split and deletion times that
    happened by ``t`` under keys ``split_times`` and ``deletion_times``.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    proc = Processes(split_hazard, del_hazard, ou, dfm)
    entries = _walk(z, [t], proc, rng, record)[0]
    return _pack(z, t, entries)


def sample_conditional_path(z: LatentZ, times: Sequence[float], proc: Processes,
                            rng: np.random.Generator) -> list[tuple[AugState, PathTargets]]:
    """One coherent trajectory read out on an increasing time grid."""
    times = [float(x) for x in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be nondecreasing")
    if times and not (0.0 <= times[0] and times[-1] <= 1.0):
        raise ValueError("times must lie in [0, 1]")
    per_time = _walk(z, times, proc, rng)
    return [_pack(z, t, entries) for t, entries in zip(times, per_time)]


def targets_from_state(z: LatentZ, state: AugState) -> PathTargets:
    """Recover targets by resolving each branch indicator in the forest."""
    f = z.forest
    n = len(state)
    R = np.zeros(n, dtype=np.int64)
    rho = np.zeros(n, dtype=np.int64)
    a_cont = state.continuous.copy()
    a_tok = state.tokens.copy()
    for i, branch in enumerate(state.branches):
        if branch is None:
            continue
        try:
            node = f.resolve(branch)
        except KeyError as exc:
            raise ValueError(f"element {i}: dangling branch indicator ({exc})") from None
        R[i] = f.w[node] - 1
        rho[i] = int(f.deleted[node])
        a_cont[i] = f.anchor_cont[node]
        a_tok[i] = f.anchor_tok[node]
    return PathTargets(state.t, R, rho, a_cont, a_tok, state.fixed.copy())


TRAJECTORY_HEADER = ["sample_id", "t", "element_index", "tree", "path"]


def trajectory_header(d: int) -> list[str]:
    return TRAJECTORY_HEADER + [f"x{j}" for j in range(d)] + ["token", "R_Z", "rho_Z"]


def trajectory_rows(sample_id: int, state: AugState, targets: PathTargets | None = None) -> list[list]:
    rows = []
    for i in range(len(state)):
        b = state.branches[i]
        row = [sample_id, repr(float(state.t)), i, -1 if b is None else b.tree, "" if b is None else str(b)]
        row += [repr(float(x)) for x in state.continuous[i]]
        row.append(int(state.tokens[i]))
        if targets is not None:
            row += [int(targets.remaining_splits[i]), int(targets.deleted[i])]
        else:
            row += ["", ""]
        rows.append(row)
    return rows


def write_trajectory_csv(handle: io.TextIOBase, d: int, rows: list[list]) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(trajectory_header(d))
    writer.writerows(rows)
