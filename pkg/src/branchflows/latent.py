"""The conditioning variable: padded data, initial state, forest and anchors.

Building one latent draw proceeds data -> initial state -> to-be-deleted
insertions -> planar forest by adjacent coalescence -> internal anchors.
Trees live in a flat arena (parallel index arrays) so lookups from the
samplers are plain array indexing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

FIRST, SECOND = 0, 1


@dataclass(eq=False)
class Element:
    """One sequence slot: a continuous vector and a token."""

    continuous: np.ndarray
    token: int
    group: int = 0
    fixed: bool = False

    def __post_init__(self) -> None:
        self.continuous = np.asarray(self.continuous, dtype=float).reshape(-1)
        self.token = int(self.token)

    def copy(self, **changes: Any) -> "Element":
        kw = dict(continuous=self.continuous.copy(), token=self.token, group=self.group, fixed=self.fixed)
        kw.update(changes)
        return Element(**kw)

    def same_state(self, other: "Element") -> bool:
        return self.token == other.token and np.array_equal(self.continuous, other.continuous)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"continuous": self.continuous.tolist(), "token": self.token}
        if self.group:
            d["group"] = self.group
        if self.fixed:
            d["fixed"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Element":
        return cls(np.asarray(d.get("continuous", []), dtype=float), int(d.get("token", 0)),
                   int(d.get("group", 0)), bool(d.get("fixed", False)))


@dataclass(frozen=True)
class BranchId:
    """Tree index plus the root-to-node child choices, packed into an int."""

    tree: int
    depth: int = 0
    bits: int = 0

    def child(self, choice: int) -> "BranchId":
        return BranchId(self.tree, self.depth + 1, self.bits | (int(choice) << self.depth))

    @property
    def path(self) -> tuple[int, ...]:
        return tuple((self.bits >> k) & 1 for k in range(self.depth))

    @classmethod
    def from_path(cls, tree: int, path: Iterable[int]) -> "BranchId":
        b = cls(tree)
        for c in path:
            b = b.child(c)
        return b

    def is_prefix_of(self, other: "BranchId") -> bool:
        if self.tree != other.tree or self.depth > other.depth:
            return False
        return (other.bits & ((1 << self.depth) - 1)) == self.bits

    def __str__(self) -> str:
        return "".join(str(c) for c in self.path)


@dataclass(frozen=True)
class Node:
    anchor_continuous: np.ndarray
    anchor_token: int
    children: tuple[int, ...]
    deleted: bool
    w: int


class Forest:
    """Ordered binary plane trees stored as an index arena.

    Leaves are created first (one per padded data element, in sequence order),
    then each merge appends a parent, so children always precede parents.
    """

    def __init__(self, d: int) -> None:
        self.d = d
        self.left: list[int] = []
        self.right: list[int] = []
        self.w: list[int] = []
        self.deleted: list[bool] = []
        self.leaf_of: list[int] = []
        self.group: list[int] = []
        self.anchor_cont: list[np.ndarray] = []
        self.anchor_tok: list[int] = []
        self.roots: list[int] = []

    def __len__(self) -> int:
        return len(self.w)

    def add_leaf(self, element: Element, deleted: bool, index: int) -> int:
        self.left.append(-1)
        self.right.append(-1)
        self.w.append(1)
        self.deleted.append(bool(deleted))
        self.leaf_of.append(index)
        self.group.append(element.group)
        self.anchor_cont.append(element.continuous.copy())
        self.anchor_tok.append(element.token)
        return len(self.w) - 1

    def merge(self, a: int, b: int) -> int:
        if self.group[a] != self.group[b]:
            raise ValueError("cannot merge nodes from different groups")
        self.left.append(a)
        self.right.append(b)
        self.w.append(self.w[a] + self.w[b])
        self.deleted.append(False)
        self.leaf_of.append(-1)
        self.group.append(self.group[a])
        self.anchor_cont.append(np.zeros(self.d))
        self.anchor_tok.append(-1)
        return len(self.w) - 1

    def is_leaf(self, n: int) -> bool:
        return self.left[n] < 0

    def node(self, n: int) -> Node:
        kids = () if self.is_leaf(n) else (self.left[n], self.right[n])
        return Node(self.anchor_cont[n], self.anchor_tok[n], kids, self.deleted[n], self.w[n])

    def leaves_in_order(self, root: int) -> list[int]:
        out, stack = [], [root]
        while stack:
            n = stack.pop()
            if self.is_leaf(n):
                out.append(n)
            else:
                stack.append(self.right[n])
                stack.append(self.left[n])
        return out

    def resolve(self, branch: BranchId) -> int:
        if not 0 <= branch.tree < len(self.roots):
            raise KeyError(f"branch refers to missing tree {branch.tree}")
        n = self.roots[branch.tree]
        for c in branch.path:
            if self.is_leaf(n):
                raise KeyError(f"branch {branch} walks past a leaf")
            n = self.right[n] if c else self.left[n]
        return n

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "left": np.asarray(self.left, dtype=np.int64),
            "right": np.asarray(self.right, dtype=np.int64),
            "w": np.asarray(self.w, dtype=np.int64),
            "deleted": np.asarray(self.deleted, dtype=bool),
            "anchor_cont": np.asarray(self.anchor_cont, dtype=float).reshape(len(self), self.d),
            "anchor_tok": np.asarray(self.anchor_tok, dtype=np.int64),
        }

    def to_nested(self, n: int) -> dict[str, Any]:
        d: dict[str, Any] = {"anchor": {"continuous": self.anchor_cont[n].tolist(), "token": self.anchor_tok[n]},
                             "w": self.w[n]}
        if self.is_leaf(n):
            d["leaf"] = self.leaf_of[n]
            d["deleted"] = self.deleted[n]
        else:
            d["children"] = [self.to_nested(self.left[n]), self.to_nested(self.right[n])]
        return d


@dataclass
class LatentZ:
    """Padded data, initial state, forest and anchors for one training draw.

    ``layout`` lists the output segments in sequence order: ``("tree", k)``
    for the k-th tree (rooted at the k-th non-fixed x0 element) and
    ``("fixed", i)`` for fixed element ``x1_aug[i]``.
    """

    x1_aug: list[Element]
    x1_deleted: np.ndarray
    x0: list[Element]
    forest: Forest
    layout: list[tuple[str, int]]
    d: int
    K: int

    @property
    def x1(self) -> list[Element]:
        return [e for e, dead in zip(self.x1_aug, self.x1_deleted) if not dead]

    @property
    def tree_x0(self) -> list[Element]:
        return [e for e in self.x0 if not e.fixed]

    def to_json(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "K": self.K,
            "x1_aug": [dict(e.to_dict(), deleted=bool(dead)) for e, dead in zip(self.x1_aug, self.x1_deleted)],
            "x0": [e.to_dict() for e in self.x0],
            "layout": [list(seg) for seg in self.layout],
            "trees": [self.forest.to_nested(r) for r in self.forest.roots],
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "LatentZ":
        d, K = int(obj["d"]), int(obj["K"])
        x1_aug = [Element.from_dict(e) for e in obj["x1_aug"]]
        deleted = np.array([bool(e.get("deleted", False)) for e in obj["x1_aug"]])
        x0 = [Element.from_dict(e) for e in obj["x0"]]
        forest = Forest(d)
        leaf_nodes = {}
        for i, (e, dead) in enumerate(zip(x1_aug, deleted)):
            if not e.fixed:
                leaf_nodes[i] = forest.add_leaf(e, dead, i)

        def build(node: dict[str, Any]) -> int:
            if "children" not in node:
                n = leaf_nodes[int(node["leaf"])]
            else:
                n = forest.merge(build(node["children"][0]), build(node["children"][1]))
            forest.anchor_cont[n] = np.asarray(node["anchor"]["continuous"], dtype=float).reshape(d)
            forest.anchor_tok[n] = int(node["anchor"]["token"])
            return n

        forest.roots = [build(tree) for tree in obj["trees"]]
        layout = [(str(a), int(b)) for a, b in obj["layout"]]
        return cls(x1_aug, deleted, x0, forest, layout, d, K)


@dataclass
class AugState:
    """Time-t state: element arrays plus one branch indicator per element.

    Fixed elements carry ``None`` as their branch.
    """

    t: float
    continuous: np.ndarray
    tokens: np.ndarray
    groups: np.ndarray
    fixed: np.ndarray
    branches: list[BranchId | None] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def elements(self) -> list[tuple[Element, BranchId | None]]:
        return [(Element(self.continuous[i].copy(), int(self.tokens[i]), int(self.groups[i]), bool(self.fixed[i])),
                 self.branches[i]) for i in range(len(self))]

    @classmethod
    def from_elements(cls, t: float, items: Sequence[tuple[Element, BranchId | None]], d: int) -> "AugState":
        n = len(items)
        cont = np.array([e.continuous for e, _ in items], dtype=float).reshape(n, d)
        return cls(t, cont, np.array([e.token for e, _ in items], dtype=np.int64),
                   np.array([e.group for e, _ in items], dtype=np.int64),
                   np.array([e.fixed for e, _ in items], dtype=bool), [b for _, b in items])


def split_op(state: AugState, i: int) -> AugState:
    """Duplicate element ``i`` in place; the copies move onto the two child branches."""
    n = len(state)
    if not 0 <= i < n:
        raise IndexError(f"split index {i} out of range for length {n}")
    branch = state.branches[i]
    if branch is None:
        raise ValueError("fixed elements cannot split")
    idx = np.insert(np.arange(n), i, i)
    branches = state.branches[:i] + [branch.child(FIRST), branch.child(SECOND)] + state.branches[i + 1:]
    return AugState(state.t, state.continuous[idx].copy(), state.tokens[idx].copy(), state.groups[idx].copy(),
                    state.fixed[idx].copy(), branches)


def del_op(state: AugState, i: int) -> AugState:
    n = len(state)
    if not 0 <= i < n:
        raise IndexError(f"delete index {i} out of range for length {n}")
    keep = np.delete(np.arange(n), i)
    return AugState(state.t, state.continuous[keep].copy(), state.tokens[keep].copy(), state.groups[keep].copy(),
                    state.fixed[keep].copy(), state.branches[:i] + state.branches[i + 1:])


def group_blocks(x1: Sequence[Element]) -> list[tuple[str, int, list[int]]]:
    """Split a sequence into contiguous group blocks and fixed singletons.

    Returns ``("group", g, indices)`` / ``("fixed", -1, [i])`` in order. A
    group that reappears after another block is rejected: trees are planar,
    so a group must occupy one contiguous run.
    """
    blocks: list[tuple[str, int, list[int]]] = []
    seen: set[int] = set()
    for i, e in enumerate(x1):
        if e.fixed:
            blocks.append(("fixed", -1, [i]))
            continue
        if blocks and blocks[-1][0] == "group" and blocks[-1][1] == e.group:
            blocks[-1][2].append(i)
            continue
        if e.group in seen:
            raise ValueError(f"group {e.group} is not contiguous in the sequence")
        seen.add(e.group)
        blocks.append(("group", e.group, [i]))
    return blocks


def sample_x0(x1: Sequence[Element], lambda_group: float, d: int, K: int, rng: np.random.Generator) -> list[Element]:
    """Initial state: 1 + Poisson(lambda) standard-normal, masked elements per group.

    Fixed elements are carried over unchanged at their positions.
    """
    if len(x1) == 0:
        raise ValueError("x1 must be nonempty")
    out: list[Element] = []
    for kind, g, idx in group_blocks(x1):
        if kind == "fixed":
            out.append(x1[idx[0]].copy())
            continue
        n = 1 + int(rng.poisson(lambda_group))
        for _ in range(n):
            out.append(Element(rng.standard_normal(d), K, g))
    return out


def x0_lengths(x0: Sequence[Element]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for e in x0:
        if not e.fixed:
            counts[e.group] = counts.get(e.group, 0) + 1
    return counts


def insert_deletions(x1: Sequence[Element], x0_len_per_group: dict[int, int], d_r: float, scheme: str,
                     rng: np.random.Generator) -> tuple[list[Element], np.ndarray]:
    """Pad ``x1`` with to-be-deleted copies of its own elements.

    Returns the padded sequence and its deleted flags. Each copy inherits its
    template's full state and sits immediately before or after it.
    """
    if scheme not in ("rate", "duplicate_each", "none"):
        raise ValueError(f"unknown deletion scheme {scheme!r}")
    if scheme == "rate" and d_r < 1.0:
        raise ValueError("deletion rate must be >= 1")
    before = [0] * len(x1)
    after = [0] * len(x1)
    for kind, g, idx in group_blocks(x1):
        if kind == "fixed":
            continue
        l0 = x0_len_per_group.get(g, 1)
        l1 = len(idx)
        if scheme == "duplicate_each":
            if l0 != 1:
                raise ValueError("duplicate_each needs exactly one initial element per group")
            for i in idx:
                if rng.random() < 0.5:
                    before[i] += 1
                else:
                    after[i] += 1
            continue
        lam = max(l0, l1) * d_r - l1 if scheme == "rate" else 0.0
        assert lam >= 0.0
        n_del = int(rng.poisson(lam)) if lam > 0 else 0
        n_del = max(n_del, l0 - l1)
        for _ in range(n_del):
            i = idx[int(rng.integers(l1))]
            if rng.random() < 0.5:
                before[i] += 1
            else:
                after[i] += 1
    x1_aug: list[Element] = []
    flags: list[bool] = []
    for i, e in enumerate(x1):
        for _ in range(before[i]):
            x1_aug.append(e.copy())
            flags.append(True)
        x1_aug.append(e.copy())
        flags.append(False)
        for _ in range(after[i]):
            x1_aug.append(e.copy())
            flags.append(True)
    return x1_aug, np.asarray(flags, dtype=bool)


def coalesce_forest(x1_aug: Sequence[Element], deleted: np.ndarray, x0_lens: dict[int, int], d: int,
                    rng: np.random.Generator) -> tuple[Forest, list[tuple[str, int]]]:
    """Backward coalescence: merge uniformly chosen adjacent pairs within a group.

    Stops when each group has as many roots as initial elements. Returns the
    forest (leaf anchors set from ``x1_aug``) and the output layout.
    """
    forest = Forest(d)
    layout: list[tuple[str, int]] = []
    for kind, g, idx in group_blocks(x1_aug):
        if kind == "fixed":
            layout.append(("fixed", idx[0]))
            continue
        target = x0_lens.get(g, 1)
        if len(idx) < target:
            raise ValueError(f"group {g}: {len(idx)} leaves cannot form {target} trees")
        frontier = [forest.add_leaf(x1_aug[i], bool(deleted[i]), i) for i in idx]
        while len(frontier) > target:
            j = int(rng.integers(len(frontier) - 1))
            frontier[j:j + 2] = [forest.merge(frontier[j], frontier[j + 1])]
        for root in frontier:
            layout.append(("tree", len(forest.roots)))
            forest.roots.append(root)
    return forest, layout


def assign_anchors(forest: Forest, mask_token: int) -> Forest:
    """Leaf-count weighted means for continuous anchors; mask tokens internally."""
    for n in range(len(forest)):
        if forest.is_leaf(n):
            continue
        a, b = forest.left[n], forest.right[n]
        wa, wb = forest.w[a], forest.w[b]
        forest.anchor_cont[n] = (wa * forest.anchor_cont[a] + wb * forest.anchor_cont[b]) / (wa + wb)
        forest.anchor_tok[n] = mask_token
    return forest


@dataclass(frozen=True)
class LatentConfig:
    x0_rate: float = 0.0
    deletion_scheme: str = "rate"
    deletion_rate: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {"x0_rate": self.x0_rate, "deletion_scheme": self.deletion_scheme, "deletion_rate": self.deletion_rate}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LatentConfig":
        return cls(float(d.get("x0_rate", 0.0)), d.get("deletion_scheme", "rate"), float(d.get("deletion_rate", 1.0)))


def build_latent(x1: Sequence[Element], cfg: LatentConfig, d: int, K: int, rng: np.random.Generator) -> LatentZ:
    x0 = sample_x0(x1, cfg.x0_rate, d, K, rng)
    lens = x0_lengths(x0)
    x1_aug, deleted = insert_deletions(x1, lens, cfg.deletion_rate, cfg.deletion_scheme, rng)
    forest, layout = coalesce_forest(x1_aug, deleted, lens, d, rng)
    assign_anchors(forest, K)
    return LatentZ(x1_aug, deleted, x0, forest, layout, d, K)
