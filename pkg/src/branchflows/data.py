"""Toy variable-length datasets: token runs (discrete) and noisy 2-d arcs (multimodal)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from .latent import Element


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Length is ``min_length + Poisson(length_rate)``.

    token_runs: runs over K symbols; after each position the run continues
    with probability ``stay``, otherwise a different symbol is drawn
    uniformly. The first symbol follows ``first_probs``.
    polyline2d: points at even angles along a circular arc with random
    centre, radius, start angle and span, plus Gaussian jitter of scale
    ``noise``. The token is the quadrant of the noise-free point.
    """

    kind: str = "token_runs"
    min_length: int | None = None
    length_rate: float | None = None
    K: int = 4
    noise: float = 0.05
    stay: float = 0.7
    first_probs: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)

    def __post_init__(self) -> None:
        if self.kind not in ("token_runs", "polyline2d"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.min_length is None:
            object.__setattr__(self, "min_length", 3 if self.kind == "token_runs" else 4)
        if self.length_rate is None:
            object.__setattr__(self, "length_rate", 6.0 if self.kind == "token_runs" else 8.0)
        object.__setattr__(self, "first_probs", tuple(float(p) for p in self.first_probs))
        if self.min_length < 1:
            raise ValueError("min_length must be >= 1")
        if self.kind == "polyline2d" and self.K != 4:
            raise ValueError("polyline2d labels quadrants, so K must be 4")
        if self.kind == "token_runs" and len(self.first_probs) != self.K:
            raise ValueError("first_probs needs one entry per symbol")

    @property
    def d(self) -> int:
        return 2 if self.kind == "polyline2d" else 0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["first_probs"] = list(self.first_probs)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ToyDatasetSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def gen_token_runs(spec: ToyDatasetSpec, rng: np.random.Generator) -> list[Element]:
    n = spec.min_length + int(rng.poisson(spec.length_rate))
    K = spec.K
    tok = int(rng.choice(K, p=np.asarray(spec.first_probs) / sum(spec.first_probs)))
    out = [Element(np.zeros(0), tok)]
    for _ in range(n - 1):
        if rng.random() >= spec.stay:
            tok = (tok + 1 + int(rng.integers(K - 1))) % K
        out.append(Element(np.zeros(0), tok))
    return out


def quadrant(points: np.ndarray) -> np.ndarray:
    """0: x>=0,y>=0; 1: x<0,y>=0; 2: x<0,y<0; 3: x>=0,y<0."""
    x, y = points[..., 0], points[..., 1]
    return np.where(y >= 0, np.where(x >= 0, 0, 1), np.where(x < 0, 2, 3))


def polyline_clean(spec: ToyDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.min_length + int(rng.poisson(spec.length_rate))
    centre = rng.normal(0.0, 0.3, size=2)
    radius = rng.uniform(1.0, 2.0)
    start = rng.uniform(0.0, 2 * np.pi)
    span = rng.uniform(0.5 * np.pi, np.pi) * (1 if rng.random() < 0.5 else -1)
    ang = start + span * np.arange(n) / (n - 1)
    return centre + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_polyline2d(spec: ToyDatasetSpec, rng: np.random.Generator) -> list[Element]:
    clean = polyline_clean(spec, rng)
    pts = clean + spec.noise * rng.standard_normal(clean.shape)
    return [Element(p, int(q)) for p, q in zip(pts, quadrant(clean))]


def generate(spec: ToyDatasetSpec, n: int, rng: np.random.Generator) -> list[list[Element]]:
    gen = gen_token_runs if spec.kind == "token_runs" else gen_polyline2d
    return [gen(spec, rng) for _ in range(n)]


def generate_budget(spec: ToyDatasetSpec, max_elements: int, rng: np.random.Generator) -> list[list[Element]]:
    """Draw sequences until the next one would push the element total past ``max_elements``."""
    gen = gen_token_runs if spec.kind == "token_runs" else gen_polyline2d
    out: list[list[Element]] = []
    total = 0
    while True:
        seq = gen(spec, rng)
        if total + len(seq) > max_elements:
            break
        out.append(seq)
        total += len(seq)
    if not out:
        raise ValueError(f"element budget {max_elements} is smaller than one sequence")
    return out


def seq_to_json(seq: Sequence[Element]) -> list[dict[str, Any]]:
    return [e.to_dict() for e in seq]


def seq_from_json(items: Sequence[dict[str, Any]]) -> list[Element]:
    return [Element.from_dict(e) for e in items]


def write_jsonl_lines(records: Sequence[dict[str, Any]]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_sequences(path: str) -> list[list[Element]]:
    """JSONL with one ``{"elements": [...]}`` object per line."""
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(seq_from_json(obj["elements"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad sample record ({exc})") from None
    return out
