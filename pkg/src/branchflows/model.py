"""A small per-element regressor for the branching-flow generator.

Each element is encoded from its own state, its coordinates relative to the
sequence centroid and to both neighbours, and sinusoidal time and position
features; residual blocks mix in a masked mean over the sequence and the two
immediate neighbours. Four heads emit the endpoint mean, token logits (mask
included as a class), log expected remaining splits and a deletion logit.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .conditional_path import AugState, PathTargets
from .objective import LossWeights, Prediction


TAIL_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 0
    K: int = 4
    hidden_dim: int = 64
    num_blocks: int = 2
    time_features: int = 4
    learning_rate: float = 2e-3
    batch_size: int = 32
    steps: int = 1000
    optimizer: str = "adam"
    momentum: float = 0.9
    grad_clip: float = 0.0
    init_scale: float = 1.0
    lr_schedule: str = "constant"
    warmup: int = 0
    ema: float = 0.0
    time_law: str = "uniform"

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "num_blocks", "time_features", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d < 0 or self.K < 0 or self.d + self.K == 0:
            raise ValueError("need a continuous or a discrete component")
        if self.learning_rate < 0 or self.steps < 0:
            raise ValueError("learning_rate and steps must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.time_law not in ("uniform", "cosine"):
            raise ValueError(f"unknown training time law {self.time_law!r}")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")

    def draw_time(self, rng: np.random.Generator) -> float:
        """Training time: uniform, or (1 - cos(pi u)) / 2, the density of a cosine sampling grid."""
        u = float(rng.random())
        return u if self.time_law == "uniform" else 0.5 * (1.0 - math.cos(math.pi * u))

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``: linear warmup, then constant or cosine decay."""
        lr = self.learning_rate
        if self.warmup and step < self.warmup:
            return lr * (step + 1) / self.warmup
        if self.lr_schedule == "cosine" and self.steps > self.warmup:
            frac = (step - self.warmup) / (self.steps - self.warmup)
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))
        return lr

    @property
    def n_states(self) -> int:
        return self.K + 1

    @property
    def n_features(self) -> int:
        return 4 * self.d + self.n_states + 4 + 4 * self.time_features

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    H = cfg.hidden_dim
    shapes = [("in.W", (cfg.n_features, H)), ("in.b", (H,))]
    for j in range(cfg.num_blocks):
        for name in ("Wa", "Wc", "Wl", "Wr", "Wb"):
            shapes.append((f"block{j}.{name}", (H, H)))
        shapes += [(f"block{j}.ba", (H,)), (f"block{j}.bb", (H,))]
    shapes += [("mu.W", (H, cfg.d)), ("mu.b", (cfg.d,)),
               ("tok.W", (H, cfg.n_states)), ("tok.b", (cfg.n_states,)),
               ("split.W", (H, 1)), ("split.b", (1,)), ("split.g", (1,)),
               ("del.W", (H, 1)), ("del.b", (1,)), ("del.g", (1,))]
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(cfg):
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        scale = cfg.init_scale / math.sqrt(shape[0])
        if name.endswith(".Wb") or name.split(".")[0] in ("mu", "tok", "split", "del"):
            scale *= 0.1
        params[name] = rng.normal(0.0, scale, size=shape)
    return params


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg)}


def flatten(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([params[name].ravel() for name, _ in param_shapes(cfg)])


def unflatten(flat: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out, k = {}, 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = np.array(flat[k:k + n], dtype=float).reshape(shape)
        k += n
    if k != flat.size:
        raise ValueError(f"parameter vector has {flat.size} entries, config needs {k}")
    return out


@dataclass
class Batch:
    """Padded model inputs (and optionally targets) for B states."""

    t: np.ndarray
    continuous: np.ndarray
    tokens: np.ndarray
    fixed: np.ndarray
    mask: np.ndarray
    R: np.ndarray | None = None
    rho: np.ndarray | None = None
    anchor_continuous: np.ndarray | None = None
    anchor_tokens: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)


def collate(states: Sequence[AugState], targets: Sequence[PathTargets] | None, cfg: ModelConfig) -> Batch:
    B = len(states)
    if B == 0:
        raise ValueError("empty batch")
    L = max(len(s) for s in states)
    if L == 0:
        raise ValueError("states must be nonempty")
    cont = np.zeros((B, L, cfg.d))
    toks = np.full((B, L), cfg.K, dtype=np.int64)
    fixed = np.zeros((B, L), dtype=bool)
    mask = np.zeros((B, L))
    for b, s in enumerate(states):
        n = len(s)
        if s.continuous.shape[1] != cfg.d:
            raise ValueError(f"state has {s.continuous.shape[1]} continuous dims, model expects {cfg.d}")
        cont[b, :n] = s.continuous
        toks[b, :n] = s.tokens
        fixed[b, :n] = s.fixed
        mask[b, :n] = 1.0
    batch = Batch(np.array([s.t for s in states], dtype=float), cont, toks, fixed, mask)
    if targets is not None:
        batch.R = np.zeros((B, L))
        batch.rho = np.zeros((B, L))
        batch.anchor_continuous = np.zeros((B, L, cfg.d))
        batch.anchor_tokens = np.full((B, L), cfg.K, dtype=np.int64)
        for b, tg in enumerate(targets):
            n = len(tg)
            if n != len(states[b]):
                raise ValueError("targets and state lengths differ")
            batch.R[b, :n] = tg.remaining_splits
            batch.rho[b, :n] = tg.deleted
            batch.anchor_continuous[b, :n] = tg.anchor_continuous
            batch.anchor_tokens[b, :n] = tg.anchor_tokens
    return batch


def features(batch: Batch, cfg: ModelConfig) -> np.ndarray:
    B, L = batch.mask.shape
    F = cfg.time_features
    t = batch.t[:, None, None] * np.ones((B, L, 1))
    tf = np.pi * 2.0 ** np.arange(F) / 2.0
    lengths = batch.mask.sum(axis=1)
    pos = np.arange(L, dtype=float)[None, :, None] * np.ones((B, 1, 1))
    pf = 2.0 * np.pi / (4.0 * 2.0 ** np.arange(F))
    rel = pos / np.maximum(lengths - 1.0, 1.0)[:, None, None]
    loglen = np.log1p(lengths)[:, None, None] / 3.0 * np.ones((B, L, 1))
    onehot = np.eye(cfg.n_states)[batch.tokens]
    m = batch.mask[..., None]
    x = batch.continuous * m
    centred = (x - x.sum(axis=1, keepdims=True) / np.maximum(lengths, 1.0)[:, None, None]) * m
    # offsets to the neighbours, zero where a neighbour is missing
    has_left = np.zeros_like(m)
    has_left[:, 1:] = m[:, :-1] * m[:, 1:]
    to_left = np.zeros_like(x)
    to_left[:, 1:] = x[:, 1:] - x[:, :-1]
    to_right = np.zeros_like(x)
    to_right[:, :-1] = x[:, 1:] - x[:, :-1]
    has_right = np.zeros_like(m)
    has_right[:, :-1] = has_left[:, 1:]
    parts = [batch.continuous, centred, to_left * has_left, to_right * has_right, onehot,
             batch.fixed[..., None].astype(float), t, rel, loglen,
             np.sin(t * tf), np.cos(t * tf), np.sin(pos * pf), np.cos(pos * pf)]
    return np.concatenate(parts, axis=-1) * batch.mask[..., None]


def forward_graph(params: dict[str, ad.Tensor], batch: Batch, cfg: ModelConfig) -> dict[str, ad.Tensor]:
    mask = batch.mask[..., None]
    count = np.maximum(batch.mask.sum(axis=1), 1.0)[:, None, None]
    h = ad.tanh(ad.matmul(features(batch, cfg), params["in.W"]) + params["in.b"]) * mask
    for j in range(cfg.num_blocks):
        p = lambda name: params[f"block{j}.{name}"]  # noqa: E731
        ctx = ad.total(h, axis=1, keepdims=True) * (1.0 / count)
        pre = (h @ p("Wa") + ctx @ p("Wc") + ad.shift(h, 1) @ p("Wl") + ad.shift(h, -1) @ p("Wr") + p("ba"))
        h = (h + ad.tanh(pre) @ p("Wb") + p("bb")) * mask
    mu = ad.add(batch.continuous, h @ params["mu.W"] + params["mu.b"])
    logits = h @ params["tok.W"] + params["tok.b"]
    # lets the event logits follow log(1 - t), which the bounded hidden state cannot
    tail = np.log(np.maximum(1.0 - batch.t, TAIL_FLOOR))[:, None, None] * mask
    log_splits = ad.total(h @ params["split.W"] + params["split.b"] + tail * params["split.g"], axis=-1)
    delete_logit = ad.total(h @ params["del.W"] + params["del.b"] + tail * params["del.g"], axis=-1)
    return {"mu": mu, "logits": logits, "log_splits": log_splits, "delete_logit": delete_logit}


def forward_arrays(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out = forward_graph({k: ad.Tensor(v) for k, v in params.items()}, batch, cfg)
    return {k: v.data for k, v in out.items()}


def forward(params: dict[str, np.ndarray], t: float, state: AugState, cfg: ModelConfig) -> Prediction:
    """Per-element predictions for a single state."""
    if len(state) == 0:
        raise ValueError("state must be nonempty")
    st = AugState(t, state.continuous, state.tokens, state.groups, state.fixed, state.branches)
    out = forward_arrays(params, collate([st], None, cfg), cfg)
    return Prediction(out["mu"][0], out["logits"][0], out["log_splits"][0], out["delete_logit"][0])


def _base_scale(batch: Batch, weights: LossWeights) -> np.ndarray:
    return np.array([weights.base_scale(float(t)) for t in batch.t])[:, None]


def loss_graph(params: dict[str, ad.Tensor], batch: Batch, cfg: ModelConfig,
               weights: LossWeights = LossWeights()) -> dict[str, ad.Tensor]:
    out = forward_graph(params, batch, cfg)
    B = batch.mask.shape[0]
    live = batch.mask * (~batch.fixed)
    scale = _base_scale(batch, weights) * live
    ls, dl = out["log_splits"], out["delete_logit"]
    terms = {
        "split": ad.total((ad.exp(ls) - batch.R * ls) * live),
        "delete": ad.total((ad.softplus(dl) - batch.rho * dl) * live),
    }
    if cfg.d:
        diff = out["mu"] - batch.anchor_continuous
        terms["continuous"] = ad.total(ad.total(diff * diff, axis=-1) * (scale * weights.continuous))
    else:
        terms["continuous"] = ad.Tensor(0.0)
    if cfg.K:
        ce = ad.logsumexp(out["logits"]) - ad.pick(out["logits"], batch.anchor_tokens)
        terms["discrete"] = ad.total(ce * (scale * weights.discrete))
    else:
        terms["discrete"] = ad.Tensor(0.0)
    terms = {k: v * (1.0 / B) for k, v in terms.items()}
    terms["total"] = terms["split"] + terms["delete"] + terms["continuous"] + terms["discrete"]
    return terms


def loss_and_grads(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig,
                   weights: LossWeights = LossWeights()) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    leaves = {k: ad.parameter(v) for k, v in params.items()}
    terms = loss_graph(leaves, batch, cfg, weights)
    terms["total"].backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    return {k: float(v.data) for k, v in terms.items()}, grads


def loss_value(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig,
               weights: LossWeights = LossWeights()) -> float:
    terms = loss_graph({k: ad.Tensor(v) for k, v in params.items()}, batch, cfg, weights)
    return float(terms["total"].data)


def init_optimizer(params: dict[str, np.ndarray]) -> dict[str, Any]:
    return {"step": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def _dump_batch(batch: Batch) -> str:
    fd, path = tempfile.mkstemp(prefix="bf_bad_batch_", suffix=".npz")
    os.close(fd)
    np.savez(path, **{k: v for k, v in vars(batch).items() if v is not None})
    return path


def train_step(params: dict[str, np.ndarray], opt_state: dict[str, Any], batch: Batch, cfg: ModelConfig,
               weights: LossWeights = LossWeights(), lr: float | None = None):
    """One optimizer step; returns (params', opt_state', loss terms)."""
    terms, grads = loss_and_grads(params, batch, cfg, weights)
    if not np.isfinite(terms["total"]) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient ({terms}); batch written to {_dump_batch(batch)}")
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    step = opt_state["step"] + 1
    lr = cfg.learning_rate if lr is None else lr
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if cfg.optimizer == "adam":
            m = 0.9 * opt_state["m"][k] + 0.1 * g
            v = 0.999 * opt_state["v"][k] + 0.001 * g * g
            m_hat = m / (1.0 - 0.9**step)
            v_hat = v / (1.0 - 0.999**step)
            new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        else:
            m = cfg.momentum * opt_state["m"][k] + g
            v = opt_state["v"][k]
            new_params[k] = p - lr * m
        m_new[k], v_new[k] = m, v
    return new_params, {"step": step, "m": m_new, "v": v_new}, terms


def grad_check(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig, rng: np.random.Generator,
               n_coords: int = 64, eps: float = 1e-4, weights: LossWeights = LossWeights(),
               floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)`` over a random subset
    of ``n_coords`` flat parameter coordinates. The step ``eps=1e-4`` keeps
    cancellation noise in the difference quotient well below the tolerance
    for losses of order 10; smaller steps are roundoff dominated.
    """
    _, grads = loss_and_grads(params, batch, cfg, weights)
    flat = flatten(params, cfg)
    g_flat = flatten(grads, cfg)
    coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for c in coords:
        up, down = flat.copy(), flat.copy()
        up[c] += eps
        down[c] -= eps
        num = (loss_value(unflatten(up, cfg), batch, cfg, weights)
               - loss_value(unflatten(down, cfg), batch, cfg, weights)) / (2 * eps)
        err = abs(num - g_flat[c]) / max(abs(num), abs(g_flat[c]), floor)
        worst = max(worst, err)
    return worst


MAGIC = b"BFCK"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, header: dict[str, Any], params: dict[str, np.ndarray],
                    cfg: ModelConfig) -> None:
    """Magic, version, header length, JSON header, then little-endian float64 parameters."""
    head = json.dumps(dict(header, model=cfg.to_dict()), sort_keys=True).encode()
    flat = flatten(params, cfg).astype("<f8")
    blob = MAGIC + struct.pack("<II", VERSION, len(head)) + head + flat.tobytes()
    write_atomic(path, blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray], ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, n = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + n].decode())
    cfg = ModelConfig.from_dict(header["model"])
    flat = np.frombuffer(blob[12 + n:], dtype="<f8")
    return header, unflatten(flat, cfg), cfg


def write_atomic(path: str | os.PathLike, data: bytes | str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
