"""Per-element base processes between tree events.

Continuous coordinates follow a mean-reverting OU process with a
time-dependent infinitesimal variance, conditioned on hitting its anchor at
``t = 1``. Tokens follow a three-way interpolant (target, uniform noise,
current token) that can be restarted from any intermediate time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special

from .hazard import HazardSpec

RATE_TOL = 1e-9


@dataclass(frozen=True)
class OUSpec:
    theta: float = 5.0
    v0: float = 1.0
    v1: float = 1.0
    schedule_form: str = "geometric"

    def __post_init__(self) -> None:
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.v0 <= 0 or self.v1 <= 0:
            raise ValueError("variance endpoints must be positive")
        if self.schedule_form not in ("geometric", "linear"):
            raise ValueError(f"unknown variance schedule {self.schedule_form!r}")

    def variance_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.schedule_form == "geometric":
            out = self.v0 * (self.v1 / self.v0) ** t
        else:
            out = self.v0 + (self.v1 - self.v0) * t
        return out[()] if out.ndim == 0 else out

    def to_dict(self) -> dict[str, Any]:
        return {"theta": self.theta, "v0": self.v0, "v1": self.v1, "schedule_form": self.schedule_form}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "OUSpec":
        return cls(float(d.get("theta", 5.0)), float(d.get("v0", 1.0)), float(d.get("v1", 1.0)),
                   d.get("schedule_form", "geometric"))


def transition_variance(spec: OUSpec, s: float, v: float) -> float:
    """Closed form of the integral of exp(-2 theta (v - u)) v_u over [s, v]."""
    if v < s:
        raise ValueError("end time precedes start time")
    delta = v - s
    if delta == 0.0:
        return 0.0
    theta = spec.theta
    if spec.schedule_form == "geometric":
        k = 2.0 * theta + math.log(spec.v1 / spec.v0)
        v_s = spec.v0 * (spec.v1 / spec.v0) ** s
        return v_s * math.exp(-2.0 * theta * delta) * delta * float(special.exprel(k * delta))
    a = 2.0 * theta
    slope = spec.v1 - spec.v0
    decay = -math.expm1(-a * delta)
    return spec.v0 * decay / a + slope * ((v - s * math.exp(-a * delta)) / a - decay / a**2)


def ou_transition(spec: OUSpec, x_s, anchor, s: float, v: float):
    """Mean and variance of the unconditioned process at ``v`` given ``x_s``."""
    if v < s:
        raise ValueError("end time precedes start time")
    x_s = np.asarray(x_s, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    mean = anchor + (x_s - anchor) * math.exp(-spec.theta * (v - s))
    return mean, transition_variance(spec, s, v)


def ou_bridge_params(spec: OUSpec, x_s, anchor, s: float, v: float):
    """Mean and variance of X_v given X_s = x_s and X_1 = anchor."""
    if v < s:
        raise ValueError("end time precedes start time")
    x_s = np.asarray(x_s, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    if v >= 1.0:
        return anchor.copy(), 0.0
    if v == s:
        return x_s.copy(), 0.0
    var_v = transition_variance(spec, s, v)
    var_1 = transition_variance(spec, s, 1.0)
    decay_1v = math.exp(-spec.theta * (1.0 - v))
    c = decay_1v * var_v / var_1
    gap = x_s - anchor
    mean_v = anchor + gap * math.exp(-spec.theta * (v - s))
    # anchor - mean_1 = -gap * exp(-theta (1 - s))
    mean = mean_v - c * gap * math.exp(-spec.theta * (1.0 - s))
    var = max(var_v - c * decay_1v * var_v, 0.0)
    return mean, var


def ou_bridge_sample(spec: OUSpec, x_s, anchor, s: float, v: float, rng: np.random.Generator):
    mean, var = ou_bridge_params(spec, x_s, anchor, s, v)
    if var == 0.0 or mean.size == 0:
        return mean
    return mean + math.sqrt(var) * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class DFMSpec:
    F1: HazardSpec = field(default_factory=HazardSpec.uniform)
    F2: HazardSpec = field(default_factory=HazardSpec.uniform)
    omega_u: float = 0.0
    K: int = 4
    mask_token: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega_u < 1.0:
            raise ValueError("omega_u must lie in [0, 1)")
        if self.K < 0:
            raise ValueError("alphabet size must be nonnegative")
        if self.mask_token is None:
            object.__setattr__(self, "mask_token", self.K)

    @property
    def n_states(self) -> int:
        return self.K + 1

    def to_dict(self) -> dict[str, Any]:
        return {"F1": self.F1.to_dict(), "F2": self.F2.to_dict(), "omega_u": self.omega_u, "K": self.K}

    @classmethod
    def from_dict(cls, d: dict[str, Any], K: int | None = None) -> "DFMSpec":
        return cls(HazardSpec.from_dict(d.get("F1", {"kind": "uniform"})),
                   HazardSpec.from_dict(d.get("F2", {"kind": "uniform"})),
                   float(d.get("omega_u", 0.0)), int(K if K is not None else d.get("K", 4)))


def _cdf1(h: HazardSpec, t: float) -> float:
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    if h.kind == "uniform":
        return t
    return float(special.betainc(h.alpha, h.beta_param, t))


def _pdf1(h: HazardSpec, t: float) -> float:
    return float(h.pdf(t))


def dfm_schedulers(spec: DFMSpec, t: float):
    """(kappa1, kappa2, kappa3): weights on target, uniform noise, start token."""
    f1 = _cdf1(spec.F1, t)
    k1 = f1
    k2 = spec.omega_u * (1.0 - f1) * _cdf1(spec.F2, t)
    # product form is exact where 1 - k1 - k2 would cancel
    k3 = (1.0 - f1) * (1.0 - spec.omega_u * _cdf1(spec.F2, t))
    return k1, k2, k3


def dfm_scheduler_rates(spec: DFMSpec, t: float):
    """Time derivatives of the three schedulers."""
    F1, f1 = _cdf1(spec.F1, t), _pdf1(spec.F1, t)
    F2, f2 = _cdf1(spec.F2, t), _pdf1(spec.F2, t)
    d1 = f1
    d2 = spec.omega_u * (-f1 * F2 + (1.0 - F1) * f2)
    return d1, d2, -d1 - d2


def dfm_interval_weights(spec: DFMSpec, t0: float, t: float):
    """Mixture weights (target, uniform, start) for the token at ``t`` given it at ``t0``."""
    if t < t0:
        raise ValueError("end time precedes start time")
    k1_0, k2_0, k3_0 = dfm_schedulers(spec, t0)
    if t == t0:
        return 0.0, 0.0, 1.0
    if k3_0 <= 0.0:
        raise ValueError("interval interpolant is degenerate: kappa3(t0) = 0")
    k1, k2, k3 = dfm_schedulers(spec, t)
    a3 = k3 / k3_0
    a1 = max(k1 - k1_0 * a3, 0.0)
    a2 = max(k2 - k2_0 * a3, 0.0)
    if t >= 1.0:
        return 1.0, 0.0, 0.0
    return a1, a2, a3


def dfm_interval_sample(spec: DFMSpec, x_t0: int, x1: int, t0: float, t: float, rng: np.random.Generator) -> int:
    a1, a2, _ = dfm_interval_weights(spec, t0, t)
    u = rng.random()
    if u < a1:
        return int(x1)
    if u < a1 + a2 and spec.K > 0:
        return int(rng.integers(spec.K))
    return int(x_t0)


def dfm_jump_coefficients(spec: DFMSpec, t: float):
    """Coefficients multiplying the target law and the uniform law in the jump rates."""
    k1, k2, k3 = dfm_schedulers(spec, t)
    if k3 <= 0.0:
        raise ValueError("token rates diverge at kappa3 = 0")
    d1, d2, d3 = dfm_scheduler_rates(spec, t)
    c1 = d1 - k1 * d3 / k3
    c2 = d2 - k2 * d3 / k3
    if c1 < -RATE_TOL or c2 < -RATE_TOL:
        raise ValueError(f"negative token jump rate at t={t}: ({c1}, {c2})")
    return max(c1, 0.0), max(c2, 0.0)


def dfm_step_many(spec: DFMSpec, tokens, target_probs, t: float, dt: float, rng: np.random.Generator):
    """Euler step of the token CTMC for many independent tokens.

    ``target_probs`` has one row per token over all ``K + 1`` states (mask
    included); uniform noise only reaches the ``K`` real tokens.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    if dt <= 0 or n == 0 or spec.K == 0:
        return tokens.copy()
    probs = np.asarray(target_probs, dtype=float).reshape(n, spec.n_states)
    c1, c2 = dfm_jump_coefficients(spec, t)
    rates = c1 * probs
    rates[:, : spec.K] += c2 / spec.K
    rates[np.arange(n), tokens] = 0.0
    total = rates.sum(axis=1)
    p_jump = np.minimum(1.0, dt * total)
    u = rng.random(n)
    jump = u < p_jump
    out = tokens.copy()
    if np.any(jump):
        r = rates[jump]
        cum = np.cumsum(r, axis=1)
        pick = rng.random(r.shape[0]) * cum[:, -1]
        dest = (cum <= pick[:, None]).sum(axis=1)
        out[jump] = np.minimum(dest, spec.n_states - 1)
    return out


def dfm_step(spec: DFMSpec, x_t: int, x1_distribution, t: float, dt: float, rng: np.random.Generator) -> int:
    probs = np.asarray(x1_distribution, dtype=float)
    if probs.shape[0] == spec.K:
        probs = np.append(probs, 0.0)
    if abs(probs.sum() - 1.0) > 1e-8:
        raise ValueError("target distribution must sum to one")
    return int(dfm_step_many(spec, np.array([x_t]), probs[None, :], t, dt, rng)[0])
