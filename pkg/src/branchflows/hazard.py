"""Hazard distributions on [0, 1] and next-event waiting times.

A hazard distribution ``H`` is any law supported on ``[0, 1]``; its hazard
rate ``f / (1 - F)`` diverges at ``t = 1`` which forces every remaining
event of a conditioned counting process to fire before the end of time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

EPS_TIME = 1e-12

_KINDS = ("uniform", "beta")


@dataclass(frozen=True)
class HazardSpec:
    """Uniform or Beta(alpha, beta) law on [0, 1]."""

    kind: str = "uniform"
    alpha: float = 1.0
    beta_param: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown hazard kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "beta" and not (self.alpha > 0 and self.beta_param > 0):
            raise ValueError("beta hazard needs positive alpha and beta")

    @classmethod
    def uniform(cls) -> "HazardSpec":
        return cls("uniform")

    @classmethod
    def beta(cls, alpha: float, beta: float) -> "HazardSpec":
        return cls("beta", float(alpha), float(beta))

    @property
    def _log_norm(self) -> float:
        return special.betaln(self.alpha, self.beta_param)

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= 1)
        if self.kind == "uniform":
            out = np.where(inside, 1.0, 0.0)
        else:
            a, b = self.alpha, self.beta_param
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = special.xlogy(a - 1, t) + special.xlog1py(b - 1, -t) - self._log_norm
                out = np.where(inside, np.exp(logp), 0.0)
        return out[()] if out.ndim == 0 else out

    def cdf(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = t
        else:
            out = special.betainc(self.alpha, self.beta_param, t)
        return out[()] if np.ndim(out) == 0 else out

    def survival(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        if self.kind == "uniform":
            out = 1.0 - t
        else:
            # I_{1-t}(b, a) keeps precision when the survival is tiny
            out = special.betainc(self.beta_param, self.alpha, 1.0 - t)
        return out[()] if np.ndim(out) == 0 else out

    def quantile(self, q):
        q = np.asarray(q, dtype=float)
        if self.kind == "uniform":
            out = np.clip(q, 0.0, 1.0)
        else:
            out = _newton_polish(self, special.betaincinv(self.alpha, self.beta_param, q), q, upper=False)
        return out[()] if np.ndim(out) == 0 else out

    def inverse_survival(self, s):
        """Smallest ``t`` with ``survival(t) <= s``."""
        s = np.asarray(s, dtype=float)
        if self.kind == "uniform":
            out = np.clip(1.0 - s, 0.0, 1.0)
        else:
            t0 = 1.0 - special.betaincinv(self.beta_param, self.alpha, s)
            out = _newton_polish(self, t0, s, upper=True)
        return out[()] if np.ndim(out) == 0 else out

    def hazard_rate(self, t):
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr >= 1.0) or np.any(t_arr < 0.0):
            raise ValueError("hazard rate is defined on 0 <= t < 1 (it diverges at t = 1)")
        if self.kind == "uniform":
            out = 1.0 / (1.0 - t_arr)
        else:
            out = self.pdf(t_arr) / self.survival(t_arr)
        out = np.asarray(out, dtype=float)
        return out[()] if out.ndim == 0 else out

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        return {"kind": "beta", "alpha": self.alpha, "beta": self.beta_param}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HazardSpec":
        kind = d.get("kind", "uniform")
        if kind == "uniform":
            return cls.uniform()
        if kind == "beta":
            return cls.beta(float(d["alpha"]), float(d["beta"]))
        raise ValueError(f"unknown hazard kind {kind!r}")


def _newton_polish(spec: HazardSpec, t, target, upper: bool, iters: int = 2):
    # refines betaincinv output; upper=True inverts the survival function
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    target = np.asarray(target, dtype=float)
    for _ in range(iters):
        f = spec.pdf(t)
        val = spec.survival(t) - target if upper else spec.cdf(t) - target
        slope = -f if upper else f
        ok = (f > 1e-300) & (t > 0) & (t < 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(ok, val / np.where(ok, slope, 1.0), 0.0)
        t_new = np.clip(t - step, 0.0, 1.0)
        t = np.where(np.isfinite(t_new), t_new, t)
    return t


def sample_interarrival(spec: HazardSpec, t, remaining, u):
    """Waiting time until the next of ``remaining`` events pending after ``t``.

    The remaining event times are i.i.d. draws from ``spec`` conditioned to
    exceed ``t``; the next one is their minimum, sampled by inversion with the
    uniform draw ``u``. Works elementwise on arrays.
    """
    t = np.asarray(t, dtype=float)
    remaining = np.asarray(remaining)
    if np.any(remaining < 1):
        raise ValueError("sample_interarrival needs at least one remaining event")
    if np.any(t < 0) or np.any(t >= 1):
        raise ValueError("current time must satisfy 0 <= t < 1")
    u = np.asarray(u, dtype=float)
    # S(V) = S(t) (1-u)^(1/R); log1p keeps precision for small u
    s_target = spec.survival(t) * np.exp(np.log1p(-u) / remaining)
    when = spec.inverse_survival(s_target)
    when = np.clip(when, t, 1.0 - EPS_TIME)
    wait = np.maximum(when - t, 0.0)
    return wait[()] if np.ndim(wait) == 0 else wait


def interarrival_scalar(spec: HazardSpec, t: float, remaining: int, u: float) -> float:
    """Float-only twin of :func:`sample_interarrival` for per-node loops."""
    if remaining < 1:
        raise ValueError("sample_interarrival needs at least one remaining event")
    if spec.kind == "uniform":
        s_target = (1.0 - t) * math.exp(math.log1p(-u) / remaining)
        when = 1.0 - s_target
    else:
        a, b = spec.alpha, spec.beta_param
        s_target = float(special.betainc(b, a, 1.0 - t)) * math.exp(math.log1p(-u) / remaining)
        when = 1.0 - float(special.betaincinv(b, a, s_target))
        log_norm = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
        for _ in range(2):
            if not 0.0 < when < 1.0:
                break
            f = math.exp((a - 1) * math.log(when) + (b - 1) * math.log1p(-when) - log_norm)
            if f <= 1e-300:
                break
            when = min(max(when + (float(special.betainc(b, a, 1.0 - when)) - s_target) / f, 0.0), 1.0)
    when = min(max(when, t), 1.0 - EPS_TIME)
    return max(when - t, 0.0)


def hazard_rate(spec: HazardSpec, t):
    return spec.hazard_rate(t)


def survival(spec: HazardSpec, t):
    return spec.survival(t)


def hazard_scalar(spec: HazardSpec, t: float) -> float:
    """Fast scalar hazard rate for the inner sampling loops."""
    if t >= 1.0:
        return math.inf
    if spec.kind == "uniform":
        return 1.0 / (1.0 - t)
    return float(spec.pdf(t) / spec.survival(t))


def counting_flow_counts(spec: HazardSpec, total: int, t: float, rng: np.random.Generator, size: int,
                         start: float = 0.0) -> np.ndarray:
    """Counts at time ``t`` of a counting flow with ``total`` pending events at ``start``.

    Built from successive waiting times, one event at a time, for ``size``
    independent chains. The deletion flow is the case ``total=1``.
    """
    if total < 0 or not 0.0 <= start <= t <= 1.0:
        raise ValueError("need total >= 0 and 0 <= start <= t <= 1")
    now = np.full(size, float(start))
    count = np.zeros(size, dtype=np.int64)
    for k in range(total):
        live = now <= t
        if not np.any(live):
            break
        # chains already past t are frozen; feed them a dummy time to keep shapes
        wait = sample_interarrival(spec, np.where(live, np.minimum(now, 1.0 - EPS_TIME), 0.0), total - k,
                                   rng.random(size))
        now = np.where(live, now + wait, now)
        count += (live & (now <= t)).astype(np.int64)
    return count
