"""Oracle-equivalence suites.

Each suite pits an implementation against an independent route (order
statistics, a stepped chain, Euler-Maruyama with rejection, enumeration,
finite differences) and reports a single figure against its tolerance.
Results are free of timings so repeated runs print identical text.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, stats

from .base_process import DFMSpec, OUSpec, dfm_schedulers, dfm_step_many, ou_bridge_params
from .conditional_path import Processes, sample_conditional_state
from .data import ToyDatasetSpec, generate
from .evaluation import ks_overlap
from .hazard import HazardSpec, counting_flow_counts, sample_interarrival
from .latent import Element, LatentConfig, build_latent, coalesce_forest, group_blocks, insert_deletions
from .model import ModelConfig, collate, grad_check, init_params, zero_params
from .objective import split_loss
from .sampler import OraclePredictor, StepSchedule, sample


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.6g} (tolerance {self.tolerance:g}) {self.detail}".rstrip()


def _ks(a, b) -> float:
    return 1.0 - ks_overlap(a, b)


def check_interarrival(rng: np.random.Generator, n: int = 100_000) -> CheckResult:
    """KS distance between shifted waiting times and minima of truncated i.i.d. draws."""
    specs = [HazardSpec.uniform(), HazardSpec.beta(1.0, 1.5), HazardSpec.beta(2.0, 2.0)]
    worst, where = 0.0, ""
    for spec, t, R in itertools.product(specs, (0.0, 0.3, 0.7), (1, 3, 10)):
        ours = t + sample_interarrival(spec, np.full(n, t), R, rng.random(n))
        dist = stats.uniform() if spec.kind == "uniform" else stats.beta(spec.alpha, spec.beta_param)
        # oracle: i.i.d. draws rejected one at a time until n*R exceed t,
        # then the smallest of each block of R
        kept, have = [], 0
        while have < n * R:
            cand = dist.rvs(size=n * R, random_state=rng)
            cand = cand[cand > t]
            kept.append(cand)
            have += cand.size
        oracle = np.concatenate(kept)[: n * R].reshape(n, R).min(axis=1)
        d = _ks(ours, oracle)
        if d > worst:
            worst, where = d, f"at {spec.kind}({spec.alpha:g},{spec.beta_param:g}) t={t} R={R}"
    return CheckResult("interarrival KS", worst, 0.01, worst < 0.01, where)


def check_counting_equivalence(rng: np.random.Generator, n: int = 100_000, total: int = 5,
                               delta: float = 1e-4, t_end: float = 0.5) -> CheckResult:
    """TV distance between event-time counts and a finely stepped CTMC at t_end."""
    spec = HazardSpec.uniform()
    events = counting_flow_counts(spec, total, t_end, rng, n)
    x = np.zeros(n, dtype=np.int64)
    for k in range(int(round(t_end / delta))):
        t = k * delta
        p = np.minimum(1.0, delta * (total - x) * float(spec.hazard_rate(t)))
        x += (rng.random(n) < p).astype(np.int64)
    pa = np.bincount(events, minlength=total + 1) / n
    pb = np.bincount(x, minlength=total + 1) / n
    tv = 0.5 * float(np.abs(pa - pb).sum())
    return CheckResult("counting flow TV", tv, 0.02, tv < 0.02)


def _toy_processes(K: int) -> Processes:
    return Processes(HazardSpec.uniform(), HazardSpec.beta(1.0, 1.5), OUSpec(3.0, 1.0, 0.05),
                     DFMSpec(HazardSpec.uniform(), HazardSpec.beta(2.0, 2.0), 0.3, K))


def check_termination(rng: np.random.Generator, n: int = 10_000) -> CheckResult:
    """At t=1 the conditional state equals x1 exactly (tokens) and to 1e-9 (continuous)."""
    bad = 0
    worst = 0.0
    latent = LatentConfig(x0_rate=0.5, deletion_scheme="rate", deletion_rate=1.3)
    for kind in ("token_runs", "polyline2d"):
        spec = ToyDatasetSpec(kind)
        proc = _toy_processes(spec.K)
        for x1 in generate(spec, n // 2, rng):
            z = build_latent(x1, latent, spec.d, spec.K, rng)
            state, _ = sample_conditional_state(z, 1.0, proc.split_hazard, proc.del_hazard, proc.ou, proc.dfm, rng)
            if len(state) != len(x1) or any(int(a) != b.token for a, b in zip(state.tokens, x1)):
                bad += 1
                continue
            if spec.d:
                err = float(np.max(np.abs(state.continuous - np.array([e.continuous for e in x1]))))
                worst = max(worst, err)
                bad += err > 1e-9
    return CheckResult("termination mismatches", bad, 0, bad == 0, f"max continuous error {worst:.3g}")


def check_ou_bridge(rng: np.random.Generator, n_accept: int = 100_000, dt: float = 1e-3, x_start: float = 0.3,
                    anchor: float = 0.0, window: float = 0.01) -> CheckResult:
    """Bridge mean/variance at v=0.5 against Euler-Maruyama paths conditioned by rejection on X_1."""
    spec = OUSpec(theta=5.0, v0=1.0, v1=1.0)
    steps = int(round(1.0 / dt))
    half = steps // 2
    kept: list[np.ndarray] = []
    total = 0
    chunk = 200_000
    while total < n_accept:
        x = np.full(chunk, x_start)
        mid = None
        for k in range(steps):
            t = k * dt
            x = x + spec.theta * (anchor - x) * dt + np.sqrt(spec.variance_at(t) * dt) * rng.standard_normal(chunk)
            if k + 1 == half:
                mid = x.copy()
        ok = np.abs(x - anchor) < window
        kept.append(mid[ok])
        total += int(ok.sum())
    sample_mid = np.concatenate(kept)[:n_accept]
    mean, var = ou_bridge_params(spec, x_start, anchor, 0.0, 0.5)
    rel_mean = abs(sample_mid.mean() - mean) / max(abs(mean), 1e-12)
    rel_var = abs(sample_mid.var() - var) / var
    _, pin = ou_bridge_params(spec, x_start, anchor, 0.0, 1.0)
    worst = max(rel_mean, rel_var)
    ok = worst < 0.02 and pin <= 1e-12
    return CheckResult("OU bridge rel. error", worst, 0.02, ok,
                       f"mean {sample_mid.mean():.5f} vs {float(mean):.5f}, var {sample_mid.var():.5f} vs "
                       f"{float(var):.5f}, pinned var {float(pin):.1e}")


def check_dfm_marginal(rng: np.random.Generator, n: int = 100_000, dt: float = 1e-3, K: int = 4,
                       target: int = 2) -> CheckResult:
    """Token chains stepped at dt against the analytic kappa mixture."""
    spec = DFMSpec(HazardSpec.beta(2.0, 2.0), HazardSpec.uniform(), 0.5, K)
    probs = np.zeros((n, K + 1))
    probs[:, target] = 1.0
    tok = np.full(n, K, dtype=np.int64)
    worst = 0.0
    checkpoints = {250: 0.25, 500: 0.5, 750: 0.75}
    for k in range(int(round(0.75 / dt))):
        tok = dfm_step_many(spec, tok, probs, k * dt, dt, rng)
        if k + 1 in checkpoints:
            k1, k2, k3 = dfm_schedulers(spec, checkpoints[k + 1])
            expect = np.full(K + 1, k2 / K)
            expect[target] += k1
            expect[K] = k3
            freq = np.bincount(tok, minlength=K + 1) / n
            worst = max(worst, float(np.abs(freq - expect).max()))
    return CheckResult("DFM marginal max error", worst, 0.01, worst < 0.01)


def _shape(forest, root: int) -> str:
    if forest.is_leaf(root):
        return "x"
    return f"({_shape(forest, forest.left[root])}{_shape(forest, forest.right[root])})"


def enumerate_merge_shapes(n_leaves: int) -> dict[str, float]:
    """Brute-force law of the tree shape under uniform adjacent-pair merging."""
    out: dict[str, float] = {}

    def walk(frontier: tuple[str, ...], p: float) -> None:
        if len(frontier) == 1:
            out[frontier[0]] = out.get(frontier[0], 0.0) + p
            return
        m = len(frontier) - 1
        for j in range(m):
            walk(frontier[:j] + (f"({frontier[j]}{frontier[j + 1]})",) + frontier[j + 2:], p / m)

    walk(("x",) * n_leaves, 1.0)
    return out


def check_forest(rng: np.random.Generator, n: int = 10_000, n_shapes: int = 100_000) -> CheckResult:
    """Structural assertions on random forests plus 4-leaf shape frequencies."""
    problems = 0
    for _ in range(n):
        L = 1 + int(rng.poisson(6))
        n_groups = 1 + int(rng.integers(3))
        cuts = np.sort(rng.choice(np.arange(1, L), size=min(n_groups - 1, L - 1), replace=False)) if L > 1 else []
        groups = np.zeros(L, dtype=int)
        for c in cuts:
            groups[c:] += 1
        x1 = []
        for i, g in enumerate(groups):
            # fixed elements may only sit between group blocks
            if (i == 0 or g != groups[i - 1]) and rng.random() < 0.3:
                x1.append(Element(np.zeros(0), 0, -1, fixed=True))
            x1.append(Element(np.zeros(0), 0, int(g)))
        lens = {}
        for kind, g, idx in group_blocks(x1):
            if kind == "group":
                lens[g] = 1 + min(int(rng.poisson(1.0)), 3)
        x1_aug, deleted = insert_deletions(x1, lens, 1.2, "rate", rng)
        forest, layout = coalesce_forest(x1_aug, deleted, lens, 0, rng)
        order: list[int] = []
        for kind, k in layout:
            if kind == "fixed":
                order.append(k)
                continue
            root = forest.roots[k]
            leaves = forest.leaves_in_order(root)
            order += [forest.leaf_of[v] for v in leaves]
            problems += len({forest.group[v] for v in leaves}) != 1
        problems += order != list(range(len(x1_aug)))
        for v in range(len(forest)):
            if forest.is_leaf(v):
                problems += forest.w[v] != 1
            else:
                problems += forest.w[v] != forest.w[forest.left[v]] + forest.w[forest.right[v]]
                problems += forest.group[v] != forest.group[forest.left[v]]
        roots_per_group: dict[int, int] = {}
        for r in forest.roots:
            roots_per_group[forest.group[r]] = roots_per_group.get(forest.group[r], 0) + 1
        problems += roots_per_group != lens
    oracle = enumerate_merge_shapes(4)
    counts: dict[str, int] = {}
    x4 = [Element(np.zeros(0), 0) for _ in range(4)]
    flags = np.zeros(4, dtype=bool)
    for _ in range(n_shapes):
        forest, _ = coalesce_forest(x4, flags, {0: 1}, 0, rng)
        s = _shape(forest, forest.roots[0])
        counts[s] = counts.get(s, 0) + 1
    worst = max(abs(counts.get(s, 0) / n_shapes - p) for s, p in oracle.items())
    ok = problems == 0 and worst < 0.01 and set(counts) <= set(oracle)
    return CheckResult("forest shape frequency error", worst, 0.01, ok, f"structural violations {problems}")


def check_gradients(rng: np.random.Generator, seeds: int = 5) -> CheckResult:
    """Tape gradients against central differences, random and zero parameters."""
    cfg = ModelConfig(d=2, K=4, hidden_dim=16, num_blocks=2, time_features=2)
    spec = ToyDatasetSpec("polyline2d")
    proc = _toy_processes(4)
    worst = 0.0
    for s in range(seeds):
        local = np.random.default_rng([s, int(rng.integers(2**31))])
        states, targets = [], []
        for x1 in generate(spec, 4, local):
            z = build_latent(x1, LatentConfig(0.5, "rate", 1.3), 2, 4, local)
            st, tg = sample_conditional_state(z, float(local.random()), proc.split_hazard, proc.del_hazard, proc.ou,
                                              proc.dfm, local)
            states.append(st)
            targets.append(tg)
        batch = collate(states, targets, cfg)
        worst = max(worst, grad_check(init_params(cfg, local), batch, cfg, local))
        if s == 0:
            worst = max(worst, grad_check(zero_params(cfg), batch, cfg, local))
    return CheckResult("grad check max rel. error", worst, 1e-4, worst < 1e-4)


def check_split_minimiser(rng: np.random.Generator) -> CheckResult:
    """The split loss is minimised by the posterior mean of R, here enumerated exactly."""
    values = np.arange(0, 12)
    weights = rng.dirichlet(np.ones(values.size))
    posterior_mean = float(values @ weights)
    res = optimize.minimize_scalar(lambda lr: float(weights @ split_loss(values, np.exp(lr))),
                                   bounds=(-5.0, 5.0), method="bounded", options={"xatol": 1e-10})
    err = abs(float(np.exp(res.x)) - posterior_mean)
    return CheckResult("split-loss minimiser error", err, 1e-3, err < 1e-3)


def check_oracle_sampler(rng: np.random.Generator, trials: int = 1000, n_steps: int = 1000) -> CheckResult:
    """Sampler driven by the true targets of known Z recovers x1."""
    bad = 0
    worst = 0.0
    for kind in ("token_runs", "polyline2d"):
        spec = ToyDatasetSpec(kind)
        proc = _toy_processes(spec.K)
        zs = [build_latent(x1, LatentConfig(0.5, "rate", 1.3), spec.d, spec.K, rng)
              for x1 in generate(spec, trials // 2, rng)]
        oracle = OraclePredictor(zs)
        x0, aux = oracle.initial()
        out = sample(oracle, StepSchedule("cosine", n_steps), proc, spec.d, rng, x0=x0, aux=aux,
                     aux_split=oracle.split)
        for z, got in zip(zs, out.samples):
            want = z.x1
            if len(got) != len(want) or any(a.token != b.token for a, b in zip(got, want)):
                bad += 1
                continue
            if spec.d:
                err = max(float(np.max(np.abs(a.continuous - b.continuous))) for a, b in zip(got, want))
                worst = max(worst, err)
                bad += err > 1e-2
    return CheckResult("oracle sampler mismatches", bad, 0, bad == 0, f"max continuous error {worst:.3g}")


SUITES: dict[str, Callable[[np.random.Generator], CheckResult]] = {
    "interarrival": check_interarrival,
    "counting": check_counting_equivalence,
    "termination": check_termination,
    "ou_bridge": check_ou_bridge,
    "dfm": check_dfm_marginal,
    "forest": check_forest,
    "gradients": check_gradients,
    "split_minimiser": check_split_minimiser,
    "oracle_sampler": check_oracle_sampler,
}


def run_suites(seed: int, names=None) -> list[CheckResult]:
    out = []
    order = list(SUITES)
    for name in names or order:
        rng = np.random.default_rng([seed, order.index(name)])
        out.append(SUITES[name](rng))
    return out
