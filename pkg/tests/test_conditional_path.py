import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from branchflows.base_process import DFMSpec, OUSpec
from branchflows.conditional_path import (
    Processes,
    sample_conditional_path,
    sample_conditional_state,
    targets_from_state,
    trajectory_header,
    trajectory_rows,
    write_trajectory_csv,
)
from branchflows.data import ToyDatasetSpec, generate
from branchflows.hazard import HazardSpec
from branchflows.latent import BranchId, Element, LatentConfig, build_latent

U = HazardSpec.uniform()
PROC = Processes(U, HazardSpec.beta(1, 1.5), OUSpec(3.0, 1.0, 0.05), DFMSpec(U, HazardSpec.beta(2, 2), 0.3, 4))


def draw(proc, z, t, rng, record=None):
    return sample_conditional_state(z, t, proc.split_hazard, proc.del_hazard, proc.ou, proc.dfm, rng, record)


def polyline_latent(seed, x0_rate=0.5, d_r=1.3):
    rng = np.random.default_rng(seed)
    spec = ToyDatasetSpec("polyline2d")
    x1 = generate(spec, 1, rng)[0]
    return x1, build_latent(x1, LatentConfig(x0_rate, "rate", d_r), 2, 4, rng)


def test_time_zero_is_x0_with_roots():
    x1, z = polyline_latent(0)
    state, tg = draw(PROC, z, 0.0, np.random.default_rng(1))
    assert len(state) == len(z.x0)
    for i, e in enumerate(z.x0):
        np.testing.assert_array_equal(state.continuous[i], e.continuous)
        assert state.tokens[i] == e.token
        assert state.branches[i] == BranchId(i)
        assert tg.remaining_splits[i] == z.forest.w[z.forest.roots[i]] - 1


@pytest.mark.parametrize("seed", range(20))
def test_time_one_is_x1(seed):
    x1, z = polyline_latent(seed)
    state, tg = draw(PROC, z, 1.0, np.random.default_rng(seed))
    assert len(state) == len(x1)
    assert list(state.tokens) == [e.token for e in x1]
    np.testing.assert_array_equal(state.continuous, np.array([e.continuous for e in x1]))
    assert not tg.deleted.any() and not tg.remaining_splits.any()


def test_three_leaf_count_law():
    # one tree, three leaves, no deletions: count at 0.5 is 1 + Binomial(2, F(0.5))
    x1 = [Element(np.zeros(0), k) for k in range(3)]
    rng = np.random.default_rng(2)
    z = build_latent(x1, LatentConfig(0.0, "none", 1.0), 0, 4, rng)
    assert len(z.x1_aug) == 3
    proc = Processes(U, U, OUSpec(), DFMSpec(U, U, 0.0, 4))
    n = 100_000
    counts = np.array([len(draw(proc, z, 0.5, rng)[0]) for _ in range(n)])
    emp = np.bincount(counts, minlength=4)[1:4] / n
    exact = stats.binom(2, 0.5).pmf([0, 1, 2])
    assert 0.5 * np.abs(emp - exact).sum() < 0.02


def test_pooled_split_times_are_iid_hazard_draws():
    x1 = [Element(np.zeros(0), k % 4) for k in range(4)]
    rng = np.random.default_rng(3)
    z = build_latent(x1, LatentConfig(0.0, "none", 1.0), 0, 4, rng)
    hz = HazardSpec.beta(2, 2)
    proc = Processes(hz, U, OUSpec(), DFMSpec(U, U, 0.0, 4))
    record: dict = {}
    for _ in range(100_000):
        draw(proc, z, 1.0, rng, record)
    times = np.array(record["split_times"])
    assert times.size == 300_000
    assert stats.kstest(times, stats.beta(2, 2).cdf).statistic < 0.01


def test_targets_from_state_examples():
    x1, z = polyline_latent(4, x0_rate=0.0, d_r=2.0)
    rng = np.random.default_rng(5)
    f = z.forest
    state0, _ = draw(PROC, z, 0.0, rng)
    tg = targets_from_state(z, state0)
    assert tg.remaining_splits[0] == f.w[f.roots[0]] - 1
    for t in (0.3, 0.7, 0.95):
        state, tg_direct = draw(PROC, z, t, rng)
        tg = targets_from_state(z, state)
        np.testing.assert_array_equal(tg.remaining_splits, tg_direct.remaining_splits)
        np.testing.assert_array_equal(tg.deleted, tg_direct.deleted)
        np.testing.assert_array_equal(tg.anchor_continuous, tg_direct.anchor_continuous)
        for i, b in enumerate(state.branches):
            node = f.resolve(b)
            if f.is_leaf(node) and not f.deleted[node]:
                assert tg.remaining_splits[i] == 0 and tg.deleted[i] == 0
                np.testing.assert_array_equal(tg.anchor_continuous[i], z.x1_aug[f.leaf_of[node]].continuous)
            if f.is_leaf(node) and f.deleted[node]:
                assert tg.remaining_splits[i] == 0 and tg.deleted[i] == 1


def test_dangling_branch_raises():
    x1, z = polyline_latent(6)
    state, _ = draw(PROC, z, 0.5, np.random.default_rng(0))
    state.branches[0] = BranchId(99)
    with pytest.raises(ValueError):
        targets_from_state(z, state)


def test_time_validation():
    _, z = polyline_latent(7)
    with pytest.raises(ValueError):
        draw(PROC, z, 1.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_conditional_path(z, [0.5, 0.2], PROC, np.random.default_rng(0))


@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.sampled_from(["token_runs", "polyline2d"]))
@settings(max_examples=80, deadline=None)
def test_no_split_delete_race_and_counts(seed, t, kind):
    rng = np.random.default_rng(seed)
    spec = ToyDatasetSpec(kind)
    x1 = generate(spec, 1, rng)[0]
    z = build_latent(x1, LatentConfig(1.0, "rate", 1.5), spec.d, spec.K, rng)
    record: dict = {}
    state, tg = draw(PROC, z, t, rng, record)
    assert not np.any((tg.remaining_splits > 0) & (tg.deleted > 0))
    n_split = len(record.get("split_times", []))
    n_del = len(record.get("deletion_times", []))
    assert len(state) == len(z.x0) + n_split - n_del
    f = z.forest
    frontier = []
    for b in state.branches:
        frontier.append(f.resolve(b))
    # planar order: leaves under successive frontier nodes are increasing
    firsts = [f.leaf_of[f.leaves_in_order(n)[0]] for n in frontier]
    assert firsts == sorted(firsts)


@given(st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_path_ends_at_x1_and_counts_track_events(seed):
    x1, z = polyline_latent(seed)
    grid = np.linspace(0, 1, 11)
    path = sample_conditional_path(z, grid, PROC, np.random.default_rng(seed))
    assert [s.t for s, _ in path] == list(grid)
    final, _ = path[-1]
    assert len(final) == len(x1)
    assert np.max(np.abs(final.continuous - np.array([e.continuous for e in x1]))) <= 1e-9


def test_trajectory_rows_and_csv():
    x1, z = polyline_latent(8)
    rng = np.random.default_rng(8)
    rows = []
    for state, tg in sample_conditional_path(z, [0.0, 0.5, 1.0], PROC, rng):
        rows += trajectory_rows(3, state, tg)
    header = trajectory_header(2)
    assert header == ["sample_id", "t", "element_index", "tree", "path", "x0", "x1", "token", "R_Z", "rho_Z"]
    assert all(len(r) == len(header) for r in rows)
    buf = io.StringIO()
    write_trajectory_csv(buf, 2, rows)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(header) and len(lines) == len(rows) + 1
    assert lines[1].startswith("3,0.0,0,0,")
