import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from branchflows import BranchingFlows
from branchflows.config import RunConfig
from branchflows.data import ToyDatasetSpec, generate
from branchflows.latent import Element
from branchflows.sampler import FlatState
from branchflows.training import ModelPredictor

SMALL = {"data": {"kind": "polyline2d"},
         "model": {"steps": 30, "batch_size": 8, "hidden_dim": 16, "num_blocks": 1},
         "sampler": {"n_steps": 20}}


@pytest.fixture(scope="module")
def fitted():
    data = generate(ToyDatasetSpec("polyline2d"), 60, np.random.default_rng(0))
    return BranchingFlows(SMALL, seed=3).fit(data), data


def test_params_and_clone():
    est = BranchingFlows(SMALL, seed=5, steps=10)
    assert est.get_params() == {"config": SMALL, "seed": 5, "steps": 10}
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(seed=6)
    assert est.seed == 6


def test_unfitted_and_bad_inputs():
    est = BranchingFlows(SMALL)
    with pytest.raises(NotFittedError):
        est.sample(2)
    with pytest.raises(ValueError):
        est.fit([])
    with pytest.raises(ValueError):
        est.fit([[Element(np.zeros(3), 0)]])
    with pytest.raises(ValueError):
        est.fit([[Element(np.array([np.nan, 0.0]), 0)]])
    with pytest.raises(ValueError):
        est.fit([[Element(np.zeros(2), 9)]])
    with pytest.raises(ValueError):
        est.fit([[]])
    with pytest.raises(TypeError):
        est.fit("abc")
    with pytest.raises(TypeError):
        est.fit([[1.0, 2.0]])
    with pytest.raises(TypeError):
        BranchingFlows(config=42).fit([[Element(np.zeros(0), 0)]])


def test_fit_sample_score(fitted):
    est, data = fitted
    assert est.train_result_.steps == 30 and est.n_features_in_ == 2
    out = est.sample(5, seed=1)
    assert len(out) == 5
    assert all(e.continuous.shape == (2,) and 0 <= e.token < 4 for s in out for e in s)
    again = est.sample(5, seed=1)
    assert all(a.same_state(b) for s, t in zip(out, again) for a, b in zip(s, t))
    score = est.score(data[:10])
    assert np.isfinite(score) and score == est.score(data[:10])
    with pytest.raises(ValueError):
        est.sample(0)


def test_fit_accepts_dicts_and_is_reproducible(fitted):
    est, data = fitted
    as_dicts = [[e.to_dict() for e in s] for s in data]
    other = BranchingFlows(SMALL, seed=3).fit(as_dicts)
    for k in est.params_:
        assert np.array_equal(other.params_[k], est.params_[k])


def test_save_load_roundtrip(fitted, tmp_path):
    est, _ = fitted
    path = tmp_path / "m.bfck"
    est.save(path)
    back = BranchingFlows.load(path)
    assert back.config_ == est.config_ and back.seed == est.seed
    a, b = est.sample(4, seed=9), back.sample(4, seed=9)
    assert all(x.same_state(y) for s, t in zip(a, b) for x, y in zip(s, t))


def test_conditioned_sampling_keeps_fixed_element(fitted):
    est, _ = fitted
    anchor = Element(np.array([0.5, -0.25]), 2, -1, fixed=True)
    out = est.sample(6, seed=2, init=(2, anchor, 2))
    for seq in out:
        fixed = [e for e in seq if e.fixed]
        assert len(fixed) == 1 and fixed[0].same_state(anchor)


def test_trajectory_output(fitted):
    est, _ = fitted
    samples, res = est.sample(2, seed=4, trajectory=True)
    assert len(samples) == 2 and res.trajectory
    assert {r[1] for r in res.trajectory} >= {repr(0.0), repr(1.0)}


def test_predictor_chunking_is_invisible(fitted):
    est, _ = fitted
    seqs = generate(ToyDatasetSpec("polyline2d"), 9, np.random.default_rng(1))
    state = FlatState.from_sequences(seqs, 2)
    big = ModelPredictor(est.params_, est.config_.model)(0.4, state)
    small = ModelPredictor(est.params_, est.config_.model, chunk=2)(0.4, state)
    for key in ("endpoint_mean", "token_logits", "log_splits", "delete_logit"):
        np.testing.assert_allclose(getattr(small, key), getattr(big, key), rtol=1e-12, atol=1e-12)


def test_config_objects_accepted():
    cfg = RunConfig.from_dict(SMALL)
    est = BranchingFlows(cfg, steps=3).fit(generate(cfg.data, 10, np.random.default_rng(2)))
    assert est.train_result_.steps == 3
