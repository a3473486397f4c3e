import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchflows.conditional_path import PathTargets
from branchflows.config import RunConfig
from branchflows.data import generate
from branchflows.latent import AugState, BranchId
from branchflows.model import (
    ModelConfig,
    TrainingError,
    collate,
    flatten,
    forward,
    forward_arrays,
    grad_check,
    init_optimizer,
    init_params,
    load_checkpoint,
    loss_and_grads,
    loss_value,
    save_checkpoint,
    train_step,
    unflatten,
    zero_params,
)
from branchflows.objective import LossWeights, Prediction, loss_terms
from branchflows.training import training_example

CFG = ModelConfig(d=2, K=4, hidden_dim=12, num_blocks=2, time_features=2, learning_rate=0.02, batch_size=4)


def random_state(rng, n, d=2, K=4, t=None):
    return AugState(float(rng.random()) if t is None else t, rng.normal(size=(n, d)), rng.integers(0, K + 1, n),
                    np.zeros(n, dtype=np.int64), np.zeros(n, bool), [BranchId(i) for i in range(n)])


def toy_batch(cfg, seed, kind="polyline2d", n=4):
    rcfg = RunConfig.from_dict({"data": {"kind": kind}, "model": {"hidden_dim": cfg.hidden_dim,
                                                                  "num_blocks": cfg.num_blocks,
                                                                  "time_features": cfg.time_features}})
    rng = np.random.default_rng(seed)
    made = [training_example(x1, rcfg, rng) for x1 in generate(rcfg.data, n, rng)]
    return collate([m[0] for m in made], [m[1] for m in made], rcfg.model), rcfg.model


@pytest.mark.parametrize("n", [1, 2, 7, 31, 64])
def test_forward_shapes(n):
    rng = np.random.default_rng(n)
    params = init_params(CFG, rng)
    pred = forward(params, 0.3, random_state(rng, n), CFG)
    assert pred.endpoint_mean.shape == (n, 2)
    assert pred.token_logits.shape == (n, 5)
    assert pred.log_splits.shape == (n,) and pred.delete_logit.shape == (n,)


def test_forward_rejects_wrong_dims_and_empty():
    rng = np.random.default_rng(0)
    params = init_params(CFG, rng)
    with pytest.raises(ValueError):
        forward(params, 0.3, random_state(rng, 3, d=3), CFG)
    with pytest.raises(ValueError):
        forward(params, 0.3, random_state(rng, 0), CFG)


def test_zero_params_links():
    rng = np.random.default_rng(1)
    pred = forward(zero_params(CFG), 0.7, random_state(rng, 5), CFG)
    np.testing.assert_array_equal(pred.splits, np.ones(5))
    np.testing.assert_array_equal(pred.delete_prob, np.full(5, 0.5))


def test_batch_equivariance_and_padding():
    rng = np.random.default_rng(2)
    params = init_params(CFG, rng)
    states = [random_state(rng, n) for n in (3, 6, 1, 4)]
    out = forward_arrays(params, collate(states, None, CFG), CFG)
    perm = [2, 0, 3, 1]
    out_p = forward_arrays(params, collate([states[i] for i in perm], None, CFG), CFG)
    for j, i in enumerate(perm):
        n = len(states[i])
        for key in out:
            np.testing.assert_allclose(out_p[key][j, :n], out[key][i, :n], rtol=1e-12, atol=1e-12)
    # each state alone gives the same predictions as inside the padded batch
    for i, s in enumerate(states):
        single = forward(params, s.t, s, CFG)
        np.testing.assert_allclose(single.log_splits, out["log_splits"][i, :len(s)], rtol=1e-12, atol=1e-12)


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    params = init_params(CFG, rng)
    s = random_state(rng, 9)
    a, b = forward(params, 0.4, s, CFG), forward(params, 0.4, s, CFG)
    for key in ("endpoint_mean", "token_logits", "log_splits", "delete_logit"):
        assert np.array_equal(getattr(a, key), getattr(b, key))


@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.integers(1, 12), st.floats(0.1, 5.0))
@settings(max_examples=40, deadline=None)
def test_link_ranges(seed, t, n, scale):
    rng = np.random.default_rng(seed)
    params = {k: v * scale for k, v in init_params(CFG, rng).items()}
    pred = forward(params, t, random_state(rng, n, t=t), CFG)
    assert np.all(np.isfinite(pred.log_splits)) and np.all(np.isfinite(pred.delete_logit))
    assert np.all(pred.splits >= 0)
    # strictly inside (0, 1) wherever double precision can represent it
    moderate = np.abs(pred.delete_logit) < 30
    rho = pred.delete_prob[moderate]
    assert np.all((rho > 0) & (rho < 1))


def test_tape_loss_matches_reference_loss():
    batch, mcfg = toy_batch(CFG, 4)
    rng = np.random.default_rng(4)
    params = init_params(mcfg, rng)
    out = forward_arrays(params, batch, mcfg)
    pairs = []
    for b in range(batch.mask.shape[0]):
        n = int(batch.mask[b].sum())
        tg = PathTargets(float(batch.t[b]), batch.R[b, :n], batch.rho[b, :n], batch.anchor_continuous[b, :n],
                         batch.anchor_tokens[b, :n], batch.fixed[b, :n])
        pr = Prediction(out["mu"][b, :n], out["logits"][b, :n], out["log_splits"][b, :n],
                        out["delete_logit"][b, :n])
        pairs.append(loss_terms(tg, pr))
    ref = float(np.mean([p["total"] for p in pairs]))
    assert loss_value(params, batch, mcfg) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_random_params(seed):
    batch, mcfg = toy_batch(CFG, seed)
    rng = np.random.default_rng(seed)
    assert grad_check(init_params(mcfg, rng), batch, mcfg, rng) < 1e-4


def test_grad_check_zero_params_and_tokens_only():
    batch, mcfg = toy_batch(CFG, 10)
    assert grad_check(zero_params(mcfg), batch, mcfg, np.random.default_rng(0)) < 1e-4
    batch, mcfg = toy_batch(CFG, 11, kind="token_runs")
    assert grad_check(init_params(mcfg, np.random.default_rng(1)), batch, mcfg, np.random.default_rng(1)) < 1e-4


def test_grad_check_hazard_weights():
    batch, mcfg = toy_batch(CFG, 12)
    w = LossWeights(time_weight="hazard", max_time_weight=20.0)
    rng = np.random.default_rng(2)
    assert grad_check(init_params(mcfg, rng), batch, mcfg, rng, weights=w) < 1e-4


def test_train_step_determinism_and_zero_lr():
    batch, mcfg = toy_batch(CFG, 13)
    params = init_params(mcfg, np.random.default_rng(5))
    runs = []
    for _ in range(2):
        p, opt, losses = params, init_optimizer(params), []
        for _ in range(5):
            p, opt, terms = train_step(p, opt, batch, mcfg)
            losses.append(terms["total"])
        runs.append(losses)
    assert runs[0] == runs[1]
    p, _, _ = train_step(params, init_optimizer(params), batch, mcfg, lr=0.0)
    for k in params:
        assert np.array_equal(p[k], params[k])
    sgd = ModelConfig(**{**mcfg.to_dict(), "optimizer": "sgd", "learning_rate": 0.0})
    p, _, _ = train_step(params, init_optimizer(params), batch, sgd)
    assert all(np.array_equal(p[k], params[k]) for k in params)


def test_constant_batch_reaches_split_minimum():
    cfg = ModelConfig(d=0, K=4, hidden_dim=16, num_blocks=1, time_features=2, learning_rate=0.03)
    rng = np.random.default_rng(6)
    R = [np.array([3, 1, 5]), np.array([2, 4]), np.array([1, 1, 6, 2])]
    states = [AugState(0.3, np.zeros((len(r), 0)), rng.integers(0, 4, len(r)), np.zeros(len(r), dtype=np.int64),
                       np.zeros(len(r), bool), [BranchId(i) for i in range(len(r))]) for r in R]
    targets = [PathTargets(0.3, r, np.zeros(len(r)), np.zeros((len(r), 0)), np.full(len(r), 4),
                           np.zeros(len(r), bool)) for r in R]
    batch = collate(states, targets, cfg)
    # the minimum of exp(s) - R s over s is R - R log R, attained at s = log R
    best = np.mean([float(np.sum(r - r * np.log(r))) for r in R])
    params, opt = init_params(cfg, rng), None
    opt = init_optimizer(params)
    for _ in range(500):
        params, opt, terms = train_step(params, opt, batch, cfg)
    final, _ = loss_and_grads(params, batch, cfg)
    assert final["split"] - best == pytest.approx(0.0, abs=1e-3)


def test_non_finite_loss_raises(tmp_path):
    batch, mcfg = toy_batch(CFG, 14)
    params = init_params(mcfg, np.random.default_rng(7))
    params["split.b"] = np.array([1e6])
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="batch written to"):
        train_step(params, init_optimizer(params), batch, mcfg)


def test_loss_decreases_on_toy_data():
    from branchflows.training import train

    for kind in ("token_runs", "polyline2d"):
        cfg = RunConfig.from_dict({"data": {"kind": kind},
                                   "model": {"steps": 200, "batch_size": 16, "hidden_dim": 32,
                                             "budget": {"max_elements": 0, "max_seconds": 0}}})
        data = generate(cfg.data, 200, np.random.default_rng(8))
        m = np.array(train(cfg, data, seed=3).metrics)[:, -1]
        smooth = np.convolve(m, np.ones(25) / 25, mode="valid")
        assert smooth[-1] < 0.8 * smooth[0]
        assert np.polyfit(np.arange(smooth.size), smooth, 1)[0] < 0


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(CFG, np.random.default_rng(9))
    path = tmp_path / "m.bfck"
    save_checkpoint(path, {"seed": 4}, params, CFG)
    header, back, cfg = load_checkpoint(path)
    assert cfg == CFG and header["seed"] == 4
    assert np.array_equal(flatten(back, cfg), flatten(params, CFG))
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
    with pytest.raises(ValueError):
        unflatten(np.zeros(3), CFG)


def test_config_validation_and_schedules():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(d=0, K=0)
    with pytest.raises(ValueError):
        ModelConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        ModelConfig(ema=1.0)
    cfg = ModelConfig(learning_rate=1.0, steps=110, warmup=10, lr_schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(9) == pytest.approx(1.0)
    assert cfg.lr_at(60) == pytest.approx(0.5)
    assert cfg.lr_at(110) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    u = np.array([ModelConfig(time_law="cosine").draw_time(rng) for _ in range(20000)])
    # the cosine time law is Beta(1/2, 1/2) (arcsine)
    assert np.mean(u < 0.1) == pytest.approx(2 / math.pi * math.asin(math.sqrt(0.1)), abs=0.01)
