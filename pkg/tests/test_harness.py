import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchflows.cli import main
from branchflows.config import ConfigError, RunConfig
from branchflows.data import (
    ToyDatasetSpec,
    gen_polyline2d,
    gen_token_runs,
    generate,
    generate_budget,
    quadrant,
    read_sequences,
    seq_to_json,
    write_jsonl_lines,
)
from branchflows.evaluation import EvalReport, evaluate, ks_overlap, pairwise_distances

# mean over clean arc points of Phi(|x|/s) Phi(|y|/s), s the jitter scale
QUADRANT_AGREEMENT = 0.9818779073109409


def test_token_runs_lengths_and_runs():
    spec = ToyDatasetSpec("token_runs")
    rng = np.random.default_rng(0)
    seqs = generate(spec, 100_000, rng)
    lengths = np.array([len(s) for s in seqs])
    assert lengths.min() == 3
    assert lengths.mean() == pytest.approx(9.0, abs=0.1)
    same = np.mean([a.token == b.token for s in seqs[:20_000] for a, b in zip(s, s[1:])])
    assert same > 1 / spec.K
    # each step keeps the symbol with probability ``stay``
    assert same == pytest.approx(spec.stay, abs=0.01)
    assert all(e.continuous.shape == (0,) and 0 <= e.token < 4 for e in seqs[0])


def test_polyline_quadrants_and_geometry():
    spec = ToyDatasetSpec("polyline2d")
    rng = np.random.default_rng(1)
    seqs = generate(spec, 100_000, rng)
    assert min(len(s) for s in seqs) >= 4
    pts = np.concatenate([[e.continuous for e in s] for s in seqs])
    toks = np.array([e.token for s in seqs for e in s])
    agree = np.mean(quadrant(pts) == toks)
    assert agree >= 0.95
    assert agree == pytest.approx(QUADRANT_AGREEMENT, abs=0.002)
    near = np.mean([np.linalg.norm(np.diff([e.continuous for e in s], axis=0), axis=1).mean() for s in seqs[:5000]])
    pairs = np.mean([pairwise_distances(s).mean() for s in seqs[:5000]])
    assert near < pairs


def test_quadrant_labels():
    pts = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [0.0, 0.0]])
    assert list(quadrant(pts)) == [0, 1, 2, 3, 0]


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        ToyDatasetSpec("images")
    with pytest.raises(ValueError):
        ToyDatasetSpec("polyline2d", K=3)
    with pytest.raises(ValueError):
        ToyDatasetSpec("token_runs", K=3)
    with pytest.raises(ValueError):
        ToyDatasetSpec("token_runs", min_length=0)
    assert ToyDatasetSpec.from_dict(ToyDatasetSpec("polyline2d").to_dict()) == ToyDatasetSpec("polyline2d")


@given(st.integers(0, 2**31), st.sampled_from(["token_runs", "polyline2d"]))
@settings(max_examples=50, deadline=None)
def test_generated_lengths_positive(seed, kind):
    spec = ToyDatasetSpec(kind)
    gen = gen_token_runs if kind == "token_runs" else gen_polyline2d
    seq = gen(spec, np.random.default_rng(seed))
    assert len(seq) >= spec.min_length >= 1


def test_generate_budget_respects_cap():
    spec = ToyDatasetSpec("token_runs")
    seqs = generate_budget(spec, 1000, np.random.default_rng(2))
    total = sum(len(s) for s in seqs)
    assert total <= 1000 and total > 1000 - 40
    with pytest.raises(ValueError):
        generate_budget(spec, 2, np.random.default_rng(2))


def test_ks_overlap_examples():
    a = [0.1, 0.5, 0.5, 2.0]
    assert ks_overlap(a, list(reversed(a))) == 1.0
    assert ks_overlap([0.0, 1.0], [2.0, 3.0]) == 0.0
    rng = np.random.default_rng(3)
    assert ks_overlap(rng.uniform(0, 1, 100_000), rng.uniform(0.5, 1.5, 100_000)) == pytest.approx(0.5, abs=0.01)
    with pytest.raises(ValueError):
        ks_overlap([], [1.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.lists(st.floats(-1e6, 1e6), min_size=1,
                                                                          max_size=50))
def test_ks_overlap_range_and_symmetry(a, b):
    v = ks_overlap(a, b)
    assert 0.0 <= v <= 1.0
    assert v == ks_overlap(b, a)


def test_eval_report_checks():
    with pytest.raises(ValueError):
        EvalReport({"length": 1.2}, {}, 1, 1)
    rep = EvalReport({"length": 0.95, "x0": 0.8}, {"pos0": 0.05}, 10, 10)
    assert rep.failures() == ["x0: 1-KS 0.8000 < 0.85"] and not rep.passed
    assert json.loads(rep.to_json())["passed"] is False


def test_evaluate_statistics_by_task():
    rng = np.random.default_rng(4)
    tok = ToyDatasetSpec("token_runs")
    rep = evaluate(generate(tok, 2000, rng), generate(tok, 2000, rng), tok.K, tok.d)
    assert set(rep.overlaps) == {"length"}
    assert "all" in rep.token_l1 and "pos0" in rep.token_l1
    poly = ToyDatasetSpec("polyline2d")
    rep = evaluate(generate(poly, 2000, rng), generate(poly, 2000, rng), poly.K, poly.d)
    assert set(rep.overlaps) == {"length", "x0", "x1", "pair_distance"} and rep.token_l1 == {}
    with pytest.raises(ValueError):
        evaluate([], generate(poly, 2, rng), 4, 2)


def test_config_roundtrip_and_errors(tmp_path):
    cfg = RunConfig.from_dict({"data": {"kind": "polyline2d"}, "hazards": {"split": {"kind": "beta", "alpha": 2,
                                                                                      "beta": 2}},
                               "model": {"hidden_dim": 24, "loss": {"time_weight": "hazard"}}})
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()
    assert again.model.d == 2 and again.weights.time_weight == "hazard"
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(path) == cfg
    for bad in ('{"extra": {}}', "[1]", "{not json", '{"model": {"hidden_dim": -1}}',
                '{"data": {"kind": "polyline2d"}, "model": {"d": 0}}', '{"sampler": {"kind": "quadratic"}}'):
        with pytest.raises(ConfigError):
            RunConfig.from_json(bad)


def _write_jsonl(path, seqs):
    path.write_text(write_jsonl_lines([{"elements": seq_to_json(s)} for s in seqs]))


def test_jsonl_roundtrip_and_bad_lines(tmp_path):
    seqs = generate(ToyDatasetSpec("polyline2d"), 5, np.random.default_rng(5))
    path = tmp_path / "s.jsonl"
    _write_jsonl(path, seqs)
    back = read_sequences(str(path))
    assert all(a.same_state(b) for s, t in zip(seqs, back) for a, b in zip(s, t))
    path.write_text('{"elements": []}\n{"oops": 1}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_sequences(str(path))


def test_cli_errors(tmp_path, capsys):
    assert main(["sample", "--out", str(tmp_path / "x.jsonl")]) != 0
    assert "checkpoint" in capsys.readouterr().err
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.bfck")]) != 0
    assert main(["train", "--bogus-flag"]) != 0
    assert "unrecognized" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"hidden_dim": "wide"}}')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) != 0
    assert "error:" in capsys.readouterr().err
    assert main(["eval"]) != 0
    assert main(["selftest", "--suite", "nope"]) != 0
    assert main([]) != 0


@pytest.mark.parametrize("kind", ["token_runs", "polyline2d"])
def test_cli_eval_data_against_data(kind, tmp_path, capsys):
    spec = ToyDatasetSpec(kind)
    _write_jsonl(tmp_path / "a.jsonl", generate(spec, 10_000, np.random.default_rng(6)))
    _write_jsonl(tmp_path / "b.jsonl", generate(spec, 10_000, np.random.default_rng(7)))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"kind": kind}}))
    code = main(["eval", "--config", str(cfg), "--samples", str(tmp_path / "a.jsonl"), "--data",
                 str(tmp_path / "b.jsonl"), "--out", str(tmp_path / "report.json")])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and report["n_generated"] == 10_000
    assert all(v >= 0.98 for v in report["overlaps"].values())
    assert capsys.readouterr().out == (tmp_path / "report.json").read_text()


def test_cli_simulate_and_gradcheck(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--seed", "3", "--n", "2", "--out", str(out), "--steps", "4"]) == 0
    lines = (out / "latent.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all("trees" in json.loads(l) for l in lines)
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert rows[0] == "sample_id,t,element_index,tree,path,token,R_Z,rho_Z"
    first = (out / "trajectory.csv").read_bytes()
    assert main(["simulate", "--seed", "3", "--n", "2", "--out", str(out), "--steps", "4"]) == 0
    assert (out / "trajectory.csv").read_bytes() == first
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")


def test_cli_train_sample_eval_roundtrip(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"kind": "polyline2d"},
                               "model": {"steps": 5, "batch_size": 4, "hidden_dim": 8, "num_blocks": 1},
                               "sampler": {"n_steps": 5, "n_samples": 3}}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--seed", "2"]) == 0
    assert {p.name for p in run.iterdir()} == {"checkpoint.bfck", "metrics.csv", "config.json"}
    header = (run / "metrics.csv").read_text().splitlines()
    assert len(header) == 6
    out = tmp_path / "s.jsonl"
    assert main(["sample", "--checkpoint", str(run / "checkpoint.bfck"), "--out", str(out)]) == 0
    records = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(records) == 3 and all(r["length"] == len(r["elements"]) and r["seed"] == 0 for r in records)
    traj = tmp_path / "t.csv"
    assert main(["sample", "--checkpoint", str(run / "checkpoint.bfck"), "--out", str(out), "--n", "2",
                 "--trajectory", str(traj), "--schedule", "uniform", "--steps", "3"]) == 0
    rows = traj.read_text().splitlines()
    assert rows[0].startswith("sample_id,t,element_index") and len(rows) > 3
    capsys.readouterr()
    code = main(["eval", "--config", str(cfg), "--samples", str(out)])
    report = json.loads(capsys.readouterr().out)
    assert code == (0 if report["passed"] else 1)
    assert report["n_generated"] == 2 and "length" in report["overlaps"]
