import json
import math

import numpy as np
import pytest

import cmcl


def quick_config():
    cfg = cmcl.scenario_config("rotated")
    cfg["scenario"]["samples_per_domain"] = 200
    cfg["train"]["outer_iters"] = 8
    cfg["seeds"] = [0]
    return cfg


def test_registered_scenarios_roundtrip():
    assert set(cmcl.registered_scenarios()) == {"spurious", "rotated"}
    cfg = cmcl.scenario_config("spurious")
    assert cmcl.normalize_config(cfg) == cfg


def test_generate_shapes_and_determinism():
    cfg = quick_config()
    domains = cmcl.generate(cfg)
    assert len(domains) == len(cfg["scenario"]["source_params"]) + 1
    for ds in domains:
        assert ds.x.shape == (200, cfg["scenario"]["input_dim"])
        assert ds.y.min() >= 0 and ds.y.max() < ds.class_count
    again = cmcl.generate(cfg)
    assert np.array_equal(domains[0].x, again[0].x)
    assert not np.array_equal(domains[0].x, cmcl.generate(cfg, seed=99)[0].x)


def test_losses_match_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 3)), rng.normal(2.0, 1.5, size=(9, 3))
    d = 3
    expect_mean = np.sum((a.mean(0) - b.mean(0)) ** 2) / d
    expect_cov = np.sum((np.cov(a, rowvar=False) - np.cov(b, rowvar=False)) ** 2) / d**2
    assert cmcl.loss_mean([a, b]) == pytest.approx(expect_mean, rel=1e-12)
    assert cmcl.loss_cov([a, b]) == pytest.approx(expect_cov, rel=1e-12)
    assert cmcl.loss_mm([a, b], 0.5, 2.0) == pytest.approx(0.5 * expect_mean + 2.0 * expect_cov, rel=1e-12)


def test_kl():
    p, q = [0.2, 0.3, 0.5], [0.4, 0.4, 0.2]
    kl = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    assert cmcl.kl_categorical(p, q) == pytest.approx(kl, rel=1e-14)
    ne, cross = cmcl.kl_terms(p, q)
    assert ne + cross == pytest.approx(kl, abs=1e-12)


def test_errors_are_typed():
    with pytest.raises(cmcl.ConfigError):
        cmcl.normalize_config({"schema_version": 1})
    with pytest.raises(cmcl.CmclError):
        cmcl.loss_mean([np.zeros((2, 2))])
    assert issubclass(cmcl.ConfigError, RuntimeError)


def test_gradcheck_passes():
    reports = cmcl.gradcheck(configs=2)
    assert {r["loss"] for r in reports} >= {"loss_ce", "loss_mm", "loss_cdl"}
    assert all(r["failures"] == 0 for r in reports)


def test_experiment_and_eval(tmp_path):
    cfg = quick_config()
    result = cmcl.run_experiment(cfg, tmp_path, methods=["cmcl", "erm"])
    assert [a["method"] for a in result["aggregates"]] == ["cmcl", "erm"]
    run = tmp_path / "rotated" / "seed_0" / "rotated.unseen" / "cmcl"
    summary = json.loads((tmp_path / "rotated" / "seed_0" / "rotated.unseen" / "cmcl" / "summary.json").read_text())
    assert summary
    ev = cmcl.evaluate(run / "best.bin", run / "heldout.cmds")
    assert 0.0 <= ev["accuracy_target"] <= 1.0

    ds = cmcl.read_dataset(run / "heldout.cmds")
    cmcl.write_dataset(ds, tmp_path / "copy.cmds")
    assert (tmp_path / "copy.cmds").read_bytes() == (run / "heldout.cmds").read_bytes()
    with pytest.raises(cmcl.CmclError):
        cmcl.evaluate(tmp_path / "copy.cmds", run / "heldout.cmds")
