import math

import numpy as np
import pytest

import tsflow


def test_metric_anchors():
    a = np.full((1, 10, 10), 0.5)
    b = np.full((1, 10, 10), 0.6)
    assert tsflow.psnr(a, b) == pytest.approx(20.0)
    assert tsflow.rmse(a, b) == pytest.approx(0.1)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert tsflow.psnr(x, x) == 100.0
    assert tsflow.ssim(x, x) == pytest.approx(1.0)
    assert tsflow.sam(x, x) == pytest.approx(0.0, abs=1e-6)
    assert tsflow.sam(np.zeros((2, 1, 2)), np.zeros((2, 1, 2))) is None
    mean, per_class = tsflow.miou([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert mean == pytest.approx(0.25)
    assert per_class[0] == pytest.approx(0.5)
    assert tsflow.change_scores([1, 2, 1, 2], [1, 2, 1, 2], 2, 3)["bc"] == 1.0


def test_shape_errors_surface_as_value_errors():
    with pytest.raises(ValueError):
        tsflow.psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 7)))


def test_flow_path_and_solvers():
    rng = np.random.default_rng(1)
    x0, x1 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(tsflow.interpolate(x0, x1, 0.25), 0.75 * x0 + 0.25 * x1, atol=1e-14)
    v = tsflow.velocity_target(x0, x1)
    out, steps = tsflow.integrate(lambda x, t: v, x0, tsflow.SolverConfig("euler", steps=1))
    assert steps == 1
    np.testing.assert_allclose(out, x1, atol=1e-14)
    decay, _ = tsflow.integrate(lambda x, t: -x, np.ones(1), tsflow.SolverConfig("dopri5", adaptive=True, rtol=1e-6, atol=1e-6))
    assert abs(decay[0] - math.exp(-1.0)) < 1e-5
    with pytest.raises(Exception):
        tsflow.SolverConfig("midpoint")


def test_synthesis_is_deterministic(tmp_path):
    a = tsflow.synthesize(rois=2, seed=3)
    b = tsflow.synthesize(rois=2, seed=3)
    assert len(a) == len(b) > 0
    np.testing.assert_array_equal(a[0]["x_clear"], b[0]["x_clear"])
    assert a[0]["x_clear"].shape[1:] == (3, 16, 16)
    assert all(f < 0.15 for f in a[0]["cloud_frac"])
    summary = tsflow.synthesize(rois=2, seed=3, out=tmp_path)
    assert summary["emitted"] == len(a)
    back = tsflow.read_sample(tmp_path / summary["files"][0])
    np.testing.assert_array_equal(back["x_clear"], a[0]["x_clear"])


def test_train_save_load_infer(tmp_path):
    data = tmp_path / "data"
    tsflow.synthesize(rois=3, seed=5, out=data)
    model = tsflow.train(data, steps=3, batch=2, width=16, depth=1, heads=2)
    assert len(model.history["loss"]) == 3
    assert "final.linear.weight" in model.parameter_names
    ckpt = tmp_path / "m.ckpt"
    model.save(ckpt)
    loaded = tsflow.load_checkpoint(ckpt)
    sample = sorted(data.glob("*.unts"))[0]
    solver = tsflow.SolverConfig("euler", steps=2)
    a = model.infer(sample, solver, seed=1)
    np.testing.assert_array_equal(a, loaded.infer(sample, solver, seed=1))
    assert a.shape[1:] == (3, 16, 16)
    summary = loaded.evaluate(data, solver=solver)
    assert summary["windows"] > 0


def test_layer_checks():
    checks = tsflow.layer_checks(seed=0, cases=1)
    assert {c["layer"] for c in checks} >= {"patch_embed", "adaln", "fm_loss"}
    assert max(c["max_rel_error"] for c in checks) < 1e-4
