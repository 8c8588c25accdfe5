import numpy as np
import pytest
import torch

from avatarkit.face_model import default_scene, render
from avatarkit.tracker import (DegeneratePoseError, TrackerConfig, TrackingPriors, TrackResult, fit_fixed,
                               fit_frame, fit_sequence, load_track, photometric_loss, photometric_terms,
                               save_track)

RES = 24


@pytest.fixture(scope="module")
def scene_and_frame(head_model):
    scene = default_scene(head_model, RES)
    scene = scene.replace(expr=torch.tensor([0.4, 0.2, 0, 0, 0.1, 0, 0, 0], dtype=torch.float64),
                          tex=torch.tensor([0.3, -0.2, 0.1, 0.0], dtype=torch.float64))
    img, _ = render(head_model, scene, RES)
    return scene, img


def pi_of(scene):
    fix = {"tex": scene.tex.numpy(), "light": scene.light.numpy(), "K": scene.K.numpy(), "shape": scene.shape.numpy()}
    var = {"joints": scene.joints.numpy(), "expr": scene.expr.numpy(), "R": scene.R.numpy(), "t": scene.t.numpy()}
    return fix, var


def test_self_render_has_zero_photometric_term(head_model, scene_and_frame):
    scene, img = scene_and_frame
    _, photo, _ = photometric_terms(img, scene, head_model)
    assert photo.item() == 0.0


def test_prior_term_vanishes_at_zero_parameters(head_model):
    scene = default_scene(head_model, RES)
    pri = TrackingPriors(weights={"shape": 1.0, "tex": 1.0, "expr": 1.0, "joints": 1.0})
    assert pri.prior_term(scene).item() == 0.0


def test_prior_term_formula(head_model):
    scene = default_scene(head_model, RES).replace(expr=torch.full((8,), 0.5, dtype=torch.float64))
    pri = TrackingPriors(weights={"expr": 2.0}, means={"expr": np.full(8, 0.25)}, scales={"expr": np.full(8, 0.5)})
    # 8 dims * ((0.5 - 0.25) / 0.5)^2 * 2
    assert pri.prior_term(scene).item() == pytest.approx(4.0, abs=1e-14)


def test_negative_prior_weight_rejected():
    with pytest.raises(ValueError):
        TrackingPriors(weights={"expr": -1.0})


def test_loss_grows_monotonically_with_expression_offset(head_model, scene_and_frame):
    scene, img = scene_and_frame
    losses = []
    for delta in (0.0, 0.02, 0.05, 0.1, 0.2):
        e = scene.expr.clone()
        e[0] += delta
        losses.append(photometric_loss(img, scene.replace(expr=e), head_model).item())
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_black_frame_is_degenerate(head_model):
    scene = default_scene(head_model, RES).replace(t=torch.tensor([0.0, 0.0, -4.0], dtype=torch.float64))
    with pytest.raises(DegeneratePoseError):
        photometric_loss(np.zeros((RES, RES, 3)), scene, head_model)
    with pytest.raises(DegeneratePoseError):
        fit_fixed([np.zeros((RES, RES, 3))], head_model)
    with pytest.raises(DegeneratePoseError):
        fit_sequence([np.zeros((RES, RES, 3))], head_model, pi_of(default_scene(head_model, RES))[0])


def test_fit_fixed_at_truth_is_a_fixed_point(head_model, scene_and_frame):
    scene, img = scene_and_frame
    fix, var = pi_of(scene)
    pi_fix, converged, loss = fit_fixed([img], head_model, TrackingPriors(weights={}), TrackerConfig(fixed_iters=20),
                                        init=scene, init_variable=[var])
    assert converged
    for k in ("tex", "light", "K"):
        np.testing.assert_allclose(pi_fix[k], fix[k], atol=1e-12)


def test_accepted_losses_never_increase(head_model, scene_and_frame):
    scene, img = scene_and_frame
    fix, var = pi_of(scene)
    start = dict(var, expr=np.zeros(8))
    _, out = fit_frame(img, head_model, fix, start, TrackingPriors(), TrackerConfig(), iters=40)
    h = np.array(out.history)
    assert len(h) > 1 and np.all(np.diff(h) <= 0)


def test_empty_sequence_gives_empty_result(head_model, scene_and_frame):
    fix, _ = pi_of(scene_and_frame[0])
    res = fit_sequence([], head_model, fix)
    assert len(res) == 0 and res.losses.shape == (0,)


def test_constant_sequence_is_stable_and_deterministic(head_model, scene_and_frame):
    scene, img = scene_and_frame
    fix, _ = pi_of(scene)
    cfg = TrackerConfig(first_frame_iters=60, frame_iters=20)
    frames = [img.numpy()] * 4
    a = fit_sequence(frames, head_model, fix, TrackingPriors(), cfg)
    b = fit_sequence(frames, head_model, fix, TrackingPriors(), cfg)
    assert np.abs(np.diff(a.stacked("expr"), axis=0)).max() < 1e-3
    for k in ("expr", "joints", "R", "t"):
        assert np.array_equal(a.stacked(k), b.stacked(k))
    assert np.array_equal(a.losses, b.losses)
    assert len(a) == 4 and np.all(np.isfinite(a.losses))


def test_track_file_round_trip(tmp_path):
    n = 3
    res = TrackResult({"tex": np.arange(4.0), "light": np.ones((3, 9)), "K": np.eye(3)},
                      [{"joints": np.full((2, 3), i), "expr": np.full(8, i * 0.1), "R": np.eye(3),
                        "t": np.array([0, 0, 3.0])} for i in range(n)],
                      np.arange(n, dtype=float), np.array([True, False, True]))
    save_track(tmp_path / "t.npz", res)
    back = load_track(tmp_path / "t.npz")
    assert len(back) == n
    np.testing.assert_array_equal(back.stacked("expr"), res.stacked("expr"))
    np.testing.assert_array_equal(back.converged, res.converged)
    np.testing.assert_array_equal(back.pi_fix["light"], res.pi_fix["light"])


def test_result_length_mismatch_rejected():
    with pytest.raises(ValueError):
        TrackResult({}, [{}], np.zeros(2), np.zeros(2, dtype=bool))
