import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment

from avatarkit.metrics import (ColorStatPredictor, ConstantPredictor, MetricError, VAFrameSeries, emd_1d,
                               emotion_emd, predict_series, write_emd_report)


def emd_assignment(a, b):
    """Optimal transport by assignment: each point of ``a`` split into len(b) atoms and vice versa."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, m = len(a), len(b)
    ea, eb = np.repeat(a, m), np.repeat(b, n)
    cost = np.abs(ea[:, None] - eb[None, :])
    r, c = linear_sum_assignment(cost)
    return cost[r, c].sum() / (n * m)


samples = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20)


def test_examples():
    assert emd_1d([0.3, 0.1, 0.3], [0.1, 0.3, 0.3]) == 0.0
    assert emd_1d([0, 1], [1, 2]) == 1.0
    with pytest.raises(MetricError):
        emd_1d([], [1.0])


def test_matches_assignment_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.normal(size=rng.integers(1, 21))
        b = rng.normal(0.3, 1.5, size=rng.integers(1, 21))
        assert abs(emd_1d(a, b) - emd_assignment(a, b)) <= 1e-9


@given(samples, samples)
def test_matches_oracle_property(a, b):
    assert emd_1d(a, b) == pytest.approx(emd_assignment(a, b), abs=1e-9)


@given(samples, samples, samples)
def test_metric_axioms(x, y, z):
    assert emd_1d(x, y) == pytest.approx(emd_1d(y, x), abs=1e-12)
    assert emd_1d(x, x) == 0.0
    assert emd_1d(x, z) <= emd_1d(x, y) + emd_1d(y, z) + 1e-9


@given(samples, st.floats(-5, 5))
def test_translation(x, c):
    assert emd_1d(x, np.asarray(x) + c) == pytest.approx(abs(c), abs=1e-9)


@given(samples, samples, st.floats(-4, 4))
def test_scale(x, y, s):
    assert emd_1d(s * np.asarray(x), s * np.asarray(y)) == pytest.approx(abs(s) * emd_1d(x, y), abs=1e-9)


# --------------------------------------------------------------------------- grouped metric


def series(subject, emotion, v, a):
    return VAFrameSeries(np.asarray(v, float), np.asarray(a, float), subject, emotion)


def test_identical_videos_score_zero():
    vids = [series("s1", "happy", [0.1, 0.4], [0.0, -0.2]), series("s2", "sad", [-0.5], [0.3])]
    r = emotion_emd(vids, vids)
    assert (r.a_emd, r.v_emd) == (0.0, 0.0)


def test_constant_predictor_offset():
    frames = [np.zeros((4, 4, 3))] * 5
    real = [predict_series(frames, ConstantPredictor(0.2, -0.1), "s", "happy")]
    gen = [predict_series(frames[:3], ConstantPredictor(0.3, -0.1), "s", "happy")]
    r = emotion_emd(gen, real)
    assert r.v_emd == pytest.approx(0.1, abs=1e-12) and r.a_emd == 0.0


def test_groups_are_averaged():
    real = [series("a", "x", [0.0], [0.0]), series("b", "x", [0.0], [0.0])]
    gen = [series("a", "x", [0.2], [0.0]), series("b", "x", [0.4], [0.1])]
    r = emotion_emd(gen, real)
    assert r.v_emd == pytest.approx(0.3) and r.a_emd == pytest.approx(0.05)
    assert [(g.subject, g.emotion) for g in r.groups] == [("a", "x"), ("b", "x")]


def test_missing_group_is_named():
    real = [series("a", "x", [0.0], [0.0])]
    gen = [series("a", "x", [0.0], [0.0]), series("b", "angry", [0.0], [0.0])]
    with pytest.raises(MetricError, match="angry"):
        emotion_emd(gen, real)


@given(st.integers(0, 2 ** 31))
def test_frame_order_invariance(seed):
    rng = np.random.default_rng(seed)
    v, a = rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 12)
    real = [series("s", "e", rng.uniform(-1, 1, 7), rng.uniform(-1, 1, 7))]
    perm = rng.permutation(12)
    r1 = emotion_emd([series("s", "e", v, a)], real)
    r2 = emotion_emd([series("s", "e", v[perm], a[perm])], real)
    assert (r1.a_emd, r1.v_emd) == (r2.a_emd, r2.v_emd)


def test_series_validation():
    with pytest.raises(MetricError):
        series("s", "e", [], [])
    with pytest.raises(MetricError):
        series("s", "e", [1.5], [0.0])


def test_color_predictor_in_range():
    v, a = ColorStatPredictor()(np.random.default_rng(0).uniform(size=(8, 8, 3)))
    assert -1 <= v <= 1 and -1 <= a <= 1


def test_report_files(tmp_path):
    vids = [series("s1", "happy", [0.1], [0.0])]
    write_emd_report(emotion_emd(vids, vids), tmp_path / "g.csv", tmp_path / "s.json")
    assert (tmp_path / "g.csv").read_text().splitlines()[0].startswith("subject,emotion")
    assert json.loads((tmp_path / "s.json").read_text())["groups"] == 1
