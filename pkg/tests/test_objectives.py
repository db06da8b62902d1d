import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointtopo import geometry, objectives, rigidsim
from pointtopo.objectives import InsufficientOscillation, MotionFeatures, ObjectiveError


def fd(f, x, h):
    g = np.zeros(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h
        e = e.reshape(x.shape)
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g.reshape(x.shape)


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def props_at(c):
    return rigidsim.RigidProps(1.0, np.asarray(c, dtype=float), np.eye(3))


def test_loss_com_values():
    assert objectives.loss_com(props_at([1, 2, 3]), [1, 2, 3])[0] == 0.0
    assert objectives.loss_com(props_at([0.1, 0, 0]), [0, 0, 0])[0] == pytest.approx(0.01)


def test_loss_com_gradient():
    c = np.array([0.3, -0.1, 0.7])
    target = np.array([0.0, 0.2, 0.1])
    _, bar = objectives.loss_com(props_at(c), target)
    num = fd(lambda z: objectives.loss_com(props_at(z), target)[0], c, 1e-5)
    assert rel(bar[1:4], num) <= 1e-10


def test_extract_synthetic_sine():
    t = np.arange(0, 2.0, 1 / 200)
    osc = objectives.extract_oscillation(t, np.sin(2 * np.pi * 4 * t))
    assert osc.period == pytest.approx(0.25, abs=1e-3)
    # peaks fall half a sample from the grid, so the sampled max is cos(pi f / fs)
    sampled = np.cos(np.pi * 4 / 200)
    assert osc.max_tilt_hard == pytest.approx(sampled, abs=1e-12)
    assert 1.0 - osc.max_tilt_hard <= 1 - sampled + 1e-12
    assert osc.max_tilt == pytest.approx(1.0, abs=1e-2)
    assert osc.frequency == pytest.approx(4.0, rel=1e-3)


def test_constant_signal_is_insufficient():
    with pytest.raises(InsufficientOscillation, match="insufficient oscillation"):
        objectives.extract_oscillation(np.linspace(0, 1, 100), np.full(100, 0.3))


def test_loss_oscillation_values():
    t = np.arange(0, 2.0, 1 / 200)
    a = 0.2 * np.sin(2 * np.pi * 4 * t)
    osc = objectives.extract_oscillation(t, a)
    value, _, _ = objectives.loss_oscillation(t, a, osc.period, osc.max_tilt)
    assert value == 0.0
    # period 0.26 against a 0.25 target, tilt term off
    b = 0.2 * np.sin(2 * np.pi * t / 0.26)
    osc_b = objectives.extract_oscillation(t, b)
    value, _, _ = objectives.loss_oscillation(t, b, osc_b.period - 0.01, 0.0, weights=(1.0, 0.0))
    assert value == pytest.approx(1e-4, rel=1e-9)


def test_loss_oscillation_gradient():
    rng = np.random.default_rng(0)
    t = np.arange(0, 1.5, 1 / 200)
    a = 0.2 * np.sin(2 * np.pi * 3.3 * t + 0.4) + 0.01 * rng.normal(size=len(t))
    _, bar, _ = objectives.loss_oscillation(t, a, 0.25, 0.15, temperature=1e-2)
    num = fd(lambda z: objectives.loss_oscillation(t, z, 0.25, 0.15, temperature=1e-2)[0], a, 1e-7)
    assert rel(bar, num) <= 1e-3


def test_resampling_drift_small():
    period = 1 / 3.0
    fine = np.arange(0, 2.0, 1 / 400)
    coarse = np.arange(0, 2.0, 1 / 100)
    f = lambda t: np.sin(2 * np.pi * t / period)
    p1 = objectives.extract_oscillation(fine, f(fine)).period
    p2 = objectives.extract_oscillation(coarse, f(coarse)).period
    assert abs(p1 - p2) / p1 <= 1e-3


def finger_markers(angle):
    x = np.zeros((4, 3))
    x[1] = [1, 0, 0]
    x[2] = [2, 0, 0]
    # rotation about +y by -angle lifts the tip segment in z for a positive signed angle
    x[3] = x[2] + [np.cos(angle), 0, -np.sin(angle)]
    return x


def test_bend_angle_values():
    assert objectives.loss_bend_angle(finger_markers(0.0), (0, 1), (2, 3), 0.0)[0] == 0.0
    value, _, a = objectives.loss_bend_angle(finger_markers(np.pi / 6), (0, 1), (2, 3), 0.0)
    assert abs(a) == pytest.approx(np.pi / 6)
    assert value == pytest.approx((np.pi / 6) ** 2)
    assert value == pytest.approx(0.274, abs=1e-3)


def test_bend_angle_gradient():
    rng = np.random.default_rng(1)
    x = finger_markers(0.4) + 0.05 * rng.normal(size=(4, 3))
    _, bar, _ = objectives.loss_bend_angle(x, (0, 1), (2, 3), 0.1)
    num = fd(lambda z: objectives.loss_bend_angle(z, (0, 1), (2, 3), 0.1)[0], x, 1e-6)
    assert rel(bar, num) <= 1e-6


def test_degenerate_segment():
    x = np.zeros((4, 3))
    with pytest.raises(ObjectiveError, match="degenerate"):
        objectives.bend_angle(x, (0, 1), (2, 3))


def test_pivot_tracks_values():
    t = np.linspace(0, 1, 100)
    track = np.stack([t, 2 * t, np.zeros_like(t)], axis=1)
    pos = track[:, None, :]
    zero, _ = objectives.loss_pivot_tracks(t, [4], pos, {4: (t, track)})
    assert zero == 0.0
    off, _ = objectives.loss_pivot_tracks(t, [4], pos + [0.01, 0, 0], {4: (t, track)})
    assert off == pytest.approx(1e-4)


def test_pivot_tracks_resampled_and_missing():
    t = np.linspace(0, 1, 50)
    ref_t = np.linspace(0, 1, 11)
    line = lambda s: np.stack([s, s, s], axis=1)
    value, _ = objectives.loss_pivot_tracks(t, [0], line(t)[:, None], {0: (ref_t, line(ref_t))})
    assert value == pytest.approx(0.0, abs=1e-28)
    with pytest.raises(ObjectiveError, match="not found"):
        objectives.loss_pivot_tracks(t, [0], line(t)[:, None], {3: (ref_t, line(ref_t))})


def test_pivot_tracks_gradient():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 1, 20)
    pos = rng.normal(size=(20, 2, 3))
    ref = {1: (t, rng.normal(size=(20, 3))), 5: (t, rng.normal(size=(20, 3)))}
    _, bar = objectives.loss_pivot_tracks(t, [1, 5], pos, ref)
    num = fd(lambda z: objectives.loss_pivot_tracks(t, [1, 5], z, ref)[0], pos, 1e-6)
    assert rel(bar, num) <= 1e-8


def pose_setup(seed=0):
    rng = np.random.default_rng(seed)
    cloud = geometry.ParticleCloud(rng.uniform(-1, 1, (60, 3)), np.full(60, 1e-3), np.zeros(60, bool), 0.1)
    model = objectives.PoseModel(pivot=np.array([0.0, 0.0, 1.5]))
    return rng, cloud, model


def test_pose_sequence_values():
    rng, cloud, model = pose_setup()
    r = rng.uniform(0.1, 0.9, 60)
    caps = np.array([0.2, 0.5, 0.8])
    rows = [[k, *objectives.pose_at_level(cloud, r, model, k)[:2]] for k in caps]
    levels = np.array(rows)
    assert objectives.loss_pose_sequence(cloud, r, model, levels)[0] == pytest.approx(0.0, abs=1e-24)
    levels[1, 1] += 0.1
    assert objectives.loss_pose_sequence(cloud, r, model, levels)[0] == pytest.approx(0.01, rel=1e-9)


def test_pose_sequence_gradient():
    rng, cloud, model = pose_setup(3)
    r = rng.uniform(0.1, 0.9, 60)
    levels = np.array([[0.1, 0.05, -0.1], [0.6, -0.02, 0.0]])
    _, bar = objectives.loss_pose_sequence(cloud, r, model, levels)
    num = fd(lambda z: objectives.loss_pose_sequence(cloud, z, model, levels)[0], r, 1e-6)
    assert rel(bar, num) <= 1e-5


def test_pose_levels_must_be_sorted():
    _, cloud, model = pose_setup()
    with pytest.raises(ObjectiveError):
        objectives.loss_pose_sequence(cloud, np.full(60, 0.5), model, [[0.8, 0, 0], [0.2, 0, 0]])


def test_weighted_sum():
    f = lambda x: (float(x @ x), 2 * x)
    g = lambda x: (float(x.sum()), np.ones_like(x))
    total = objectives.WeightedSum([(2.0, f), (0.5, g)])
    x = np.array([1.0, -2.0])
    v, grad = total(x)
    assert v == pytest.approx(2 * 5 + 0.5 * -1)
    np.testing.assert_allclose(grad, 2 * 2 * x + 0.5)


@pytest.mark.parametrize("feats", [
    MotionFeatures("com_target", target=np.array([0.1, -0.2, 0.3])),
    MotionFeatures("oscillation", period=0.25, max_tilt=0.1),
    MotionFeatures("bend_angle", angle=-0.4),
    MotionFeatures("pivot_tracks", tracks={3: (np.array([0.0, 0.5]), np.arange(6.0).reshape(2, 3)),
                                           7: (np.array([0.0, 0.5]), -np.arange(6.0).reshape(2, 3))}),
    MotionFeatures("pose_sequence", levels=np.array([[0.2, 0.1, 0.0], [0.7, -0.1, 0.2]])),
])
def test_reference_round_trip(tmp_path, feats):
    path = tmp_path / "ref.csv"
    objectives.save_reference(path, feats)
    assert path.read_text().startswith(f"kind,{feats.kind}\n")
    back = objectives.load_reference(path)
    assert back.kind == feats.kind
    np.testing.assert_array_equal(np.array(back.rows(), dtype=float), np.array(feats.rows(), dtype=float))


def test_reference_bad_files(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("kind,warp_speed\nx\n1\n")
    with pytest.raises(ObjectiveError, match="unknown feature kind"):
        objectives.load_reference(p)
    p.write_text("kind,bend_angle\nwrong\n0.1\n")
    with pytest.raises(ObjectiveError, match="expected columns"):
        objectives.load_reference(p)
    with pytest.raises(ObjectiveError, match="strictly increasing"):
        MotionFeatures("pivot_tracks", tracks={0: (np.array([0.0, 0.0]), np.zeros((2, 3)))})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_losses_nonnegative(c, target):
    assert objectives.loss_com(props_at(c), target)[0] >= 0
