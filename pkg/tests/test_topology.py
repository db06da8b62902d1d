import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointtopo import geometry, snapshot, topology
from pointtopo.topology import (NeuralSDF, PointField, QuadricSDF, TopologyError, TrainSchedule,
                                eval_point_field, eval_sdf_field, sdf_param_gradient, sigmoid)


def cloud_of(points, boundary=None):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    flags = np.zeros(n, bool) if boundary is None else np.asarray(boundary, bool)
    return geometry.ParticleCloud(points, np.ones(n), flags, 0.1)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12))


def test_point_field_zero_is_half():
    ind = eval_point_field(PointField(np.zeros(4)), cloud_of(np.eye(4, 3)))
    np.testing.assert_array_equal(ind.r, 0.5)


def test_point_field_saturation():
    ind = eval_point_field(PointField([1e6], beta=1.0), cloud_of([[0, 0, 0]]))
    assert abs(ind.r[0] - 1.0) <= 1e-12


def test_point_field_value_and_slope():
    ind = eval_point_field(PointField([0.5], beta=2.0), cloud_of([[0, 0, 0]]))
    assert ind.r[0] == pytest.approx(0.731059, abs=1e-6)
    assert ind.vjp([1.0])[0] == pytest.approx(0.393224, abs=1e-6)
    fd = (sigmoid(2.0 * (0.5 + 1e-6)) - sigmoid(2.0 * (0.5 - 1e-6))) / 2e-6
    assert ind.vjp([1.0])[0] == pytest.approx(float(fd), rel=1e-8)


def test_point_field_size_mismatch():
    with pytest.raises(TopologyError):
        eval_point_field(PointField(np.zeros(3)), cloud_of(np.zeros((2, 3))))


def test_quadric_sphere_values():
    q = QuadricSDF(np.eye(3), np.zeros(3), -0.25, beta=10.0)
    ind = eval_sdf_field(q, cloud_of([[0, 0, 0], [0.5, 0, 0]]))
    assert q.sdf([[0, 0, 0]])[0] == pytest.approx(-0.25)
    assert ind.r[0] == pytest.approx(0.924142, abs=1e-6)
    assert ind.r[1] == 0.5


def test_quadric_has_ten_params_and_rejects_asymmetry():
    assert len(QuadricSDF.solid().params()) == 10
    A = np.eye(3)
    A[0, 1] = 1e-6
    with pytest.raises(TopologyError, match="symmetric"):
        QuadricSDF(A, np.zeros(3), 0.0)


def test_zero_network_is_half():
    net = NeuralSDF.create((4, 4), seed=1)
    net = net.with_params(np.zeros(net.num_params))
    ind = eval_sdf_field(net, cloud_of(np.random.default_rng(0).normal(size=(20, 3))))
    np.testing.assert_array_equal(ind.r, 0.5)


def test_network_param_count():
    net = NeuralSDF.create((64, 64, 64), seed=0)
    assert net.layer_widths == [3, 64, 64, 64, 1]
    widths = net.layer_widths
    assert net.num_params == sum((a + 1) * b for a, b in zip(widths, widths[1:]))


def test_quadric_gradient_at_origin():
    q = QuadricSDF(np.diag([1.0, 2.0, 3.0]), [0.1, 0.2, 0.3], -0.5)
    cloud = cloud_of([[0, 0, 0]])
    ind = eval_sdf_field(q, cloud)
    g = sdf_param_gradient(q, cloud, [1.0])
    dr_ds = -q.beta * ind.r[0] * (1 - ind.r[0])
    np.testing.assert_allclose(g[:9], 0.0, atol=0)
    assert g[9] == pytest.approx(dr_ds)


def random_quadric(rng):
    M = rng.normal(size=(3, 3))
    return QuadricSDF(0.5 * (M + M.T), rng.normal(size=3), rng.normal(), beta=3.0)


def test_quadric_gradient_matches_fd():
    rng = np.random.default_rng(7)
    q = random_quadric(rng)
    cloud = cloud_of(rng.uniform(-1, 1, (150, 3)))
    w = rng.normal(size=150)
    loss = lambda p: float(w @ eval_sdf_field(q.with_params(p), cloud).r)
    g = sdf_param_gradient(q, cloud, w)
    assert rel(g, fd_grad(loss, q.params())) <= 1e-6


@pytest.mark.parametrize("weight_norm", [False, True])
def test_network_gradient_matches_fd(weight_norm):
    rng = np.random.default_rng(3)
    net = NeuralSDF.create((4, 4), seed=5, beta=2.0, weight_norm=weight_norm)
    cloud = cloud_of(rng.uniform(-1, 1, (60, 3)))
    w = rng.normal(size=60)
    loss = lambda p: float(w @ eval_sdf_field(net.with_params(p), cloud).r)
    g = sdf_param_gradient(net, cloud, w)
    assert rel(g, fd_grad(loss, net.params())) <= 1e-4


def test_pinned_particles_have_no_gradient():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (30, 3))
    boundary = np.zeros(30, bool)
    boundary[:10] = True
    cloud = cloud_of(pts, boundary)
    ind = eval_point_field(PointField(rng.normal(size=30)), cloud, pin_boundary=True)
    assert np.all(ind.r[:10] == topology.PINNED_VALUE)
    upstream = np.zeros(30)
    upstream[:10] = 1.0
    np.testing.assert_array_equal(ind.vjp(upstream), 0.0)
    q = random_quadric(rng)
    np.testing.assert_array_equal(sdf_param_gradient(q, cloud, upstream, pin_boundary=True), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 1.0), st.floats(0.1, 50))
def test_point_field_monotone(theta, delta, beta):
    a, b = sigmoid(beta * theta), sigmoid(beta * (theta + delta))
    assert b >= a
    if abs(beta * theta) < 20:
        assert b > a


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_level_set_is_half(seed):
    rng = np.random.default_rng(seed)
    center = rng.normal(size=3)
    sph = QuadricSDF.sphere(center, 0.7)
    direction = rng.normal(size=3)
    p = center + 0.7 * direction / np.linalg.norm(direction)
    assert abs(sph.sdf([p])[0]) < 1e-12
    assert eval_sdf_field(sph, cloud_of([p])).r[0] == pytest.approx(0.5, abs=1e-12)


def test_sharpness_limit():
    rng = np.random.default_rng(11)
    q = random_quadric(rng).with_beta(1e4)
    pts = rng.uniform(-1, 1, (500, 3))
    s = q.sdf(pts)
    keep = np.abs(s) > 1e-2
    r = eval_sdf_field(q, cloud_of(pts)).r
    np.testing.assert_allclose(r[keep], (s[keep] < 0).astype(float), atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_sdf_names_particle():
    q = QuadricSDF(np.eye(3), np.zeros(3), 0.0)
    pts = np.zeros((4, 3))
    pts[2] = np.inf
    with pytest.raises(FloatingPointError, match="particle 2"):
        eval_sdf_field(q, cloud_of(pts))


def test_training_with_zero_gradient_is_fixed_point():
    net = NeuralSDF.create((8, 8), seed=2)
    res = topology.train_neural_sdf(net, lambda n, rng: (0.0, np.zeros(n.num_params)),
                                    TrainSchedule(epochs=20, lr=1e-2))
    np.testing.assert_array_equal(res.sdf.params(), net.params())


def test_training_defaults_recorded():
    net = NeuralSDF.create((4,), seed=0)
    sched = TrainSchedule()
    assert sched.epochs == 10000 and sched.lr == 3e-6
    res = topology.train_neural_sdf(net, lambda n, rng: (0.0, np.zeros(n.num_params)), TrainSchedule(epochs=1))
    assert res.metadata["optimizer"] == "adam"
    assert {"epochs", "lr", "layer_widths"} <= set(res.metadata)


def test_training_divergence_returns_last_finite():
    net = NeuralSDF.create((4,), seed=0)
    calls = []

    def grad_fn(n, rng):
        calls.append(1)
        if len(calls) > 3:
            return float("nan"), np.zeros(n.num_params)
        return 1.0, np.ones(n.num_params)

    res = topology.train_neural_sdf(net, grad_fn, TrainSchedule(epochs=10, lr=1e-2))
    assert res.diverged and len(res.losses) == 3
    assert np.all(np.isfinite(res.sdf.params()))


def test_fit_sphere_level_set():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (1000, 3))
    target = np.linalg.norm(pts, axis=1) - 0.6

    def grad_fn(net, _rng):
        s, cache = net.forward(pts)
        res = s - target
        return float(np.mean(res ** 2)), net.sdf_vjp(pts, 2 * res / len(pts), cache)

    net = NeuralSDF.create((32, 32), seed=1)
    fit = topology.train_neural_sdf(net, grad_fn, TrainSchedule(epochs=1500, lr=1e-2)).sdf
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = np.linspace(0.2, 0.95, 400)
    for d in dirs:
        s = fit.sdf(t[:, None] * d)
        k = np.flatnonzero(np.diff(np.sign(s)) != 0)[0]
        radius = t[k] - s[k] * (t[k + 1] - t[k]) / (s[k + 1] - s[k])
        assert abs(radius - 0.6) <= 0.05


@pytest.mark.parametrize("make", [
    lambda: PointField(np.linspace(-1, 1, 7), 4.0),
    lambda: QuadricSDF.sphere((0.1, 0.2, 0.3), 0.4, beta=7.0, frame_center=(1, 0, 0), scale=2.0),
    lambda: NeuralSDF.create((5, 6), seed=4, weight_norm=True, dropout_rate=0.1),
])
def test_snapshot_round_trip(make):
    topo = make()
    back = topology.from_snapshot(snapshot.loads(snapshot.dumps(topo.to_snapshot())))
    assert type(back) is type(topo)
    np.testing.assert_array_equal(back.params(), topo.params())
    assert back.beta == topo.beta


def test_beta_schedule():
    assert topology.beta_schedule(10, 0) == 10
    assert topology.beta_schedule(10, 50) == 20
    assert topology.beta_schedule(10, 10_000) == 1e3


def test_dropout_only_with_rng():
    net = NeuralSDF.create((16, 16), seed=0, dropout_rate=0.5)
    pts = np.random.default_rng(0).normal(size=(10, 3))
    a, _ = net.forward(pts)
    b, _ = net.forward(pts)
    c, _ = net.forward(pts, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_neural_sdf_bits_do_not_depend_on_thread_count():
    from threadpoolctl import threadpool_limits
    net = NeuralSDF.create((32, 32), seed=3)
    pts = np.random.default_rng(0).uniform(-1, 1, (3000, 3))
    s_bar = np.linspace(-1, 1, 3000)
    out = []
    for threads in (1, 8):
        with threadpool_limits(limits=threads):
            s, cache = net.forward(pts)
            out.append((s.tobytes(), net.sdf_vjp(pts, s_bar, cache).tobytes()))
    assert out[0] == out[1]
