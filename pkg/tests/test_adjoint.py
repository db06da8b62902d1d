import numpy as np
import pytest

from pointtopo import adjoint, geometry, objectives, rigidsim, scenes, tasks
from pointtopo.adjoint import DeterminismError, Tape, gradcheck, grad_static
from pointtopo.softsim import step_implicit
from pointtopo.topology import PointField


def test_rel_err_definition():
    assert adjoint.rel_err(1.0, 1.0) == 0.0
    assert adjoint.rel_err(0.0, 0.0) == 0.0
    assert adjoint.rel_err(2.0, 1.0) == 0.5
    assert adjoint.rel_err(1e-13, 0.0) == pytest.approx(0.1)


def test_gradcheck_quadratic():
    x = np.random.default_rng(0).normal(size=12)
    report = gradcheck(lambda z: (float(z @ z), 2 * z), x, tolerance=1e-10)
    assert report.passed and report.max_rel_err <= 1e-10
    assert len(report.rows) == 12


def test_gradcheck_catches_corruption():
    x = np.random.default_rng(0).normal(size=5)
    report = gradcheck(lambda z: (float(z @ z), 1.01 * 2 * z), x, tolerance=1e-3)
    assert not report.passed
    assert "FAIL" in report.summary()


def test_gradcheck_sampling_is_seeded(tmp_path):
    x = np.arange(30.0)
    fun = lambda z: (float(z @ z), 2 * z)
    a = gradcheck(fun, x, sample=5, seed=3)
    b = gradcheck(fun, x, sample=5, seed=3)
    assert [r[0] for r in a.rows] == [r[0] for r in b.rows] and len(a.rows) == 5
    a.to_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().startswith("index,analytic,numeric,rel_err,step")


def random_cloud(n, rng):
    X = rng.uniform(-1, 1, (n, 3))
    return geometry.ParticleCloud(X, rng.uniform(0.5, 1.5, n), np.zeros(n, bool), 0.1)


def test_static_zero_gradient_at_optimum():
    rng = np.random.default_rng(1)
    cloud = random_cloud(40, rng)
    topo = PointField(rng.normal(size=40) * 0.1, 10.0)
    c = scenes.com_of(cloud, topo.indicator(cloud).r)
    value, g = tasks.StaticComTask(cloud, c, pin_boundary=False).value_and_grad(topo)
    assert value == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_seesaw_gradient_signs():
    s = scenes.seesaw()
    topo = PointField(np.zeros(2), 10.0)
    task = tasks.StaticComTask(s.cloud, s.cloud.rest_positions[0], pin_boundary=False)
    _, g = task.value_and_grad(topo)
    # descent raises the target particle and lowers the other
    assert -g[0] > 0 and -g[1] < 0


def test_static_gradient_matches_fd():
    rng = np.random.default_rng(2)
    cloud = random_cloud(100, rng)
    topo = PointField(rng.normal(size=100) * 0.1, 10.0)
    task = tasks.StaticComTask(cloud, [0.3, -0.2, 0.1], pin_boundary=False)
    report = gradcheck(lambda x: task.value_and_grad(topo.with_params(x)), topo.params(), steps=(1e-5,),
                       tolerance=1e-6)
    assert report.passed, report.summary()


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(3)
    cloud = random_cloud(50, rng)
    topo = PointField(rng.normal(size=50) * 0.1, 10.0)
    ta, tb = (tasks.StaticComTask(cloud, t, pin_boundary=False) for t in ([0.1, 0, 0], [0, 0.2, -0.1]))
    both = lambda p: tuple(a + b for a, b in zip(objectives.loss_com(p, ta.target), objectives.loss_com(p, tb.target)))
    _, g_sum = grad_static(cloud, topo, 1000.0, both)
    np.testing.assert_allclose(g_sum, ta.value_and_grad(topo)[1] + tb.value_and_grad(topo)[1], rtol=1e-12, atol=1e-18)


def pendulum_props(r):
    X = np.array([[0, 0, -0.3], [0, 0, -0.6]])
    cloud = geometry.ParticleCloud(X, np.full(2, 1e-3), np.zeros(2, bool), 0.1)
    return cloud, rigidsim.rigid_props(cloud, r, 1000.0)


def test_trajectory_independent_loss_has_zero_gradient():
    cloud, props = pendulum_props([0.5, 0.5])
    scene = rigidsim.RigidScene(constraint=rigidsim.PivotAxis([0, 0, 0], [0, 1, 0]))
    run = adjoint.rigid_forward(props, scene, 5e-3, 40, omega=(0, 0.5, 0))
    p_bar = adjoint.rigid_reverse(run, scene, 5e-3, np.zeros((41, 13)), omega=(0, 0.5, 0))
    np.testing.assert_array_equal(p_bar, 0.0)


def test_pendulum_period_gradient_sign():
    cloud, _ = pendulum_props([0.5, 0.5])
    scene = rigidsim.RigidScene(constraint=rigidsim.PivotAxis([0, 0, 0], [0, 1, 0]))
    # analytic: T ~ sqrt(sum m L^2 / sum m L); dT/dm_2 has the sign of m_1 L_1 (L_2 - L_1) > 0
    task = tasks.OscillationTask(cloud, scene, target_period=0.1, target_tilt=0.0, omega0=np.array([0, 0.2, 0]),
                                 dt=5e-3, steps=600, weights=(1.0, 0.0), pin_boundary=False)
    topo = PointField(np.zeros(2), 1.0)
    ev = task.evaluate(topo)
    assert ev["period"] > 0.1
    _, g = task.value_and_grad(topo)
    # loss grows with T above the target, so the lower particle's gradient is positive
    # and the upper particle's, which shortens the effective length when heavier, is negative
    assert g[1] > 0 and g[0] < 0
    L1, L2 = 0.3, 0.6
    m = 1.0 * 0.5
    T = lambda m1, m2: 2 * np.pi * np.sqrt((m1 * L1 ** 2 + m2 * L2 ** 2) / (9.81 * (m1 * L1 + m2 * L2)))
    assert ev["period"] == pytest.approx(T(m, m), rel=0.01)


def test_soft_drop_gradient_matches_fd():
    s = scenes.soft_drop()
    task = s.task()
    topo = PointField(np.zeros(27), 10.0)
    report = gradcheck(lambda x: task.value_and_grad(topo.with_params(x)), topo.params(),
                       steps=(1e-4, 1e-5), tolerance=1e-3, sample=4, seed=0)
    assert report.passed, report.summary()


def test_forward_passes_bit_identical():
    s = scenes.soft_drop(steps=20)
    task = s.task()
    topo = PointField(np.linspace(-0.1, 0.1, 27), 10.0)
    a, b = task.evaluate(topo), task.evaluate(topo)
    assert np.array_equal(a["positions"], b["positions"])


def test_tape_replay_and_determinism_error():
    tape = Tape(lambda y, k: 0.5 * y + k, every=7)
    tape.forward(np.ones(3), 20)
    assert sorted(tape.checkpoints) == [0, 7, 14, 20]
    states = tape.replay(7, 14)
    assert np.array_equal(states[-1], tape.checkpoints[14])
    counter = {"n": 0}

    def drifting(y, k):
        counter["n"] += 1
        return y + counter["n"]

    bad = Tape(drifting, every=5)
    bad.forward(np.zeros(2), 10)
    with pytest.raises(DeterminismError):
        bad.replay(0, 5)


def test_implicit_function_check_one_dof():
    # E = x^4 / 4; the implicit step solves E'(x) + m (x - y) / dt^2 = 0
    m, dt = 2.0, 0.1
    energy = lambda z: (0.25 * float(np.sum(z[:, 0] ** 4)), np.stack([z[:, 0] ** 3, 0 * z[:, 0], 0 * z[:, 0]], 1))
    hess = lambda z: np.diag([3 * z[0, 0] ** 2, 0.0, 0.0])
    x0 = np.array([[0.8, 0, 0]])

    def solve(v):
        return step_implicit(x0, np.array([[v, 0, 0]]), [m], dt, energy, hess, tol=1e-14)[0][0, 0]

    v, h = 0.3, 1e-6
    xs = solve(v)
    dx_dv = (solve(v + h) - solve(v - h)) / (2 * h)
    # differentiating the optimality condition: (E'' + m/dt^2) dx = (m/dt^2) dy, dy/dv = dt
    residual = (3 * xs ** 2 + m / dt ** 2) * dx_dv - (m / dt ** 2) * dt
    assert abs(residual) <= 1e-6
