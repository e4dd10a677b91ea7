import math

import numpy as np
import pytest
from scenes import IDENT, THETA_GT, cube, ground, push_scene

from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import RigidBodyState, axis_angle_quat
from rigidgraph.sysid import (
    IdentDataset,
    ParamBounds,
    cmaes_minimize,
    dataset_loss,
    finite_diff_velocities,
    identify,
    population_size,
    read_theta,
    trajectory_loss,
    write_history,
    write_theta,
)
from rigidgraph.teacher import ContactParams, SceneState, rollout
from rigidgraph.trajectory import Trajectory


def _traj(positions, quats=None, dt=0.1):
    positions = np.asarray(positions, dtype=float)
    T1, n = positions.shape[:2]
    if quats is None:
        quats = np.broadcast_to(IDENT, (T1, n, 4)).copy()
    return Trajectory([cube()] * n, positions, quats, dt)


def test_static_body_has_zero_velocity():
    v, w = finite_diff_velocities(_traj(np.zeros((4, 1, 3))))
    assert np.all(v == 0) and np.all(w == 0)


def test_linear_motion_velocity():
    x = np.zeros((5, 1, 3))
    x[:, 0, 0] = 0.1 * np.arange(5)
    v, _ = finite_diff_velocities(_traj(x))
    assert np.allclose(v[:, 0], [1, 0, 0])


def test_single_frame_rejected():
    with pytest.raises(InvalidInputError):
        finite_diff_velocities(_traj(np.zeros((1, 1, 3))))


def test_constant_spin_recovered():
    c = cube()
    sc = SceneState([(c, RigidBodyState([0, 0, 1.0], axis_angle_quat([1, 0, 0], 0.3), w=[0, 0, 1.0]))], gravity=np.zeros(3))
    _, w = finite_diff_velocities(rollout(sc, ContactParams(), 10))
    assert np.abs(w[:, 0] - [0, 0, 1.0]).max() < 1e-6


def test_loss_examples():
    x = np.zeros((3, 1, 3))
    real = _traj(x)
    assert trajectory_loss(real, real, [0.1]) == 0.0
    moved = x.copy()
    moved[2, 0, 1] = 0.05
    assert trajectory_loss(real, _traj(moved), [0.1]) == pytest.approx(0.5)
    q = np.broadcast_to(IDENT, (3, 1, 4)).copy()
    q[1, 0] = axis_angle_quat([0, 0, 1], math.pi / 2)
    assert trajectory_loss(real, _traj(x, q), [0.1]) == pytest.approx(math.pi / 2)


def test_loss_skips_the_seed_frame_and_checks_shapes():
    x = np.zeros((3, 1, 3))
    moved = x.copy()
    moved[0, 0, 0] = 1.0
    assert trajectory_loss(_traj(x), _traj(moved), [0.1]) == 0.0
    with pytest.raises(InvalidInputError):
        trajectory_loss(_traj(x), _traj(np.zeros((4, 1, 3))), [0.1])
    with pytest.raises(InvalidInputError):
        trajectory_loss(_traj(x), _traj(x), [0.1, 0.2])


def test_dataset_loss_is_additive():
    d1 = rollout(push_scene(0.8), THETA_GT, 4)
    d2 = rollout(push_scene(1.0, yaw=0.2), THETA_GT, 4)
    p = ContactParams()
    both = dataset_loss(IdentDataset([d1, d2]), p)
    assert both == pytest.approx(dataset_loss(IdentDataset([d1]), p) + dataset_loss(IdentDataset([d2]), p), rel=1e-12)


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        IdentDataset([])
    d = rollout(push_scene(), THETA_GT, 2)
    assert np.allclose(IdentDataset([d]).weights[1:], 0.05)
    with pytest.raises(InvalidInputError):
        IdentDataset([d], weights=[1.0, 0.0, 1.0])


def test_bounds_roundtrip_and_validation():
    b = ParamBounds()
    theta = np.array([0.93, 0.96, 0.005, 0.05, 3.0, 0.02, 2.0, 0.4])
    assert np.allclose(b.to_box(b.from_box(theta)), theta, rtol=1e-10)
    assert np.allclose(b.to_box(np.zeros(8)), b.center)
    with pytest.raises(InvalidInputError):
        ParamBounds(np.zeros(2), np.array([1.0, -1.0]))


def test_cmaes_sphere():
    b = ParamBounds(np.zeros(8), np.ones(8))
    c = np.linspace(0.2, 0.8, 8)
    res = cmaes_minimize(lambda t: float(np.sum((t - c) ** 2)), b, 2000, seed=0)
    assert np.abs(res.theta - c).max() < 1e-3
    best = [h[1] for h in res.history]
    assert all(y <= x for x, y in zip(best, best[1:]))
    assert res.evaluations <= 2000


def test_cmaes_budget_and_determinism():
    b = ParamBounds()
    f = lambda t: float(np.sum(t**2))
    assert population_size(8) == 10
    with pytest.raises(InvalidInputError):
        cmaes_minimize(f, b, 9)
    r1, r2 = cmaes_minimize(f, b, 60, seed=3), cmaes_minimize(f, b, 60, seed=3)
    assert np.array_equal(r1.theta, r2.theta) and r1.history == r2.history


def test_cmaes_penalizes_nonfinite():
    b = ParamBounds(np.zeros(2), np.ones(2))
    res = cmaes_minimize(lambda t: math.nan if t[0] > 0.5 else float(t @ t), b, 200, seed=1)
    assert math.isfinite(res.loss) and res.theta[0] <= 0.5


def test_static_dataset_returns_center():
    g, gs = ground()
    tr = rollout(SceneState([(g, gs)]), ContactParams(), 3)
    res = identify(IdentDataset([tr]), budget=20)
    assert res.loss == 0.0
    assert np.allclose(res.params.as_vector(), ParamBounds().center)


def test_identify_smoke_improves_on_center():
    demo = rollout(push_scene(0.9), THETA_GT, 10)
    res = identify(IdentDataset([demo]), budget=30, seed=0)
    assert res.loss <= res.initial_loss
    res.params.validate()


def test_theta_file_roundtrip(tmp_path):
    write_theta(tmp_path / "theta.txt", THETA_GT, loss=1.5)
    assert read_theta(tmp_path / "theta.txt") == THETA_GT
    (tmp_path / "bad.txt").write_text("d0=0.9\nmu=abc\n")
    with pytest.raises(InvalidInputError, match="bad.txt:2"):
        read_theta(tmp_path / "bad.txt")
    write_history(tmp_path / "h.csv", [(0, 2.0), (1, 1.0)])
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "gen,best_loss"
