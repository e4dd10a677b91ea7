import math

import numpy as np
import pytest
from scenes import THETA_GT, push_scene

from rigidgraph.collide import nearest_points
from rigidgraph.datagen import (
    ContactFreeError,
    Dataset,
    ScalingSpec,
    augment_rotate_z,
    read_dataset,
    read_manifest,
    sample_scene,
    scale_dataset,
    write_dataset,
)
from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import quat_to_rotmat
from rigidgraph.teacher import rollout
from rigidgraph.trajectory import read_trajectory, write_trajectory


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        ScalingSpec(n_trajectories=0)
    with pytest.raises(InvalidInputError):
        ScalingSpec(mass_range=(0.2, 0.1))
    with pytest.raises(InvalidInputError):
        ScalingSpec(initial_region=(0.1, -0.1, 0, 1))


def test_sample_scene_places_disjoint_cubes():
    spec = ScalingSpec(initial_region=(-1.0, 1.0, -1.0, 1.0))
    for seed in range(10):
        sc = sample_scene(spec, np.random.default_rng(seed))
        assert len(sc.bodies) == 3 and sc.bodies[0][0].is_static
        (a, sa), (b, sb) = sc.bodies[1:]
        assert nearest_points(a.mesh, sa, b.mesh, sb)[0] > 0
        for spec_b, st in sc.bodies[1:]:
            # resting on the plane
            assert (st.R @ spec_b.mesh.vertices.T)[2].min() + st.x[2] == pytest.approx(0.0, abs=1e-12)


def test_sample_scene_speed_and_determinism():
    spec = ScalingSpec(initial_speed_range=(0.5, 0.5))
    a = sample_scene(spec, np.random.default_rng(7))
    b = sample_scene(spec, np.random.default_rng(7))
    assert np.linalg.norm(a.states[1].v) == pytest.approx(0.5, abs=1e-15)
    assert np.all(a.states[2].v == 0)
    for (_, s1), (_, s2) in zip(a.bodies, b.bodies):
        assert np.array_equal(s1.x, s2.x) and np.array_equal(s1.q, s2.q) and np.array_equal(s1.v, s2.v)


def test_sample_scene_placement_failure():
    spec = ScalingSpec(n_objects_range=(5, 5), initial_region=(0.0, 0.001, 0.0, 0.001))
    with pytest.raises(InvalidInputError, match="could not place"):
        sample_scene(spec, np.random.default_rng(0))


def test_scaled_dataset_is_contact_rich():
    ds = scale_dataset(ScalingSpec(n_trajectories=10, steps_per_trajectory=12), THETA_GT)
    assert len(ds) == 10 and ds.provenance == "scaled"
    for tr in ds.trajectories:
        assert tr.active_contacts.max() > 0
        assert tr.positions.shape[0] == 13


def test_contact_free_spec_rejected():
    spec = ScalingSpec(n_trajectories=1, n_objects_range=(1, 1), gravity=(0.0, 0.0, 0.0), max_retries=2)
    with pytest.raises(ContactFreeError):
        scale_dataset(spec, THETA_GT)


def _base(n=3):
    return Dataset([rollout(push_scene(0.6 + 0.2 * k, yaw=0.3 * k), THETA_GT, 6) for k in range(n)], "real-substitute")


def test_augment_counts_and_identity_copy():
    base = _base()
    aug = augment_rotate_z(base, 4)
    assert len(aug) == 12 and aug.provenance == "augmented"
    first = aug.trajectories[0]
    assert np.abs(first.positions - base.trajectories[0].positions).max() <= 1e-12
    assert np.abs(first.quats - base.trajectories[0].quats).max() <= 1e-12
    with pytest.raises(InvalidInputError):
        augment_rotate_z(Dataset([], "real-substitute"), 2)


def test_augment_preserves_relative_geometry():
    base = _base(1)
    src = base.trajectories[0]
    dyn = [i for i, s in enumerate(src.specs) if not s.is_static]
    for tr in augment_rotate_z(base, 5).trajectories:
        for t in range(src.n_steps + 1):
            P, Q = src.positions[t, dyn], tr.positions[t, dyn]
            D0 = np.linalg.norm(P[:, None] - P[None], axis=2)
            D1 = np.linalg.norm(Q[:, None] - Q[None], axis=2)
            assert np.abs(D0 - D1).max() <= 1e-9
            for i in dyn:
                R0, R1 = quat_to_rotmat(src.quats[t, i]), quat_to_rotmat(tr.quats[t, i])
                assert np.isclose(np.linalg.det(R1), 1.0)
                # every copy differs from its source by a pure z rotation
                Rz = R1 @ R0.T
                assert np.allclose(Rz[2], [0, 0, 1], atol=1e-12)


def test_augmented_angles_evenly_spaced():
    aug = augment_rotate_z(_base(1), 4)
    assert [tr.meta["rotation"] for tr in aug.trajectories] == pytest.approx([0, math.pi / 2, math.pi, 3 * math.pi / 2])


def test_trajectory_file_roundtrip(tmp_path):
    tr = rollout(push_scene(0.9, yaw=0.2), THETA_GT, 5)
    write_trajectory(tr, tmp_path / "a.traj")
    back = read_trajectory(tmp_path / "a.traj")
    assert np.array_equal(back.positions, tr.positions) and np.array_equal(back.quats, tr.quats)
    assert np.array_equal(back.velocities0, tr.velocities0)
    assert back.dt == tr.dt
    assert [s.is_static for s in back.specs] == [s.is_static for s in tr.specs]


def test_trajectory_file_errors(tmp_path):
    p = tmp_path / "x.traj"
    p.write_text("dt=0.1\nfoo 1 2\n")
    with pytest.raises(InvalidInputError, match="x.traj:2"):
        read_trajectory(p)
    with pytest.raises(InvalidInputError):
        read_trajectory(tmp_path / "missing.traj")


def test_dataset_directory_roundtrip(tmp_path):
    ds = scale_dataset(ScalingSpec(n_trajectories=3, steps_per_trajectory=8, seed=5), THETA_GT)
    write_dataset(ds, tmp_path / "d")
    assert sorted(p.name for p in (tmp_path / "d" / "scaled").iterdir()) == ["0.traj", "1.traj", "2.traj"]
    man = read_manifest(tmp_path / "d")
    assert man["count"] == "3" and man["seed"] == "5" and man["provenance"] == "scaled"
    back = read_dataset(tmp_path / "d")
    assert back.params_used == THETA_GT
    for a, b in zip(ds.trajectories, back.trajectories):
        assert np.array_equal(a.positions, b.positions) and np.array_equal(a.quats, b.quats)
    (tmp_path / "d" / "scaled" / "2.traj").unlink()
    with pytest.raises(InvalidInputError, match="manifest lists 3"):
        read_dataset(tmp_path / "d")
