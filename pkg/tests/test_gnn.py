import math

import numpy as np
import pytest
import torch
from scenes import IDENT, THETA_GT, cube, ground, push_scene

from rigidgraph.collide import ContactSet
from rigidgraph.errors import InvalidInputError, NumericalFailure
from rigidgraph.geom import (
    RigidBodyState,
    axis_angle_quat,
    box_mesh,
    quat_to_rotmat,
    random_quat,
    tetrahedron_mesh,
    world_vertices,
)
from rigidgraph.gnn import (
    HEADER,
    GNNModel,
    LossSpec,
    ModelConfig,
    SceneTopology,
    TrainConfig,
    build_graph,
    load_model,
    load_training,
    one_step_mse,
    rollout,
    rollout_gradient,
    save_checkpoint,
    shape_match,
    state_from_scene,
    train,
    verlet_step,
)
from rigidgraph.gnn.simulate import rollout_tensors
from rigidgraph.gnn.train import fit_statistics, prepare
from rigidgraph.teacher import SceneState
from rigidgraph.teacher import rollout as teacher_rollout

SMALL = ModelConfig(latent=8, hidden=8, layers=2)


def pairwise(P):
    return np.linalg.norm(P[:, None] - P[None], axis=2)


@pytest.fixture(scope="module")
def teacher_trajs():
    return [teacher_rollout(push_scene(0.6 + 0.3 * k, yaw=0.4 * k, dy=0.01 * k), THETA_GT, 6) for k in range(3)]


@pytest.fixture(scope="module")
def live_model(teacher_trajs):
    """Small model with realistic normalization and a non-zero decoder."""
    torch.manual_seed(0)
    model = GNNModel(SMALL)
    fit_statistics(model, prepare(teacher_trajs, TrainConfig(model=SMALL)), 200, 0)
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        model.decoder[-1].weight.copy_(0.3 * torch.randn(model.decoder[-1].weight.shape, generator=g, dtype=torch.float64))
    return model


# ---- Verlet -------------------------------------------------------------------


def test_verlet_examples():
    assert verlet_step(1.0, 0.9, 0.0) == pytest.approx(1.1)
    assert verlet_step(0.5, 0.5, 0.0) == 0.5
    p_prev, p, a = 0.0, 0.0, 0.01
    for _ in range(5):
        p_prev, p = p, verlet_step(p, p_prev, a)
    # displacement a·k(k+1)/2 after k steps from rest
    assert p == pytest.approx(a * 5 * 6 / 2)


# ---- shape matching ------------------------------------------------------------


def test_shape_match_identity():
    ref = box_mesh(0.05).vertices
    R, t, proj = shape_match(ref, ref)
    assert np.allclose(R, np.eye(3), atol=1e-14) and np.allclose(t, 0, atol=1e-15)
    assert np.allclose(proj, ref, atol=1e-15)


def test_shape_match_recovers_rigid_transforms():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ref = rng.normal(size=(8, 3))
        R0 = quat_to_rotmat(random_quat(rng))
        t0 = rng.normal(size=3)
        pred = ref @ R0.T + t0
        R, t, proj = shape_match(pred, ref)
        assert np.abs(R - R0).max() < 1e-9 and np.abs(t - t0).max() < 1e-9
        assert np.abs(proj - pred).max() < 1e-9


def test_shape_match_projection_is_isometric_and_optimal():
    rng = np.random.default_rng(1)
    ref = tetrahedron_mesh(0.05).vertices
    pred = ref + rng.normal(scale=1e-3, size=ref.shape)
    R, t, proj = shape_match(pred, ref)
    assert np.abs(pairwise(proj) - pairwise(ref)).max() < 1e-12
    best = np.sum((pred - proj) ** 2)
    for _ in range(100):
        Rr = quat_to_rotmat(random_quat(rng))
        tr = rng.normal(scale=0.01, size=3)
        assert best <= np.sum((pred - (ref @ Rr.T + tr)) ** 2)


def test_shape_match_rejects_degenerate_sets():
    line = np.outer(np.arange(4.0), [1.0, 0, 0])
    with pytest.raises(InvalidInputError):
        shape_match(line, line)
    with pytest.raises(InvalidInputError):
        shape_match(np.zeros((2, 3)), np.zeros((2, 3)))


def test_shape_match_gradient():
    rng = np.random.default_rng(2)
    ref = torch.tensor(rng.normal(size=(6, 3)))
    pred = (ref + 0.1 * torch.tensor(rng.normal(size=(6, 3)))).requires_grad_()
    assert torch.autograd.gradcheck(lambda p: shape_match(p, ref)[2], (pred,), eps=1e-6, atol=1e-6)


def test_shape_match_gradient_with_repeated_singular_values():
    ref = torch.tensor(box_mesh(1.0).vertices)
    pred = ref.clone().requires_grad_()
    _, _, proj = shape_match(pred, ref)
    (proj * torch.arange(24.0, dtype=torch.float64).reshape(8, 3)).sum().backward()
    assert torch.isfinite(pred.grad).all()


# ---- graphs ------------------------------------------------------------------


def _graph(scene, contacts=None):
    st = state_from_scene(scene, 2)
    return build_graph(st.topo, st.node_hist, st.obj_hist, contacts if contacts is not None else ContactSet(frozen=True))


def test_graph_sizes_and_ownership():
    sc = push_scene()
    g = _graph(sc)
    topo = SceneTopology.from_specs(sc.specs)
    assert g.mesh_x.shape == (24, 7) and g.obj_x.shape == (3, 8)
    assert g.om_e.shape[0] == 24 and g.n_face_edges == 0
    assert np.array_equal(g.index.node_obj, np.repeat([0, 1, 2], 8))
    # every mesh edge stays inside one body, in both directions
    assert np.array_equal(topo.node_body[g.index.mm_send], topo.node_body[g.index.mm_recv])
    assert g.mm_e.shape[0] % 2 == 0


def test_static_scene_has_zero_velocity_features():
    g = _graph(push_scene(speed=0.0))
    assert torch.all(g.mesh_x[:, :6] == 0) and torch.all(g.obj_x[:, :6] == 0)


def test_far_bodies_have_no_face_edges():
    from rigidgraph.collide import contact_pairs

    c = cube()
    sc = SceneState([(c, RigidBodyState([0, 0, 1.0], IDENT)), (c, RigidBodyState([1.0, 0, 1.0], IDENT))])
    g = _graph(sc, contact_pairs(sc.bodies, 0.03))
    assert g.n_face_edges == 0


def test_edge_features_are_translation_invariant():
    from rigidgraph.collide import contact_pairs

    sc = push_scene(gap=0.01, yaw=0.3)
    shift = np.array([0.7, -0.3, 0.2])
    moved = sc.copy()
    for _, st in moved.bodies:
        st.x = st.x + shift
    ga = _graph(sc, contact_pairs(sc.bodies, 0.03))
    gb = _graph(moved, contact_pairs(moved.bodies, 0.03))
    assert ga.n_face_edges > 0
    for k in ("mesh_x", "obj_x", "mm_e", "om_e", "mo_e", "ff_e"):
        assert torch.allclose(getattr(ga, k), getattr(gb, k), atol=1e-12), k


# ---- model -------------------------------------------------------------------


def test_model_config_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(latent=0)
    with pytest.raises(InvalidInputError):
        ModelConfig(history=0)


def test_zero_layers_gives_encoder_latents():
    model = GNNModel(ModelConfig(latent=8, hidden=8, layers=0))
    g = _graph(push_scene())
    vm, vo = model.latents(g)
    enc = model.encode(g)
    assert torch.equal(vm, enc[0]) and torch.equal(vo, enc[1])


def test_zero_decoder_predicts_target_mean():
    model = GNNModel(SMALL)
    with torch.no_grad():
        model.target_norm.mean.copy_(torch.tensor([1e-4, -2e-4, 3e-4]))
        model.target_norm.std.copy_(torch.tensor([1e-3, 1e-3, 1e-3]))
    a = model.predict(_graph(push_scene()))
    assert a.shape == (24, 3)
    assert torch.equal(a, model.target_norm.mean.expand(24, 3))


def test_isolated_node_latent_unchanged_by_zero_mlps():
    model = GNNModel(ModelConfig(latent=8, hidden=8, layers=2))
    with torch.no_grad():
        for layer in model.layers:
            for mlp in (layer.mesh, layer.obj, layer.mm, layer.om, layer.mo, layer.ff):
                for p in mlp.parameters():
                    p.zero_()
    g = _graph(push_scene())
    vm, vo = model.latents(g)
    enc = model.encode(g)
    assert torch.equal(vm, enc[0]) and torch.equal(vo, enc[1])


def test_predictions_are_deterministic(live_model):
    g = _graph(push_scene())
    assert torch.equal(live_model.predict(g), live_model.predict(g))


def test_normalizer_clamps_degenerate_std():
    from rigidgraph.gnn.model import Normalizer

    n = Normalizer(2)
    n.fit(torch.tensor([[1.0, 0.0], [1.0, 2.0]], dtype=torch.float64))
    assert torch.equal(n.std, torch.tensor([1.0, 1.0], dtype=torch.float64))
    assert torch.equal(n.mean, torch.tensor([1.0, 1.0], dtype=torch.float64))


# ---- rollout ----------------------------------------------------------------


def test_rollout_keeps_bodies_rigid(live_model):
    sc = push_scene(gap=0.01, yaw=0.3)
    traj = rollout(live_model, sc, 6)
    assert np.all(np.isfinite(traj.positions))
    assert max(traj.meta["face_edges"]) > 0
    for t in range(7):
        for b, spec in enumerate(sc.specs):
            P = world_vertices(spec.mesh, RigidBodyState(traj.positions[t, b], traj.quats[t, b]))
            assert np.abs(pairwise(P) - pairwise(spec.mesh.vertices)).max() < 1e-9
    # the ground never moves
    assert np.array_equal(traj.positions[:, 0], np.broadcast_to(sc.states[0].x, (7, 3)))


def test_static_scene_rollout_is_constant():
    g, gs = ground()
    model = GNNModel(SMALL)
    traj = rollout(model, SceneState([(g, gs)]), 3)
    assert np.array_equal(traj.positions, np.broadcast_to(gs.x, traj.positions.shape))


def test_untrained_model_moves_bodies_at_constant_velocity():
    sc = push_scene(speed=0.6, gap=0.5)
    traj = rollout(GNNModel(SMALL), sc, 4)
    dx = np.diff(traj.positions[:, 1, 0])
    assert np.allclose(dx, 0.6 * sc.dt, atol=1e-12)


def test_rollout_translation_invariance(live_model):
    sc = push_scene(gap=0.01, yaw=0.3)
    shift = np.array([0.4, -0.25, 0.05])
    moved = sc.copy()
    for _, st in moved.bodies:
        st.x = st.x + shift
    a = rollout(live_model, sc, 5)
    b = rollout(live_model, moved, 5)
    assert np.abs(b.positions - shift - a.positions).max() < 1e-6
    assert np.abs(b.quats - a.quats).max() < 1e-6


def test_rollout_permutation_equivariance(live_model):
    sc = push_scene(gap=0.01, yaw=0.3)
    perm = [0, 2, 1]
    swapped = SceneState([sc.bodies[k] for k in perm], sc.gravity, sc.dt)
    a = rollout(live_model, sc, 4)
    b = rollout(live_model, swapped, 4)
    # witness points of tied (parallel) triangle pairs may differ slightly when A and B swap roles
    assert np.abs(b.positions - a.positions[:, perm]).max() < 1e-6


def test_rollout_aborts_on_nonfinite(live_model):
    import copy

    bad = copy.deepcopy(live_model)
    with torch.no_grad():
        bad.decoder[-1].bias.fill_(math.nan)
    with pytest.raises(NumericalFailure, match="step 1"):
        rollout(bad, push_scene(), 3)


def test_history_mismatch_rejected(live_model):
    st = state_from_scene(push_scene(), 3)
    with pytest.raises(InvalidInputError):
        rollout_tensors(live_model, st, 2)


# ---- gradients ----------------------------------------------------------------


def test_free_body_gradient_closed_form():
    model = GNNModel(ModelConfig(latent=4, hidden=4, layers=0))
    c = cube()
    T = 7
    sc = SceneState([(c, RigidBodyState([0, 0, 1.0], IDENT, [0.2, 0, 0]))], gravity=np.zeros(3))
    g = rollout_gradient(model, sc, T, LossSpec("final_position", body=0, weights=(1.0, 0.0, 0.0)))
    assert g.loss == pytest.approx(0.2 * T * sc.dt)
    assert np.allclose(g.d_velocity[0], [T * sc.dt, 0, 0], atol=1e-12)
    assert np.allclose(g.d_position[0], [1, 0, 0], atol=1e-12)


def test_distant_body_gets_zero_gradient(live_model):
    c = cube()
    sc = SceneState(
        [(c, RigidBodyState([0, 0, 1.0], IDENT, [0.3, 0, 0])), (c, RigidBodyState([5.0, 0, 1.0], IDENT))],
        gravity=np.zeros(3),
    )
    g = rollout_gradient(live_model, sc, 3, LossSpec("final_position", body=0))
    assert np.all(g.d_velocity[1] == 0) and np.all(g.d_position[1] == 0)


def test_discrete_losses_rejected():
    for kind in ("contact_count", "face_edge_count", "bogus"):
        with pytest.raises(InvalidInputError):
            LossSpec(kind)


def _two_cube_space_scene(v):
    c = cube()
    q = axis_angle_quat([0.3, 0.2, 1.0], 0.5)
    return SceneState(
        [(c, RigidBodyState([0, 0, 0.5], IDENT, v)), (c, RigidBodyState([0.07, 0.01, 0.503], q))],
        gravity=np.zeros(3),
    )


def test_rollout_gradient_matches_finite_differences(live_model):
    v0 = np.array([0.6, 0.1, 0.05])
    spec = LossSpec("custom", fn=lambda P, Q: P[-1, 1] @ torch.tensor([1.0, 0.5, 0.2], dtype=torch.float64))
    g = rollout_gradient(live_model, _two_cube_space_scene(v0), 3, spec)
    assert min(g.face_edges) > 0
    h = 1e-4
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        lp = rollout_gradient(live_model, _two_cube_space_scene(v0 + e), 3, spec, frozen=g.contacts).loss
        lm = rollout_gradient(live_model, _two_cube_space_scene(v0 - e), 3, spec, frozen=g.contacts).loss
        fd[k] = (lp - lm) / (2 * h)
    an = g.d_velocity[0]
    assert np.all(np.abs(an - fd) <= 1e-2 * np.abs(fd))


# ---- training -----------------------------------------------------------------


def _drift_trajs():
    # free cubes drifting in space: every target acceleration is zero
    c = cube()
    out = []
    for k in range(3):
        sc = SceneState(
            [(c, RigidBodyState([0, 0, 1.0], IDENT, [0.3 + 0.1 * k, -0.2, 0.1])), (c, RigidBodyState([1, 1, 1.0], IDENT, [0, 0.2 * k, 0]))],
            gravity=np.zeros(3),
        )
        out.append(teacher_rollout(sc, THETA_GT, 5))
    return out


def test_constant_velocity_data_is_learned():
    cfg = TrainConfig(updates=100, batch_size=4, val_every=50, noise_std=0.0, model=SMALL)
    res = train(_drift_trajs(), cfg)
    assert res.best_val < 1e-4
    samples = prepare(_drift_trajs(), cfg)
    assert one_step_mse(res.model, samples) < 1e-4


def test_initial_loss_is_about_one(teacher_trajs):
    cfg = TrainConfig(updates=0, val_fraction=0.0, model=SMALL)
    res = train(teacher_trajs, cfg)
    assert res.curve[0][1] == pytest.approx(1.0, abs=0.05)


def test_training_is_deterministic(teacher_trajs):
    cfg = TrainConfig(updates=6, batch_size=2, val_every=3, model=SMALL)
    a, b = train(teacher_trajs, cfg), train(teacher_trajs, cfg)
    for (k, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), k
    assert a.curve == b.curve


def test_empty_dataset_rejected():
    with pytest.raises(InvalidInputError):
        train([], TrainConfig(model=SMALL))


def test_train_config_roundtrip():
    cfg = TrainConfig(updates=7, model=SMALL)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInputError):
        TrainConfig(lr=1e-3, lr_final=1e-2)


def test_checkpoint_roundtrip_and_resume(teacher_trajs, tmp_path):
    cfg = TrainConfig(updates=4, batch_size=2, val_every=2, model=SMALL)
    res = train(teacher_trajs, cfg)
    path = save_checkpoint(tmp_path / "m.ckpt", res, cfg)
    model = load_model(path)
    g = _graph(push_scene())
    assert torch.equal(model.predict(g), res.model.predict(g))
    again = save_checkpoint(tmp_path / "m2.ckpt", res, cfg)
    assert path.read_bytes() == again.read_bytes()

    loaded, cfg2 = load_training(path)
    assert cfg2 == cfg and loaded.curve == res.curve
    longer = TrainConfig(updates=8, batch_size=2, val_every=2, model=SMALL)
    r1 = train(teacher_trajs, longer, resume=res)
    r2 = train(teacher_trajs, longer, resume=loaded)
    for (k, x), (_, y) in zip(r1.state["current"].items(), r2.state["current"].items()):
        assert torch.allclose(x, y, rtol=0, atol=1e-15), k
    assert r1.curve[-1][0] == 8


def test_checkpoint_header_checked(tmp_path):
    p = tmp_path / "bad.ckpt"
    with open(p, "wb") as fh:
        np.savez(fh, header=np.array("something-else"), meta=np.array("{}"))
    with pytest.raises(InvalidInputError, match=HEADER):
        load_model(p)
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(InvalidInputError, match=HEADER):
        load_model(tmp_path / "junk.ckpt")
