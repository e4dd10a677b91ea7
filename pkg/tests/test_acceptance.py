"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The learned-simulator criteria share models trained once per session.
"""
import math
import time

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES
from scenes import IDENT, THETA_GT, bowling_scene, cube, ground, push_scene, random_separated_pair

from rigidgraph.collide import ContactPair, brute_force_nearest, nearest_points, surrogate_gradient
from rigidgraph.datagen import Dataset, ScalingSpec, augment_rotate_z, scale_dataset
from rigidgraph.geom import (
    geodesic_angle,
    RigidBodyState,
    axis_angle_quat,
    box_mesh,
    quat_from_rotvec,
    quat_mul,
    quat_to_rotmat,
    random_quat,
    tetrahedron_mesh,
)
from rigidgraph.gnn import GNNModel, LossSpec, ModelConfig, TrainConfig, rollout, rollout_gradient, shape_match
from rigidgraph.gnn.train import fit_statistics, prepare
from rigidgraph.optimctl import canonical_task, optimize_push
from rigidgraph.sysid import IdentDataset, ParamBounds, dataset_loss, identify
from rigidgraph.teacher import ContactParams, SceneState, kinetic_energy, scene_from_trajectory, step, with_params
from rigidgraph.teacher import rollout as teacher_rollout

pytestmark = pytest.mark.slow

DESK_MODEL = ModelConfig(latent=32, hidden=32, layers=3)
DESK_TRAIN = TrainConfig(updates=10000, batch_size=8, lr=1e-3, lr_final=1e-5, noise_std=1e-5, val_every=250, model=DESK_MODEL)
N_TRAIN = 200
N_HELDOUT = 20


def record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)


def _at(x, q=IDENT):
    return RigidBodyState(np.asarray(x, dtype=float), np.asarray(q, dtype=float))


def _pair(ma, sa, mb, sb):
    dist, p_a, p_b, n = nearest_points(ma, sa, mb, sb)
    return ContactPair(0, 1, 0, 0, p_a, p_b, dist, n)


def mean_rollout_error(model, trajs) -> float:
    """Mean over scenes, steps and dynamic bodies of the positional error of a full rollout."""
    errs = []
    for tr in trajs:
        pred = rollout(model, scene_from_trajectory(tr), tr.n_steps)
        dyn = [i for i, s in enumerate(tr.specs) if not s.is_static]
        errs.append(np.linalg.norm(pred.positions[1:, dyn] - tr.positions[1:, dyn], axis=2).mean())
    return float(np.mean(errs))


# ---- shared session data ----------------------------------------------------------


@pytest.fixture(scope="session")
def scaled_data():
    t = time.time()
    ds = scale_dataset(ScalingSpec(n_trajectories=N_TRAIN, seed=0), THETA_GT)
    ds.meta["seconds"] = time.time() - t
    return ds


@pytest.fixture(scope="session")
def heldout():
    return scale_dataset(ScalingSpec(n_trajectories=N_HELDOUT, seed=12345), THETA_GT).trajectories


@pytest.fixture(scope="session")
def scaled_model(scaled_data):
    import importlib

    train_mod = importlib.import_module("rigidgraph.gnn.train")
    t = time.time()
    res = train_mod.train(scaled_data, DESK_TRAIN)
    res.seconds = time.time() - t + scaled_data.meta["seconds"]
    return res


@pytest.fixture(scope="session")
def augmented_model():
    import importlib

    train_mod = importlib.import_module("rigidgraph.gnn.train")
    base = scale_dataset(ScalingSpec(n_trajectories=3, seed=777), THETA_GT)
    aug = augment_rotate_z(Dataset(base.trajectories, "real-substitute", THETA_GT), math.ceil(N_TRAIN / 3))
    aug = Dataset(aug.trajectories[:N_TRAIN], "augmented", THETA_GT)
    return train_mod.train(aug, DESK_TRAIN)


# ---- 1 ----------------------------------------------------------------------------


def test_criterion_1_collision_oracle():
    rng = np.random.default_rng(2024)
    t = time.time()
    worst = 0.0
    for _ in range(500):
        ma, sa, mb, sb, _ = random_separated_pair(rng)
        d_gjk = nearest_points(ma, sa, mb, sb)[0]
        d_bf = brute_force_nearest(ma, sa, mb, sb)[0]
        worst = max(worst, abs(d_gjk - d_bf))
    dt = time.time() - t
    ok = worst <= 1e-6 and dt < 30
    record(1, ok, f"max |gjk - brute| = {worst:.2e} m over 500 pairs in {dt:.1f} s")
    assert ok


# ---- 2 ----------------------------------------------------------------------------


def _common_motion_error(rng) -> float:
    worst = 0.0
    for _ in range(100):
        ma, sa, mb, sb, _ = random_separated_pair(rng)
        pair = _pair(ma, sa, mb, sb)
        G = surrogate_gradient(pair, sa, sb)
        xi = rng.normal(size=6)
        xi *= 1e-5 / np.linalg.norm(xi)
        R = quat_to_rotmat(quat_from_rotvec(xi[3:]))
        moved = [_at(R @ s.x + xi[:3], quat_mul(quat_from_rotvec(xi[3:]), s.q)) for s in (sa, sb)]
        dq = np.concatenate([moved[0].x - sa.x, moved[0].q - sa.q, moved[1].x - sb.x, moved[1].q - sb.q])
        _, a2, b2, _ = nearest_points(ma, moved[0], mb, moved[1])
        worst = max(worst, np.abs(G @ dq - np.concatenate([a2 - pair.p_a, b2 - pair.p_b])).max())
    return worst


def _vertex_face_error() -> float:
    slab, tet = box_mesh((1.0, 1.0, 0.2)), tetrahedron_mesh(0.3)
    v = tet.vertices[0] / np.linalg.norm(tet.vertices[0])
    q = axis_angle_quat(np.cross(v, [0, 0, -1.0]), np.arccos(np.clip(v @ [0, 0, -1.0], -1, 1)))
    sa = _at([0, 0, 0])
    sb = _at([0.1, -0.05, 0.1 + 0.01 + np.linalg.norm(tet.vertices[0])], q)
    pair = _pair(slab, sa, tet, sb)
    G = surrogate_gradient(pair, sa, sb)
    worst = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-5
        _, _, b2, _ = nearest_points(slab, sa, tet, _at(sb.x + e, sb.q))
        worst = max(worst, np.abs((G[:, 7:10] @ e)[3:] - (b2 - pair.p_b)).max())
    return worst


def _small_live_model():
    cfg = ModelConfig(latent=8, hidden=8, layers=2)
    torch.manual_seed(0)
    model = GNNModel(cfg)
    trajs = [teacher_rollout(push_scene(0.6 + 0.3 * k, yaw=0.4 * k), THETA_GT, 6) for k in range(3)]
    fit_statistics(model, prepare(trajs, TrainConfig(model=cfg)), 200, 0)
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        model.decoder[-1].weight.copy_(0.3 * torch.randn(model.decoder[-1].weight.shape, generator=g, dtype=torch.float64))
    return model


def _rollout_fd_error():
    model = _small_live_model()
    c = cube()

    q = axis_angle_quat([0.3, 0.2, 1.0], 0.5)

    def with_v(v):
        # two free cubes in space, the first heading for the second
        return SceneState([(c, RigidBodyState([0, 0, 0.5], IDENT, v)), (c, _at([0.07, 0.01, 0.503], q))], gravity=np.zeros(3))

    v0 = np.array([0.6, 0.1, 0.05])
    spec = LossSpec("custom", fn=lambda P, Q: P[-1, 1] @ torch.tensor([1.0, 0.5, 0.2], dtype=torch.float64))
    g = rollout_gradient(model, with_v(v0), 3, spec)
    h, fd = 1e-4, np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        lp = rollout_gradient(model, with_v(v0 + e), 3, spec, frozen=g.contacts).loss
        lm = rollout_gradient(model, with_v(v0 - e), 3, spec, frozen=g.contacts).loss
        fd[k] = (lp - lm) / (2 * h)
    rel = np.abs(g.d_velocity[0] - fd) / np.abs(fd)
    return float(rel.max()), min(g.face_edges)


def test_criterion_2_surrogate_gradients():
    t = time.time()
    a = _common_motion_error(np.random.default_rng(77))
    b = _vertex_face_error()
    c, n_ff = _rollout_fd_error()
    dt = time.time() - t
    ok = a <= 1e-6 and b <= 1e-7 and c <= 1e-2 and n_ff > 0 and dt < 120
    record(2, ok, f"(a) {a:.1e}  (b) {b:.1e}  (c) max rel {c:.1e} with >= {n_ff} face-face edges/step, {dt:.1f} s")
    assert ok


# ---- 3 ----------------------------------------------------------------------------


def test_criterion_3_shape_matching():
    rng = np.random.default_rng(3)
    rec, iso = 0.0, 0.0
    for _ in range(1000):
        ref = rng.normal(scale=0.05, size=(int(rng.integers(4, 12)), 3))
        R0, t0 = quat_to_rotmat(random_quat(rng)), rng.normal(size=3)
        R, t, proj = shape_match(ref @ R0.T + t0, ref)
        rec = max(rec, np.abs(R - R0).max(), np.abs(t - t0).max())
        D = np.linalg.norm(ref[:, None] - ref[None], axis=2)
        noisy = ref @ R0.T + t0 + rng.normal(scale=1e-3, size=ref.shape)
        P = shape_match(noisy, ref)[2]
        iso = max(iso, np.abs(np.linalg.norm(P[:, None] - P[None], axis=2) - D).max())
    ok = rec <= 1e-9 and iso <= 1e-12
    record(3, ok, f"recovery error {rec:.1e}, isometry error {iso:.1e} over 1000 transforms")
    assert ok


# ---- 4 ----------------------------------------------------------------------------


def test_criterion_4_teacher_sanity():
    P = ContactParams()
    sc = SceneState([ground(), (cube(), _at([0, 0, 0.025], axis_angle_quat([0, 0, 1], 0.4)))])
    tr = teacher_rollout(sc, P, 1000)
    drift = np.abs(tr.positions[:, 1] - tr.positions[0, 1]).max()
    R0 = quat_to_rotmat(tr.quats[0, 1])
    turn = max(geodesic_angle(R0, quat_to_rotmat(q)) for q in tr.quats[:, 1])

    sl = SceneState([ground(), (cube(), RigidBodyState([0, 0, 0.0249], IDENT, [0.5, 0, 0], [0, 0, 2]))], gravity=np.zeros(3))
    E = [kinetic_energy(sl)]
    for _ in range(200):
        sl = step(sl, P)
        E.append(kinetic_energy(sl))
    rise = float(np.diff(E).max())

    disp = []
    for mu in (0.1, 0.3, 0.5, 0.7):
        t = teacher_rollout(push_scene(speed=0.8), with_params(P, mu=mu), 40)
        disp.append(float(np.linalg.norm(t.positions[-1, 2] - t.positions[0, 2])))
    mono = all(b <= a for a, b in zip(disp, disp[1:]))
    ok = drift <= 1e-3 and turn <= 1e-3 and rise <= 1e-6 and mono
    record(4, ok, f"rest drift {drift:.1e} m / {turn:.1e} rad, max KE rise {rise:.1e} J, displacements {np.round(disp, 4).tolist()}")
    assert ok


# ---- 5 ----------------------------------------------------------------------------


def _ident_scene(speed, gap, yaw, dy):
    c = cube()
    return SceneState(
        [ground(), (c, RigidBodyState([0, 0, 0.025], IDENT, [speed, 0, 0])), (c, _at([0.05 + gap, dy, 0.025], axis_angle_quat([0, 0, 1], yaw)))]
    )


def test_criterion_5_identification():
    train_args = [(0.8, 0.02, 0.0, 0.0), (1.0, 0.03, 0.3, 0.01), (0.9, 0.01, -0.2, -0.01)]
    test_args = [(0.7, 0.015, 0.1, 0.0), (0.95, 0.025, 0.0, 0.015), (1.1, 0.04, 0.4, 0.0), (0.85, 0.02, -0.3, 0.005), (0.75, 0.01, 0.2, -0.01)]
    t = time.time()
    demos = IdentDataset([teacher_rollout(_ident_scene(*a), THETA_GT, 20) for a in train_args])
    tests = IdentDataset([teacher_rollout(_ident_scene(*a), THETA_GT, 20) for a in test_args])
    res = identify(demos, budget=300, seed=0)
    center = ContactParams.from_vector(ParamBounds().center)
    before, after = dataset_loss(tests, center), dataset_loss(tests, res.params)
    dt = time.time() - t
    reduction = 1 - after / before
    ok = abs(res.params.mu - THETA_GT.mu) <= 0.05 and reduction >= 0.30 and dt < 600
    record(5, ok, f"mu {res.params.mu:.3f} (true {THETA_GT.mu}), test loss {before:.3f} -> {after:.3f} ({100 * reduction:.0f}% lower), {dt:.0f} s")
    assert ok


# ---- 6 ----------------------------------------------------------------------------


def test_criterion_6_learned_simulator(scaled_model, heldout):
    res = scaled_model
    val = res.best_val
    # the trainer's starting point: same seed and initialization, statistics fitted on the same data
    torch.manual_seed(DESK_TRAIN.seed)
    fresh = GNNModel(DESK_MODEL)
    stats = {k: v for k, v in res.model.state_dict().items() if k.startswith(("norms.", "target_norm."))}
    fresh.load_state_dict(stats, strict=False)
    e_trained = mean_rollout_error(res.model, heldout)
    e_fresh = mean_rollout_error(fresh, heldout)
    ok = val <= 0.2 and e_trained <= e_fresh / 5 and res.seconds < 7200
    record(
        6,
        ok,
        f"(a) held-out one-step MSE {val:.4f}  (b) 20-step error {1000 * e_trained:.2f} mm vs untrained {1000 * e_fresh:.2f} mm"
        f" (ratio {e_trained / e_fresh:.3f}), {res.seconds / 60:.0f} min",
    )
    assert ok


# ---- 7 ----------------------------------------------------------------------------


def test_criterion_7_scaling_beats_augmentation(scaled_model, augmented_model, heldout):
    e_s = mean_rollout_error(scaled_model.model, heldout)
    e_a = mean_rollout_error(augmented_model.model, heldout)
    ok = e_s <= 0.9 * e_a
    record(7, ok, f"20-step error scaled {1000 * e_s:.2f} mm vs augmented {1000 * e_a:.2f} mm ({100 * (1 - e_s / e_a):.0f}% lower)")
    assert ok


# ---- 8 ----------------------------------------------------------------------------


def test_criterion_8_push_optimization(scaled_model):
    task = canonical_task()
    runs = [optimize_push(scaled_model.model, task, iters=50, seed=s) for s in range(5)]
    conv = [r.converged and len(r.loss_history) - 1 <= 50 for r in runs]
    mono = all(all(b <= a for a, b in zip(r.loss_history, r.loss_history[1:])) for r in runs)
    ok = all(conv) and mono
    its = [len(r.loss_history) - 1 for r in runs]
    finals = [f"{r.loss_history[-1]:.1e}" for r in runs]
    record(8, ok, f"converged {sum(conv)}/5, iterations {its}, final losses {finals} (threshold {task.threshold:.0e})")
    assert ok


# ---- 9 ----------------------------------------------------------------------------


def test_criterion_9_bowling(scaled_model):
    sc = bowling_scene()
    pred = rollout(scaled_model.model, sc, 20)
    finite = bool(np.all(np.isfinite(pred.positions)) and np.all(np.isfinite(pred.quats)))
    worst = 0.0
    for b, spec in enumerate(pred.specs):
        V = spec.mesh.vertices
        D0 = np.linalg.norm(V[:, None] - V[None], axis=2)
        for t in range(pred.n_steps + 1):
            W = V @ pred.rotmats(t)[b].T + pred.positions[t, b]
            worst = max(worst, np.abs(np.linalg.norm(W[:, None] - W[None], axis=2) - D0).max())
    ok = finite and pred.n_steps == 20 and worst <= 1e-9
    record(9, ok, f"{len(pred.specs) - 2} struck cubes, 20 steps, finite={finite}, isometry error {worst:.1e}")
    assert ok
