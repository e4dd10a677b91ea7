"""Compliant-contact rigid-body simulator used as the data-generating teacher.

Contacts are penetrating triangle-level pairs from :func:`rigidgraph.collide.contact_pairs`.
Each pair produces a mass-normalized spring-damper normal force scaled by an
impedance curve, plus a tanh-regularized Coulomb friction force.  Integration is
semi-implicit Euler with a fixed number of substeps per frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from rigidgraph.collide import ContactPair, default_d_eps, penetration_manifold
from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import BodySpec, RigidBodyState, cross3, quat_from_rotvec, quat_mul, quat_to_rotmat
from rigidgraph.trajectory import Trajectory

V_REG = 1e-3
DEFAULT_DT = 1.0 / 60.0
DEFAULT_SUBSTEPS = 10


@dataclass(frozen=True)
class ContactParams:
    d0: float = 0.9
    d_width: float = 0.95
    width: float = 0.001
    midpoint: float = 0.05
    power: float = 2.0
    time_constant: float = 0.005
    damping_ratio: float = 1.0
    mu: float = 0.3

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_vector(cls, vec) -> "ContactParams":
        return cls(*(float(v) for v in vec))

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def validate(self, bounds=None) -> None:
        lo, hi = (PARAM_LOWER, PARAM_UPPER) if bounds is None else bounds
        v = self.as_vector()
        bad = [n for n, x, a, b in zip(self.names(), v, lo, hi) if not (a <= x <= b)]
        if bad:
            raise InvalidInputError(f"contact parameters out of range: {', '.join(bad)}")


PARAM_LOWER = np.array([0.9, 0.95, 0.0001, 0.001, 1.0, 0.001, 0.1, 0.0])
PARAM_UPPER = np.array([0.95, 0.99, 0.01, 0.1, 5.0, 0.1, 10.0, 1.0])


@dataclass
class SceneState:
    bodies: list  # list[tuple[BodySpec, RigidBodyState]]
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    dt: float = DEFAULT_DT

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if not self.bodies:
            raise InvalidInputError("scene needs at least one body")

    @property
    def specs(self) -> list[BodySpec]:
        return [b[0] for b in self.bodies]

    @property
    def states(self) -> list[RigidBodyState]:
        return [b[1] for b in self.bodies]

    def copy(self) -> "SceneState":
        return SceneState([(s, st.copy()) for s, st in self.bodies], self.gravity.copy(), self.dt)


@dataclass(frozen=True)
class TeacherConfig:
    substeps: int = DEFAULT_SUBSTEPS
    d_eps: float | None = None


def _impedance_curve(r: np.ndarray, params: ContactParams) -> np.ndarray:
    s = np.clip(r / params.width, 0.0, 1.0)
    m, p = params.midpoint, params.power
    lo = m ** (1.0 - p) * s**p
    hi = 1.0 - (1.0 - m) ** (1.0 - p) * (1.0 - s) ** p
    y = np.where(s <= m, lo, hi)
    return params.d0 + (params.d_width - params.d0) * y


def impedance(violation: float, params: ContactParams) -> float:
    """Impedance in [d0, d_width] for a penetration depth (m)."""
    if violation < 0:
        raise InvalidInputError("violation must be non-negative")
    if violation >= params.width:
        return params.d_width
    return float(_impedance_curve(np.array(violation), params))


def spring_coefficients(params: ContactParams, h: float) -> tuple[float, float]:
    """Stiffness and damping per unit mass for substep h.

    The time constant is floored at 2h and the damping at 1/h so the explicit
    update stays stable for every parameter in the search box.
    """
    tc = max(params.time_constant, 2.0 * h)
    k = 1.0 / tc**2
    b = min(2.0 * params.damping_ratio / tc, 1.0 / h)
    return k, b


def _body_arrays(states, specs):
    X = np.array([s.x for s in states])
    V = np.array([s.v for s in states])
    W = np.array([s.w for s in states])
    inv_m = np.array([sp.inv_mass for sp in specs])
    inv_I = np.zeros((len(specs), 3, 3))
    for k, (sp, st) in enumerate(zip(specs, states)):
        if not sp.is_static:
            R = st.R
            inv_I[k] = R @ sp.inv_inertia @ R.T
    return X, V, W, inv_m, inv_I


def _wrenches(ia, ib, pa, pb, dist, normal, n_shared, centers, bodies, params, h):
    """Vectorized contact wrenches; returns (wrench on A, wrench on B), each (m, 6)."""
    X, V, W, inv_m, inv_I = bodies
    c = 0.5 * (pa + pb)
    rA, rB = c - X[ia], c - X[ib]
    v_rel = (V[ib] + cross3(W[ib], rB)) - (V[ia] + cross3(W[ia], rA))
    sep_rate = np.einsum("ij,ij->i", normal, v_rel)
    r = np.maximum(-dist, 0.0)
    k, b = spring_coefficients(params, h)
    pA, pB = centers - X[ia], centers - X[ib]
    IA, IB = inv_I[ia], inv_I[ib]
    lin = inv_m[ia] + inv_m[ib]

    def mobility(d):
        ca, cb = cross3(pA, d), cross3(pB, d)
        return lin + np.einsum("ij,ijk,ik->i", ca, IA, ca) + np.einsum("ij,ijk,ik->i", cb, IB, cb)

    mob_n = mobility(normal)
    live = (dist < 0) & (lin > 0)
    m_c = np.where(live, 1.0 / np.where(live, mob_n, 1.0) / n_shared, 0.0)
    f_n = m_c * np.maximum(0.0, _impedance_curve(r, params) * (k * r - b * sep_rate))
    f = f_n[:, None] * normal
    v_t = v_rel - sep_rate[:, None] * normal
    speed_t = np.linalg.norm(v_t, axis=1)
    slide = (f_n > 0) & (speed_t > 0)
    if params.mu > 0 and np.any(slide):
        t_hat = np.zeros_like(v_t)
        t_hat[slide] = v_t[slide] / speed_t[slide, None]
        mag = params.mu * f_n * np.tanh(speed_t / V_REG)
        # friction may stop but never reverse the sliding within one substep
        mob_t = np.where(slide, mobility(t_hat), 1.0)
        mag = np.where(slide, np.minimum(mag, speed_t / (mob_t * n_shared * h)), 0.0)
        f = f - mag[:, None] * t_hat
    wb = np.concatenate([f, cross3(rB, f)], axis=1)
    wa = np.concatenate([-f, -cross3(rA, f)], axis=1)
    return wa, wb


def _pack(pairs):
    ia = np.array([p.body_a for p in pairs], dtype=np.int64)
    ib = np.array([p.body_b for p in pairs], dtype=np.int64)
    pa = np.array([p.p_a for p in pairs]).reshape(-1, 3)
    pb = np.array([p.p_b for p in pairs]).reshape(-1, 3)
    dist = np.array([p.dist for p in pairs])
    normal = np.array([p.normal for p in pairs]).reshape(-1, 3)
    return ia, ib, pa, pb, dist, normal


def contact_force(
    pair: ContactPair,
    states: list[RigidBodyState],
    specs: list[BodySpec],
    params: ContactParams,
    h: float = DEFAULT_DT / DEFAULT_SUBSTEPS,
    n_shared: int = 1,
    patch_center: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Wrenches (force, torque about the center of mass) on bodies A and B.

    ``n_shared`` is the number of penetrating pairs between the same two bodies
    and ``patch_center`` the centroid of their application points (defaults to
    this pair's point).  The spring acts on the effective mass along the normal
    at the patch center, counting translational and rotational mobility of both
    bodies, split evenly over the patch so the total stiffness does not depend
    on the tessellation.
    """
    ia, ib, pa, pb, dist, normal = _pack([pair])
    center = 0.5 * (pa + pb) if patch_center is None else np.asarray(patch_center, dtype=float).reshape(1, 3)
    wa, wb = _wrenches(
        ia, ib, pa, pb, dist, normal, np.array([float(n_shared)]), center, _body_arrays(states, specs), params, h
    )
    return wa[0], wb[0]


def _substep(scene: SceneState, params: ContactParams, h: float, d_eps: float):
    specs = scene.specs
    states = scene.states
    n = len(specs)
    pen = penetration_manifold(scene.bodies, d_eps)
    wrench = np.zeros((n, 6))
    active = 0
    if pen:
        ia, ib, pa, pb, dist, normal = _pack(pen)
        key = ia * n + ib
        _, inv, cnt = np.unique(key, return_inverse=True, return_counts=True)
        mid = 0.5 * (pa + pb)
        sums = np.zeros((len(cnt), 3))
        np.add.at(sums, inv, mid)
        centers = (sums / cnt[:, None])[inv]
        wa, wb = _wrenches(
            ia, ib, pa, pb, dist, normal, cnt[inv].astype(float), centers, _body_arrays(states, specs), params, h
        )
        np.add.at(wrench, ia, wa)
        np.add.at(wrench, ib, wb)
        dyn = np.array([not sp.is_static for sp in specs])
        active = int(np.sum(dyn[ia] & dyn[ib]))
    new = []
    for k, (spec, st) in enumerate(scene.bodies):
        if spec.is_static:
            new.append((spec, st))
            continue
        v = st.v + h * (wrench[k, :3] / spec.mass + scene.gravity)
        R = st.R
        I_w = R @ spec.inertia @ R.T
        tau = wrench[k, 3:] - cross3(st.w, I_w @ st.w)
        w = st.w + h * np.linalg.solve(I_w, tau)
        x = st.x + h * v
        q = quat_mul(quat_from_rotvec(w * h), st.q)
        q = q / np.linalg.norm(q)
        new.append((spec, RigidBodyState(x, q, v, w)))
    return SceneState(new, scene.gravity, scene.dt), active


def step(scene: SceneState, params: ContactParams, config: TeacherConfig = TeacherConfig()) -> SceneState:
    """Advance the scene by one frame (``scene.dt``)."""
    return _step(scene, params, config)[0]


def _step(scene, params, config):
    d_eps = config.d_eps if config.d_eps is not None else default_d_eps(scene.specs)
    h = scene.dt / config.substeps
    active = 0
    for _ in range(config.substeps):
        scene, a = _substep(scene, params, h, d_eps)
        active = max(active, a)
    return scene, active


def rollout(init: SceneState, params: ContactParams, T: int, config: TeacherConfig = TeacherConfig()) -> Trajectory:
    """T frames of simulation; the returned trajectory holds T+1 poses including ``init``."""
    if T < 1:
        raise InvalidInputError("rollout needs T >= 1")
    n = len(init.bodies)
    pos = np.zeros((T + 1, n, 3))
    quat = np.zeros((T + 1, n, 4))
    active = np.zeros(T + 1, dtype=np.int64)
    scene = init
    for k, st in enumerate(scene.states):
        pos[0, k], quat[0, k] = st.x, st.q
    for t in range(1, T + 1):
        scene, active[t] = _step(scene, params, config)
        for k, st in enumerate(scene.states):
            pos[t, k], quat[t, k] = st.x, st.q
    v0 = np.array([np.concatenate([st.v, st.w]) for st in init.states])
    return Trajectory(init.specs, pos, quat, init.dt, active, velocities0=v0)


def scene_from_trajectory(traj: Trajectory, velocities=None, gravity=(0.0, 0.0, -9.81)) -> SceneState:
    """Scene at frame 0 of ``traj``.

    ``velocities`` is an optional list of (v, ω); otherwise the trajectory's
    recorded initial velocities are used, or zero when it has none.
    """
    bodies = []
    for k, spec in enumerate(traj.specs):
        if velocities is not None:
            v, w = velocities[k]
        elif traj.velocities0 is not None:
            v, w = traj.velocities0[k, :3], traj.velocities0[k, 3:]
        else:
            v, w = np.zeros(3), np.zeros(3)
        bodies.append((spec, RigidBodyState(traj.positions[0, k], traj.quats[0, k], v, w)))
    return SceneState(bodies, np.asarray(gravity, dtype=np.float64), traj.dt)


def kinetic_energy(scene: SceneState) -> float:
    e = 0.0
    for spec, st in scene.bodies:
        if spec.is_static:
            continue
        R = quat_to_rotmat(st.q)
        e += 0.5 * spec.mass * st.v @ st.v + 0.5 * st.w @ (R @ spec.inertia @ R.T) @ st.w
    return float(e)


def with_params(params: ContactParams, **changes) -> ContactParams:
    return replace(params, **changes)
