"""Learned-model rollouts: Verlet integration of predicted node accelerations,
per-body rigid projection, and reverse-mode gradients through whole rollouts.

Every step re-detects contacts on the current (detached) poses and keeps the
resulting pair set fixed for that step; gradients reach the nearest points
only through the material-point surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from rigidgraph.collide import ContactSet, contact_pairs
from rigidgraph.errors import InvalidInputError, NumericalFailure
from rigidgraph.geom import BodySpec, RigidBodyState
from rigidgraph.gnn.graph import ContactIndex, GraphIndex, SceneTopology, compute_features, surrogate_points
from rigidgraph.gnn.model import GNNModel
from rigidgraph.gnn.shape_match import quat_to_rotmat_t, rotmat_to_quat_t, rotvec_to_rotmat_t, shape_match
from rigidgraph.trajectory import Trajectory


def verlet_step(p_t, p_prev, a):
    """Position Verlet with the dt² factor folded into ``a``."""
    return 2.0 * p_t - p_prev + a


@dataclass
class RolloutState:
    """Position history (oldest first, h+1 frames) and current body poses."""

    topo: SceneTopology
    node_hist: list[torch.Tensor]
    obj_hist: list[torch.Tensor]
    X: torch.Tensor  # (n_bodies, 3)
    Q: torch.Tensor  # (n_bodies, 4)

    @property
    def history(self) -> int:
        return len(self.node_hist) - 1

    def scene(self) -> list[tuple[BodySpec, RigidBodyState]]:
        X = self.X.detach().numpy()
        Q = self.Q.detach().numpy()
        return [(s, RigidBodyState(X[b], Q[b])) for b, s in enumerate(self.topo.specs)]


def _t(a) -> torch.Tensor:
    return a if torch.is_tensor(a) else torch.as_tensor(np.asarray(a), dtype=torch.float64)


def _nodes(topo: SceneTopology, X: torch.Tensor, Rs: list[torch.Tensor]) -> torch.Tensor:
    ref = _t(topo.ref)
    parts = [ref[topo.body_slice(b)] @ Rs[b].T + X[b] for b in range(topo.n_bodies)]
    return torch.cat(parts)


def initial_histories(specs: list[BodySpec], X, Q, V, W, dt: float, history: int) -> RolloutState:
    """History frames t−h..t by extrapolating the current velocities backwards.

    All pose and velocity arguments may be tensors that carry gradients.
    Static bodies are held in place regardless of the velocities given.
    """
    if history < 1:
        raise InvalidInputError("history must be at least 1")
    topo = SceneTopology.from_specs(specs)
    X, Q, V, W = (_t(a) for a in (X, Q, V, W))
    n = topo.n_bodies
    for name, a, d in (("positions", X, 3), ("quaternions", Q, 4), ("velocities", V, 3), ("angular velocities", W, 3)):
        if tuple(a.shape) != (n, d):
            raise InvalidInputError(f"{name} must have shape ({n}, {d})")
    moving = _t((~topo.static_body).astype(np.float64))[:, None]
    V, W = V * moving, W * moving
    R0 = [quat_to_rotmat_t(Q[b]) for b in range(n)]
    node_hist, obj_hist = [], []
    for k in range(history, -1, -1):
        Xk = X - (k * dt) * V
        Rk = [R0[b] if k == 0 else rotvec_to_rotmat_t(-(k * dt) * W[b]) @ R0[b] for b in range(n)]
        node_hist.append(_nodes(topo, Xk, Rk))
        obj_hist.append(Xk)
    return RolloutState(topo, node_hist, obj_hist, X, Q)


def state_from_scene(scene, history: int) -> RolloutState:
    """``scene`` is a SceneState or a list of (BodySpec, RigidBodyState)."""
    bodies = scene.bodies if hasattr(scene, "bodies") else scene
    dt = getattr(scene, "dt", 1.0 / 60.0)
    specs = [s for s, _ in bodies]
    X = np.array([st.x for _, st in bodies])
    Q = np.array([st.q for _, st in bodies])
    V = np.array([st.v for _, st in bodies])
    W = np.array([st.w for _, st in bodies])
    return initial_histories(specs, X, Q, V, W, dt, history)


@dataclass
class FrozenContacts:
    """A step's contact set with the body poses it was detected at."""

    contacts: ContactSet
    X: torch.Tensor
    Q: torch.Tensor


@dataclass
class StepInfo:
    n_pairs: int
    n_face_edges: int
    frozen: FrozenContacts


def step(model: GNNModel, state: RolloutState, d_eps: float, frozen: FrozenContacts | None = None):
    """One learned step; differentiable in the history tensors and poses.

    With ``frozen`` the contact set recorded in an earlier rollout is reused
    and its witness points are carried along with the bodies instead of being
    detected again.
    """
    topo = state.topo
    if frozen is None:
        frozen = FrozenContacts(contact_pairs(state.scene(), d_eps), state.X.detach(), state.Q.detach())
        ref = None
    else:
        ref = (frozen.X, frozen.Q)
    contacts = frozen.contacts
    cidx = ContactIndex.from_contacts(topo, contacts)
    index = GraphIndex.build(topo, cidx)
    ca, cb = surrogate_points(cidx, state.X, state.Q, ref)
    g = compute_features(index, state.node_hist, state.obj_hist, cidx, ca, cb)
    a = model.predict(g)
    P, P_prev = state.node_hist[-1], state.node_hist[-2]
    pred = verlet_step(P, P_prev, a)
    if not torch.isfinite(pred).all():
        raise NumericalFailure("non-finite node prediction")
    nodes, Xs, Qs = [], [], []
    for b in range(topo.n_bodies):
        sl = topo.body_slice(b)
        if topo.specs[b].is_static:
            nodes.append(P[sl])
            Xs.append(state.X[b])
            Qs.append(state.Q[b])
            continue
        R, t, proj = shape_match(pred[sl], _t(topo.ref[sl]))
        nodes.append(proj)
        Xs.append(t)  # reference vertices are centred on the body origin
        Qs.append(rotmat_to_quat_t(R))
    X = torch.stack(Xs)
    Q = torch.stack(Qs)
    new = RolloutState(
        topo,
        state.node_hist[1:] + [torch.cat(nodes)],
        state.obj_hist[1:] + [X],
        X,
        Q,
    )
    return new, StepInfo(len(contacts), g.n_face_edges, frozen)


@dataclass
class RolloutTensors:
    positions: torch.Tensor  # (T+1, N, 3)
    quats: torch.Tensor  # (T+1, N, 4)
    nodes: list[torch.Tensor] = field(default_factory=list)  # (n_mesh, 3) per frame
    face_edges: list[int] = field(default_factory=list)
    contacts: list[FrozenContacts] = field(default_factory=list)


def rollout_tensors(model: GNNModel, state: RolloutState, T: int, d_eps: float | None = None,
                    frozen: list[FrozenContacts] | None = None) -> RolloutTensors:
    if T < 1:
        raise InvalidInputError("rollout needs T >= 1")
    if state.history != model.config.history:
        raise InvalidInputError(
            f"history length {state.history} does not match the model's {model.config.history}"
        )
    if d_eps is None:
        d_eps = model.config.contact_radius(state.topo.specs)
    if frozen is not None and len(frozen) < T:
        raise InvalidInputError(f"{len(frozen)} frozen contact sets for a rollout of {T} steps")
    pos, quats, nodes, fe, used = [state.X], [state.Q], [state.node_hist[-1]], [], []
    for t in range(1, T + 1):
        try:
            state, info = step(model, state, d_eps, None if frozen is None else frozen[t - 1])
        except NumericalFailure as exc:
            raise NumericalFailure(f"rollout aborted at step {t}: {exc}") from None
        pos.append(state.X)
        quats.append(state.Q)
        nodes.append(state.node_hist[-1])
        fe.append(info.n_face_edges)
        used.append(info.frozen)
    return RolloutTensors(torch.stack(pos), torch.stack(quats), nodes, fe, used)


def rollout(model: GNNModel, scene, T: int, d_eps: float | None = None) -> Trajectory:
    """Predicted trajectory of T steps from a SceneState (poses plus velocities)."""
    state = state_from_scene(scene, model.config.history)
    with torch.no_grad():
        out = rollout_tensors(model, state, T, d_eps)
    bodies = scene.bodies if hasattr(scene, "bodies") else scene
    dt = getattr(scene, "dt", 1.0 / 60.0)
    v0 = np.array([np.concatenate([st.v, st.w]) for _, st in bodies])
    traj = Trajectory([s for s, _ in bodies], out.positions.numpy(), out.quats.numpy(), dt, velocities0=v0)
    traj.meta["face_edges"] = out.face_edges
    return traj


# ---------------------------------------------------------------------------
# gradients

DISCRETE_KINDS = frozenset({"contact_count", "active_contacts", "face_edge_count"})


@dataclass(frozen=True)
class LossSpec:
    """A differentiable scalar of the rolled-out trajectory.

    ``final_position``: ``weights · x_body(T)`` (plus ``offset``);
    ``custom``: ``fn(positions, quats)`` on the (T+1, N, ·) tensors.
    Discrete kinds such as ``contact_count`` are rejected.
    """

    kind: str = "final_position"
    body: int = 0
    weights: tuple[float, float, float] = (1.0, 0.0, 0.0)
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind in DISCRETE_KINDS:
            raise InvalidInputError(f"loss kind {self.kind!r} is discrete and has no gradient")
        if self.kind not in ("final_position", "custom"):
            raise InvalidInputError(f"unknown loss kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise InvalidInputError("custom loss needs fn")

    def __call__(self, out: RolloutTensors) -> torch.Tensor:
        if self.kind == "final_position":
            return out.positions[-1, self.body] @ torch.tensor(self.weights, dtype=torch.float64)
        return self.fn(out.positions, out.quats)


@dataclass
class RolloutGradient:
    loss: float
    d_velocity: np.ndarray  # (N, 3)
    d_angular_velocity: np.ndarray
    d_position: np.ndarray
    face_edges: list[int]
    contacts: list[FrozenContacts] = field(default_factory=list)


def rollout_gradient(model: GNNModel, scene, T: int, loss_spec: LossSpec, d_eps: float | None = None,
                     frozen: list[FrozenContacts] | None = None) -> RolloutGradient:
    """Loss of a T-step rollout and its gradient w.r.t. the initial velocities and positions.

    Contact sets are detected per step and held fixed for differentiation.
    Passing the ``contacts`` of an earlier result as ``frozen`` replays them,
    which makes the returned loss the function whose derivative is reported.
    """
    if not isinstance(loss_spec, LossSpec):
        raise InvalidInputError("loss_spec must be a LossSpec")
    bodies = scene.bodies if hasattr(scene, "bodies") else scene
    dt = getattr(scene, "dt", 1.0 / 60.0)
    specs = [s for s, _ in bodies]
    X = torch.tensor(np.array([st.x for _, st in bodies]), requires_grad=True)
    Q = torch.tensor(np.array([st.q for _, st in bodies]))
    V = torch.tensor(np.array([st.v for _, st in bodies]), requires_grad=True)
    W = torch.tensor(np.array([st.w for _, st in bodies]), requires_grad=True)
    state = initial_histories(specs, X, Q, V, W, dt, model.config.history)
    out = rollout_tensors(model, state, T, d_eps, frozen)
    loss = loss_spec(out)
    gX, gV, gW = torch.autograd.grad(loss, [X, V, W], allow_unused=True)
    z = np.zeros((len(specs), 3))
    conv = lambda g: z.copy() if g is None else g.detach().numpy()
    return RolloutGradient(float(loss.detach()), conv(gV), conv(gW), conv(gX), out.face_edges, out.contacts)
