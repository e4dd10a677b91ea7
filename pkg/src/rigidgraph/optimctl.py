"""Push-to-target optimization of a pusher's initial planar velocity through the learned rollout."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from rigidgraph.errors import InvalidInputError, NumericalFailure
from rigidgraph.geom import BodySpec, RigidBodyState, box_mesh, ground_plane, ground_state
from rigidgraph.gnn.model import GNNModel
from rigidgraph.gnn.simulate import LossSpec, rollout_gradient
from rigidgraph.teacher import SceneState
from rigidgraph.trajectory import Trajectory

STOP_WEIGHT = 0.1
MAX_NONFINITE_RETRIES = 5


@dataclass
class PushTask:
    scene: SceneState
    target: np.ndarray  # (2,) planar point, m
    target_radius: float
    horizon: int
    pusher: int = 1
    struck: int = 2
    v_max: float = 1.5
    initial_velocity: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.0]))

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.initial_velocity = np.asarray(self.initial_velocity, dtype=np.float64)
        if self.target.shape != (2,) or self.initial_velocity.shape != (2,):
            raise InvalidInputError("target and initial_velocity must be planar 2-vectors")
        if not self.target_radius > 0:
            raise InvalidInputError(f"target_radius must be positive, got {self.target_radius}")
        if self.horizon < 2:
            raise InvalidInputError(f"horizon must be at least 2, got {self.horizon}")
        if not self.v_max > 0:
            raise InvalidInputError("v_max must be positive")
        n = len(self.scene.bodies)
        for name in ("pusher", "struck"):
            k = getattr(self, name)
            if not 0 <= k < n or self.scene.bodies[k][0].is_static:
                raise InvalidInputError(f"{name} index {k} is not a dynamic body of the scene")
        if self.pusher == self.struck:
            raise InvalidInputError("pusher and struck body must differ")

    @property
    def threshold(self) -> float:
        return self.target_radius**2

    def scene_with(self, velocity) -> SceneState:
        sc = self.scene.copy()
        st = sc.bodies[self.pusher][1]
        st.v = np.array([velocity[0], velocity[1], 0.0])
        return sc


def canonical_task(edge: float = 0.05, mass: float = 0.1, gap: float = 0.02, target_offset: float = 0.025,
                   target_radius: float = 0.01, horizon: int = 20) -> PushTask:
    """Pusher and struck cube in a row along +x; the target lies further along the same line."""
    cube = BodySpec.from_mesh(box_mesh(edge), mass, name="cube")
    h = edge / 2
    q = np.array([1.0, 0.0, 0.0, 0.0])
    x_struck = edge + gap
    scene = SceneState(
        [
            (ground_plane(), ground_state()),
            (cube, RigidBodyState([0.0, 0.0, h], q)),
            (cube, RigidBodyState([x_struck, 0.0, h], q)),
        ]
    )
    return PushTask(scene, np.array([x_struck + target_offset, 0.0]), target_radius, horizon)


def task_loss_terms(final_xy, final_vxy, target) -> float:
    d = final_xy - target
    return d @ d + STOP_WEIGHT * (final_vxy @ final_vxy)


def task_loss(traj: Trajectory, task: PushTask) -> float:
    """Squared planar miss distance of the struck body plus the weighted squared final planar speed."""
    if traj.n_steps < task.horizon:
        raise InvalidInputError(f"trajectory has {traj.n_steps} steps, task horizon is {task.horizon}")
    T = task.horizon
    p = traj.positions[:, task.struck, :2]
    v = (p[T] - p[T - 1]) / traj.dt
    return float(task_loss_terms(p[T], v, task.target))


def _loss_spec(task: PushTask, dt: float) -> LossSpec:
    tgt = torch.tensor(task.target, dtype=torch.float64)

    def fn(positions, quats):
        p = positions[:, task.struck, :2]
        v = (p[-1] - p[-2]) / dt
        d = p[-1] - tgt
        return d @ d + STOP_WEIGHT * (v @ v)

    return LossSpec(kind="custom", fn=fn)


def clamp_speed(v: np.ndarray, v_max: float) -> np.ndarray:
    s = float(np.linalg.norm(v))
    return v if s <= v_max else v * (v_max / s)


@dataclass
class OptimRun:
    loss_history: list[float]
    velocity_history: list[np.ndarray]
    converged: bool
    evaluations: int = 0

    def write_csv(self, path) -> None:
        lines = ["iteration,loss,v_x,v_y"]
        for i, (l, v) in enumerate(zip(self.loss_history, self.velocity_history)):
            lines.append(f"{i},{l:.17g},{v[0]:.17g},{v[1]:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")


def initial_decision(task: PushTask, seed: int, spread: float = 0.1) -> np.ndarray:
    """Seeded perturbation of the task's nominal initial velocity."""
    rng = np.random.default_rng(seed)
    return clamp_speed(task.initial_velocity + rng.uniform(-spread, spread, size=2), task.v_max)


def optimize_push(model: GNNModel, task: PushTask, iters: int = 50, step_size: float = 100.0, seed: int = 0,
                  max_backtracks: int = 12) -> OptimRun:
    """Projected gradient descent with backtracking on the pusher's initial planar velocity.

    A trial step that raises the loss (or yields a non-finite value) is
    rejected and the step halved, so the recorded loss never increases.  After
    an accepted step the step size doubles again.
    """
    if iters < 1:
        raise InvalidInputError("iters must be at least 1")
    if not step_size > 0:
        raise InvalidInputError("step_size must be positive")
    spec = _loss_spec(task, task.scene.dt)
    evals = 0

    def evaluate(v):
        nonlocal evals
        evals += 1
        r = rollout_gradient(model, task.scene_with(v), task.horizon, spec)
        return r.loss, r.d_velocity[task.pusher, :2]

    v = initial_decision(task, seed)
    bad = 0
    while True:
        try:
            loss, g = evaluate(v)
        except NumericalFailure:
            loss, g = math.nan, np.full(2, math.nan)
        if math.isfinite(loss) and np.all(np.isfinite(g)):
            break
        bad += 1
        if bad > MAX_NONFINITE_RETRIES:
            raise NumericalFailure(f"non-finite loss or gradient at the initial decision v={v.tolist()}")
        v = 0.5 * v
    losses, vels = [loss], [v.copy()]
    step = step_size
    for it in range(1, iters + 1):
        if loss <= task.threshold:
            break
        accepted = False
        nonfinite = 0
        for _ in range(max_backtracks):
            cand = clamp_speed(v - step * g, task.v_max)
            if np.allclose(cand, v, rtol=0, atol=1e-12):
                break
            try:
                lc, gc = evaluate(cand)
            except NumericalFailure:
                lc, gc = math.nan, np.full(2, math.nan)
            if not (math.isfinite(lc) and np.all(np.isfinite(gc))):
                nonfinite += 1
                if nonfinite > MAX_NONFINITE_RETRIES:
                    raise NumericalFailure(
                        f"iteration {it}: non-finite gradient after {MAX_NONFINITE_RETRIES} step halvings "
                        f"(v={v.tolist()}, step={step:g})"
                    )
                step *= 0.5
                continue
            if lc <= loss:
                v, loss, g = cand, lc, gc
                accepted = True
                break
            step *= 0.5
        losses.append(loss)
        vels.append(v.copy())
        if accepted:
            step *= 2.0
        elif np.allclose(clamp_speed(v - step * g, task.v_max), v, rtol=0, atol=1e-12) or step < 1e-12:
            break
    return OptimRun(losses, vels, losses[-1] <= task.threshold, evals)
