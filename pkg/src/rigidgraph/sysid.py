"""Contact-parameter identification from pose trajectories.

Velocities are reconstructed by backward differences, the trajectory loss
compares simulated and recorded poses, and an internal CMA-ES searches the
parameter box in logit coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import RigidBodyState, geodesic_angle, quat_to_rotmat, rotmat_to_rotvec
from rigidgraph.teacher import (
    PARAM_LOWER,
    PARAM_UPPER,
    ContactParams,
    SceneState,
    TeacherConfig,
    rollout,
)
from rigidgraph.trajectory import Trajectory

PENALTY = 1e12


@dataclass(frozen=True)
class ParamBounds:
    lower: np.ndarray = field(default_factory=lambda: PARAM_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: PARAM_UPPER.copy())

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("bounds must be equal-length vectors")
        if not np.all(lo < hi):
            raise InvalidInputError("every lower bound must be below its upper bound")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def to_box(self, z: np.ndarray) -> np.ndarray:
        """Unbounded coordinates to the box (logistic of the normalized range)."""
        return self.lower + (self.upper - self.lower) * expit(np.asarray(z))

    def from_box(self, theta: np.ndarray) -> np.ndarray:
        u = (np.asarray(theta) - self.lower) / (self.upper - self.lower)
        u = np.clip(u, 1e-12, 1 - 1e-12)
        return logit(u)


@dataclass
class IdentDataset:
    demos: list[Trajectory]
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.demos:
            raise InvalidInputError("identification needs at least one demonstration")
        first = self.demos[0]
        for d in self.demos[1:]:
            if d.n_bodies != first.n_bodies or d.dt != first.dt:
                raise InvalidInputError("demonstrations must share bodies and dt")
            for a, b in zip(d.specs, first.specs):
                if a.mass != b.mass or a.is_static != b.is_static or a.mesh.vertices.shape != b.mesh.vertices.shape:
                    raise InvalidInputError("demonstrations must share body specs")
        if self.weights is None:
            self.weights = default_weights(first)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (first.n_bodies,) or np.any(self.weights <= 0):
            raise InvalidInputError("weights need one positive entry per body")


def default_weights(traj: Trajectory) -> np.ndarray:
    """Per-body positional scale: the smallest bounding-box side of the mesh (a cube's edge)."""
    return np.array([float(np.ptp(s.mesh.vertices, axis=0).min()) for s in traj.specs])


def finite_diff_velocities(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Backward-difference (v, ω), each shaped (T+1, N, 3); ω is in the world frame.

    Frame 0 copies frame 1.
    """
    if traj.n_steps < 1:
        raise InvalidInputError("velocity reconstruction needs at least two frames")
    dt = traj.dt
    v = np.zeros_like(traj.positions)
    w = np.zeros_like(traj.positions)
    v[1:] = (traj.positions[1:] - traj.positions[:-1]) / dt
    for t in range(1, traj.n_steps + 1):
        for i in range(traj.n_bodies):
            R0 = quat_to_rotmat(traj.quats[t - 1, i])
            R1 = quat_to_rotmat(traj.quats[t, i])
            w[t, i] = rotmat_to_rotvec(R1 @ R0.T) / dt
    v[0], w[0] = v[1], w[1]
    return v, w


def trajectory_loss(real: Trajectory, sim: Trajectory, weights) -> float:
    """Sum over t >= 1 and bodies of |x - x̂| / w_i + angle(R, R̂)."""
    if real.positions.shape != sim.positions.shape:
        raise InvalidInputError(
            f"trajectory shapes differ: {real.positions.shape} vs {sim.positions.shape}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (real.n_bodies,):
        raise InvalidInputError("weights need one entry per body")
    dx = np.linalg.norm(real.positions[1:] - sim.positions[1:], axis=2)
    total = float(np.sum(dx / weights))
    for t in range(1, real.n_steps + 1):
        for i in range(real.n_bodies):
            total += geodesic_angle(quat_to_rotmat(real.quats[t, i]), quat_to_rotmat(sim.quats[t, i]))
    return total


def initial_scene(traj: Trajectory, gravity=(0.0, 0.0, -9.81)) -> SceneState:
    """Scene at frame 0 with velocities reconstructed by finite differences."""
    v, w = finite_diff_velocities(traj)
    bodies = []
    for i, spec in enumerate(traj.specs):
        if spec.is_static:
            st = RigidBodyState(traj.positions[0, i], traj.quats[0, i])
        else:
            st = RigidBodyState(traj.positions[0, i], traj.quats[0, i], v[0, i], w[0, i])
        bodies.append((spec, st))
    return SceneState(bodies, np.asarray(gravity, dtype=np.float64), traj.dt)


def dataset_loss(dataset: IdentDataset, params: ContactParams, config: TeacherConfig = TeacherConfig()) -> float:
    total = 0.0
    for demo in dataset.demos:
        sim = rollout(initial_scene(demo), params, demo.n_steps, config)
        total += trajectory_loss(demo, sim, dataset.weights)
    return total


@dataclass
class CMAResult:
    theta: np.ndarray
    loss: float
    history: list[tuple[int, float]]  # (generation, best-ever loss)
    evaluations: int


def population_size(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


def cmaes_minimize(
    objective: Callable[[np.ndarray], float],
    bounds: ParamBounds,
    budget: int,
    seed: int = 0,
    sigma0: float = 1.0,
    popsize: int | None = None,
) -> CMAResult:
    """Minimize ``objective`` over the box with CMA-ES in logit coordinates.

    The box center is evaluated first and is the incumbent; later candidates
    replace it only on strict improvement, so a constant objective returns the
    center.  Non-finite objective values are replaced by a large penalty.
    """
    n = bounds.dim
    lam = popsize or population_size(n)
    if budget < lam:
        raise InvalidInputError(f"budget {budget} is smaller than the population size {lam}")
    rng = np.random.default_rng(seed)

    def f(z):
        try:
            val = float(objective(bounds.to_box(z)))
        except (FloatingPointError, OverflowError, ArithmeticError):
            val = math.inf
        return val if math.isfinite(val) else PENALTY

    mu = lam // 2
    wts = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    wts /= wts.sum()
    mueff = 1.0 / np.sum(wts**2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = np.zeros(n)
    sigma = sigma0
    C = np.eye(n)
    pc = np.zeros(n)
    ps = np.zeros(n)
    B = np.eye(n)
    D = np.ones(n)

    best_z = mean.copy()
    best = f(mean)
    evals = 1
    history: list[tuple[int, float]] = [(0, best)]
    gen = 0
    while evals + lam <= budget:
        gen += 1
        arz = rng.standard_normal((lam, n))
        ary = arz @ (B * D).T
        arx = mean + sigma * ary
        fit = np.array([f(x) for x in arx])
        evals += lam
        order = np.argsort(fit, kind="stable")
        if fit[order[0]] < best:
            best, best_z = float(fit[order[0]]), arx[order[0]].copy()
        history.append((gen, best))

        old = mean
        sel = order[:mu]
        mean = wts @ arx[sel]
        y = (mean - old) / sigma
        invsqrtC = B @ np.diag(1 / D) @ B.T
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (invsqrtC @ y)
        hsig = np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y
        artmp = (arx[sel] - old) / sigma
        C = (
            (1 - c1 - cmu) * C
            + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
            + cmu * (artmp.T * wts) @ artmp
        )
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))
        C = np.triu(C) + np.triu(C, 1).T
        evals_, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals_, 1e-300))
    return CMAResult(bounds.to_box(best_z), best, history, evals)


@dataclass
class IdentResult:
    params: ContactParams
    loss: float
    initial_loss: float
    history: list[tuple[int, float]]


def identify(
    dataset: IdentDataset,
    bounds: ParamBounds = ParamBounds(),
    budget: int = 300,
    seed: int = 0,
    config: TeacherConfig = TeacherConfig(),
) -> IdentResult:
    """Parameters minimizing the summed trajectory loss over the demonstrations."""

    def objective(theta):
        return dataset_loss(dataset, ContactParams.from_vector(theta), config)

    res = cmaes_minimize(objective, bounds, budget, seed)
    return IdentResult(ContactParams.from_vector(res.theta), res.loss, res.history[0][1], res.history)


def write_theta(path, params: ContactParams, loss: float | None = None) -> None:
    lines = [f"{k}={v:.17g}" for k, v in zip(ContactParams.names(), params.as_vector())]
    if loss is not None:
        lines.append(f"loss={loss:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_theta(path) -> ContactParams:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such parameter file")
    vals = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise InvalidInputError(f"{path}:{lineno}: expected key=value")
        try:
            vals[key.strip()] = float(val)
        except ValueError:
            raise InvalidInputError(f"{path}:{lineno}: {val!r} is not a number") from None
    missing = [k for k in ContactParams.names() if k not in vals]
    if missing:
        raise InvalidInputError(f"{path}: missing parameters {', '.join(missing)}")
    return ContactParams(**{k: vals[k] for k in ContactParams.names()})


def write_history(path, history) -> None:
    lines = ["gen,best_loss"] + [f"{g},{l:.17g}" for g, l in history]
    Path(path).write_text("\n".join(lines) + "\n")
