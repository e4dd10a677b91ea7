"""Pose trajectories and their text file format.

File layout::

    body <id> mesh=<path> mass=<kg> static=<0|1>
    ...
    dt=<s>
    v <id> vx vy vz wx wy wz        (optional, initial velocities)
    t <step> <id> x y z qw qx qy qz
    ...

Mesh paths are relative to the trajectory file.  Floats use 17 significant digits.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import BodySpec, RigidBodyState, quat_to_rotmat, read_mesh, write_mesh


@dataclass
class Trajectory:
    specs: list[BodySpec]
    positions: np.ndarray  # (T+1, N, 3)
    quats: np.ndarray  # (T+1, N, 4)
    dt: float
    active_contacts: np.ndarray | None = None  # per frame, object-object penetrating pairs
    meta: dict = field(default_factory=dict)
    velocities0: np.ndarray | None = None  # (N, 6) initial (v, ω), world frame

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.quats = np.asarray(self.quats, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise InvalidInputError("positions must have shape (T+1, N, 3)")
        if self.quats.shape != self.positions.shape[:2] + (4,):
            raise InvalidInputError("quaternions must have shape (T+1, N, 4)")
        if len(self.specs) != self.positions.shape[1]:
            raise InvalidInputError("body count does not match pose arrays")
        if self.velocities0 is not None:
            self.velocities0 = np.asarray(self.velocities0, dtype=np.float64)
            if self.velocities0.shape != (len(self.specs), 6):
                raise InvalidInputError("initial velocities must have shape (N, 6)")

    @property
    def n_steps(self) -> int:
        return len(self.positions) - 1

    @property
    def n_bodies(self) -> int:
        return len(self.specs)

    def rotmats(self, t: int) -> list[np.ndarray]:
        return [quat_to_rotmat(q) for q in self.quats[t]]

    def states(self, t: int) -> list[RigidBodyState]:
        """Poses at frame t with zero velocities."""
        return [RigidBodyState(x, q) for x, q in zip(self.positions[t], self.quats[t])]

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        sl = slice(start, stop)
        ac = None if self.active_contacts is None else self.active_contacts[sl]
        v0 = self.velocities0 if start in (0, None) else None
        return Trajectory(self.specs, self.positions[sl], self.quats[sl], self.dt, ac, dict(self.meta), v0)


def _mesh_key(spec: BodySpec) -> str:
    h = hashlib.sha1(spec.mesh.vertices.tobytes() + spec.mesh.faces.tobytes()).hexdigest()
    return h[:16]


def write_trajectory(traj: Trajectory, path, mesh_dir=None) -> None:
    """Write ``traj`` to ``path``; meshes go to ``mesh_dir`` (default: ``<parent>/meshes``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh_dir = Path(mesh_dir) if mesh_dir is not None else path.parent / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, spec in enumerate(traj.specs):
        mpath = mesh_dir / f"{_mesh_key(spec)}.mesh"
        if not mpath.exists():
            write_mesh(spec.mesh, mpath)
        rel = Path(_relpath(mpath, path.parent))
        lines.append(f"body {i} mesh={rel.as_posix()} mass={spec.mass:.17g} static={int(spec.is_static)}")
    lines.append(f"dt={traj.dt:.17g}")
    if traj.velocities0 is not None:
        for i, row in enumerate(traj.velocities0):
            lines.append(f"v {i} " + " ".join(f"{v:.17g}" for v in row))
    for t in range(traj.n_steps + 1):
        for i in range(traj.n_bodies):
            nums = " ".join(f"{v:.17g}" for v in (*traj.positions[t, i], *traj.quats[t, i]))
            lines.append(f"t {t} {i} {nums}")
    path.write_text("\n".join(lines) + "\n")


def _relpath(target: Path, start: Path) -> str:
    import os

    return os.path.relpath(target.resolve(), start.resolve())


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such trajectory file")
    bodies: dict[int, BodySpec] = {}
    dt = None
    frames: dict[int, dict[int, list[float]]] = {}
    vel: dict[int, list[float]] = {}
    mesh_cache: dict[Path, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "body":
                fields = dict(p.split("=", 1) for p in parts[2:])
                mpath = (path.parent / fields["mesh"]).resolve()
                if mpath not in mesh_cache:
                    mesh_cache[mpath] = read_mesh(mpath)
                bodies[int(parts[1])] = BodySpec.from_mesh(
                    mesh_cache[mpath], float(fields["mass"]), is_static=fields["static"] == "1"
                )
            elif parts[0].startswith("dt="):
                dt = float(parts[0][3:])
            elif parts[0] == "v":
                row = [float(p) for p in parts[2:]]
                if len(row) != 6:
                    raise ValueError("expected 6 velocity components")
                vel[int(parts[1])] = row
            elif parts[0] == "t":
                frames.setdefault(int(parts[1]), {})[int(parts[2])] = [float(p) for p in parts[3:10]]
            else:
                raise ValueError("unknown record")
        except (ValueError, KeyError, IndexError) as exc:
            raise InvalidInputError(f"{path}:{lineno}: malformed line {line!r} ({exc})") from None
    if dt is None or not bodies or not frames:
        raise InvalidInputError(f"{path}: missing dt, body or pose records")
    n = len(bodies)
    specs = [bodies[i] for i in range(n)]
    steps = sorted(frames)
    if steps != list(range(len(steps))):
        raise InvalidInputError(f"{path}: non-contiguous step indices")
    arr = np.zeros((len(steps), n, 7))
    for t in steps:
        if sorted(frames[t]) != list(range(n)):
            raise InvalidInputError(f"{path}: step {t} does not list every body")
        for i in range(n):
            arr[t, i] = frames[t][i]
    v0 = None
    if vel:
        if sorted(vel) != list(range(n)):
            raise InvalidInputError(f"{path}: initial velocities must list every body")
        v0 = np.array([vel[i] for i in range(n)])
    return Trajectory(specs, arr[:, :, :3], arr[:, :, 3:], dt, velocities0=v0)
