"""Synthetic dataset generation from the identified teacher, plus z-rotation augmentation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rigidgraph.collide import gjk
from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import (
    BodySpec,
    RigidBodyState,
    axis_angle_quat,
    box_mesh,
    ground_plane,
    ground_state,
    quat_mul,
    tetrahedron_mesh,
    world_vertices,
)
from rigidgraph.teacher import ContactParams, SceneState, TeacherConfig, rollout
from rigidgraph.trajectory import Trajectory, read_trajectory, write_trajectory

PROVENANCES = ("scaled", "augmented", "real-substitute")
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass(frozen=True)
class ScalingSpec:
    n_trajectories: int = 200
    n_objects_range: tuple[int, int] = (2, 2)
    edge_length_range: tuple[float, float] = (0.04, 0.06)
    mass_range: tuple[float, float] = (0.05, 0.2)
    initial_speed_range: tuple[float, float] = (0.4, 1.2)
    initial_region: tuple[float, float, float, float] = (-0.1, 0.1, -0.1, 0.1)  # xmin, xmax, ymin, ymax
    steps_per_trajectory: int = 20
    seed: int = 0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    tetrahedron_fraction: float = 0.0
    aim_jitter: float = 0.15  # rad, spread of the pusher heading around the target object
    max_retries: int = 10

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise InvalidInputError("n_trajectories must be at least 1")
        lo, hi = self.n_objects_range
        if not (1 <= lo <= hi):
            raise InvalidInputError("n_objects_range must satisfy 1 <= min <= max")
        for name in ("edge_length_range", "mass_range", "initial_speed_range"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                raise InvalidInputError(f"{name} must be a positive, non-empty range")
        x0, x1, y0, y1 = self.initial_region
        if not (x0 < x1 and y0 < y1):
            raise InvalidInputError("initial_region must be a non-empty box")
        if self.steps_per_trajectory < 1:
            raise InvalidInputError("steps_per_trajectory must be at least 1")
        if not 0.0 <= self.tetrahedron_fraction <= 1.0:
            raise InvalidInputError("tetrahedron_fraction must lie in [0, 1]")


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    provenance: str
    params_used: ContactParams | None = None
    spec: ScalingSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.trajectories)


class ContactFreeError(InvalidInputError):
    """No sampled scene produced a contact between dynamic bodies."""


def _make_body(rng, spec: ScalingSpec) -> BodySpec:
    edge = float(rng.uniform(*spec.edge_length_range))
    mass = float(rng.uniform(*spec.mass_range))
    if spec.tetrahedron_fraction > 0 and rng.uniform() < spec.tetrahedron_fraction:
        return BodySpec.from_mesh(tetrahedron_mesh(edge), mass, name="tetrahedron")
    return BodySpec.from_mesh(box_mesh(edge), mass, name="cube")


def _resting_height(body: BodySpec) -> float:
    return -float(body.mesh.vertices[:, 2].min())


def _separated(a, b) -> bool:
    res = gjk(a, b)
    return not res.intersecting and res.dist > 1e-6


def sample_scene(spec: ScalingSpec, rng: np.random.Generator) -> SceneState:
    """Objects resting on the ground plane at random yaw; object 0 is the pusher."""
    n = int(rng.integers(spec.n_objects_range[0], spec.n_objects_range[1] + 1))
    x0, x1, y0, y1 = spec.initial_region
    bodies = [(ground_plane(), ground_state())]
    placed: list[np.ndarray] = []
    for _ in range(n):
        body = _make_body(rng, spec)
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            yaw = float(rng.uniform(-math.pi, math.pi))
            q = axis_angle_quat([0.0, 0.0, 1.0], yaw)
            x = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), _resting_height(body)])
            st = RigidBodyState(x, q)
            verts = world_vertices(body.mesh, st)
            if all(_separated(verts, other) for other in placed):
                break
        else:
            raise InvalidInputError(
                f"could not place {n} objects without overlap in region {spec.initial_region} "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        placed.append(verts)
        bodies.append((body, st))
    speed = float(rng.uniform(*spec.initial_speed_range))
    pusher = bodies[1][1]
    if n > 1:
        k = int(rng.integers(2, n + 1))
        d = bodies[k][1].x[:2] - pusher.x[:2]
        heading = math.atan2(d[1], d[0]) + float(rng.uniform(-spec.aim_jitter, spec.aim_jitter))
    else:
        heading = float(rng.uniform(-math.pi, math.pi))
    pusher.v = np.array([speed * math.cos(heading), speed * math.sin(heading), 0.0])
    return SceneState(bodies, np.array(spec.gravity, dtype=np.float64))


def _has_contact(traj: Trajectory) -> bool:
    return traj.active_contacts is not None and int(np.max(traj.active_contacts)) > 0


def scaled_trajectory(spec: ScalingSpec, params: ContactParams, index: int, config=TeacherConfig()) -> Trajectory:
    """The ``index``-th contact-rich trajectory; seeded independently of the others."""
    for attempt in range(spec.max_retries + 1):
        rng = np.random.default_rng([spec.seed, index, attempt])
        traj = rollout(sample_scene(spec, rng), params, spec.steps_per_trajectory, config)
        if _has_contact(traj):
            traj.meta.update(index=index, attempt=attempt)
            return traj
    raise ContactFreeError(
        f"trajectory {index}: no contact between objects after {spec.max_retries} retries"
    )


def scale_dataset(spec: ScalingSpec, params: ContactParams, config: TeacherConfig = TeacherConfig()) -> Dataset:
    trajs = [scaled_trajectory(spec, params, i, config) for i in range(spec.n_trajectories)]
    return Dataset(trajs, "scaled", params, spec)


def _rotate_trajectory(traj: Trajectory, angle: float, center: np.ndarray) -> Trajectory:
    c, s = math.cos(angle), math.sin(angle)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    qz = axis_angle_quat([0.0, 0.0, 1.0], angle)
    pos = (traj.positions - center) @ Rz.T + center
    quats = np.empty_like(traj.quats)
    for t in range(len(quats)):
        for i in range(quats.shape[1]):
            quats[t, i] = quat_mul(qz, traj.quats[t, i])
    if angle == 0.0:
        pos, quats = traj.positions.copy(), traj.quats.copy()
    ac = None if traj.active_contacts is None else traj.active_contacts.copy()
    v0 = None
    if traj.velocities0 is not None:
        v0 = np.hstack([traj.velocities0[:, :3] @ Rz.T, traj.velocities0[:, 3:] @ Rz.T])
    return Trajectory(traj.specs, pos, quats, traj.dt, ac, {**traj.meta, "rotation": angle}, v0)


def scene_centroid(traj: Trajectory) -> np.ndarray:
    """Mean initial position of the dynamic bodies, projected to z = 0."""
    dyn = [i for i, s in enumerate(traj.specs) if not s.is_static]
    idx = dyn or list(range(traj.n_bodies))
    c = traj.positions[0, idx].mean(axis=0)
    return np.array([c[0], c[1], 0.0])


def augment_rotate_z(base: Dataset, n_copies: int) -> Dataset:
    """``n_copies`` rotated versions of every base trajectory at angles 2πk/n_copies."""
    if len(base) == 0:
        raise InvalidInputError("augmentation needs a non-empty base dataset")
    if n_copies < 1:
        raise InvalidInputError("n_copies must be at least 1")
    out = []
    for traj in base.trajectories:
        center = scene_centroid(traj)
        for k in range(n_copies):
            out.append(_rotate_trajectory(traj, 2.0 * math.pi * k / n_copies, center))
    return Dataset(out, "augmented", base.params_used, base.spec, {"n_copies": n_copies, "n_base": len(base)})


# ---------------------------------------------------------------------------
# directory layout


def _spec_lines(spec: ScalingSpec) -> list[str]:
    lines = []
    for k, v in asdict(spec).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(f"{x:.17g}" if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"spec.{k}={v}")
    return lines


def write_dataset(ds: Dataset, root) -> Path:
    """Write ``root/<provenance>/<index>.traj`` plus ``root/manifest``."""
    root = Path(root)
    sub = root / ds.provenance
    sub.mkdir(parents=True, exist_ok=True)
    mesh_dir = root / "meshes"
    for i, traj in enumerate(ds.trajectories):
        write_trajectory(traj, sub / f"{i}.traj", mesh_dir=mesh_dir)
    lines = [f"provenance={ds.provenance}", f"count={len(ds)}"]
    if ds.spec is not None:
        lines.append(f"seed={ds.spec.seed}")
        lines += _spec_lines(ds.spec)
    if ds.params_used is not None:
        lines += [f"params.{k}={v:.17g}" for k, v in zip(ContactParams.names(), ds.params_used.as_vector())]
    for k, v in sorted(ds.meta.items()):
        lines.append(f"meta.{k}={v}")
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest"
    if not path.exists():
        raise InvalidInputError(f"{path}: dataset manifest not found")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise InvalidInputError(f"{path}:{lineno}: expected key=value")
        out[k] = v
    return out


def read_dataset(root) -> Dataset:
    root = Path(root)
    man = read_manifest(root)
    try:
        prov, count = man["provenance"], int(man["count"])
    except (KeyError, ValueError):
        raise InvalidInputError(f"{root / 'manifest'}: needs provenance and count") from None
    files = sorted((root / prov).glob("*.traj"), key=lambda p: int(p.stem) if p.stem.isdigit() else -1)
    if len(files) != count or [p.stem for p in files] != [str(i) for i in range(count)]:
        raise InvalidInputError(
            f"{root}: manifest lists {count} trajectories but {root / prov} holds {len(files)}"
        )
    trajs = [read_trajectory(p) for p in files]
    params = None
    names = [f"params.{k}" for k in ContactParams.names()]
    if all(n in man for n in names):
        params = ContactParams(*(float(man[n]) for n in names))
    return Dataset(trajs, prov, params)
