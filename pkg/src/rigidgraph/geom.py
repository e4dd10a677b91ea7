"""Rigid-body geometry: convex triangle meshes, quaternions and rotation utilities.

Conventions used throughout the package:

* quaternions are scalar-first ``(w, x, y, z)``;
* angular velocities are expressed in the world frame;
* a body frame has its origin at the body's center of mass, so a mesh's
  vertices are stored relative to the center of mass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rigidgraph.errors import InvalidInputError

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class TriMesh:
    """Closed convex triangle mesh in body coordinates (meters).

    Faces are vertex-index triples with outward (counter-clockwise) winding.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        v.setflags(write=False)
        f.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (E, 2)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def face_planes(self) -> tuple[np.ndarray, np.ndarray]:
        """Outward unit normals (F, 3) and offsets (F,) so that n·x <= c inside."""
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n, np.einsum("ij,ij->i", n, tri[:, 0])

    def shortest_edge(self) -> float:
        e = self.edges()
        return float(np.min(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))

    def validate(self, tol: float = 1e-9) -> None:
        """Check index ranges, watertightness and convexity; raise on failure."""
        nv = self.n_vertices
        if self.n_faces < 4 or nv < 4:
            raise InvalidInputError("mesh needs at least 4 vertices and 4 faces")
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise InvalidInputError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidInputError("face with repeated vertex index")
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        undirected, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
        if np.any(counts != 2):
            raise InvalidInputError("mesh is not watertight: some edge is not shared by exactly 2 faces")
        n, c = self.face_planes()
        if np.any(self.vertices @ n.T - c[None, :] > tol):
            raise InvalidInputError("mesh is not convex (or faces are not outward-oriented)")


def box_mesh(size) -> TriMesh:
    """Axis-aligned cuboid centered at the origin; ``size`` is a scalar edge or (sx, sy, sz)."""
    hx, hy, hz = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,)) / 2.0
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    # vertex index = 4*ix + 2*iy + iz
    faces = [
        (0, 1, 3), (0, 3, 2),  # -x
        (4, 6, 7), (4, 7, 5),  # +x
        (0, 4, 5), (0, 5, 1),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 2, 6), (0, 6, 4),  # -z
        (1, 5, 7), (1, 7, 3),  # +z
    ]
    return TriMesh(v, np.array(faces))


def tetrahedron_mesh(edge: float) -> TriMesh:
    """Regular tetrahedron with the given edge length, centroid at the origin."""
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    v *= edge / (2.0 * np.sqrt(2.0))
    faces = np.array([(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)])
    return TriMesh(v, faces)


def convex_hull_mesh(points) -> TriMesh:
    """Triangulated convex hull of a point cloud, re-centered on its center of mass."""
    from scipy.spatial import ConvexHull

    pts = np.asarray(points, dtype=np.float64)
    hull = ConvexHull(pts)
    used = np.unique(hull.simplices)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = pts[used]
    faces = remap[hull.simplices]
    centroid = verts.mean(axis=0)
    for k, (i, j, l) in enumerate(faces):
        n = np.cross(verts[j] - verts[i], verts[l] - verts[i])
        if n @ (verts[i] - centroid) < 0:
            faces[k] = (i, l, j)
    mesh = TriMesh(verts, faces)
    _, com, _ = mass_properties(mesh)
    return TriMesh(verts - com, faces)


def mass_properties(mesh: TriMesh, density: float = 1.0):
    """Volume, center of mass and inertia tensor about the center of mass.

    Uses the divergence-theorem decomposition into signed tetrahedra spanned by
    the origin and each face.
    """
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = det.sum() / 6.0
    com = (det[:, None] * (a + b + c)).sum(axis=0) / (24.0 * vol)
    # second moments  ∫ x_i x_j dV  over each tetrahedron (origin, a, b, c)
    s = a + b + c
    outer = (
        np.einsum("ni,nj->nij", a, a)
        + np.einsum("ni,nj->nij", b, b)
        + np.einsum("ni,nj->nij", c, c)
        + np.einsum("ni,nj->nij", s, s)
    )
    second = (det[:, None, None] * outer).sum(axis=0) / 120.0
    second = second - vol * np.outer(com, com)
    inertia = np.trace(second) * np.eye(3) - second
    return vol, com, density * inertia


def read_mesh(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v" and len(parts) == 4:
            verts.append([float(p) for p in parts[1:]])
        elif parts[0] == "f" and len(parts) == 4:
            faces.append([int(p) for p in parts[1:]])
        else:
            raise InvalidInputError(f"{path}:{lineno}: cannot parse mesh line {line!r}")
    mesh = TriMesh(np.array(verts), np.array(faces))
    mesh.validate()
    return mesh


def write_mesh(mesh: TriMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {i} {j} {k}" for i, j, k in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# quaternions and rotations


def quat_mul(p, q) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q)


def quat_to_rotmat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise InvalidInputError(f"quaternion {q} is not unit length")
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion with non-negative scalar part for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        # second-order expansion keeps small-angle steps accurate
        q = np.array([1.0 - angle**2 / 8.0, *(0.5 * rv)])
        return q / np.linalg.norm(q)
    axis = rv / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    vnorm = np.linalg.norm(q[1:])
    if vnorm < 1e-15:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(vnorm, q[0])
    return angle * q[1:] / vnorm


def rotmat_to_rotvec(R) -> np.ndarray:
    return quat_to_rotvec(rotmat_to_quat(R))


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return quat_from_rotvec(axis / np.linalg.norm(axis) * angle)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def cross3(a, b) -> np.ndarray:
    """Broadcasting cross product of 3-vectors, cheaper than np.cross on small stacks."""
    a, b = np.asarray(a), np.asarray(b)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def skew(r) -> np.ndarray:
    x, y, z = r
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_rate_matrix(q) -> np.ndarray:
    """3x4 matrix G(q) with world angular velocity ω = 2·G(q)·q̇."""
    w, x, y, z = q
    return np.array(
        [
            [-x, w, -z, y],
            [-y, z, w, -x],
            [-z, -y, x, w],
        ]
    )


def body_kinematic_map(q) -> np.ndarray:
    """6x7 map from (ẋ, q̇) to (v, ω) for one body."""
    H = np.zeros((6, 7))
    H[:3, :3] = np.eye(3)
    H[3:, 3:] = 2.0 * quat_rate_matrix(q)
    return H


def kinematic_map_H(qA, qB) -> np.ndarray:
    """12x14 block-diagonal kinematic map for a body pair, u = H·q̇."""
    H = np.zeros((12, 14))
    H[:6, :7] = body_kinematic_map(qA)
    H[6:, 7:] = body_kinematic_map(qB)
    return H


def geodesic_angle(R1, R2) -> float:
    c = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def quat_angle(q1, q2) -> float:
    """Geodesic rotation angle between two unit quaternions (numerically stable near 0)."""
    rel = quat_mul(quat_conj(q1), q2)
    return float(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0])))


# ---------------------------------------------------------------------------
# bodies and states


@dataclass
class RigidBodyState:
    x: np.ndarray
    q: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).copy()
        self.q = np.asarray(self.q, dtype=np.float64).copy()
        self.v = np.asarray(self.v, dtype=np.float64).copy()
        self.w = np.asarray(self.w, dtype=np.float64).copy()
        if abs(np.linalg.norm(self.q) - 1.0) > UNIT_TOL:
            raise InvalidInputError(f"state quaternion {self.q} is not unit length")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.x, self.q, self.v, self.w)


@dataclass(frozen=True)
class BodySpec:
    """A body's geometry and inertial properties.

    ``inertia`` is the body-frame tensor about the center of mass.  Use
    :meth:`from_mesh` to derive it from the mesh at uniform density.
    """

    mesh: TriMesh
    mass: float
    inertia: np.ndarray
    is_static: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "inertia", np.asarray(self.inertia, dtype=np.float64))
        if not self.is_static:
            if not self.mass > 0:
                raise InvalidInputError("dynamic body needs positive mass")
            I = self.inertia
            if not np.allclose(I, I.T, atol=1e-12 * max(1.0, np.abs(I).max())):
                raise InvalidInputError("inertia tensor is not symmetric")
            if np.linalg.eigvalsh(I).min() <= 0:
                raise InvalidInputError("inertia tensor is not positive definite")

    @classmethod
    def from_mesh(cls, mesh: TriMesh, mass: float, is_static: bool = False, name: str = "") -> "BodySpec":
        vol, _, unit_inertia = mass_properties(mesh)
        return cls(mesh, float(mass), unit_inertia * (mass / vol), is_static, name)

    @property
    def inv_mass(self) -> float:
        return 0.0 if self.is_static else 1.0 / self.mass

    @property
    def inv_inertia(self) -> np.ndarray:
        """Body-frame inverse inertia; zero for static bodies."""
        cached = self.__dict__.get("_inv_inertia")
        if cached is None:
            cached = np.zeros((3, 3)) if self.is_static else np.linalg.inv(self.inertia)
            object.__setattr__(self, "_inv_inertia", cached)
        return cached


def world_vertices(mesh: TriMesh, state: RigidBodyState) -> np.ndarray:
    return state.x + mesh.vertices @ state.R.T


def ground_plane(size: float = 4.0, thickness: float = 0.1) -> BodySpec:
    """Static thin cuboid whose top face is the plane z = 0."""
    mesh = box_mesh((size, size, thickness))
    return BodySpec.from_mesh(mesh, mass=1.0, is_static=True, name="ground")


def ground_state(thickness: float = 0.1) -> RigidBodyState:
    return RigidBodyState(np.array([0.0, 0.0, -thickness / 2]), np.array([1.0, 0, 0, 0]))
