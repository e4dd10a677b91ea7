"""Discrete collision detection between convex meshes and nearest-point Jacobians.

Narrowphase distances come from GJK (separated shapes) and EPA (penetrating
shapes).  An exhaustive triangle-pair routine, :func:`brute_force_nearest`, is
kept independent of GJK so the two can be cross-checked.

Contact pairs are emitted at triangle granularity.  A pair's ``dist`` is

* the unsigned triangle-triangle distance for proximity pairs, and
* a negative penetration depth for vertex-face (or, failing that, EPA) features
  of interpenetrating bodies.

Only the negative pairs generate forces in :mod:`rigidgraph.teacher`; all pairs
become face-face edges in :mod:`rigidgraph.gnn`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from rigidgraph.errors import InvalidInputError, NumericalFailure
from rigidgraph.geom import BodySpec, RigidBodyState, TriMesh, cross3, kinematic_map_H, skew, world_vertices

GJK_MAX_ITERS = 128
GJK_TOL = 1e-9
EPA_TOL = 1e-8
EPA_MAX_ITERS = 256

Scene = list  # list[tuple[BodySpec, RigidBodyState]]


@dataclass(frozen=True)
class ContactPair:
    body_a: int
    body_b: int
    tri_a: int
    tri_b: int
    p_a: np.ndarray
    p_b: np.ndarray
    dist: float
    normal: np.ndarray

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.body_a, self.body_b, self.tri_a, self.tri_b)


@dataclass
class ContactSet:
    pairs: list[ContactPair] = field(default_factory=list)
    frozen: bool = False

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def keys(self) -> set:
        return {p.key for p in self.pairs}

    def penetrating(self) -> list[ContactPair]:
        return [p for p in self.pairs if p.dist < 0]

    def dump(self) -> str:
        """One pair per line: ids, triangles, points, distance."""
        lines = []
        for p in self.pairs:
            nums = " ".join(f"{v:.17g}" for v in (*p.p_a, *p.p_b, p.dist))
            lines.append(f"{p.body_a} {p.body_b} {p.tri_a} {p.tri_b} {nums}")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# GJK


def _closest_on_simplex(pts):
    """Closest point to the origin on the convex hull of 1-4 points.

    Returns (point, indices, weights) where ``indices`` is the minimal support
    subset.  Every affine sub-simplex is tried; the closest projection with
    positive barycentric weights is the answer.
    """
    n = len(pts)
    best = None
    for k in range(1, n + 1):
        for idx in itertools.combinations(range(n), k):
            lam = _affine_projection([pts[i] for i in idx])
            if lam is None or min(lam) < -1e-14:
                continue
            p = [0.0, 0.0, 0.0]
            for li, i in zip(lam, idx):
                q = pts[i]
                p[0] += li * q[0]
                p[1] += li * q[1]
                p[2] += li * q[2]
            d2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
            if best is None or d2 < best[0] - 1e-30:
                best = (d2, p, idx, lam)
    if best is None:
        raise NumericalFailure("degenerate GJK simplex")
    return best[1], best[2], best[3]


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _affine_projection(pts):
    """Barycentric weights of the origin's projection onto aff(pts), or None if degenerate."""
    k = len(pts)
    if k == 1:
        return (1.0,)
    p0 = pts[0]
    e = [_sub(p, p0) for p in pts[1:]]
    m = k - 1
    G = [[_dot(e[i], e[j]) for j in range(m)] for i in range(m)]
    r = [-_dot(e[i], p0) for i in range(m)]
    scale = max(G[i][i] for i in range(m))
    if scale <= 0:
        return None
    if m == 1:
        t = r[0] / G[0][0]
        return (1.0 - t, t)
    if m == 2:
        det = G[0][0] * G[1][1] - G[0][1] * G[1][0]
        if abs(det) <= 1e-13 * scale * scale:
            return None
        s = (r[0] * G[1][1] - r[1] * G[0][1]) / det
        t = (G[0][0] * r[1] - G[1][0] * r[0]) / det
        return (1.0 - s - t, s, t)
    det = (
        G[0][0] * (G[1][1] * G[2][2] - G[1][2] * G[2][1])
        - G[0][1] * (G[1][0] * G[2][2] - G[1][2] * G[2][0])
        + G[0][2] * (G[1][0] * G[2][1] - G[1][1] * G[2][0])
    )
    if abs(det) <= 1e-13 * scale**3:
        return None
    sol = []
    for c in range(3):
        M = [row[:] for row in G]
        for i in range(3):
            M[i][c] = r[i]
        dc = (
            M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1])
            - M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0])
            + M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0])
        )
        sol.append(dc / det)
    return (1.0 - sum(sol), *sol)


@dataclass
class GJKResult:
    dist: float  # >= 0
    p_a: np.ndarray
    p_b: np.ndarray
    intersecting: bool
    simplex: list  # list of (w, a, b) tuples


def gjk(A: np.ndarray, B: np.ndarray, tol: float = GJK_TOL, max_iters: int = GJK_MAX_ITERS) -> GJKResult:
    """Minimum distance between the convex hulls of point sets A and B."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    a0 = tuple(A[0])
    b0 = tuple(B[0])
    simplex = [(_sub(a0, b0), a0, b0)]
    v = simplex[0][0]
    lam = (1.0,)
    for _ in range(max_iters):
        vv = _dot(v, v)
        if vv < 1e-28:
            return _gjk_result(simplex, lam, True)
        d = np.array(v)
        ia = int(np.argmax(A @ -d))
        ib = int(np.argmax(B @ d))
        a = tuple(A[ia])
        b = tuple(B[ib])
        w = _sub(a, b)
        if vv - _dot(v, w) <= tol * vv:
            return _gjk_result(simplex, lam, False)
        if any(w == s[0] for s in simplex):
            return _gjk_result(simplex, lam, False)
        simplex.append((w, a, b))
        p, idx, lam = _closest_on_simplex([s[0] for s in simplex])
        simplex = [simplex[i] for i in idx]
        if len(simplex) == 4:
            return _gjk_result(simplex, lam, True)
        v_new = tuple(p)
        if _dot(v_new, v_new) >= vv:
            # no progress: numerical floor reached
            return _gjk_result(simplex, lam, False)
        v = v_new
    raise NumericalFailure(f"GJK did not converge in {max_iters} iterations")


def _gjk_result(simplex, lam, intersecting) -> GJKResult:
    pa = np.zeros(3)
    pb = np.zeros(3)
    for li, (_, a, b) in zip(lam, simplex):
        pa += li * np.asarray(a)
        pb += li * np.asarray(b)
    d = 0.0 if intersecting else float(np.linalg.norm(pa - pb))
    return GJKResult(d, pa, pb, intersecting, simplex)


# ---------------------------------------------------------------------------
# EPA


_EPA_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    + [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)


def epa(A: np.ndarray, B: np.ndarray, simplex=None, tol: float = EPA_TOL):
    """Penetration depth of intersecting convex hulls.

    Returns (depth, p_a, p_b, normal) where ``p_a - p_b = depth * normal`` and
    translating B by ``depth * normal`` brings the shapes into touching contact.
    """
    from scipy.spatial import ConvexHull, QhullError

    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    verts_w, verts_a, verts_b = [], [], []

    def add(ia, ib):
        verts_a.append(A[ia])
        verts_b.append(B[ib])
        verts_w.append(A[ia] - B[ib])
        return len(verts_w) - 1

    for d in _EPA_DIRS:
        add(int(np.argmax(A @ d)), int(np.argmax(B @ -d)))
    if simplex:
        for w, a, b in simplex:
            verts_a.append(np.asarray(a))
            verts_b.append(np.asarray(b))
            verts_w.append(np.asarray(w))
    W = np.array(verts_w)
    try:
        hull = ConvexHull(W)
    except QhullError:
        return None
    faces = []
    for simp, eq in zip(hull.simplices, hull.equations):
        i, j, k = (int(s) for s in simp)
        n = cross3(W[j] - W[i], W[k] - W[i])
        if n @ eq[:3] < 0:
            j, k = k, j
        faces.append((i, j, k))
    verts_w = list(W)

    def face_data(f):
        i, j, k = f
        n = cross3(verts_w[j] - verts_w[i], verts_w[k] - verts_w[i])
        nn = np.linalg.norm(n)
        if nn < 1e-300:
            return None, np.inf
        n = n / nn
        return n, float(n @ verts_w[i])

    cache = {f: face_data(f) for f in faces}
    if min(cache[f][1] for f in faces) < -1e-12:
        return None  # origin outside the initial polytope: shapes are not intersecting

    for _ in range(EPA_MAX_ITERS):
        f_best = min(faces, key=lambda f: cache[f][1])
        n, dist = cache[f_best]
        ia = int(np.argmax(A @ n))
        ib = int(np.argmax(B @ -n))
        w = A[ia] - B[ib]
        if float(n @ w) - dist <= tol:
            break
        visible = [f for f in faces if cache[f][0] @ (w - verts_w[f[0]]) > 1e-12]
        if not visible:
            break
        edges = {}
        for i, j, k in visible:
            for e in ((i, j), (j, k), (k, i)):
                if (e[1], e[0]) in edges:
                    del edges[(e[1], e[0])]
                else:
                    edges[e] = True
        vis = set(visible)
        faces = [f for f in faces if f not in vis]
        verts_a.append(A[ia])
        verts_b.append(B[ib])
        verts_w.append(w)
        iw = len(verts_w) - 1
        for i, j in edges:
            f = (i, j, iw)
            cache[f] = face_data(f)
            faces.append(f)
    else:
        raise NumericalFailure("EPA did not converge")

    f_best = min(faces, key=lambda f: cache[f][1])
    n, dist = cache[f_best]
    i, j, k = f_best
    lam = _barycentric(dist * n, verts_w[i], verts_w[j], verts_w[k])
    p_a = lam[0] * verts_a[i] + lam[1] * verts_a[j] + lam[2] * verts_a[k]
    p_b = lam[0] * verts_b[i] + lam[1] * verts_b[j] + lam[2] * verts_b[k]
    return dist, p_a, p_b, n


def _barycentric(p, a, b, c):
    v0, v1, v2 = b - a, c - a, p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    if abs(den) < 1e-300:
        return np.array([1.0, 0.0, 0.0])
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.array([1.0 - v - w, v, w])


def nearest_points(meshA: TriMesh, stateA: RigidBodyState, meshB: TriMesh, stateB: RigidBodyState):
    """Signed distance, witness points and A-to-B normal between two convex meshes.

    Separated shapes give the positive minimum distance; interpenetrating shapes
    give the negative EPA penetration depth with the minimal-translation direction.
    """
    VA = world_vertices(meshA, stateA)
    VB = world_vertices(meshB, stateB)
    return nearest_points_world(VA, VB)


def nearest_points_world(VA: np.ndarray, VB: np.ndarray):
    res = gjk(VA, VB)
    if not res.intersecting and res.dist > 1e-12:
        return res.dist, res.p_a, res.p_b, (res.p_b - res.p_a) / res.dist
    out = epa(VA, VB, res.simplex)
    if out is None:
        # touching: zero depth, fall back to the centroid direction for the normal
        n = VB.mean(axis=0) - VA.mean(axis=0)
        n = n / max(np.linalg.norm(n), 1e-300)
        return 0.0, res.p_a, res.p_b, n
    depth, p_a, p_b, n = out
    return -depth, p_a, p_b, n


# ---------------------------------------------------------------------------
# exhaustive triangle-pair oracle (vectorized, independent of GJK)


def closest_point_on_triangle(P, A, B, C):
    """Closest points on triangles ABC to points P, all arrays of shape (n, 3)."""
    P, A, B, C = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (P, A, B, C))
    ab, ac, ap = B - A, C - A, P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
    out = A + v[:, None] * ab + w[:, None] * ac  # interior
    # regions are resolved in reverse priority so earlier tests win
    m_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    out = np.where(m_bc[:, None], B + t_bc[:, None] * (C - B), out)
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(m_ac[:, None], A + t_ac[:, None] * ac, out)
    m_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(m_c[:, None], C, out)
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(m_ab[:, None], A + t_ab[:, None] * ab, out)
    m_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(m_b[:, None], B, out)
    m_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(m_a[:, None], A, out)
    return out


def closest_points_segments(P1, Q1, P2, Q2):
    """Closest points between segments P1Q1 and P2Q2 (arrays of shape (n, 3))."""
    d1 = Q1 - P1
    d2 = Q2 - P2
    r = P1 - P2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    eps = 1e-300
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-14 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        s = np.where(a <= eps, 0.0, s)
        t = np.where(e > eps, (b * s + f) / e, 0.0)
        s_lo = np.where(a > eps, np.clip(-c / a, 0.0, 1.0), 0.0)
        s_hi = np.where(a > eps, np.clip((b - c) / a, 0.0, 1.0), 0.0)
    s = np.where(t < 0, s_lo, np.where(t > 1, s_hi, s))
    t = np.clip(t, 0.0, 1.0)
    return P1 + s[:, None] * d1, P2 + t[:, None] * d2


def _segment_triangle_hits(P, Q, A, B, C):
    """Intersection points of segments PQ with triangles ABC; NaN where they miss."""
    ab, ac = B - A, C - A
    n = cross3(ab, ac)
    dp = np.einsum("ij,ij->i", n, P - A)
    dq = np.einsum("ij,ij->i", n, Q - A)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = dp / (dp - dq)
    cross = (dp * dq <= 0) & (dp != dq)
    with np.errstate(invalid="ignore"):
        X = P + t[:, None] * (Q - P)
    ax = X - A
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", ax, ab)
    d21 = np.einsum("ij,ij->i", ax, ac)
    den = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
    inside = cross & (v >= 0) & (w >= 0) & (v + w <= 1)
    X[~inside] = np.nan
    return X


def triangle_pair_distances(TA: np.ndarray, TB: np.ndarray):
    """Exact distances between triangle pairs by exhaustive feature enumeration.

    ``TA`` and ``TB`` have shape (m, 3, 3).  Returns (dist, p_a, p_b) arrays.
    Candidates: each vertex against the opposite triangle, all edge-edge pairs,
    and edge-triangle crossings (distance zero).
    """
    TA = np.asarray(TA, dtype=np.float64)
    TB = np.asarray(TB, dtype=np.float64)
    m = len(TA)
    cands_a, cands_b = [], []
    for k in range(3):
        q = closest_point_on_triangle(TA[:, k], TB[:, 0], TB[:, 1], TB[:, 2])
        cands_a.append(TA[:, k])
        cands_b.append(q)
        q = closest_point_on_triangle(TB[:, k], TA[:, 0], TA[:, 1], TA[:, 2])
        cands_a.append(q)
        cands_b.append(TB[:, k])
    for i in range(3):
        for j in range(3):
            ca, cb = closest_points_segments(TA[:, i], TA[:, (i + 1) % 3], TB[:, j], TB[:, (j + 1) % 3])
            cands_a.append(ca)
            cands_b.append(cb)
    CA = np.stack(cands_a, axis=1)  # (m, K, 3)
    CB = np.stack(cands_b, axis=1)
    d = np.linalg.norm(CA - CB, axis=2)
    best = np.argmin(d, axis=1)
    rows = np.arange(m)
    dist = d[rows, best]
    p_a = CA[rows, best]
    p_b = CB[rows, best]
    for i in range(3):
        for (S, T) in ((TA, TB), (TB, TA)):
            X = _segment_triangle_hits(S[:, i], S[:, (i + 1) % 3], T[:, 0], T[:, 1], T[:, 2])
            hit = ~np.isnan(X[:, 0])
            dist = np.where(hit, 0.0, dist)
            p_a = np.where(hit[:, None], X, p_a)
            p_b = np.where(hit[:, None], X, p_b)
    return dist, p_a, p_b


def brute_force_nearest(meshA: TriMesh, stateA: RigidBodyState, meshB: TriMesh, stateB: RigidBodyState):
    """Exact minimum distance over all triangle pairs (independent oracle for GJK)."""
    VA = world_vertices(meshA, stateA)
    VB = world_vertices(meshB, stateB)
    ia, ib = np.meshgrid(np.arange(meshA.n_faces), np.arange(meshB.n_faces), indexing="ij")
    TA = VA[meshA.faces[ia.ravel()]]
    TB = VB[meshB.faces[ib.ravel()]]
    dist, p_a, p_b = triangle_pair_distances(TA, TB)
    k = int(np.argmin(dist))
    return float(dist[k]), p_a[k], p_b[k]


# ---------------------------------------------------------------------------
# contact generation


def default_d_eps(specs) -> float:
    """0.1 x the shortest edge among the dynamic bodies' meshes."""
    edges = [s.mesh.shortest_edge() for s in specs if not s.is_static]
    if not edges:
        edges = [s.mesh.shortest_edge() for s in specs]
    return 0.1 * min(edges)


def _aabb(V):
    return V.min(axis=0), V.max(axis=0)


def broadphase(scene: Scene, d_eps: float, world=None) -> list[tuple[int, int]]:
    """Body pairs whose AABBs, each inflated by d_eps/2, overlap (static-static excluded)."""
    if not d_eps > 0:
        raise InvalidInputError("d_eps must be positive")
    if world is None:
        world = [world_vertices(spec.mesh, st) for spec, st in scene]
    boxes = [_aabb(V) for V in world]
    pad = d_eps / 2.0
    out = []
    for i in range(len(scene)):
        for j in range(i + 1, len(scene)):
            if scene[i][0].is_static and scene[j][0].is_static:
                continue
            lo_i, hi_i = boxes[i]
            lo_j, hi_j = boxes[j]
            if np.all(lo_i - pad <= hi_j + pad) and np.all(lo_j - pad <= hi_i + pad):
                out.append((i, j))
    return out




@dataclass
class _Topology:
    polygons: list  # per polygon: (normal (3,), ordered boundary vertex loop, triangle ids)
    poly_normals: np.ndarray  # (P, 3) body frame
    feature_edges: np.ndarray  # (E, 2) edges between non-coplanar faces
    edge_dirs: np.ndarray  # (D, 3) unique unit edge directions, body frame
    incident: list  # per vertex: triangle ids


_TOPOLOGY: dict[int, tuple[TriMesh, _Topology]] = {}


def _topology(mesh: TriMesh) -> _Topology:
    hit = _TOPOLOGY.get(id(mesh))
    if hit is not None and hit[0] is mesh:
        return hit[1]
    topo = _build_topology(mesh)
    if len(_TOPOLOGY) > 4096:
        _TOPOLOGY.clear()
    _TOPOLOGY[id(mesh)] = (mesh, topo)
    return topo


def _build_topology(mesh: TriMesh, tol: float = 1e-9) -> _Topology:
    n, c = mesh.face_planes()
    scale = max(1.0, float(np.abs(mesh.vertices).max()))
    group = -np.ones(mesh.n_faces, dtype=np.int64)
    reps = []
    for f in range(mesh.n_faces):
        for g, (rn, rc) in enumerate(reps):
            if n[f] @ rn > 1 - tol and abs(c[f] - rc) < tol * scale:
                group[f] = g
                break
        else:
            reps.append((n[f], c[f]))
            group[f] = len(reps) - 1
    polygons = []
    for g, (rn, _) in enumerate(reps):
        tris = np.nonzero(group == g)[0]
        directed = {}
        for t in tris:
            a, b, d = mesh.faces[t]
            for e in ((a, b), (b, d), (d, a)):
                directed[e] = True
        boundary = {a: b for (a, b) in directed if (b, a) not in directed}
        start = next(iter(boundary))
        loop = [start]
        while True:
            nxt = boundary[loop[-1]]
            if nxt == start:
                break
            loop.append(nxt)
        polygons.append((rn, np.array(loop), tris))
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, d) in enumerate(mesh.faces):
        for e in ((a, b), (b, d), (d, a)):
            edge_faces.setdefault(tuple(sorted(e)), []).append(t)
    feat = [e for e, fs in edge_faces.items() if len(fs) == 2 and group[fs[0]] != group[fs[1]]]
    feat = np.array(feat, dtype=np.int64).reshape(-1, 2)
    dirs = []
    for a, b in feat:
        d = mesh.vertices[b] - mesh.vertices[a]
        d = d / np.linalg.norm(d)
        if not any(abs(d @ u) > 1 - 1e-9 for u in dirs):
            dirs.append(d)
    incident = [[] for _ in range(mesh.n_vertices)]
    for fi, f in enumerate(mesh.faces):
        for vi in f:
            incident[vi].append(fi)
    return _Topology(
        polygons,
        np.array([p[0] for p in polygons]),
        feat,
        np.array(dirs).reshape(-1, 3),
        incident,
    )


class _BodyCache:
    """World-space geometry of one body, computed once per detection call."""

    def __init__(self, spec: BodySpec, state: RigidBodyState):
        self.mesh = spec.mesh
        self.R = state.R
        self.x = state.x
        self.V = state.x + spec.mesh.vertices @ self.R.T
        self.T = self.V[spec.mesh.faces]
        self.topo = _topology(spec.mesh)
        self.poly_n = self.topo.poly_normals @ self.R.T
        self.edge_dirs = self.topo.edge_dirs @ self.R.T


def _nearest_triangle(P: np.ndarray, T: np.ndarray, tris) -> np.ndarray:
    """Index (into ``tris``) of the triangle closest to each point."""
    tris = np.asarray(tris)
    m, k = len(P), len(tris)
    Pr = np.repeat(P, k, axis=0)
    Tr = np.tile(T[tris], (m, 1, 1))
    q = closest_point_on_triangle(Pr, Tr[:, 0], Tr[:, 1], Tr[:, 2])
    d = np.linalg.norm(q - Pr, axis=1).reshape(m, k)
    return tris[np.argmin(d, axis=1)]


def _clip_polygon(poly: np.ndarray, normal: np.ndarray, point: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Sutherland-Hodgman: keep the part of ``poly`` with (p - point)·n >= -tol (n normalized).

    The tolerance keeps edges that coincide with the clip plane, which is the
    common case for aligned boxes.
    """
    normal = normal / np.sqrt(normal @ normal)
    dist = (poly - point) @ normal
    inside = dist >= -tol
    if inside.all():
        return poly
    out = []
    m = len(poly)
    for k in range(m):
        k2 = (k + 1) % m
        if inside[k]:
            out.append(poly[k])
        if inside[k] != inside[k2]:
            da, db = dist[k], dist[k2]
            t = min(max(da / (da - db), 0.0), 1.0)
            out.append(poly[k] + (poly[k2] - poly[k]) * t)
    return np.array(out).reshape(-1, 3)


def _sat(A: _BodyCache, B: _BodyCache):
    """Minimum-overlap separating axis; None when a separating axis exists.

    Returns (depth, normal A->B, kind, index) with kind in {"A", "B", "edge"}.
    """
    pa = A.V @ A.poly_n.T
    pb = B.V @ A.poly_n.T
    over_a = pa.max(axis=0) - pb.min(axis=0)
    if over_a.min() < 0 or (pb.max(axis=0) - pa.min(axis=0)).min() < 0:
        return None
    qb = B.V @ B.poly_n.T
    qa = A.V @ B.poly_n.T
    over_b = qb.max(axis=0) - qa.min(axis=0)
    if over_b.min() < 0 or (qa.max(axis=0) - qb.min(axis=0)).min() < 0:
        return None
    ia, ib = int(np.argmin(over_a)), int(np.argmin(over_b))
    if over_a[ia] <= over_b[ib] + 1e-12:
        best = (float(over_a[ia]), A.poly_n[ia], "A", ia)
    else:
        best = (float(over_b[ib]), -B.poly_n[ib], "B", ib)
    axes = cross3(A.edge_dirs[:, None, :], B.edge_dirs[None, :, :]).reshape(-1, 3)
    norms = np.linalg.norm(axes, axis=1)
    keep = norms > 1e-6
    if np.any(keep):
        axes = axes[keep] / norms[keep, None]
        ea = A.V @ axes.T
        eb = B.V @ axes.T
        o1 = ea.max(axis=0) - eb.min(axis=0)  # B on the + side
        o2 = eb.max(axis=0) - ea.min(axis=0)  # B on the - side
        o = np.minimum(o1, o2)
        if o.min() < 0:
            return None
        k = int(np.argmin(o))
        # faces are preferred unless an edge axis is clearly shallower
        if o[k] < 0.95 * best[0] - 1e-9:
            n = axes[k] if o1[k] <= o2[k] else -axes[k]
            best = (float(o[k]), n, "edge", k)
    return best


def _edge_contact(i, j, A: _BodyCache, B: _BodyCache, depth, n, with_triangles=True) -> list[ContactPair]:
    EA, EB = A.topo.feature_edges, B.topo.feature_edges
    ma = 0.5 * (A.V[EA[:, 0]] + A.V[EA[:, 1]])
    mb = 0.5 * (B.V[EB[:, 0]] + B.V[EB[:, 1]])
    # the deepest edges along the axis on each side, then their closest points
    ka = np.argsort(-(ma @ n))[:4]
    kb = np.argsort(mb @ n)[:4]
    P1 = np.repeat(A.V[EA[ka, 0]], len(kb), 0)
    Q1 = np.repeat(A.V[EA[ka, 1]], len(kb), 0)
    P2 = np.tile(B.V[EB[kb, 0]], (len(ka), 1))
    Q2 = np.tile(B.V[EB[kb, 1]], (len(ka), 1))
    ca, cb = closest_points_segments(P1, Q1, P2, Q2)
    k = int(np.argmin(np.linalg.norm(ca - cb, axis=1)))
    p_a, p_b = ca[k], cb[k]
    ea = EA[ka[k // len(kb)]]
    eb = EB[kb[k % len(kb)]]
    ta = tb = -1
    if with_triangles:
        ta = int(_nearest_triangle(p_a[None], A.T, A.topo.incident[ea[0]])[0])
        tb = int(_nearest_triangle(p_b[None], B.T, B.topo.incident[eb[0]])[0])
    return [ContactPair(i, j, ta, tb, p_a, p_b, -depth, n.copy())]


def contact_manifold(
    i: int, j: int, A: _BodyCache, B: _BodyCache, with_triangles: bool = True
) -> list[ContactPair]:
    """Penetration contact points between two convex bodies (possibly sharing triangle keys).

    A separating-axis test picks the contact normal.  For a face axis the most
    anti-parallel face of the other body is clipped against the reference face;
    for an edge-edge axis one contact at the edges' closest points is returned.
    Without ``with_triangles`` the triangle ids are left at -1.
    """
    sat = _sat(A, B)
    if sat is None:
        return []
    depth, n, kind, idx = sat
    if depth <= 0:
        return []
    if kind == "edge":
        return _edge_contact(i, j, A, B, depth, n, with_triangles)
    ref, inc = (A, B) if kind == "A" else (B, A)
    n_ref = n if kind == "A" else -n
    r_normal, r_loop, r_tris = ref.topo.polygons[idx]
    k_inc = int(np.argmin(inc.poly_n @ n_ref))
    _, i_loop, i_tris = inc.topo.polygons[k_inc]
    poly = inc.V[i_loop]
    rv = ref.V[r_loop]
    sides = cross3(n_ref, np.roll(rv, -1, axis=0) - rv)
    for k in range(len(rv)):
        poly = _clip_polygon(poly, sides[k], rv[k])
        if len(poly) == 0:
            return []
    c_ref = float(n_ref @ rv[0])
    depths = c_ref - poly @ n_ref
    keep = depths > 0
    if not np.any(keep):
        return []
    p_inc = poly[keep]
    d = depths[keep]
    p_ref = p_inc + d[:, None] * n_ref
    if with_triangles:
        t_ref = _nearest_triangle(p_ref, ref.T, r_tris)
        t_inc = _nearest_triangle(p_inc, inc.T, i_tris)
    else:
        t_ref = t_inc = np.full(len(d), -1)
    out = []
    for k in range(len(d)):
        if kind == "A":
            out.append(ContactPair(i, j, int(t_ref[k]), int(t_inc[k]), p_ref[k], p_inc[k], -float(d[k]), n.copy()))
        else:
            out.append(ContactPair(i, j, int(t_inc[k]), int(t_ref[k]), p_inc[k], p_ref[k], -float(d[k]), n.copy()))
    return out


def _dedupe(points: list[ContactPair]) -> list[ContactPair]:
    best: dict[tuple, ContactPair] = {}
    for p in points:
        old = best.get(p.key)
        if old is None or p.dist < old.dist:
            best[p.key] = p
    return list(best.values())


def _candidate_triangle_pairs(A: _BodyCache, B: _BodyCache, d_eps: float):
    pad = d_eps / 2.0
    loA, hiA = A.T.min(axis=1) - pad, A.T.max(axis=1) + pad
    loB, hiB = B.T.min(axis=1) - pad, B.T.max(axis=1) + pad
    ov = np.all(loA[:, None, :] <= hiB[None, :, :], axis=2) & np.all(loB[None, :, :] <= hiA[:, None, :], axis=2)
    return np.argwhere(ov)


def _proximity_pairs(i, j, A: _BodyCache, B: _BodyCache, d_eps: float, fallback_normal) -> list[ContactPair]:
    out = []
    for ta, tb in _candidate_triangle_pairs(A, B, d_eps):
        try:
            res = gjk(A.T[ta], B.T[tb])
            d = 0.0 if res.intersecting else res.dist
            p_a, p_b = res.p_a, res.p_b
        except NumericalFailure:
            dd, pa, pb = triangle_pair_distances(A.T[ta][None], B.T[tb][None])
            d, p_a, p_b = float(dd[0]), pa[0], pb[0]
        if d >= d_eps:
            continue
        if d > 1e-12:
            n = (p_b - p_a) / d
        else:
            n = fallback_normal
        out.append(ContactPair(i, j, int(ta), int(tb), p_a, p_b, float(d), n))
    return out


def penetration_manifold(scene: Scene, d_eps: float, with_triangles: bool = False) -> list[ContactPair]:
    """All penetration contact points of the scene, before per-key deduplication.

    Triangle ids are only resolved on request since force computation ignores them.
    """
    if not d_eps > 0:
        raise InvalidInputError("d_eps must be positive")
    world = [world_vertices(spec.mesh, st) for spec, st in scene]
    caches: dict[int, _BodyCache] = {}
    out = []
    for i, j in broadphase(scene, d_eps, world):
        for k in (i, j):
            if k not in caches:
                caches[k] = _BodyCache(*scene[k])
        out.extend(contact_manifold(i, j, caches[i], caches[j], with_triangles))
    return out


def contact_pairs(scene: Scene, d_eps: float, include_proximity: bool = True) -> ContactSet:
    """Frozen set of triangle-level contact pairs for every broadphase body pair.

    Penetration points carry negative ``dist``; when two share a triangle key
    the deeper one is kept.  Proximity pairs (unsigned triangle distance below
    ``d_eps``) are added for keys not already taken.
    """
    if not d_eps > 0:
        raise InvalidInputError("d_eps must be positive")
    world = [world_vertices(spec.mesh, st) for spec, st in scene]
    caches: dict[int, _BodyCache] = {}
    pairs: list[ContactPair] = []
    for i, j in broadphase(scene, d_eps, world):
        for k in (i, j):
            if k not in caches:
                caches[k] = _BodyCache(*scene[k])
        A, B = caches[i], caches[j]
        pen = _dedupe(contact_manifold(i, j, A, B))
        pairs.extend(pen)
        if include_proximity:
            taken = {(p.tri_a, p.tri_b) for p in pen}
            if pen:
                fallback = np.mean([p.normal for p in pen], axis=0)
            else:
                fallback = scene[j][1].x - scene[i][1].x
            fallback = fallback / max(np.linalg.norm(fallback), 1e-300)
            for p in _proximity_pairs(i, j, A, B, d_eps, fallback):
                if (p.tri_a, p.tri_b) not in taken:
                    pairs.append(p)
    pairs.sort(key=lambda p: p.key)
    return ContactSet(pairs, frozen=True)



# ---------------------------------------------------------------------------
# Jacobians


def contact_jacobian(pair: ContactPair, stateA: RigidBodyState, stateB: RigidBodyState) -> np.ndarray:
    """6x12 map from (v_A, ω_A, v_B, ω_B) to the two relative witness velocities."""
    rA = pair.p_a - stateA.x
    rB = pair.p_b - stateB.x
    I = np.eye(3)
    row = np.hstack([-I, skew(rA), I, -skew(rB)])
    return np.vstack([row, -row])


def witness_jacobian(p_a, p_b, xA, xB) -> np.ndarray:
    """6x12 map from generalized velocities to the velocities of the two witness points.

    Its blocks are those of :func:`contact_jacobian`: row 1 of the contact
    Jacobian equals (this matrix's B rows) - (its A rows).
    """
    rA = np.asarray(p_a) - xA
    rB = np.asarray(p_b) - xB
    P = np.zeros((6, 12))
    P[:3, :3] = np.eye(3)
    P[:3, 3:6] = -skew(rA)
    P[3:, 6:9] = np.eye(3)
    P[3:, 9:] = -skew(rB)
    return P


def surrogate_gradient(pair: ContactPair, stateA: RigidBodyState, stateB: RigidBodyState) -> np.ndarray:
    """6x14 surrogate Jacobian of (p_a, p_b) with respect to (x_A, q_A, x_B, q_B).

    The contact set is treated as fixed, so each witness point moves with its
    body as a material point.
    """
    return witness_jacobian(pair.p_a, pair.p_b, stateA.x, stateB.x) @ kinematic_map_H(stateA.q, stateB.q)
