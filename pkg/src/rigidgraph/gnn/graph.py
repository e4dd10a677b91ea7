"""Graph construction: mesh and object nodes, mesh-mesh, object-mesh and face-face edges.

Index bookkeeping lives in :class:`GraphIndex` (numpy, concatenable for
batching); features are computed in torch so they can carry gradients from
node positions and, through the contact surrogate, from body poses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from rigidgraph.collide import ContactSet
from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import BodySpec

MESH_NODE_DIM = 7  # 2 velocity vectors + static flag (history 2)
OBJ_NODE_DIM = 8  # 2 velocity vectors + static flag + mass
MESH_EDGE_DIM = 8
FACE_EDGE_DIM = 22


def mesh_node_dim(history: int) -> int:
    return 3 * history + 1


def obj_node_dim(history: int) -> int:
    return 3 * history + 2


@dataclass
class SceneTopology:
    """Per-scene static structure: which nodes belong to which body and the intra-body edges."""

    specs: list[BodySpec]
    offsets: np.ndarray  # (n_bodies + 1,) first mesh-node index of each body
    ref: np.ndarray  # (n_mesh, 3) body-frame vertex positions
    node_body: np.ndarray  # (n_mesh,)
    mm_send: np.ndarray
    mm_recv: np.ndarray

    @classmethod
    def from_specs(cls, specs: list[BodySpec]) -> "SceneTopology":
        if not specs:
            raise InvalidInputError("scene needs at least one body")
        offsets = np.zeros(len(specs) + 1, dtype=np.int64)
        refs, owner, send, recv = [], [], [], []
        for b, spec in enumerate(specs):
            nv = spec.mesh.n_vertices
            offsets[b + 1] = offsets[b] + nv
            refs.append(spec.mesh.vertices)
            owner.append(np.full(nv, b))
            e = spec.mesh.edges() + offsets[b]
            send += [e[:, 0], e[:, 1]]
            recv += [e[:, 1], e[:, 0]]
        return cls(
            list(specs),
            offsets,
            np.concatenate(refs),
            np.concatenate(owner),
            np.concatenate(send).astype(np.int64),
            np.concatenate(recv).astype(np.int64),
        )

    @property
    def n_bodies(self) -> int:
        return len(self.specs)

    @property
    def n_mesh(self) -> int:
        return int(self.offsets[-1])

    @property
    def static_body(self) -> np.ndarray:
        return np.array([s.is_static for s in self.specs])

    @property
    def masses(self) -> np.ndarray:
        return np.array([0.0 if s.is_static else s.mass for s in self.specs])

    def body_slice(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))

    def tri_nodes(self, body: int, tri: int) -> np.ndarray:
        return self.specs[body].mesh.faces[tri] + self.offsets[body]

    def nodes_from_poses(self, X: np.ndarray, R: list[np.ndarray]) -> np.ndarray:
        out = np.empty((self.n_mesh, 3))
        for b in range(self.n_bodies):
            sl = self.body_slice(b)
            out[sl] = self.ref[sl] @ R[b].T + X[b]
        return out


@dataclass
class ContactIndex:
    """Face-face hyperedges from a frozen contact set, both directions of every pair."""

    send: np.ndarray  # (E, 3) sender triangle node ids
    recv: np.ndarray  # (E, 3) receiver triangle node ids
    pair: np.ndarray  # (E,) row into the pair arrays below
    flip: np.ndarray  # (E,) True when the sender is body B
    body_a: np.ndarray  # (P,)
    body_b: np.ndarray
    p_a: np.ndarray  # (P, 3)
    p_b: np.ndarray
    normal: np.ndarray  # (P, 3) from A to B

    @classmethod
    def from_contacts(cls, topo: SceneTopology, contacts: ContactSet) -> "ContactIndex":
        pairs = list(contacts)
        if pairs and not getattr(contacts, "frozen", True):
            raise InvalidInputError("face-face edges need a frozen contact set")
        P = len(pairs)
        ta = np.array([topo.tri_nodes(p.body_a, p.tri_a) for p in pairs], dtype=np.int64).reshape(P, 3)
        tb = np.array([topo.tri_nodes(p.body_b, p.tri_b) for p in pairs], dtype=np.int64).reshape(P, 3)
        return cls(
            send=np.concatenate([ta, tb]),
            recv=np.concatenate([tb, ta]),
            pair=np.concatenate([np.arange(P), np.arange(P)]),
            flip=np.concatenate([np.zeros(P, bool), np.ones(P, bool)]),
            body_a=np.array([p.body_a for p in pairs], dtype=np.int64),
            body_b=np.array([p.body_b for p in pairs], dtype=np.int64),
            p_a=np.array([p.p_a for p in pairs]).reshape(P, 3),
            p_b=np.array([p.p_b for p in pairs]).reshape(P, 3),
            normal=np.array([p.normal for p in pairs]).reshape(P, 3),
        )

    @property
    def n_pairs(self) -> int:
        return len(self.body_a)


@dataclass
class GraphIndex:
    """Concatenable integer structure of one or more graphs."""

    n_mesh: int
    n_obj: int
    mesh_static: np.ndarray
    obj_static: np.ndarray
    obj_mass: np.ndarray
    ref: np.ndarray
    node_obj: np.ndarray  # object index of every mesh node
    mm_send: np.ndarray
    mm_recv: np.ndarray
    ff_send: np.ndarray
    ff_recv: np.ndarray

    @classmethod
    def build(cls, topo: SceneTopology, cidx: ContactIndex) -> "GraphIndex":
        st = topo.static_body
        return cls(
            topo.n_mesh,
            topo.n_bodies,
            st[topo.node_body],
            st,
            topo.masses,
            topo.ref,
            topo.node_body.copy(),
            topo.mm_send,
            topo.mm_recv,
            cidx.send,
            cidx.recv,
        )

    @staticmethod
    def cat(items: list["GraphIndex"]) -> "GraphIndex":
        mo, oo = 0, 0
        parts = {k: [] for k in ("ms", "os", "om", "ref", "no", "mms", "mmr", "ffs", "ffr")}
        for g in items:
            parts["ms"].append(g.mesh_static)
            parts["os"].append(g.obj_static)
            parts["om"].append(g.obj_mass)
            parts["ref"].append(g.ref)
            parts["no"].append(g.node_obj + oo)
            parts["mms"].append(g.mm_send + mo)
            parts["mmr"].append(g.mm_recv + mo)
            parts["ffs"].append(g.ff_send + mo)
            parts["ffr"].append(g.ff_recv + mo)
            mo += g.n_mesh
            oo += g.n_obj
        c = {k: np.concatenate(v) for k, v in parts.items()}
        return GraphIndex(
            mo, oo, c["ms"], c["os"], c["om"], c["ref"], c["no"], c["mms"], c["mmr"],
            c["ffs"].reshape(-1, 3), c["ffr"].reshape(-1, 3),
        )


@dataclass
class DynamicsGraph:
    """Raw (unnormalized) features plus the index structure."""

    index: GraphIndex
    mesh_x: torch.Tensor  # (n_mesh, 3h+1)
    obj_x: torch.Tensor  # (n_obj, 3h+2)
    mm_e: torch.Tensor  # (E_mm, 8)
    om_e: torch.Tensor  # (n_mesh, 8) object -> mesh
    mo_e: torch.Tensor  # (n_mesh, 8) mesh -> object
    ff_e: torch.Tensor  # (E_ff, 22)

    @property
    def n_face_edges(self) -> int:
        return int(self.ff_e.shape[0])

    @staticmethod
    def cat(graphs: list["DynamicsGraph"]) -> "DynamicsGraph":
        return DynamicsGraph(
            GraphIndex.cat([g.index for g in graphs]),
            *(torch.cat([getattr(g, k) for g in graphs]) for k in ("mesh_x", "obj_x", "mm_e", "om_e", "mo_e", "ff_e")),
        )


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def quat_rate_matrix_t(Q: torch.Tensor) -> torch.Tensor:
    """Batched G(q) (…, 3, 4) with ω = 2·G(q)·q̇ (world frame)."""
    w, x, y, z = Q[..., 0], Q[..., 1], Q[..., 2], Q[..., 3]
    return torch.stack(
        [
            torch.stack([-x, w, -z, y], dim=-1),
            torch.stack([-y, z, w, -x], dim=-1),
            torch.stack([-z, -y, x, w], dim=-1),
        ],
        dim=-2,
    )


def surrogate_points(cidx: ContactIndex, X: torch.Tensor, Q: torch.Tensor, ref=None):
    """Nearest points as functions of body poses with the material-point surrogate derivative.

    Values equal the detected points; the derivative with respect to
    (x_A, q_A, x_B, q_B) is the witness Jacobian composed with the kinematic
    map, i.e. each witness moves rigidly with its own body.  ``ref`` gives the
    poses (X, Q) at which the points were detected when they differ from the
    current ones; the points are then carried along to first order.
    """
    pa, pb = _t(cidx.p_a), _t(cidx.p_b)
    if cidx.n_pairs == 0:
        return pa, pb
    Xd, Qd = (X.detach(), Q.detach()) if ref is None else ref
    dth = 2.0 * torch.einsum("bij,bj->bi", quat_rate_matrix_t(Qd), Q - Qd)
    dX = X - Xd
    ia, ib = torch.as_tensor(cidx.body_a), torch.as_tensor(cidx.body_b)
    rA = pa - Xd[ia]
    rB = pb - Xd[ib]
    ca = pa + dX[ia] + torch.linalg.cross(dth[ia], rA)
    cb = pb + dX[ib] + torch.linalg.cross(dth[ib], rB)
    return ca, cb


def compute_features(
    index: GraphIndex,
    node_hist: list[torch.Tensor],
    obj_hist: list[torch.Tensor],
    cidx: ContactIndex | None,
    ca: torch.Tensor | None = None,
    cb: torch.Tensor | None = None,
) -> DynamicsGraph:
    """Features from position histories (oldest first, h+1 frames each).

    ``ca``/``cb`` are the pair nearest points (tensors, possibly carrying the
    surrogate gradient); they default to the detected values.
    """
    if len(node_hist) < 2 or len(node_hist) != len(obj_hist):
        raise InvalidInputError("position histories must cover at least two frames")
    P = node_hist[-1]
    X = obj_hist[-1]
    vel_n = [node_hist[-1 - k] - node_hist[-2 - k] for k in range(len(node_hist) - 1)]
    vel_o = [obj_hist[-1 - k] - obj_hist[-2 - k] for k in range(len(obj_hist) - 1)]
    mesh_x = torch.cat(vel_n + [_t(index.mesh_static)[:, None]], dim=1)
    obj_x = torch.cat(vel_o + [_t(index.obj_static)[:, None], _t(index.obj_mass)[:, None]], dim=1)

    ref = _t(index.ref)
    s, r = torch.as_tensor(index.mm_send), torch.as_tensor(index.mm_recv)
    d = P[s] - P[r]
    dr = ref[s] - ref[r]
    mm_e = torch.cat([d, _norm(d), dr, _norm(dr)], dim=1)

    no = torch.as_tensor(index.node_obj)
    d_om = X[no] - P  # object -> mesh
    om_e = torch.cat([d_om, _norm(d_om), -ref, _norm(ref)], dim=1)
    mo_e = torch.cat([-d_om, _norm(d_om), ref, _norm(ref)], dim=1)

    if cidx is None or cidx.n_pairs == 0:
        ff_e = torch.zeros((0, FACE_EDGE_DIM), dtype=torch.float64)
    else:
        if ca is None or cb is None:
            ca, cb = _t(cidx.p_a), _t(cidx.p_b)
        n = _t(cidx.normal)
        flip = torch.as_tensor(cidx.flip)
        pair = torch.as_tensor(cidx.pair)
        c_send = torch.where(flip[:, None], cb[pair], ca[pair])
        c_recv = torch.where(flip[:, None], ca[pair], cb[pair])
        n_dir = torch.where(flip[:, None], -n[pair], n[pair])
        S = P[torch.as_tensor(cidx.send)] - c_send[:, None, :]
        R = P[torch.as_tensor(cidx.recv)] - c_recv[:, None, :]
        dist = (n_dir * (c_recv - c_send)).sum(dim=1, keepdim=True)
        ff_e = torch.cat([S.reshape(-1, 9), R.reshape(-1, 9), dist, n_dir], dim=1)
    return DynamicsGraph(index, mesh_x, obj_x, mm_e, om_e, mo_e, ff_e)


def _norm(v: torch.Tensor) -> torch.Tensor:
    # gradient-safe at zero length
    return torch.sqrt((v * v).sum(dim=1, keepdim=True) + 1e-30)


def build_graph(topo: SceneTopology, node_hist, obj_hist, contacts: ContactSet) -> DynamicsGraph:
    """Graph for one scene from numpy or torch position histories and a frozen contact set."""
    nh = [_t(p) if not torch.is_tensor(p) else p for p in node_hist]
    oh = [_t(p) if not torch.is_tensor(p) else p for p in obj_hist]
    if len(nh) < 2:
        raise InvalidInputError("graph construction needs a position history of at least two frames")
    for p in nh:
        if tuple(p.shape) != (topo.n_mesh, 3):
            raise InvalidInputError("node history frames must have shape (n_mesh, 3)")
    cidx = ContactIndex.from_contacts(topo, contacts)
    return compute_features(GraphIndex.build(topo, cidx), nh, oh, cidx)
