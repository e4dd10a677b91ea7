"""One-step supervised training on teacher trajectories."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from rigidgraph.collide import contact_pairs
from rigidgraph.errors import InvalidInputError
from rigidgraph.geom import RigidBodyState
from rigidgraph.gnn.graph import ContactIndex, DynamicsGraph, GraphIndex, SceneTopology, compute_features
from rigidgraph.gnn.model import GNNModel, ModelConfig
from rigidgraph.gnn.simulate import initial_histories
from rigidgraph.sysid import finite_diff_velocities
from rigidgraph.trajectory import Trajectory


@dataclass(frozen=True)
class TrainConfig:
    updates: int = 50000
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-5
    noise_std: float = 1e-4  # m, std of the newest history frame's perturbation
    val_fraction: float = 0.1
    val_every: int = 500
    stats_samples: int = 2000
    d_eps: float | None = None  # contact radius override; default from the model config
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.updates < 0 or self.batch_size < 1 or self.val_every < 1:
            raise InvalidInputError("updates >= 0, batch_size >= 1 and val_every >= 1 required")
        if not (0 < self.lr_final <= self.lr):
            raise InvalidInputError("need 0 < lr_final <= lr")
        if self.noise_std < 0 or not 0 <= self.val_fraction < 1:
            raise InvalidInputError("noise_std >= 0 and 0 <= val_fraction < 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        return cls(**d)


@dataclass
class TrajectorySamples:
    """Clean node/object positions for frames −h..T and the frozen contacts of frames 0..T−1."""

    topo: SceneTopology
    nodes: np.ndarray  # (T+h+1, n_mesh, 3)
    objs: np.ndarray  # (T+h+1, n_bodies, 3)
    contacts: list[ContactIndex]
    indices: list[GraphIndex]
    history: int

    @property
    def n_samples(self) -> int:
        return len(self.contacts)

    @property
    def dynamic_nodes(self) -> np.ndarray:
        return ~self.topo.static_body[self.topo.node_body]


def initial_velocities(traj: Trajectory) -> np.ndarray:
    """Recorded (N, 6) initial velocities, else the first backward difference."""
    if traj.velocities0 is not None:
        return traj.velocities0
    v, w = finite_diff_velocities(traj)
    return np.hstack([v[0], w[0]])


def prepare_trajectory(traj: Trajectory, history: int, d_eps: float) -> TrajectorySamples:
    if traj.n_steps < 1:
        raise InvalidInputError("training trajectories need at least two frames")
    vel = initial_velocities(traj)
    with torch.no_grad():
        st = initial_histories(traj.specs, traj.positions[0], traj.quats[0], vel[:, :3], vel[:, 3:], traj.dt, history)
    topo = st.topo
    nodes = [p.numpy() for p in st.node_hist[:-1]]
    objs = [x.numpy() for x in st.obj_hist[:-1]]
    contacts, indices = [], []
    for t in range(traj.n_steps + 1):
        X, R = traj.positions[t], traj.rotmats(t)
        nodes.append(topo.nodes_from_poses(X, R))
        objs.append(X.copy())
        if t < traj.n_steps:
            scene = [(s, RigidBodyState(X[b], traj.quats[t, b])) for b, s in enumerate(traj.specs)]
            cidx = ContactIndex.from_contacts(topo, contact_pairs(scene, d_eps))
            contacts.append(cidx)
            indices.append(GraphIndex.build(topo, cidx))
    return TrajectorySamples(topo, np.array(nodes), np.array(objs), contacts, indices, history)


def _t(a) -> torch.Tensor:
    return torch.as_tensor(a, dtype=torch.float64)


def sample_graph(ts: TrajectorySamples, t: int, rng: np.random.Generator | None = None, noise_std: float = 0.0):
    """Graph of sample t and its (un-normalized) acceleration target on all mesh nodes."""
    h = ts.history
    nodes = ts.nodes[t : t + h + 1].copy()
    objs = ts.objs[t : t + h + 1].copy()
    if rng is not None and noise_std > 0:
        step = noise_std / math.sqrt(h)
        dyn_n = ts.dynamic_nodes[None, :, None]
        dyn_o = (~ts.topo.static_body)[None, :, None]
        inc = rng.normal(0.0, step, size=(h,) + nodes.shape[1:])
        nodes[1:] += np.cumsum(inc, axis=0) * dyn_n
        inc = rng.normal(0.0, step, size=(h,) + objs.shape[1:])
        objs[1:] += np.cumsum(inc, axis=0) * dyn_o
    target = ts.nodes[t + h + 1] - 2.0 * nodes[-1] + nodes[-2]
    g = compute_features(ts.indices[t], [_t(p) for p in nodes], [_t(x) for x in objs], ts.contacts[t])
    return g, target


@dataclass
class TrainResult:
    model: GNNModel
    curve: list[tuple[int, float, float]]  # (update, train MSE, val MSE)
    best_val: float
    best_update: int
    state: dict = field(default_factory=dict)  # resumable optimizer/RNG state


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_val = int(round(val_fraction * n))
    if n >= 2 and val_fraction > 0:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batch_loss(model: GNNModel, graphs, targets, masks) -> torch.Tensor:
    g = DynamicsGraph.cat(graphs)
    pred = model(g)
    tgt = model.target_norm(_t(np.concatenate(targets)))
    m = torch.as_tensor(np.concatenate(masks))
    return ((pred[m] - tgt[m]) ** 2).mean()


def one_step_mse(model: GNNModel, samples: list[TrajectorySamples], chunk: int = 32) -> float:
    """Normalized one-step MSE over the dynamic nodes of every (clean) sample."""
    total, count = 0.0, 0
    items = [(ts, t) for ts in samples for t in range(ts.n_samples)]
    with torch.no_grad():
        for i in range(0, len(items), chunk):
            gs, tg, ms = [], [], []
            for ts, t in items[i : i + chunk]:
                g, a = sample_graph(ts, t)
                gs.append(g)
                tg.append(a)
                ms.append(ts.dynamic_nodes)
            n = int(sum(m.sum() for m in ms)) * 3
            total += float(_batch_loss(model, gs, tg, ms)) * n
            count += n
    return total / max(count, 1)


def fit_statistics(model: GNNModel, samples: list[TrajectorySamples], n_max: int, seed: int) -> None:
    items = [(ts, t) for ts in samples for t in range(ts.n_samples)]
    rng = np.random.default_rng([seed, 11])
    if len(items) > n_max:
        items = [items[i] for i in np.sort(rng.choice(len(items), n_max, replace=False))]
    graphs, targets = [], []
    for ts, t in items:
        g, a = sample_graph(ts, t)
        graphs.append(g)
        targets.append(a[ts.dynamic_nodes])
    model.fit_normalizers(graphs, _t(np.concatenate(targets)))


def prepare(trajs: list[Trajectory], config: TrainConfig) -> list[TrajectorySamples]:
    out = []
    for tr in trajs:
        d_eps = config.d_eps if config.d_eps is not None else config.model.contact_radius(tr.specs)
        out.append(prepare_trajectory(tr, config.model.history, d_eps))
    return out


def _optimizer_state(opt: torch.optim.Adam) -> dict:
    return copy.deepcopy(opt.state_dict())


def train(trajectories, config: TrainConfig = TrainConfig(), resume: TrainResult | None = None, log=None) -> TrainResult:
    """Train a model on ``trajectories`` (a list or a Dataset); returns the best-validation model.

    ``resume`` continues an earlier run (same data and config) from its saved
    optimizer, RNG and update counter.
    """
    trajs = list(getattr(trajectories, "trajectories", trajectories))
    if not trajs:
        raise InvalidInputError("training needs a non-empty dataset")
    torch.manual_seed(config.seed)
    tr_idx, va_idx = split_indices(len(trajs), config.val_fraction, config.seed)
    samples = prepare(trajs, config)
    train_s = [samples[i] for i in tr_idx]
    val_s = [samples[i] for i in va_idx] or train_s
    items = [(k, t) for k, ts in enumerate(train_s) for t in range(ts.n_samples)]
    if not items:
        raise InvalidInputError("training needs at least one sample")

    model = GNNModel(config.model)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    curve: list[tuple[int, float, float]] = []
    start = 0
    if resume is None:
        fit_statistics(model, train_s, config.stats_samples, config.seed)
        best_val = one_step_mse(model, val_s)
        best_state = copy.deepcopy(model.state_dict())
        best_update = 0
        curve.append((0, one_step_mse(model, train_s), best_val))
    else:
        st = resume.state
        model.load_state_dict(st["current"])
        opt.load_state_dict(st["optimizer"])
        rng.bit_generator.state = st["rng"]
        start = int(st["update"])
        curve = list(resume.curve)
        best_val, best_update = resume.best_val, resume.best_update
        best_state = copy.deepcopy(resume.model.state_dict())

    decay = math.log(config.lr_final / config.lr)
    running, n_run = 0.0, 0
    for u in range(start + 1, config.updates + 1):
        for grp in opt.param_groups:
            grp["lr"] = config.lr * math.exp(decay * (u - 1) / max(config.updates, 1))
        pick = rng.integers(0, len(items), size=config.batch_size)
        gs, tg, ms = [], [], []
        for i in pick:
            ts = train_s[items[i][0]]
            g, a = sample_graph(ts, items[i][1], rng, config.noise_std)
            gs.append(g)
            tg.append(a)
            ms.append(ts.dynamic_nodes)
        opt.zero_grad()
        loss = _batch_loss(model, gs, tg, ms)
        loss.backward()
        opt.step()
        running += float(loss.detach())
        n_run += 1
        if u % config.val_every == 0 or u == config.updates:
            val = one_step_mse(model, val_s)
            curve.append((u, running / n_run, val))
            if log is not None:
                log(f"update {u} train {running / n_run:.4g} val {val:.4g}")
            running, n_run = 0.0, 0
            if val < best_val:
                best_val, best_update = val, u
                best_state = copy.deepcopy(model.state_dict())

    state = {
        "current": copy.deepcopy(model.state_dict()),
        "optimizer": _optimizer_state(opt),
        "rng": rng.bit_generator.state,
        "update": config.updates if config.updates > start else start,
    }
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, curve, best_val, best_update, state)
