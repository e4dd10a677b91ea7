"""Encode-process-decode network over :class:`~rigidgraph.gnn.graph.DynamicsGraph`."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from rigidgraph.errors import InvalidInputError
from rigidgraph.gnn.graph import FACE_EDGE_DIM, MESH_EDGE_DIM, DynamicsGraph, mesh_node_dim, obj_node_dim

FEATURE_BLOCKS = ("mesh_x", "obj_x", "mm_e", "om_e", "mo_e", "ff_e")


@dataclass(frozen=True)
class ModelConfig:
    latent: int = 64
    hidden: int = 64
    layers: int = 5
    history: int = 2
    contact_factor: float = 0.6  # face-face radius as a multiple of the shortest dynamic edge

    def __post_init__(self):
        if self.latent < 1 or self.hidden < 1 or self.layers < 0 or self.history < 1:
            raise InvalidInputError("latent/hidden >= 1, layers >= 0 and history >= 1 required")
        if not self.contact_factor > 0:
            raise InvalidInputError("contact_factor must be positive")

    def contact_radius(self, specs) -> float:
        edges = [s.mesh.shortest_edge() for s in specs if not s.is_static] or [s.mesh.shortest_edge() for s in specs]
        return self.contact_factor * min(edges)

    def to_dict(self) -> dict:
        return asdict(self)


class MLP(nn.Sequential):
    """Two hidden layers with SiLU, optionally followed by layer normalization."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, layer_norm: bool = True):
        mods = [nn.Linear(n_in, n_hidden), nn.SiLU(), nn.Linear(n_hidden, n_hidden), nn.SiLU(), nn.Linear(n_hidden, n_out)]
        if layer_norm:
            mods.append(nn.LayerNorm(n_out))
        super().__init__(*mods)


class Normalizer(nn.Module):
    """Running z-score statistics; degenerate (near-constant) features keep unit scale."""

    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("std", torch.ones(dim, dtype=torch.float64))

    def fit(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> None:
        """Per-column statistics, optionally over the rows selected by a (rows,) or (rows, dim) mask."""
        if mask is None:
            mask = torch.ones(x.shape, dtype=torch.bool)
        elif mask.dim() == 1:
            mask = mask[:, None].expand(x.shape)
        w = mask.to(x.dtype)
        n = w.sum(dim=0)
        seen = n > 0
        n = n.clamp(min=1)
        m = (x * w).sum(dim=0) / n
        var = (((x - m) ** 2) * w).sum(dim=0) / n
        s = var.sqrt()
        self.mean.copy_(torch.where(seen, m, self.mean))
        self.std.copy_(torch.where(seen & (s > 1e-8), s, torch.where(seen, torch.ones_like(s), self.std)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def inverse(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean


class ProcessorLayer(nn.Module):
    def __init__(self, D: int, H: int):
        super().__init__()
        self.mm = MLP(3 * D, H, D)
        self.om = MLP(3 * D, H, D)
        self.mo = MLP(3 * D, H, D)
        self.ff = MLP(9 * D, H, 3 * D)
        self.mesh = MLP(2 * D, H, D)
        self.obj = MLP(2 * D, H, D)

    def forward(self, g: DynamicsGraph, vm, vo, e_mm, e_om, e_mo, e_ff):
        idx = g.index
        D = vm.shape[1]
        s, r = torch.as_tensor(idx.mm_send), torch.as_tensor(idx.mm_recv)
        no = torch.as_tensor(idx.node_obj)
        e_mm = e_mm + self.mm(torch.cat([e_mm, vm[s], vm[r]], dim=1))
        e_om = e_om + self.om(torch.cat([e_om, vo[no], vm], dim=1))
        e_mo = e_mo + self.mo(torch.cat([e_mo, vm, vo[no]], dim=1))
        agg_m = torch.zeros_like(vm).index_add(0, r, e_mm) + e_om
        agg_o = torch.zeros_like(vo).index_add(0, no, e_mo)
        if e_ff.shape[0] > 0:
            fs, fr = torch.as_tensor(idx.ff_send), torch.as_tensor(idx.ff_recv)
            E = e_ff.shape[0]
            e_ff = e_ff + self.ff(torch.cat([e_ff, vm[fs].reshape(E, 3 * D), vm[fr].reshape(E, 3 * D)], dim=1))
            agg_m = agg_m.index_add(0, fr.reshape(-1), e_ff.reshape(E * 3, D))
        vm = vm + self.mesh(torch.cat([vm, agg_m], dim=1))
        vo = vo + self.obj(torch.cat([vo, agg_o], dim=1))
        return vm, vo, e_mm, e_om, e_mo, e_ff


def dynamic_rows(g: DynamicsGraph) -> dict[str, torch.Tensor]:
    """Row masks selecting the feature entries that describe dynamic bodies.

    The static ground is far larger than the objects, so letting its rows into
    the statistics would squash the object-scale features towards zero.  Face
    edge offsets are masked per side.
    """
    idx = g.index
    dyn = torch.as_tensor(~idx.mesh_static)
    s, r = torch.as_tensor(idx.mm_send), torch.as_tensor(idx.mm_recv)
    fs, fr = torch.as_tensor(idx.ff_send).reshape(-1, 3), torch.as_tensor(idx.ff_recv).reshape(-1, 3)
    E = fs.shape[0]
    ff = torch.ones((E, FACE_EDGE_DIM), dtype=torch.bool)
    ff[:, :9] = dyn[fs[:, 0]][:, None]
    ff[:, 9:18] = dyn[fr[:, 0]][:, None]
    return {
        "mesh_x": dyn,
        "obj_x": torch.as_tensor(~idx.obj_static),
        "mm_e": dyn[s] & dyn[r],
        "om_e": dyn,
        "mo_e": dyn,
        "ff_e": ff,
    }


class GNNModel(nn.Module):
    """Learned per-vertex acceleration model.

    Outputs are in normalized target units; :meth:`predict` maps them back to
    position increments per frame squared.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        D, H, h = config.latent, config.hidden, config.history
        dims = {
            "mesh_x": mesh_node_dim(h),
            "obj_x": obj_node_dim(h),
            "mm_e": MESH_EDGE_DIM,
            "om_e": MESH_EDGE_DIM,
            "mo_e": MESH_EDGE_DIM,
            "ff_e": FACE_EDGE_DIM,
        }
        self.norms = nn.ModuleDict({k: Normalizer(d) for k, d in dims.items()})
        self.target_norm = Normalizer(3)
        self.enc = nn.ModuleDict(
            {k: MLP(d, H, 3 * D if k == "ff_e" else D) for k, d in dims.items()}
        )
        self.layers = nn.ModuleList([ProcessorLayer(D, H) for _ in range(config.layers)])
        self.decoder = MLP(D, H, 3, layer_norm=False)
        with torch.no_grad():
            self.decoder[-1].weight.zero_()
            self.decoder[-1].bias.zero_()
        self.double()

    def encode(self, g: DynamicsGraph):
        return tuple(self.enc[k](self.norms[k](getattr(g, k))) for k in FEATURE_BLOCKS)

    def latents(self, g: DynamicsGraph):
        vm, vo, e_mm, e_om, e_mo, e_ff = self.encode(g)
        for layer in self.layers:
            vm, vo, e_mm, e_om, e_mo, e_ff = layer(g, vm, vo, e_mm, e_om, e_mo, e_ff)
        return vm, vo

    def decode(self, vm: torch.Tensor) -> torch.Tensor:
        return self.decoder(vm)

    def forward(self, g: DynamicsGraph) -> torch.Tensor:
        return self.decode(self.latents(g)[0])

    def predict(self, g: DynamicsGraph) -> torch.Tensor:
        """De-normalized per-mesh-node accelerations (position units per frame²)."""
        return self.target_norm.inverse(self.forward(g))

    def fit_normalizers(self, graphs: list[DynamicsGraph], targets: torch.Tensor) -> None:
        with torch.no_grad():
            masks = [dynamic_rows(g) for g in graphs]
            for k in FEATURE_BLOCKS:
                self.norms[k].fit(torch.cat([getattr(g, k) for g in graphs]), torch.cat([m[k] for m in masks]))
            self.target_norm.fit(targets)
