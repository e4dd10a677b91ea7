"""Model checkpoints: a versioned ``.npz`` container of float64 arrays plus JSON metadata.

Keys::

    header            "rigidgraph-model-v1"
    meta              JSON: model config, train config, curve, best validation, RNG state
    w/<name>          best-model weights and normalization statistics
    cur/<name>        weights at the last update (for resuming)
    opt/<i>/<slot>    Adam moments and step counters per parameter index
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from rigidgraph.errors import InvalidInputError
from rigidgraph.gnn.model import GNNModel, ModelConfig
from rigidgraph.gnn.train import TrainConfig, TrainResult

HEADER = "rigidgraph-model-v1"


def _tensors(prefix: str, state: dict) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().numpy().astype(np.float64) for k, v in state.items()}


def _untensors(arrs, prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix) + 1
    return {k[n:]: torch.from_numpy(np.array(arrs[k])) for k in arrs.files if k.startswith(prefix + "/")}


def save_checkpoint(path, result: TrainResult | GNNModel, train_config: TrainConfig | None = None) -> Path:
    """Write a model (or a full training result, which also makes the run resumable)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = result.model if isinstance(result, TrainResult) else result
    meta = {"model": model.config.to_dict()}
    arrays = _tensors("w", model.state_dict())
    if train_config is not None:
        meta["train"] = train_config.to_dict()
    if isinstance(result, TrainResult):
        meta.update(
            curve=[list(c) for c in result.curve],
            best_val=result.best_val,
            best_update=result.best_update,
        )
        st = result.state
        if st:
            meta["rng"] = st["rng"]
            meta["update"] = st["update"]
            arrays.update(_tensors("cur", st["current"]))
            opt = st["optimizer"]
            meta["opt_groups"] = opt["param_groups"]
            for i, slots in opt["state"].items():
                for slot, val in slots.items():
                    arrays[f"opt/{i}/{slot}"] = torch.as_tensor(val).detach().numpy().astype(np.float64)
    entries = {"header": np.array(HEADER), "meta": np.array(json.dumps(meta, sort_keys=True))}
    entries.update(sorted(arrays.items()))
    _write_npz(path, entries)
    return path


def _write_npz(path: Path, entries: dict[str, np.ndarray]) -> None:
    # fixed timestamps keep identical checkpoints byte-identical
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            data = io.BytesIO()
            np.lib.format.write_array(data, np.asarray(arr), allow_pickle=False)
            zf.writestr(info, data.getvalue())
    path.write_bytes(buf.getvalue())


def _open(path):
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"{path}: no such checkpoint")
    try:
        arrs = np.load(path, allow_pickle=False)
        header = str(arrs["header"])
    except Exception:
        raise InvalidInputError(f"{path}: not a checkpoint (expected header {HEADER!r})") from None
    if header != HEADER:
        raise InvalidInputError(f"{path}: checkpoint header {header!r} is not {HEADER!r}")
    return arrs, json.loads(str(arrs["meta"]))


def load_model(path) -> GNNModel:
    arrs, meta = _open(path)
    model = GNNModel(ModelConfig(**meta["model"]))
    try:
        model.load_state_dict(_untensors(arrs, "w"))
    except RuntimeError as exc:
        raise InvalidInputError(f"{path}: weights do not match the stored config ({exc})") from None
    model.eval()
    return model


def load_training(path) -> tuple[TrainResult, TrainConfig | None]:
    """Full training result for resuming, plus the training config it was made with."""
    arrs, meta = _open(path)
    model = load_model(path)
    if "update" not in meta:
        raise InvalidInputError(f"{path}: checkpoint holds no resumable training state")
    opt_state = {}
    for k in arrs.files:
        if k.startswith("opt/"):
            _, i, slot = k.split("/", 2)
            val = torch.from_numpy(np.array(arrs[k]))
            opt_state.setdefault(int(i), {})[slot] = val
    state = {
        "current": _untensors(arrs, "cur"),
        "optimizer": {"state": opt_state, "param_groups": meta["opt_groups"]},
        "rng": meta["rng"],
        "update": meta["update"],
    }
    curve = [tuple(c) for c in meta.get("curve", [])]
    curve = [(int(u), float(a), float(b)) for u, a, b in curve]
    tc = TrainConfig.from_dict(meta["train"]) if "train" in meta else None
    return TrainResult(model, curve, float(meta["best_val"]), int(meta["best_update"]), state), tc
