"""Mesh-based learned dynamics: graphs, model, rollouts, training and checkpoints."""
from rigidgraph.gnn.checkpoint import HEADER, load_model, load_training, save_checkpoint
from rigidgraph.gnn.graph import DynamicsGraph, SceneTopology, build_graph
from rigidgraph.gnn.model import GNNModel, ModelConfig
from rigidgraph.gnn.shape_match import shape_match
from rigidgraph.gnn.simulate import (
    LossSpec,
    RolloutGradient,
    RolloutState,
    initial_histories,
    rollout,
    rollout_gradient,
    state_from_scene,
    verlet_step,
)
from rigidgraph.gnn.train import TrainConfig, TrainResult, one_step_mse, train

__all__ = [
    "HEADER",
    "DynamicsGraph",
    "GNNModel",
    "LossSpec",
    "ModelConfig",
    "RolloutGradient",
    "RolloutState",
    "SceneTopology",
    "TrainConfig",
    "TrainResult",
    "build_graph",
    "initial_histories",
    "load_model",
    "load_training",
    "one_step_mse",
    "rollout",
    "rollout_gradient",
    "save_checkpoint",
    "shape_match",
    "state_from_scene",
    "train",
    "verlet_step",
]
