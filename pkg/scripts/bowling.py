"""Roll a pusher cube into a triangle of ten cubes with a trained model.

    python scripts/bowling.py runs/pipeline/model/model.ckpt --out runs/bowling.traj
"""
import argparse
from pathlib import Path

import numpy as np

from rigidgraph.geom import BodySpec, RigidBodyState, box_mesh, ground_plane, ground_state
from rigidgraph.gnn import load_model, rollout
from rigidgraph.teacher import SceneState
from rigidgraph.trajectory import write_trajectory


def bowling_scene(speed=1.0, edge=0.05, mass=0.1, spacing=0.065):
    cube = BodySpec.from_mesh(box_mesh(edge), mass, name="cube")
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    h = edge / 2
    bodies = [(ground_plane(), ground_state()), (cube, RigidBodyState([-0.1, 0.0, h], ident, [speed, 0.0, 0.0]))]
    for row in range(4):
        for k in range(row + 1):
            bodies.append((cube, RigidBodyState([row * spacing * 0.9, (k - row / 2) * spacing, h], ident)))
    return SceneState(bodies)


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/bowling.traj"))
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--speed", type=float, default=1.0)
    args = ap.parse_args()
    pred = rollout(load_model(args.checkpoint), bowling_scene(args.speed), args.steps)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(pred, args.out)
    moved = np.linalg.norm(pred.positions[-1] - pred.positions[0], axis=1)
    print(f"wrote {args.out}; displacement per body (m): {np.round(moved[1:], 4).tolist()}")


if __name__ == "__main__":
    cli()
