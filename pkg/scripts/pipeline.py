"""Run the whole pipeline on synthetic demonstrations.

identify -> scale -> train -> rollout, each stage through the command-line
interface so that every output directory holds its resolved config.

    python scripts/pipeline.py --out runs/demo --updates 10000
"""
import argparse
from pathlib import Path

import numpy as np

from rigidgraph.cli import main
from rigidgraph.datagen import ScalingSpec, scale_dataset
from rigidgraph.geom import BodySpec, RigidBodyState, axis_angle_quat, box_mesh, ground_plane, ground_state
from rigidgraph.teacher import ContactParams, SceneState, rollout
from rigidgraph.trajectory import write_trajectory

# stands in for the unknown real-world parameters
HIDDEN = ContactParams(0.92, 0.97, 0.002, 0.03, 2.5, 0.008, 1.5, 0.4)
DEMOS = [(0.8, 0.02, 0.0, 0.0), (1.0, 0.03, 0.3, 0.01), (0.9, 0.01, -0.2, -0.01)]


def demo_scene(speed, gap, yaw, dy):
    cube = BodySpec.from_mesh(box_mesh(0.05), 0.1, name="cube")
    ident = np.array([1.0, 0.0, 0.0, 0.0])
    return SceneState(
        [
            (ground_plane(), ground_state()),
            (cube, RigidBodyState([0, 0, 0.025], ident, [speed, 0, 0])),
            (cube, RigidBodyState([0.05 + gap, dy, 0.025], axis_angle_quat([0, 0, 1], yaw))),
        ]
    )


def run(argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    ap.add_argument("--budget", type=int, default=300)
    ap.add_argument("--trajectories", type=int, default=200)
    ap.add_argument("--updates", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out
    (out / "demos").mkdir(parents=True, exist_ok=True)
    demos = []
    for k, d in enumerate(DEMOS):
        p = out / "demos" / f"{k}.traj"
        write_trajectory(rollout(demo_scene(*d), HIDDEN, 20), p)
        demos.append(str(p))

    run(["identify", "--seed", args.seed, "--out", out / "identify", f"demos={','.join(demos)}", f"budget={args.budget}"])
    run(["scale", "--seed", args.seed, "--out", out / "data", f"theta={out / 'identify' / 'theta.txt'}",
         f"n_trajectories={args.trajectories}"])
    run(["train", "--seed", args.seed, "--out", out / "model", f"dataset={out / 'data'}", f"updates={args.updates}",
         "latent=32", "hidden=32", "layers=3", "batch_size=8", "noise_std=1e-5", "val_every=250"])

    held = scale_dataset(ScalingSpec(n_trajectories=1, seed=args.seed + 1000), HIDDEN).trajectories[0]
    write_trajectory(held, out / "heldout.traj")
    run(["rollout", "--out", out / "rollout", f"checkpoint={out / 'model' / 'model.ckpt'}",
         f"init={out / 'heldout.traj'}", f"reference={out / 'heldout.traj'}"])
    print(f"outputs in {out}")


if __name__ == "__main__":
    cli()
