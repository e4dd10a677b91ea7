"""Optimize the pusher's initial velocity on the canonical push task for several seeds.

    python scripts/push_optimization.py runs/pipeline/model/model.ckpt --out runs/push
"""
import argparse
from pathlib import Path

from rigidgraph.gnn import load_model
from rigidgraph.optimctl import canonical_task, optimize_push


def cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/push"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--iters", type=int, default=50)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    model = load_model(args.checkpoint)
    task = canonical_task()
    for seed in range(args.seeds):
        run = optimize_push(model, task, iters=args.iters, seed=seed)
        run.write_csv(args.out / f"optim_run_seed{seed}.csv")
        v = run.velocity_history[-1]
        print(f"seed {seed}: converged={run.converged} iterations={len(run.loss_history) - 1} "
              f"loss {run.loss_history[0]:.3g} -> {run.loss_history[-1]:.3g} v=({v[0]:.3f}, {v[1]:.3f})")


if __name__ == "__main__":
    cli()
