"""Command-line pipeline: identify -> scale -> train -> rollout, plus push optimization.

Each subcommand reads ``key=value`` settings from ``--config`` and from
trailing ``key=value`` arguments (which win), rejects unknown keys, and writes
the fully resolved settings to ``<out>/config.resolved``.  Failures exit
nonzero with a single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from rigidgraph.errors import InvalidInputError, NumericalFailure

REQUIRED = object()


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any = REQUIRED
    fmt: Callable[[Any], str] = str


def _floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise InvalidInputError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise InvalidInputError(f"expected comma-separated integers, got {s!r}") from None


def _paths(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _num(parse):
    def f(s: str):
        try:
            return parse(s)
        except ValueError:
            raise InvalidInputError(f"{s!r} is not a valid {parse.__name__}") from None

    return f


def _fmt_float(x) -> str:
    return f"{x:.17g}"


def _fmt_seq(xs) -> str:
    return ",".join(_fmt_float(x) if isinstance(x, float) else str(x) for x in xs)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else _num(float)(s)


F = lambda d=REQUIRED: Key(_num(float), d, _fmt_float)
I = lambda d=REQUIRED: Key(_num(int), d)
S = lambda d=REQUIRED: Key(str, d)
FS = lambda d=REQUIRED: Key(_floats, d, _fmt_seq)
IS = lambda d=REQUIRED: Key(_ints, d, _fmt_seq)
PS = lambda d=REQUIRED: Key(_paths, d, ",".join)
OF = lambda: Key(_opt_float, None, lambda x: "none" if x is None else _fmt_float(x))

MODEL_KEYS = {
    "latent": I(64),
    "hidden": I(64),
    "layers": I(5),
    "history": I(2),
    "contact_factor": F(0.6),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "identify": {
        "demos": PS(),
        "budget": I(300),
        "weights": FS(()),
        "gravity": FS((0.0, 0.0, -9.81)),
    },
    "scale": {
        "theta": S(),
        "mode": S("scaled"),
        "base_demos": PS(()),
        "n_copies": I(1),
        "n_trajectories": I(200),
        "n_objects_range": IS((2, 2)),
        "edge_length_range": FS((0.04, 0.06)),
        "mass_range": FS((0.05, 0.2)),
        "initial_speed_range": FS((0.4, 1.2)),
        "initial_region": FS((-0.1, 0.1, -0.1, 0.1)),
        "steps_per_trajectory": I(20),
        "gravity": FS((0.0, 0.0, -9.81)),
        "tetrahedron_fraction": F(0.0),
        "aim_jitter": F(0.15),
        "max_retries": I(10),
    },
    "train": {
        "dataset": S(),
        "resume": S(""),
        "updates": I(50000),
        "batch_size": I(16),
        "lr": F(1e-3),
        "lr_final": F(1e-5),
        "noise_std": F(1e-4),
        "val_fraction": F(0.1),
        "val_every": I(500),
        "stats_samples": I(2000),
        "d_eps": OF(),
        **MODEL_KEYS,
    },
    "rollout": {
        "checkpoint": S(),
        "init": S(),
        "reference": S(""),
        "steps": I(0),
    },
    "optimize": {
        "checkpoint": S(),
        "iters": I(50),
        "step_size": F(100.0),
        "edge": F(0.05),
        "mass": F(0.1),
        "gap": F(0.02),
        "target_offset": F(0.025),
        "target_radius": F(0.01),
        "horizon": I(20),
        "v_max": F(1.5),
        "initial_velocity": FS((0.7, 0.0)),
    },
}


def parse_settings(text: str, source: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep or not k.strip():
            raise InvalidInputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[k.strip()] = v.strip()
    return out


def resolve(command: str, file_text: str | None, overrides: list[str], seed: int) -> dict[str, Any]:
    schema = SCHEMAS[command]
    raw = parse_settings(file_text, "config") if file_text is not None else {}
    raw.update(parse_settings("\n".join(overrides), "command line"))
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise InvalidInputError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg: dict[str, Any] = {}
    for k, key in schema.items():
        if k in raw:
            cfg[k] = key.parse(raw[k])
        elif key.default is REQUIRED:
            raise InvalidInputError(f"missing required config key {k!r} for {command}")
        else:
            cfg[k] = key.default
    cfg["seed"] = seed
    return cfg


def write_resolved(command: str, cfg: dict[str, Any], out: Path) -> None:
    schema = SCHEMAS[command]
    lines = [f"command={command}", f"seed={cfg['seed']}"]
    lines += [f"{k}={schema[k].fmt(cfg[k])}" for k in schema]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_identify(cfg, out: Path) -> None:
    from rigidgraph.sysid import IdentDataset, ParamBounds, identify, write_history, write_theta
    from rigidgraph.teacher import TeacherConfig
    from rigidgraph.trajectory import read_trajectory

    if not cfg["demos"]:
        raise InvalidInputError("demos: at least one demonstration file is required")
    demos = [read_trajectory(p) for p in cfg["demos"]]
    ds = IdentDataset(demos, np.array(cfg["weights"]) if cfg["weights"] else None)
    res = identify(ds, ParamBounds(), cfg["budget"], cfg["seed"], TeacherConfig())
    write_theta(out / "theta.txt", res.params, res.loss)
    write_history(out / "ident_history.csv", res.history)
    print(f"initial_loss={res.initial_loss:.6g} final_loss={res.loss:.6g}")


def cmd_scale(cfg, out: Path) -> None:
    from rigidgraph.datagen import Dataset, ScalingSpec, augment_rotate_z, scale_dataset, write_dataset
    from rigidgraph.sysid import read_theta
    from rigidgraph.trajectory import read_trajectory

    params = read_theta(cfg["theta"])
    fields = [
        "n_trajectories", "n_objects_range", "edge_length_range", "mass_range", "initial_speed_range",
        "initial_region", "steps_per_trajectory", "gravity", "tetrahedron_fraction", "aim_jitter", "max_retries",
    ]
    if cfg["mode"] == "scaled":
        spec = ScalingSpec(seed=cfg["seed"], **{k: cfg[k] for k in fields})
        ds = scale_dataset(spec, params)
    elif cfg["mode"] == "augmented":
        if not cfg["base_demos"]:
            raise InvalidInputError("base_demos: augmentation needs at least one base trajectory")
        base = Dataset([read_trajectory(p) for p in cfg["base_demos"]], "real-substitute", params)
        ds = augment_rotate_z(base, cfg["n_copies"])
        ds.params_used = params
    else:
        raise InvalidInputError(f"mode must be 'scaled' or 'augmented', got {cfg['mode']!r}")
    write_dataset(ds, out)
    print(f"wrote {len(ds)} trajectories to {out}")


def cmd_train(cfg, out: Path) -> None:
    from rigidgraph.datagen import read_dataset
    from rigidgraph.gnn.checkpoint import load_training, save_checkpoint
    from rigidgraph.gnn.model import ModelConfig
    from rigidgraph.gnn.train import TrainConfig, train

    ds = read_dataset(cfg["dataset"])
    model_cfg = ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    tc = TrainConfig(
        model=model_cfg,
        seed=cfg["seed"],
        **{k: cfg[k] for k in ("updates", "batch_size", "lr", "lr_final", "noise_std", "val_fraction",
                               "val_every", "stats_samples", "d_eps")},
    )
    resume = None
    if cfg["resume"]:
        resume, old = load_training(cfg["resume"])
        if old is not None and old.model != model_cfg:
            raise InvalidInputError(f"{cfg['resume']}: model config differs from the requested one")
    res = train(ds, tc, resume=resume, log=lambda s: print(s, flush=True))
    save_checkpoint(out / "model.ckpt", res, tc)
    lines = ["update,train_mse,val_mse"] + [f"{u},{a:.17g},{b:.17g}" for u, a, b in res.curve]
    (out / "train_curve.csv").write_text("\n".join(lines) + "\n")
    print(f"best_val={res.best_val:.6g} at update {res.best_update}")


def rollout_errors(pred, ref) -> list[tuple[int, int, float, float]]:
    from rigidgraph.geom import geodesic_angle

    rows = []
    for t in range(pred.n_steps + 1):
        Rp, Rr = pred.rotmats(t), ref.rotmats(t)
        for b in range(pred.n_bodies):
            dx = float(np.linalg.norm(pred.positions[t, b] - ref.positions[t, b]))
            rows.append((t, b, dx, geodesic_angle(Rp[b], Rr[b])))
    return rows


def cmd_rollout(cfg, out: Path) -> None:
    from rigidgraph.gnn.checkpoint import load_model
    from rigidgraph.gnn.simulate import rollout
    from rigidgraph.teacher import scene_from_trajectory
    from rigidgraph.trajectory import read_trajectory, write_trajectory

    model = load_model(cfg["checkpoint"])
    init = read_trajectory(cfg["init"])
    ref = read_trajectory(cfg["reference"]) if cfg["reference"] else init
    if ref.n_bodies != init.n_bodies:
        raise InvalidInputError(
            f"{cfg['reference']}: {ref.n_bodies} bodies but the initial condition has {init.n_bodies}"
        )
    for b, (a, r) in enumerate(zip(init.specs, ref.specs)):
        if a.mesh.vertices.shape != r.mesh.vertices.shape:
            raise InvalidInputError(f"{cfg['reference']}: mesh of body {b} differs from the initial condition")
    steps = cfg["steps"] or ref.n_steps
    if steps < 1:
        raise InvalidInputError("steps: need at least one step (or a reference with several frames)")
    pred = rollout(model, scene_from_trajectory(init), steps)
    write_trajectory(pred, out / "pred.traj")
    lines = ["step,body,pos_error,ang_error"]
    if ref.n_steps >= steps:
        for t, b, dx, da in rollout_errors(pred, ref.slice(0, steps + 1)):
            lines.append(f"{t},{b},{dx:.17g},{da:.17g}")
    (out / "errors.csv").write_text("\n".join(lines) + "\n")


def cmd_optimize(cfg, out: Path) -> None:
    from rigidgraph.gnn.checkpoint import load_model
    from rigidgraph.optimctl import canonical_task, optimize_push

    model = load_model(cfg["checkpoint"])
    task = canonical_task(cfg["edge"], cfg["mass"], cfg["gap"], cfg["target_offset"], cfg["target_radius"], cfg["horizon"])
    task.v_max = cfg["v_max"]
    if len(cfg["initial_velocity"]) != 2:
        raise InvalidInputError("initial_velocity: expected two components")
    task.initial_velocity = np.array(cfg["initial_velocity"])
    run = optimize_push(model, task, cfg["iters"], cfg["step_size"], cfg["seed"])
    run.write_csv(out / "optim_run.csv")
    (out / "optim_result.txt").write_text(
        f"converged={str(run.converged).lower()}\nfinal_loss={run.loss_history[-1]:.17g}\n"
        f"threshold={task.threshold:.17g}\niterations={len(run.loss_history) - 1}\n"
    )
    print(f"converged={run.converged} final_loss={run.loss_history[-1]:.6g}")


COMMANDS = {
    "identify": cmd_identify,
    "scale": cmd_scale,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "optimize": cmd_optimize,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigidgraph", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="key=value settings file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("settings", nargs="*", help="key=value overrides")
    return p


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, InvalidInputError):
        return "invalid-input"
    if isinstance(exc, NumericalFailure):
        return "numerical-failure"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed < 0 or args.seed >= 2**64:
            raise InvalidInputError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        text = None
        if args.config is not None:
            if not args.config.exists():
                raise InvalidInputError(f"{args.config}: no such config file")
            text = args.config.read_text()
        cfg = resolve(args.command, text, args.settings, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        write_resolved(args.command, cfg, args.out)
        COMMANDS[args.command](cfg, args.out)
    except (InvalidInputError, NumericalFailure, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {_error_kind(exc)}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
