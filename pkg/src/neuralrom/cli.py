"""Command-line surface: generate | train | simulate | bench | serve.

Every command is deterministic given ``--seed``. Failures exit nonzero with a
machine-readable JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import report as reportmod
from .dataset import Frame, SnapshotSet, load_set, save_set
from .errors import NeuralRomError, ValidationError
from .full_sim import FullState, full_step, run_trajectory
from .networks import load_checkpoint
from .reduced_sim import (
    RemeshEvent,
    ReducedState,
    SurfaceDecoder,
    apply_remesh,
    reduced_step,
    sample_cubature,
)
from .scenario import load_events, load_scenario
from .trainer import TrainConfig, fit


def _scenario_seed(args, scn) -> int:
    return args.seed if args.seed is not None else scn.seed


def cmd_generate(args) -> int:
    scn = load_scenario(args.scenario)
    seed = _scenario_seed(args, scn)
    t0 = time.perf_counter()
    frames: list[Frame] = []
    cardinality = None
    for k, mesh_id in enumerate(scn.mesh_order):
        mesh = scn.meshes[mesh_id]
        n_samples = scn.samples_per_frame or mesh.n_vertices
        if n_samples > mesh.n_vertices:
            raise ValidationError(
                f"samples_per_frame {n_samples} exceeds vertex count of mesh {mesh_id!r}"
            )
        if cardinality is None:
            cardinality = n_samples
        sset = run_trajectory(
            mesh,
            scn.material,
            scn.load,
            scn.integrator,
            steps=scn.steps,
            snapshot_every=scn.snapshot_every,
            samples_per_frame=n_samples,
            seed=seed + k,
            mesh_id=mesh_id,
        )
        frames.extend(sset.frames)
    merged = SnapshotSet(
        frames=frames,
        cardinality=cardinality,
        metadata={"scenario": scn.name, "mesh_ids": scn.mesh_order, "seed": seed},
    )
    save_set(merged, args.out)
    elapsed = time.perf_counter() - t0
    print(
        json.dumps(
            {
                "dataset": str(args.out),
                "frames": len(merged),
                "cardinality": cardinality,
                "meshes": scn.mesh_order,
                "seconds": round(elapsed, 3),
            }
        )
    )
    return 0


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(args.config).read_text()))
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.latent_dim is not None:
        overrides["latent_dim"] = args.latent_dim
    if args.seed is not None:
        overrides["seed"] = args.seed
    if "lr_drops" in overrides:
        overrides["lr_drops"] = tuple(tuple(x) for x in overrides["lr_drops"])
    return TrainConfig(**overrides)


def cmd_train(args) -> int:
    dataset = load_set(args.dataset)
    cfg = _train_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    metrics_path = out.with_suffix(out.suffix + ".metrics.ndjson")
    if metrics_path.exists() and not args.resume:
        metrics_path.unlink()
    t0 = time.perf_counter()
    basis, enc, metrics = fit(
        dataset,
        cfg,
        checkpoint_path=out,
        metrics_path=metrics_path,
        resume=resume,
        log_every=args.log_every,
    )
    reportmod.write_loss_curve(metrics, out.with_suffix(out.suffix + ".loss.png"))
    print(
        json.dumps(
            {
                "checkpoint": str(out),
                "metrics": str(metrics_path),
                "epochs": len(metrics),
                "first_loss": metrics[0]["loss"] if metrics else None,
                "final_loss": metrics[-1]["loss"] if metrics else None,
                "seconds": round(time.perf_counter() - t0, 3),
            }
        )
    )
    return 0


def cmd_simulate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scn = load_scenario(args.scenario)
    events = load_events(args.events) if args.events else []
    seed = _scenario_seed(args, scn)
    basis = ck.basis

    mesh_id = args.mesh or scn.mesh_order[0]
    if mesh_id not in scn.meshes:
        raise ValidationError(f"unknown mesh id {mesh_id!r}")
    mesh = scn.meshes[mesh_id]
    scheme = sample_cubature(mesh, scn.cubature_samples, seed, basis)
    decoder = SurfaceDecoder(basis, mesh)
    state = ReducedState.rest(basis.r, h=scn.integrator.h)

    by_step: dict[int, list] = {}
    for ev in events:
        by_step.setdefault(ev.step, []).append(ev)

    frames = []
    frame_faces = []
    event_log = []
    for step in range(1, scn.steps + 1):
        for ev in by_step.get(step, []):
            q_before = state.q.tobytes()
            if ev.swap_mesh is not None:
                if ev.swap_mesh not in scn.meshes:
                    raise ValidationError(f"unknown swap mesh id {ev.swap_mesh!r}")
                mesh_id = ev.swap_mesh
                mesh = scn.meshes[mesh_id]
                remesh = RemeshEvent(new_mesh=mesh, time=state.t)
            else:
                remesh = RemeshEvent(excise=ev.region, time=state.t)
            scheme = apply_remesh(scheme, remesh, basis, seed)
            mesh = scheme.mesh
            decoder = SurfaceDecoder(basis, mesh)
            entry = {
                "step": step,
                "kind": "swap" if ev.swap_mesh else "excise",
                "mesh": mesh_id,
                "points": scheme.n_points,
                "new_evaluations": scheme.stats.n_new_evaluations,
                "q_preserved": state.q.tobytes() == q_before,
            }
            event_log.append(entry)
            print(json.dumps({"event": entry}))
        state = reduced_step(scheme, state, scn.load, scn.material, scn.solver)
        if step % scn.snapshot_every == 0:
            frames.append(
                Frame(
                    t=state.t,
                    positions=decoder.reference,
                    displacements=decoder.displacements(state.q),
                    mesh_id=mesh_id,
                )
            )
            frame_faces.append(decoder.compact_faces)

    out = Path(args.out)
    fmt = args.format
    sizes = {len(f) for f in frames}
    if fmt == "auto":
        fmt = "lcrs" if len(sizes) == 1 else "obj"
    if fmt == "lcrs":
        if len(sizes) != 1:
            raise ValidationError(
                "surface cardinality changed mid-run (remesh events); use --format obj"
            )
        save_set(
            SnapshotSet(
                frames=frames,
                cardinality=sizes.pop(),
                metadata={"scenario": scn.name, "seed": seed, "kind": "surface_trajectory"},
            ),
            out,
        )
    else:
        out.mkdir(parents=True, exist_ok=True)
        for k, (f, faces) in enumerate(zip(frames, frame_faces)):
            deformed = f.positions + f.displacements
            with open(out / f"frame_{k:06d}.obj", "w") as fh:
                for v in deformed:
                    fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
                for tri in faces:
                    fh.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")
    print(
        json.dumps(
            {
                "trajectory": str(out),
                "format": fmt,
                "frames": len(frames),
                "events": event_log,
            }
        )
    )
    return 0


def cmd_bench(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    scn = load_scenario(args.scenario)
    seed = _scenario_seed(args, scn)
    basis = ck.basis
    mesh = scn.first_mesh
    steps = max(args.steps, 100)

    state_f = FullState.rest(mesh)
    full_step(mesh, scn.material, state_f, scn.load, scn.integrator)  # warmup/caches
    t0 = time.perf_counter()
    state_f = FullState.rest(mesh)
    for _ in range(steps):
        state_f = full_step(mesh, scn.material, state_f, scn.load, scn.integrator)
    full_ms = (time.perf_counter() - t0) / steps * 1e3

    scheme = sample_cubature(mesh, scn.cubature_samples, seed, basis)
    state_r = ReducedState.rest(basis.r, h=scn.integrator.h)
    reduced_step(scheme, state_r, scn.load, scn.material, scn.solver)  # warmup
    t0 = time.perf_counter()
    state_r = ReducedState.rest(basis.r, h=scn.integrator.h)
    for _ in range(steps):
        state_r = reduced_step(scheme, state_r, scn.load, scn.material, scn.solver)
    reduced_ms = (time.perf_counter() - t0) / steps * 1e3

    rows = {
        "mesh_vertices": mesh.n_vertices,
        "mesh_tets": mesh.n_tets,
        "latent_dim": basis.r,
        "cubature_points": scheme.n_points,
        "steps": steps,
        "full_step_ms": round(full_ms, 4),
        "reduced_step_ms": round(reduced_ms, 4),
        "speedup": round(full_ms / reduced_ms, 2),
        "cubature_selection_ms": round(scheme.stats.selection_seconds * 1e3, 4),
        "basis_cache_fill_ms": round(scheme.stats.cache_fill_seconds * 1e3, 4),
    }
    if args.out:
        prefix = Path(args.out)
        reportmod.write_bench_report(
            rows, prefix.with_suffix(".csv"), prefix.with_suffix(".png")
        )
    print(json.dumps(rows, indent=2))
    return 0


def cmd_serve(args) -> int:
    from .service import SimService

    ck = load_checkpoint(args.checkpoint)
    scn = load_scenario(args.scenario)
    service = SimService(
        basis=ck.basis,
        scenario=scn,
        port=args.port,
        ws_port=args.ws_port,
        seed=_scenario_seed(args, scn),
        rate_hz=args.rate,
    )
    print(json.dumps({"serving": service.address, "ws": service.ws_address}), flush=True)
    try:
        service.run_forever()
    except KeyboardInterrupt:
        service.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuralrom",
        description="Discretization-agnostic reduced-order elastic simulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run full-space simulations into a training set")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--out", required=True, help="output LCRS dataset path")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the neural basis and encoder on a dataset")
    p.add_argument("dataset", help="LCRS dataset path")
    p.add_argument("--out", required=True, help="output LCRW checkpoint path")
    p.add_argument("--config", default=None, help="TrainConfig overrides (JSON file)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0, help="print a metric line every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run reduced dynamics with scripted remesh events")
    p.add_argument("checkpoint", help="LCRW checkpoint")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--events", default=None, help="events JSON file")
    p.add_argument("--mesh", default=None, help="mesh id to simulate (default: first)")
    p.add_argument("--out", required=True, help="output trajectory path (file or directory)")
    p.add_argument("--format", choices=("auto", "lcrs", "obj"), default="auto")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time full vs reduced stepping, report speedup")
    p.add_argument("checkpoint", help="LCRW checkpoint")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--steps", type=int, default=100, help="timed steps per integrator (>= 100)")
    p.add_argument("--out", default=None, help="prefix for the CSV/PNG report files")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="interactive session server for the viewer")
    p.add_argument("checkpoint", help="LCRW checkpoint")
    p.add_argument("scenario", help="scenario JSON (mesh registry, material, loads)")
    p.add_argument("--port", type=int, default=7401, help="TCP protocol port")
    p.add_argument("--ws-port", type=int, default=7402, help="WebSocket port for browsers")
    p.add_argument("--rate", type=float, default=30.0, help="target step rate (Hz)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NeuralRomError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
