"""Command-line interface.

One subcommand per workflow step plus config-driven `run` and `compare`.
Failures print a stage-tagged diagnostic to stderr and exit nonzero; the
NIROM_THREADS environment variable caps compare's worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import dmd as dmd_mod
from . import metrics
from . import neuralnet as nn
from . import node as node_mod
from . import pipeline
from . import pod
from . import rbf as rbf_mod
from . import snapstore
from . import synthgen
from .errors import InvalidSpecError, NiromError, PipelineStageError


def _cmd_gen(args) -> int:
    spec = synthgen.spec_from_json(Path(args.spec).read_text(encoding="utf-8"))
    out = synthgen.generate(spec)
    snapstore.save(out.snapshots, args.out)
    print(f"wrote {out.snapshots.n_rows}x{out.snapshots.n_cols} snapshots to {args.out}")
    return 0


def _cmd_pod(args) -> int:
    snap = snapstore.load(args.data)
    if args.modes is not None:
        rule = pod.TruncationRule.fixed(args.modes)
    elif args.tau is not None:
        rule = pod.TruncationRule.energy(args.tau)
    else:
        raise InvalidSpecError("provide --tau or --modes")
    out = Path(args.out)
    if args.per_field:
        bases = pod.compute_field_bases(snap, rule, args.center)
        out.mkdir(parents=True, exist_ok=True)
        for name, basis in bases.bases:
            pod.save_basis(basis, out / f"pod_{name}.npod")
            print(f"{name}: m={basis.m} energy={basis.energy_captured():.6f}")
        latent = pod.project_fields(bases, snap)
    else:
        basis = pod.compute_basis(snap, rule, args.center)
        out.parent.mkdir(parents=True, exist_ok=True)
        pod.save_basis(basis, out)
        print(f"m={basis.m} energy={basis.energy_captured():.6f}")
        latent = pod.project(basis, snap)
    if args.latent_out:
        pod.save_latent(latent, args.latent_out)
    return 0


def _cmd_ae_train(args) -> int:
    snap = snapstore.load(args.data)
    spec_dict = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = ae.AESpec.from_dict(spec_dict)
    model = ae.build(spec, seed=args.seed)
    optimizer = nn.Optimizer("adam", lr=args.lr,
                             schedule=nn.Schedule.plateau(200, 0.5))
    history = ae.train(model, snap, args.epochs, optimizer, seed=args.seed)
    ae.save(model, args.out)
    if args.history:
        nn.history_to_csv(model.history, args.history)
    final = history[-1].loss if history else float("nan")
    print(f"trained {args.epochs} epochs, final mse {final:.6e}")
    return 0


def _cmd_node_train(args) -> int:
    latent = pod.load_latent(args.latent)
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    solver = node_mod.SolverSpec.from_dict(cfg.get("solver", {"method": "rk4"}))
    model = node_mod.build_node(
        latent.dim,
        hidden=tuple(cfg.get("hidden", [256])),
        activation=cfg.get("activation", "elu"),
        augment_dim=int(cfg.get("augment_dim", 0)),
        time_input=bool(cfg.get("time_input", False)),
        solver=solver,
        seed=int(cfg.get("seed", args.seed)),
    )
    tc = node_mod.NodeTrainConfig(
        epochs=int(cfg.get("epochs", args.epochs)),
        optimizer=cfg.get("optimizer", "rmsprop"),
        lr=float(cfg.get("lr", 1e-3)),
        schedule=nn.Schedule.from_dict(cfg["schedule"]) if cfg.get("schedule")
        else nn.Schedule.staircase(5000, 0.5),
        grad_mode=cfg.get("grad_mode", "discrete"),
    )
    history = node_mod.train_node(model, latent, tc)
    node_mod.save_node(model, args.out)
    if args.history:
        nn.history_to_csv(model.history, args.history)
    print(f"trained {tc.epochs} epochs, final loss {history[-1].loss:.6e}"
          if history else "no epochs requested")
    return 0


def _cmd_rbf_fit(args) -> int:
    latent = pod.load_latent(args.latent)
    model = rbf_mod.fit(latent, kernel=args.kernel, shape_c=args.shape_c,
                        lam=args.reg)
    rbf_mod.save(model, args.out)
    print(f"fitted {model.n_centers} centers, kernel {model.kernel}, c={model.shape_c}")
    return 0


def _cmd_dmd_fit(args) -> int:
    snap = snapstore.load(args.data)
    model = dmd_mod.fit(snap, args.rank)
    dmd_mod.save(model, args.out)
    if args.spectrum:
        dmd_mod.spectrum_csv(model, args.spectrum)
    print(f"rank {model.rank}, spectral radius {np.abs(model.eigenvalues).max():.6f}")
    return 0


def _parse_times(text: str) -> np.ndarray:
    try:
        start, end, dt = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise InvalidSpecError("--times must be start:end:dt") from exc
    return pipeline.prediction_times({"start": start, "end": end, "dt": dt})


def _cmd_predict(args) -> int:
    times = _parse_times(args.times)
    header_kind = None
    path = Path(args.model)
    if path.suffix == ".nnet":
        header_kind = "node"
    else:
        try:
            _, _, _, manifest = snapstore.read_container(path)
            header_kind = manifest.get("kind")
        except NiromError:
            header_kind = "node"
    if header_kind == "node":
        model = node_mod.load_node(path)
        latent = pod.load_latent(args.latent)
        traj = node_mod.predict(model, latent.z[:, 0], times)
        pod.save_latent(traj, args.out)
    elif header_kind == "rbf_model":
        model = rbf_mod.load(path)
        latent = pod.load_latent(args.latent)
        dt = times[1] - times[0] if times.size > 1 else model.dt_train
        sub = int(round(model.dt_train / dt))
        n_steps = int(np.ceil((times[-1] - model.t0_train) / model.dt_train - 1e-9))
        traj = rbf_mod.predict(model, latent.z[:, 0], n_steps, max(sub, 1))
        pod.save_latent(traj, args.out)
    elif header_kind == "dmd_model":
        model = dmd_mod.load(path)
        snap = dmd_mod.predict(model, times)
        snapstore.save(snap, args.out)
    else:
        raise InvalidSpecError(f"cannot tell model kind of {args.model}")
    print(f"wrote prediction to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    truth = snapstore.load(args.truth)
    pred = snapstore.load(args.pred)
    if args.scaled:
        params = snapstore.scaling_from_dict(
            json.loads(Path(args.scaled).read_text(encoding="utf-8")))
        truth = snapstore.apply_scaling(truth, params, "forward")
        pred = snapstore.apply_scaling(pred, params, "forward")
    series = metrics.spatial_rmse(truth, pred)
    text = metrics.to_csv(series, args.out)
    if not args.out:
        sys.stdout.write(text)
    print(f"max rmse {series.rmse.max():.6e}, max rel err {series.rel_err.max():.6e}")
    return 0


def _cmd_run(args) -> int:
    report = pipeline.run(args.config)
    errs = report.summary.get("errors", {})
    if errs.get("scored"):
        print(f"run complete: max rmse {errs['max_rmse']:.6e} "
              f"-> {report.output_dir}")
    else:
        print(f"run complete -> {report.output_dir}")
    return 0


def _cmd_compare(args) -> int:
    reports = pipeline.compare(list(args.configs), args.out)
    for r in reports:
        errs = r.summary.get("errors", {})
        tag = f"max rmse {errs['max_rmse']:.6e}" if errs.get("scored") else "unscored"
        print(f"{Path(r.output_dir).name}: {tag}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nirom",
                                description="Reduced-order surrogate modeling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate synthetic snapshot data")
    s.add_argument("--spec", required=True, help="generator spec JSON file")
    s.add_argument("--out", required=True, help="output snapshot file")
    s.set_defaults(fn=_cmd_gen)

    s = sub.add_parser("pod", help="compute a truncated basis")
    s.add_argument("--data", required=True)
    s.add_argument("--tau", type=float, help="energy tolerance")
    s.add_argument("--modes", type=int, help="fixed mode count")
    s.add_argument("--per-field", action="store_true", dest="per_field")
    s.add_argument("--center", action="store_true")
    s.add_argument("--out", required=True, help="basis file (or directory with --per-field)")
    s.add_argument("--latent-out", dest="latent_out")
    s.set_defaults(fn=_cmd_pod)

    s = sub.add_parser("ae-train", help="train an autoencoder on scaled snapshots")
    s.add_argument("--data", required=True)
    s.add_argument("--spec", required=True, help="AESpec JSON file")
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="loss history CSV")
    s.set_defaults(fn=_cmd_ae_train)

    s = sub.add_parser("node-train", help="train a latent ODE propagator")
    s.add_argument("--latent", required=True, help="latent trajectory file")
    s.add_argument("--config", required=True, help="architecture/training JSON")
    s.add_argument("--epochs", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(fn=_cmd_node_train)

    s = sub.add_parser("rbf-fit", help="fit a kernel increment interpolant")
    s.add_argument("--latent", required=True)
    s.add_argument("--kernel", default="gaussian",
                   choices=["gaussian", "multiquadric", "inverse_multiquadric"])
    s.add_argument("--shape-c", type=float, default=0.01, dest="shape_c")
    s.add_argument("--lambda", type=float, default=None, dest="reg")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_rbf_fit)

    s = sub.add_parser("dmd-fit", help="fit a rank-truncated mode decomposition")
    s.add_argument("--data", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--spectrum", help="eigen-spectrum CSV")
    s.set_defaults(fn=_cmd_dmd_fit)

    s = sub.add_parser("predict", help="forecast with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--latent", help="training latent (initial state) for node/rbf")
    s.add_argument("--times", required=True, help="start:end:dt")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_predict)

    s = sub.add_parser("eval", help="score a prediction against truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", help="error series CSV")
    s.add_argument("--scaled", metavar="SCALING_JSON",
                   help="score in scaled space using these scaling params")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("run", help="execute a full pipeline config")
    s.add_argument("config")
    s.set_defaults(fn=_cmd_run)

    s = sub.add_parser("compare", help="run several configs on shared data")
    s.add_argument("configs", nargs="+")
    s.add_argument("--out", help="merged comparison CSV")
    s.set_defaults(fn=_cmd_compare)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        return args.fn(args)
    except PipelineStageError as exc:
        print(f"[stage:{exc.stage}] {exc.code}: {exc.message}", file=sys.stderr)
        return 2
    except NiromError as exc:
        print(f"[stage:{stage}] {exc.code}: {exc.message}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"[stage:{stage}] io_failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
