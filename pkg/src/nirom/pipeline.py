"""Config-driven orchestration: load or generate snapshots, compress, learn
latent dynamics, forecast, reconstruct, and score, with every artifact
persisted under one output directory.

A run is a single JSON document (schema_version 1) naming one data source,
one reducer, and one propagator, plus training and prediction windows. Runs
are deterministic for a fixed seed: the reducer and propagator derive
independent seed streams, so swapping the propagator never perturbs reducer
artifacts. Stage failures are wrapped with the stage name and flushed to a
FAILED.json marker next to whatever partial artifacts exist.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import dmd as dmd_mod
from . import metrics
from . import neuralnet as nn
from . import node as node_mod
from . import pod
from . import rbf as rbf_mod
from . import snapstore
from . import synthgen
from .errors import (
    InvalidSpecError,
    NiromError,
    PipelineStageError,
    WindowMismatchError,
)
from .pod import LatentTrajectory
from .snapstore import SnapshotSet

SCHEMA_VERSION = 1


@dataclass
class RunReport:
    output_dir: Path
    summary: dict
    config: dict
    error_series: metrics.ErrorSeries | None


def load_config(source) -> dict:
    if isinstance(source, dict):
        return json.loads(json.dumps(source))  # deep copy, JSON-clean
    text = Path(source).read_text(encoding="utf-8")
    return json.loads(text)


def _require(cfg: dict, key: str, stage: str):
    if key not in cfg:
        raise InvalidSpecError(f"config is missing {key!r} (stage {stage})")
    return cfg[key]


def _seed_for(seed: int, lane: int) -> int:
    """Independent per-stage integer seeds derived from the run seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(lane,))
    return int(ss.generate_state(1)[0])


def prediction_times(window: dict) -> np.ndarray:
    start, end, dt = float(window["start"]), float(window["end"]), float(window["dt"])
    if not dt > 0 or end < start:
        raise InvalidSpecError("prediction window needs end >= start and dt > 0")
    n = int(np.floor((end - start) / dt + 1e-9))
    return start + dt * np.arange(n + 1)


def _schedule_from(cfg: dict | None) -> nn.Schedule:
    if not cfg:
        return nn.Schedule.constant()
    return nn.Schedule.from_dict(cfg)


def _optimizer_from(cfg: dict | None, default_algorithm="adam",
                    default_lr=1e-3,
                    default_schedule: nn.Schedule | None = None) -> nn.Optimizer:
    cfg = cfg or {}
    if cfg.get("schedule"):
        schedule = _schedule_from(cfg["schedule"])
    else:
        schedule = default_schedule or nn.Schedule.constant()
    return nn.Optimizer(
        algorithm=cfg.get("algorithm", default_algorithm),
        lr=float(cfg.get("lr", default_lr)),
        schedule=schedule,
        momentum=float(cfg.get("momentum", 0.9)),
    )


class _Reducer:
    """Uniform encode/decode interface over POD bases and autoencoders."""

    def __init__(self, kind: str):
        self.kind = kind
        self.latent_dims: dict[str, int] = {}
        self.final_losses: dict[str, float] = {}
        self.energy: dict[str, float] = {}
        self.pod_whole: pod.PODBasis | None = None
        self.pod_fields: pod.FieldBasisSet | None = None
        self.ae_models: list[tuple[str, ae.AEModel]] = []

    @property
    def total_dim(self) -> int:
        return sum(self.latent_dims.values())

    def encode(self, snap: SnapshotSet) -> LatentTrajectory:
        if self.kind == "pod":
            if self.pod_whole is not None:
                return pod.project(self.pod_whole, snap)
            return pod.project_fields(self.pod_fields, snap)
        blocks = [ae.encode_matrix(model, snap.data[snap.field_named(name).rows(), :])
                  for name, model in self.ae_models]
        return LatentTrajectory(np.vstack(blocks), snap.times)

    def decode(self, latent: LatentTrajectory, fields, mesh_id) -> SnapshotSet:
        if self.kind == "pod":
            if self.pod_whole is not None:
                return pod.reconstruct(self.pod_whole, latent)
            return pod.reconstruct_fields(self.pod_fields, latent)
        n = sum(f.length for f in fields)
        out = np.empty((n, latent.n_samples))
        row = 0
        for (name, model), f in zip(self.ae_models, fields):
            block = latent.z[row:row + model.spec.latent_dim, :]
            out[f.rows(), :] = ae.decode_matrix(model, block)
            row += model.spec.latent_dim
        return SnapshotSet(out, latent.times, fields, mesh_id)


def _build_reducer(cfg: dict, train: SnapshotSet, seed: int, outdir: Path) -> _Reducer:
    kind = _require(cfg, "kind", "reduce")
    red = _Reducer(kind)
    rdir = outdir / "reducer"
    rdir.mkdir(parents=True, exist_ok=True)

    if kind == "pod":
        crit = _require(cfg, "criterion", "reduce")
        if "tau" in crit and crit.get("kind", "energy") == "energy":
            rule = pod.TruncationRule.energy(float(crit["tau"]))
        else:
            rule = pod.TruncationRule.fixed(int(crit["m"]))
        center = bool(cfg.get("center", False))
        per_field = bool(cfg.get("per_field", len(train.fields) > 1))
        if per_field:
            red.pod_fields = pod.compute_field_bases(train, rule, center)
            for name, basis in red.pod_fields.bases:
                red.latent_dims[name] = basis.m
                red.energy[name] = basis.energy_captured()
                pod.save_basis(basis, rdir / f"pod_{name}.npod")
        else:
            red.pod_whole = pod.compute_basis(train, rule, center)
            red.latent_dims["all"] = red.pod_whole.m
            red.energy["all"] = red.pod_whole.energy_captured()
            pod.save_basis(red.pod_whole, rdir / "pod_all.npod")
        return red

    if kind == "ae":
        latent_dim = int(_require(cfg, "latent_dim", "reduce"))
        epochs = int(cfg.get("epochs", 1000))
        optimizer_cfg = cfg.get("optimizer")
        rng = np.random.default_rng(seed)
        for f in train.fields:
            spec = ae.AESpec(
                input_dim=f.length,
                latent_dim=latent_dim,
                encoder_hidden=tuple(cfg["hidden"]) if cfg.get("hidden") else None,
                hidden_activation=cfg.get("hidden_activation", "relu"),
                encoder_output_activation=cfg.get("encoder_output_activation", "linear"),
                decoder_output_activation=cfg.get("decoder_output_activation", "sigmoid"),
                batchnorm=bool(cfg.get("batchnorm", False)),
            )
            model_seed = int(rng.integers(0, 2**31 - 1))
            model = ae.build(spec, seed=model_seed, field_name=f.name)
            opt = _optimizer_from(optimizer_cfg, "adam", 1e-3,
                                  default_schedule=nn.Schedule.plateau(200, 0.5))
            history = ae.train(model, train.data[f.rows(), :], epochs, opt,
                               seed=model_seed)
            red.ae_models.append((f.name, model))
            red.latent_dims[f.name] = latent_dim
            red.final_losses[f.name] = history[-1].loss if history else float("nan")
            ae.save(model, rdir / f"ae_{f.name}.nnet")
            nn.history_to_csv(model.history, rdir / f"ae_{f.name}_history.csv")
        return red

    raise InvalidSpecError(f"unknown reducer kind {kind!r}")


def _run_propagator(cfg: dict, latent: LatentTrajectory, pred_times: np.ndarray,
                    seed: int, outdir: Path):
    """Train the configured propagator and forecast the latent trajectory.

    Returns (predicted latent, info dict for the summary).
    """
    kind = _require(cfg, "kind", "propagate")
    pdir = outdir / "propagator"
    pdir.mkdir(parents=True, exist_ok=True)
    info: dict = {"kind": kind}

    if kind == "node":
        # the forecast starts from the training trajectory's first state
        if abs(pred_times[0] - latent.times[0]) > 1e-9 * max(1.0, abs(latent.times[0])):
            raise InvalidSpecError(
                "node prediction window must start at the training window start"
            )
        solver = node_mod.SolverSpec.from_dict(cfg.get("solver", {"method": "rk4"}))
        model = node_mod.build_node(
            latent.dim,
            hidden=tuple(cfg.get("hidden", [256])),
            activation=cfg.get("activation", "elu"),
            augment_dim=int(cfg.get("augment_dim", 0)),
            time_input=bool(cfg.get("time_input", False)),
            solver=solver,
            seed=seed,
        )
        tc = node_mod.NodeTrainConfig(
            epochs=int(cfg.get("epochs", 2000)),
            optimizer=cfg.get("optimizer", "rmsprop"),
            lr=float(cfg.get("lr", 1e-3)),
            schedule=_schedule_from(cfg.get("schedule", {"kind": "staircase",
                                                         "interval": 5000, "rate": 0.5})),
            grad_mode=cfg.get("grad_mode", "discrete"),
        )
        history = node_mod.train_node(model, latent, tc)
        predicted = node_mod.predict(model, latent.z[:, 0], pred_times)
        node_mod.save_node(model, pdir / "node.nnet")
        nn.history_to_csv(model.history, pdir / "node_history.csv")
        info.update({
            "epochs": tc.epochs,
            "initial_loss": history[0].loss if history else None,
            "final_loss": history[-1].loss if history else None,
        })
        return predicted, info

    if kind == "rbf":
        model = rbf_mod.fit(
            latent,
            kernel=cfg.get("kernel", "gaussian"),
            shape_c=float(cfg.get("shape_c", 0.01)),
            lam=cfg.get("lambda"),
        )
        dt_pred = pred_times[1] - pred_times[0] if pred_times.size > 1 else model.dt_train
        ratio = model.dt_train / dt_pred
        if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
            raise InvalidSpecError(
                f"rbf prediction spacing {dt_pred:g} must divide the training "
                f"step {model.dt_train:g}"
            )
        substeps = int(round(ratio))
        n_steps = int(np.ceil((pred_times[-1] - model.t0_train) / model.dt_train - 1e-9))
        traj = rbf_mod.predict(model, latent.z[:, 0], n_steps, substeps)
        keep = np.round((pred_times - model.t0_train) / dt_pred).astype(int)
        if (keep.min() < 0 or keep.max() >= traj.n_samples
                or not np.allclose(traj.times[keep], pred_times,
                                   rtol=1e-9, atol=1e-9 * max(1.0, abs(pred_times[-1])))):
            raise InvalidSpecError("prediction grid does not align with rbf stepping")
        predicted = LatentTrajectory(traj.z[:, keep], pred_times)
        rbf_mod.save(model, pdir / "rbf.nrbf")
        info.update({"kernel": model.kernel, "shape_c": model.shape_c,
                     "lambda": model.lam, "substeps": substeps})
        return predicted, info

    if kind == "dmd":
        rank = int(_require(cfg, "rank", "propagate"))
        latent_snap = SnapshotSet(latent.z, latent.times)
        model = dmd_mod.fit(latent_snap, rank)
        pred_snap = dmd_mod.predict(model, pred_times)
        predicted = LatentTrajectory(pred_snap.data, pred_times)
        dmd_mod.save(model, pdir / "dmd.ndmd")
        dmd_mod.spectrum_csv(model, pdir / "dmd_spectrum.csv")
        info.update({"rank": rank,
                     "spectral_radius": float(np.abs(model.eigenvalues).max())})
        return predicted, info

    raise InvalidSpecError(f"unknown propagator kind {kind!r}")


def _truth_for(config: dict, full: SnapshotSet, gen_spec, pred_times: np.ndarray):
    """Truth snapshots over the prediction grid, or None where unavailable."""
    if gen_spec is not None:
        return synthgen.generate_at(gen_spec, pred_times).snapshots
    idx = []
    span = max(abs(float(full.times[0])), abs(float(full.times[-1])), 1.0)
    for t in pred_times:
        k = int(np.argmin(np.abs(full.times - t)))
        if abs(full.times[k] - t) <= 1e-9 * span:
            idx.append(k)
        else:
            return None
    return SnapshotSet(full.data[:, idx], pred_times, full.fields, full.mesh_id)


def run(config_source, output_dir=None) -> RunReport:
    """Execute the full workflow; artifacts land in the config's output_dir."""
    config = load_config(config_source)
    if config.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise InvalidSpecError(
            f"unsupported schema_version {config.get('schema_version')}"
        )
    outdir = Path(output_dir or _require(config, "output_dir", "setup"))
    outdir.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    timings: dict[str, float] = {}
    summary: dict = {"schema_version": SCHEMA_VERSION, "seed": seed}
    stage = "setup"

    def _fail(exc: BaseException):
        marker = {
            "stage": stage,
            "code": exc.code if isinstance(exc, NiromError) else "error",
            "message": str(exc),
        }
        with open(outdir / "FAILED.json", "w", encoding="utf-8") as fh:
            json.dump(marker, fh, sort_keys=True, indent=2)
            fh.write("\n")

    try:
        with open(outdir / "config.json", "w", encoding="utf-8") as fh:
            json.dump(config, fh, sort_keys=True, indent=2)
            fh.write("\n")

        stage = "data"
        t_stage = time.perf_counter()
        data_cfg = _require(config, "data", stage)
        gen_spec = None
        if data_cfg.get("source") == "generator":
            gen_spec = synthgen.spec_from_dict(_require(data_cfg, "generator", stage))
            full = synthgen.generate(gen_spec).snapshots
        elif data_cfg.get("source") == "file":
            full = snapstore.load(_require(data_cfg, "path", stage))
        else:
            raise InvalidSpecError("data.source must be 'generator' or 'file'")
        window = _require(config, "training_window", stage)
        train = full.time_slice(float(window["start"]), float(window["end"]))
        pred_times = prediction_times(_require(config, "prediction_window", stage))
        summary["data"] = {
            "n_rows": full.n_rows,
            "n_train_snapshots": train.n_cols,
            "fields": [f.name for f in train.fields],
        }
        timings[stage] = time.perf_counter() - t_stage

        stage = "scaling"
        t_stage = time.perf_counter()
        scaling_cfg = config.get("scaling")
        reducer_cfg = _require(config, "reducer", "reduce")
        params = None
        if reducer_cfg.get("kind") == "ae":
            interval = ae.AESpec(
                input_dim=2, latent_dim=1,
                decoder_output_activation=reducer_cfg.get(
                    "decoder_output_activation", "sigmoid"),
            ).scaling_interval()
            if interval is not None and scaling_cfg is None:
                scaling_cfg = {"target": list(interval), "granularity": "per-field"}
            if interval is not None and tuple(scaling_cfg["target"]) != interval:
                raise InvalidSpecError(
                    f"decoder activation requires scaling target {list(interval)}"
                )
        if scaling_cfg is not None:
            params = snapstore.fit_scaling(
                train,
                tuple(scaling_cfg.get("target", (0.0, 1.0))),
                scaling_cfg.get("granularity", "per-field"),
            )
            train_scaled = snapstore.apply_scaling(train, params, "forward")
            with open(outdir / "scaling.json", "w", encoding="utf-8") as fh:
                json.dump(snapstore.scaling_to_dict(params), fh, sort_keys=True)
                fh.write("\n")
        else:
            train_scaled = train
        timings[stage] = time.perf_counter() - t_stage

        stage = "reduce"
        t_stage = time.perf_counter()
        reducer = _build_reducer(reducer_cfg, train_scaled, _seed_for(seed, 1), outdir)
        latent = reducer.encode(train_scaled)
        pod.save_latent(latent, outdir / "latent_train.nlat")
        summary["reducer"] = {
            "kind": reducer.kind,
            "latent_dims": reducer.latent_dims,
            "total_dim": reducer.total_dim,
        }
        if reducer.final_losses:
            summary["reducer"]["final_losses"] = reducer.final_losses
        if reducer.energy:
            summary["reducer"]["energy_captured"] = reducer.energy
        timings[stage] = time.perf_counter() - t_stage

        stage = "propagate"
        t_stage = time.perf_counter()
        predicted_latent, prop_info = _run_propagator(
            _require(config, "propagator", stage), latent, pred_times,
            _seed_for(seed, 2), outdir,
        )
        summary["propagator"] = prop_info
        timings[stage] = time.perf_counter() - t_stage

        stage = "reconstruct"
        t_stage = time.perf_counter()
        scaled_pred = reducer.decode(predicted_latent, train.fields, train.mesh_id)
        if params is not None:
            prediction = snapstore.apply_scaling(scaled_pred, params, "inverse")
        else:
            prediction = scaled_pred
        snapstore.save(prediction, outdir / "prediction.nsnp")
        train_end = float(train.times[-1])
        extrapolated = pred_times > train_end * (1 + 1e-12)
        summary["prediction"] = {
            "n_times": int(pred_times.size),
            "extrapolated_count": int(extrapolated.sum()),
            "first_extrapolated_index": (int(np.argmax(extrapolated))
                                         if extrapolated.any() else None),
        }
        timings[stage] = time.perf_counter() - t_stage

        stage = "score"
        t_stage = time.perf_counter()
        truth = _truth_for(config, full, gen_spec, pred_times)
        series = None
        if truth is not None:
            series = metrics.spatial_rmse(truth, prediction)
            metrics.to_csv(series, outdir / "errors.csv")
            summary["errors"] = {
                "scored": True,
                "max_rmse": float(series.rmse.max()),
                "final_rmse": float(series.rmse[-1]),
                "max_rel_err": float(series.rel_err.max()),
            }
        else:
            summary["errors"] = {"scored": False}
        timings[stage] = time.perf_counter() - t_stage

        stage = "persist"
        summary["timings"] = timings
        with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return RunReport(outdir, summary, config, series)

    except NiromError as exc:
        _fail(exc)
        raise PipelineStageError(stage, exc) from exc
    except Exception as exc:
        _fail(exc)
        raise PipelineStageError(stage, exc) from exc


def _workers() -> int:
    raw = os.environ.get("NIROM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _check_shared(configs: list[dict]) -> None:
    def _key(c):
        return json.dumps({"data": c.get("data"),
                           "training_window": c.get("training_window"),
                           "prediction_window": c.get("prediction_window")},
                          sort_keys=True)
    keys = {_key(c) for c in configs}
    if len(keys) > 1:
        raise WindowMismatchError(
            "compare requires identical data sources and time windows"
        )


def compare(config_sources, output_csv=None) -> list[RunReport]:
    """Run several configs on shared data; merge their error series."""
    configs = [load_config(c) for c in config_sources]
    if not configs:
        raise InvalidSpecError("compare needs at least one config")
    _check_shared(configs)

    n_workers = min(_workers(), len(configs))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            reports = list(pool.map(run, configs))
    else:
        reports = [run(c) for c in configs]

    if output_csv is not None:
        names = []
        for r in reports:
            name = Path(r.output_dir).name
            while name in names:
                name += "_"
            names.append(name)
        lines = ["time," + ",".join(f"{n}_rmse,{n}_rel_err" for n in names)]
        base = reports[0].error_series
        if base is None:
            raise InvalidSpecError("compare scoring requires truth data")
        for k, t in enumerate(base.times):
            row = [repr(float(t))]
            for r in reports:
                row.append(repr(float(r.error_series.rmse[k])))
                row.append(repr(float(r.error_series.rel_err[k])))
            lines.append(",".join(row))
        with open(output_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return reports
