"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its stated tolerance and runtime budget.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end protocol
(criteria 7 and 9) trains four surrogate configurations and takes several
minutes; everything else finishes in seconds.
"""

import json
import time

import numpy as np
import pytest

from nirom import autoencoder as ae
from nirom import dmd, pipeline, pod, rbf, snapstore, synthgen
from nirom import neuralnet as nn
from nirom import node
from nirom.neuralnet import LayerSpec as L
from nirom.pod import LatentTrajectory, TruncationRule
from nirom.snapstore import SnapshotSet


def _report(n, name, t0):
    print(f"\nACCEPTANCE {n} ({name}): PASS ({time.perf_counter() - t0:.1f}s)")


def test_criterion_1_pod_energy_and_optimality():
    t0 = time.perf_counter()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 201))
        m_cols = int(rng.integers(2, 51))
        snap = SnapshotSet(rng.standard_normal((n, m_cols)),
                           np.arange(float(m_cols)))
        rank = int(rng.integers(1, min(n, m_cols) + 1))
        basis = pod.compute_basis(snap, TruncationRule.fixed(rank))

        fro2 = float(np.sum(snap.data**2))
        assert abs(np.sum(basis.sigma**2) - fro2) <= 1e-10 * fro2

        rec = pod.reconstruct(basis, pod.project(basis, snap))
        err2 = float(np.sum((rec.data - snap.data) ** 2))
        sv = np.linalg.svd(snap.data, compute_uv=False)  # dense oracle
        oracle = float(np.sum(sv[basis.m:] ** 2))
        # full-rank draws have a zero oracle; floor the relative scale at
        # the matrix energy's rounding level
        assert abs(err2 - oracle) <= 1e-8 * max(oracle, 1e-12 * fro2)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _report(1, "POD energy identity and optimality", t0)


def test_criterion_2_dmd_exactness():
    t0 = time.perf_counter()
    spectra = {
        1: [0.97],
        2: [[0.95, 0.1]],
        3: [0.9, [0.92, 0.3]],
        4: [[0.97, 0.05], [0.85, 0.4]],
        5: [0.99, [0.95, 0.2], [0.8, 0.5]],
        6: [0.9, 0.95, [0.93, 0.15], [0.85, 0.35]],
    }
    for dim, evs in spectra.items():
        n = 50 + 30 * dim  # 80..230 capped below
        n = min(n, 200)
        spec = synthgen.GeneratorSpec("linear_system", n_dof=n, n_samples=60,
                                      dt=0.05, seed=300 + dim,
                                      params={"eigenvalues": evs})
        gen = synthgen.generate(spec)
        model = dmd.fit(gen.snapshots, dim)
        want = []
        for ev in gen.metadata["eigenvalues"]:
            want.append(ev)
            if ev.imag != 0.0:
                want.append(np.conj(ev))
        diff = np.abs(np.sort_complex(model.eigenvalues)
                      - np.sort_complex(np.array(want))).max()
        assert diff <= 1e-8

        pred = dmd.predict(model, gen.snapshots.times)
        rel = (np.linalg.norm(pred.data - gen.snapshots.data)
               / np.linalg.norm(gen.snapshots.data))
        assert rel < 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    _report(2, "DMD exactness on lifted linear systems", t0)


def test_criterion_3_rbf_interpolation_exactness():
    t0 = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        dim = int(rng.integers(2, 7))
        steps = int(rng.integers(8, 30))
        z = np.cumsum(rng.standard_normal((dim, steps + 1)), axis=1)
        latent = LatentTrajectory(z, np.arange(steps + 1, dtype=float))
        model = rbf.fit(latent, "gaussian", shape_c=2.0, lam=0.0)
        dz = z[:, 1:] - z[:, :-1]
        scale = np.abs(dz).max()
        for k in range(model.n_centers):
            err = np.abs(rbf.evaluate(model, model.centers[:, k]) - dz[:, k]).max()
            assert err <= 1e-8 * scale
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _report(3, "RBF interpolation exactness at centers", t0)


def _fd_param_grad(net, x, y, mode, eps=1e-5):
    p0 = net.get_params()
    fd = np.zeros_like(p0)
    for i in range(p0.size):
        for s, sign in ((eps, 1.0), (-eps, -1.0)):
            p = p0.copy()
            p[i] += s
            net.set_params(p)
            fd[i] += sign * nn.mse_loss(nn.forward(net, x, mode)[0], y)[0]
        fd[i] /= 2 * eps
    net.set_params(p0)
    return fd


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = [
        [L(4, 3, "linear")],
        [L(4, 6, "relu"), L(6, 2, "linear")],
        [L(4, 6, "elu"), L(6, 2, "linear")],
        [L(4, 6, "tanh"), L(6, 2, "linear")],
        [L(4, 6, "sigmoid"), L(6, 2, "linear")],
        [L(4, 6, "relu", batchnorm=True), L(6, 2, "linear")],
    ]
    for layers in cases:
        net = nn.MLPNet(layers, seed=4)
        x = rng.standard_normal((net.in_dim, 6))
        y = rng.standard_normal((net.out_dim, 6))
        out, cache = nn.forward(net, x, "train")
        _, g = nn.mse_loss(out, y)
        gp, _ = nn.backward(net, cache, g)
        fd = _fd_param_grad(net, x, y, "train")
        mask = np.abs(gp) > 1e-8
        rel = np.abs(gp[mask] - fd[mask]) / np.abs(gp[mask])
        assert rel.max() < 1e-5

    # tiny dynamics net: exact discrete gradient vs finite differences
    model = node.build_node(1, hidden=(1,), activation="tanh",
                            solver=node.SolverSpec("rk4"), seed=11)
    ts = np.linspace(0.0, 1.0, 6)
    data = LatentTrajectory(0.5 * np.sin(ts)[None, :], ts)
    _, gw = node._loss_and_grad_discrete(model, data)
    p0 = model.net.get_params()
    eps = 1e-6
    fd = np.zeros_like(p0)
    for i in range(p0.size):
        for s, sign in ((eps, 1.0), (-eps, -1.0)):
            p = p0.copy()
            p[i] += s
            model.net.set_params(p)
            fd[i] += sign * node.trajectory_loss(model, data)
        fd[i] /= 2 * eps
    model.net.set_params(p0)
    mask = np.abs(gw) > 1e-8
    rel = np.abs(gw[mask] - fd[mask]) / np.abs(gw[mask])
    assert rel.max() < 1e-6

    # continuous adjoint vs discrete at rtol = atol = 1e-8
    adj = node.NODEModel(model.net, 1,
                         solver=node.SolverSpec("dopri5", rtol=1e-8, atol=1e-8))
    _, gw_adj = node._loss_and_grad_adjoint(adj, data)
    rel = np.abs(gw_adj - gw) / np.maximum(np.abs(gw), 1e-12)
    assert rel.max() < 1e-4

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _report(4, "gradient suite (backprop, trajectory, adjoint)", t0)


def test_criterion_5_solver_orders():
    t0 = time.perf_counter()

    def decay_model(solver):
        m = node.NODEModel(nn.MLPNet([L(1, 1, "linear")], seed=0), 1, solver=solver)
        m.net.W[0] = np.array([[-1.0]])
        m.net.b[0] = np.zeros(1)
        return m

    errs = []
    for halving in range(5):
        steps = 10 * 2**halving
        m = decay_model(node.SolverSpec("rk4"))
        tr = node.ode_solve(m, np.array([1.0]), np.linspace(0, 1, steps + 1))
        errs.append(abs(tr.z[0, -1] - np.exp(-1.0)))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(4)]
    assert min(orders) >= 3.9

    m = decay_model(node.SolverSpec("dopri5", rtol=1e-6, atol=1e-8))
    tr, stats = node.ode_solve(m, np.array([1.0]), np.array([0.0, 1.0]),
                               collect_stats=True)
    assert abs(tr.z[0, -1] - np.exp(-1.0)) < 1e-6
    assert all(err <= 1.0 for _, _, err in stats)

    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    _report(5, "solver convergence orders", t0)


def test_criterion_6_linear_ae_matches_pod():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    x = (rng.standard_normal((10, 4)) @ rng.standard_normal((4, 20))
         + 0.1 * rng.standard_normal((10, 20)))
    x = x - x.mean(axis=1, keepdims=True)
    snap = SnapshotSet(x, np.arange(20.0))
    basis = pod.compute_basis(snap, TruncationRule.fixed(2))
    rec = pod.reconstruct(basis, pod.project(basis, snap))
    pod_mse = float(np.mean((rec.data - x) ** 2))

    spec = ae.AESpec(input_dim=10, latent_dim=2, encoder_hidden=(),
                     decoder_hidden=(), encoder_output_activation="linear",
                     decoder_output_activation="linear")
    model = ae.build(spec, seed=5)
    opt = nn.Optimizer("adam", lr=0.01, schedule=nn.Schedule.plateau(300, 0.5))
    hist = ae.train(model, x, 20000, opt, seed=5)
    ae_mse = hist[-1].loss
    assert abs(ae_mse - pod_mse) <= 0.05 * pod_mse

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    _report(6, "single-layer linear AE reaches rank-2 POD error", t0)


# ---------------------------------------------------------------------------
# End-to-end protocol (criteria 7 and 9 share one four-config comparison)

WAKE_GEN = {"kind": "periodic_wake", "n_dof": 300, "n_samples": 313, "dt": 0.008,
            "seed": 21, "t0": 2.5, "params": {"n_modes": 3}}
TRAIN_END = 2.5 + 312 * 0.008            # 4.996
PRED_END = 2.5 + 1.2 * (TRAIN_END - 2.5)  # 20% extrapolation past the window

NODE_PROP = {"kind": "node", "hidden": [256], "activation": "elu",
             "epochs": 2000, "optimizer": "rmsprop", "lr": 1e-3,
             "schedule": {"kind": "staircase", "interval": 5000, "rate": 0.5},
             "solver": {"method": "rk4"}, "grad_mode": "discrete"}


def protocol_configs(root):
    base = {
        "schema_version": 1, "seed": 777,
        "data": {"source": "generator", "generator": WAKE_GEN},
        "training_window": {"start": 2.5, "end": TRAIN_END},
        "prediction_window": {"start": 2.5, "end": PRED_END, "dt": 0.002},
        "scaling": {"target": [-1, 1], "granularity": "per-field"},
    }
    pod_high = {"kind": "pod", "criterion": {"kind": "energy", "tau": 1e-6},
                "per_field": True}
    return [
        dict(base, output_dir=str(root / "pod_node"),
             reducer={"kind": "pod", "criterion": {"kind": "energy", "tau": 0.01},
                      "per_field": True},
             propagator=dict(NODE_PROP)),
        dict(base, output_dir=str(root / "ae_node"),
             reducer={"kind": "ae", "latent_dim": 5, "epochs": 1500,
                      "decoder_output_activation": "tanh"},
             propagator=dict(NODE_PROP)),
        dict(base, output_dir=str(root / "dmd_small"),
             reducer=dict(pod_high), propagator={"kind": "dmd", "rank": 3}),
        dict(base, output_dir=str(root / "dmd_matched"),
             reducer=dict(pod_high), propagator={"kind": "dmd", "rank": 7}),
    ]


@pytest.fixture(scope="module")
def protocol_reports(tmp_path_factory):
    root = tmp_path_factory.mktemp("protocol")
    t0 = time.perf_counter()
    reports = pipeline.compare(protocol_configs(root), root / "comparison.csv")
    return reports, time.perf_counter() - t0, root


def test_criterion_7_protocol_reproduction(protocol_reports):
    t0 = time.perf_counter()
    reports, elapsed, _ = protocol_reports
    assert elapsed < 30 * 60

    names = [r.output_dir.name for r in reports]
    assert names == ["pod_node", "ae_node", "dmd_small", "dmd_matched"]
    for r in reports:
        summary = r.summary
        assert summary["prediction"]["extrapolated_count"] > 0
        series = r.error_series
        assert np.isfinite(series.rmse).all()
        assert np.isfinite(series.rel_err).all()
        prop = summary["propagator"]
        if prop["kind"] == "node":
            assert prop["epochs"] <= 2000
            assert prop["final_loss"] * 10.0 <= prop["initial_loss"]
    # 313 training snapshots at dt = 0.008, prediction four times finer
    assert reports[0].summary["data"]["n_train_snapshots"] == 313
    print(f"\n  [protocol ran in {elapsed/60:.1f} min]")
    _report(7, "four-model comparison protocol at surrogate scale", t0)


def test_criterion_8_advection_stress(tmp_path):
    t0 = time.perf_counter()
    spec = synthgen.GeneratorSpec("traveling_wave", n_dof=128, n_samples=160,
                                  dt=0.01, seed=11,
                                  params={"speed": 80.0, "width": 4.0,
                                          "center": 32.0})
    snap = synthgen.generate(spec).snapshots
    x = snap.data
    fro = np.linalg.norm(x)

    basis = pod.compute_basis(snap, TruncationRule.fixed(4))
    rec = pod.reconstruct(basis, pod.project(basis, snap))
    pod_err = np.linalg.norm(rec.data - x) / fro
    sv = np.linalg.svd(x, compute_uv=False)  # independent oracle
    oracle = np.sqrt(np.sum(sv[4:] ** 2) / np.sum(sv**2))
    assert abs(pod_err - oracle) < 1e-8
    assert pod_err > 0.1  # slow linear decay is structural for translation

    params = snapstore.fit_scaling(snap, (0.0, 1.0), "per-field")
    scaled = snapstore.apply_scaling(snap, params, "forward")
    spec_ae = ae.AESpec(input_dim=128, latent_dim=4, encoder_hidden=(64, 32),
                        hidden_activation="relu",
                        decoder_output_activation="sigmoid")
    model = ae.build(spec_ae, seed=3)
    opt = nn.Optimizer("adam", lr=1e-3, schedule=nn.Schedule.plateau(200, 0.5))
    ae.train(model, scaled, 2000, opt, seed=3)
    rec_scaled = scaled.with_data(
        ae.decode_matrix(model, ae.encode_matrix(model, scaled.data)))
    rec_phys = snapstore.apply_scaling(rec_scaled, params, "inverse")
    ae_err = np.linalg.norm(rec_phys.data - x) / fro
    assert ae_err <= 0.5 * pod_err

    print(f"\n  [rank-4 basis rel err {pod_err:.3f}, latent-4 AE rel err {ae_err:.3f}]")
    _report(8, "advection stress: nonlinear AE halves the rank-4 basis error", t0)


def test_criterion_9_determinism(protocol_reports, tmp_path_factory):
    t0 = time.perf_counter()
    reports, _, _ = protocol_reports
    root2 = tmp_path_factory.mktemp("protocol_rerun")
    reports2 = pipeline.compare(protocol_configs(root2), root2 / "comparison.csv")

    checkpoints = {
        "pod_node": ["reducer/pod_p.npod", "reducer/pod_v_x.npod",
                     "reducer/pod_v_y.npod", "propagator/node.nnet"],
        "ae_node": ["reducer/ae_p.nnet", "reducer/ae_v_x.nnet",
                    "reducer/ae_v_y.nnet", "propagator/node.nnet"],
        "dmd_small": ["propagator/dmd.ndmd"],
        "dmd_matched": ["propagator/dmd.ndmd"],
    }
    for r1, r2 in zip(reports, reports2):
        name = r1.output_dir.name
        s1 = json.loads((r1.output_dir / "summary.json").read_text())
        s2 = json.loads((r2.output_dir / "summary.json").read_text())
        s1.pop("timings"), s2.pop("timings")
        b1 = json.dumps(s1, sort_keys=True).encode()
        b2 = json.dumps(s2, sort_keys=True).encode()
        assert b1 == b2, f"{name}: summary differs"
        for rel in checkpoints[name] + ["latent_train.nlat", "prediction.nsnp"]:
            assert ((r1.output_dir / rel).read_bytes()
                    == (r2.output_dir / rel).read_bytes()), f"{name}/{rel}"
    _report(9, "seeded re-run is byte-identical", t0)
