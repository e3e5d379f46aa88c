import numpy as np
import pytest

from nirom import synthgen
from nirom.errors import InvalidSpecError
from nirom.synthgen import GeneratorSpec


class TestSpecValidation:
    def test_rejects_bad_dims(self):
        with pytest.raises(InvalidSpecError):
            GeneratorSpec("linear_system", n_dof=0, n_samples=5, dt=0.1, seed=0)
        with pytest.raises(InvalidSpecError):
            GeneratorSpec("linear_system", n_dof=5, n_samples=1, dt=0.1, seed=0)
        with pytest.raises(InvalidSpecError):
            GeneratorSpec("traveling_wave", n_dof=5, n_samples=5, dt=0.0, seed=0)
        with pytest.raises(InvalidSpecError):
            GeneratorSpec("vortex", n_dof=5, n_samples=5, dt=0.1, seed=0)

    def test_json_round_trip(self):
        spec = GeneratorSpec("periodic_wake", 30, 10, 0.05, 3, t0=1.0,
                             params={"n_modes": 2})
        back = synthgen.spec_from_dict(synthgen.spec_to_dict(spec))
        assert back == spec


class TestLinearSystem:
    def test_scalar_geometric_sequence(self):
        spec = GeneratorSpec("linear_system", n_dof=1, n_samples=8, dt=0.5, seed=0,
                             params={"eigenvalues": [0.9]})
        out = synthgen.generate(spec)
        expect = 0.9 ** np.arange(8)
        assert np.allclose(out.snapshots.data[0], expect, atol=1e-12)

    def test_metadata_spectrum_and_rank(self):
        spec = GeneratorSpec("linear_system", n_dof=40, n_samples=30, dt=0.1, seed=4,
                             params={"eigenvalues": [0.95, [0.9, 0.2]]})
        out = synthgen.generate(spec)
        assert out.metadata["latent_dim"] == 3
        assert abs(out.metadata["spectral_radius"] - max(0.95, abs(0.9 + 0.2j))) < 1e-14
        sv = np.linalg.svd(out.snapshots.data, compute_uv=False)
        assert sv[3] < 1e-10 * sv[0]

    def test_lift_is_orthonormal(self):
        spec = GeneratorSpec("linear_system", n_dof=25, n_samples=5, dt=0.1, seed=9,
                             params={"eigenvalues": [[0.8, 0.3]]})
        lift = synthgen.generate(spec).metadata["lift"]
        assert np.allclose(lift.T @ lift, np.eye(2), atol=1e-12)

    def test_generate_at_consistency(self):
        spec = GeneratorSpec("linear_system", n_dof=10, n_samples=6, dt=0.2, seed=2,
                             params={"eigenvalues": [[0.9, 0.1]]})
        full = synthgen.generate(spec)
        sub = synthgen.generate_at(spec, full.snapshots.times[2:5])
        assert np.allclose(sub.snapshots.data, full.snapshots.data[:, 2:5], atol=1e-12)


class TestTravelingWave:
    def test_unit_cell_shift_symmetry(self):
        # speed * dt = exactly one grid cell: column k is column 0 rolled by k
        spec = GeneratorSpec("traveling_wave", n_dof=32, n_samples=10, dt=0.25, seed=0,
                             params={"speed": 4.0, "width": 2.0, "center": 8.0})
        data = synthgen.generate(spec).snapshots.data
        for k in range(10):
            assert np.allclose(data[:, k], np.roll(data[:, 0], k), atol=1e-13)

    def test_column_norms_invariant(self):
        spec = GeneratorSpec("traveling_wave", n_dof=64, n_samples=40, dt=0.013, seed=0,
                             params={"speed": 7.3, "width": 3.0})
        data = synthgen.generate(spec).snapshots.data
        norms = np.linalg.norm(data, axis=0)
        assert np.abs(norms - norms[0]).max() < 1e-12 * norms[0]


class TestPeriodicWake:
    def test_single_mode_pointwise_oracle(self):
        f = 2.5
        spec = GeneratorSpec("periodic_wake", n_dof=12, n_samples=20, dt=0.03, seed=6,
                             params={"n_modes": 1, "frequencies": [f]})
        out = synthgen.generate(spec)
        meta = out.metadata
        t = out.snapshots.times
        oracle = meta["steady"][:, None] + meta["patterns"][:, 0][:, None] * np.sin(
            2 * np.pi * f * t[None, :] + meta["phases"][:, 0][:, None])
        assert np.allclose(out.snapshots.data, oracle, atol=1e-12)

    def test_rank_bound(self):
        spec = GeneratorSpec("periodic_wake", n_dof=90, n_samples=60, dt=0.01, seed=3,
                             params={"n_modes": 3})
        out = synthgen.generate(spec)
        sv = np.linalg.svd(out.snapshots.data, compute_uv=False)
        bound = out.metadata["rank_bound"]
        assert bound == 7
        assert sv[bound] < 1e-10 * sv[0]

    def test_default_field_split(self):
        spec = GeneratorSpec("periodic_wake", n_dof=90, n_samples=5, dt=0.01, seed=3)
        snap = synthgen.generate(spec).snapshots
        assert [f.name for f in snap.fields] == ["p", "v_x", "v_y"]
        assert all(f.length == 30 for f in snap.fields)

    def test_mode_count_limit(self):
        spec = GeneratorSpec("periodic_wake", n_dof=10, n_samples=5, dt=0.01, seed=0,
                             params={"n_modes": 9})
        with pytest.raises(InvalidSpecError):
            synthgen.generate(spec)


class TestDeterminism:
    @pytest.mark.parametrize("kind,params", [
        ("linear_system", {"eigenvalues": [0.9, [0.8, 0.2]]}),
        ("traveling_wave", {"speed": 2.0}),
        ("periodic_wake", {"n_modes": 2}),
    ])
    def test_same_seed_identical(self, kind, params):
        spec = GeneratorSpec(kind, n_dof=24, n_samples=9, dt=0.05, seed=123,
                             params=params)
        a = synthgen.generate(spec).snapshots.data
        b = synthgen.generate(spec).snapshots.data
        assert a.tobytes() == b.tobytes()
