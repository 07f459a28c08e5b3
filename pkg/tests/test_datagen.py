import json

import numpy as np
import pytest

from fimode.datagen import (
    GeneratorConfig,
    NormalizationTransform,
    ObservationSeries,
    ObservationSet,
    corrupt,
    denormalize_field_output,
    dumps_record,
    fit_normalization,
    generate_dataset,
    generate_record,
    read_dataset,
    sample_field,
    sample_grid,
    write_dataset,
)
from fimode.errors import DatasetParseError
from fimode.fields import PolynomialVectorField
from fimode.solver import SolverConfig, TimeGrid, Trajectory, integrate

FAST = dict(
    obs_per_series=16,
    series_per_system=3,
    horizon=1.5,
    holdout_series=2,
    noise_level=0.05,
)


class TestGeneratorConfig:
    def test_defaults_valid(self):
        GeneratorConfig()

    def test_dim_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            GeneratorConfig(dim_weights=(0.5, 0.2, 0.2))

    def test_unknown_grid_mode(self):
        with pytest.raises(ValueError):
            GeneratorConfig(grid_mode="random")

    def test_solver_dict_coerced(self):
        cfg = GeneratorConfig(solver={"rel_tol": 1e-6})
        assert isinstance(cfg.solver, SolverConfig)
        assert cfg.solver.rel_tol == 1e-6


class TestSampleField:
    def test_dim_weights_degenerate(self):
        cfg = GeneratorConfig(dim_weights=(1.0, 0.0, 0.0), **FAST)
        rng = np.random.default_rng(0)
        assert all(sample_field(rng, cfg).dim == 1 for _ in range(30))

    def test_all_draws_respect_bounds(self):
        cfg = GeneratorConfig(seed=1, **FAST)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            f = sample_field(rng, cfg)
            assert 1 <= f.dim <= 3
            for comp in f.components:
                assert len(comp) <= cfg.max_terms_per_component
                for _, exps in comp:
                    assert sum(exps) <= 3

    def test_coefficient_std_matches_config(self):
        # statistical oracle over the sampler: N(0, coeff_scale^2) coefficients
        cfg = GeneratorConfig(coeff_scale=0.7, **FAST)
        rng = np.random.default_rng(123)
        coeffs = []
        for _ in range(10_000):
            f = sample_field(rng, cfg)
            coeffs.extend(c for comp in f.components for c, _ in comp)
        std = float(np.std(coeffs))
        assert abs(std - 0.7) / 0.7 < 0.05


class TestSampleGrid:
    def test_regular_grid_spacing(self):
        cfg = GeneratorConfig(obs_per_series=200, horizon=9.95)
        grid = sample_grid(np.random.default_rng(0), cfg)
        assert len(grid) == 200
        assert np.allclose(np.diff(grid.times), 0.05)

    def test_regular_two_points(self):
        cfg = GeneratorConfig(obs_per_series=2, horizon=3.0)
        grid = sample_grid(np.random.default_rng(0), cfg)
        assert np.array_equal(grid.times, [0.0, 3.0])

    def test_irregular_strictly_increasing_in_range(self):
        cfg = GeneratorConfig(grid_mode="irregular", obs_per_series=64, horizon=4.0)
        for seed in range(5):
            grid = sample_grid(np.random.default_rng(seed), cfg)
            assert len(grid) == 64
            assert np.all(np.diff(grid.times) > 0)
            assert grid.times[0] >= 0.0 and grid.times[-1] <= 4.0

    def test_irregular_minimum_separation(self):
        cfg = GeneratorConfig(grid_mode="irregular", obs_per_series=200, horizon=9.95)
        grid = sample_grid(np.random.default_rng(7), cfg)
        assert np.min(np.diff(grid.times)) >= 9.95 / (10 * 200)

    def test_irregular_budget_exhaustion(self):
        from fimode.errors import GenerationFailure

        class StuckRng:
            def uniform(self, lo, hi):
                return 0.5 * (lo + hi)  # every candidate lands on the same spot

        cfg = GeneratorConfig(grid_mode="irregular", obs_per_series=8, horizon=1.0)
        with pytest.raises(GenerationFailure):
            sample_grid(StuckRng(), cfg)


class TestCorrupt:
    def _traj(self, rng, n=64, dim=2):
        times = np.linspace(0.0, 1.0, n)
        states = rng.normal(size=(n, dim)).cumsum(axis=0)
        return Trajectory(TimeGrid(times), states)

    def test_zero_noise_is_identity(self):
        rng = np.random.default_rng(0)
        traj = self._traj(rng)
        series = corrupt(traj, 0.0, rng)
        assert np.array_equal(series.values, traj.states)

    def test_constant_trajectory_stays_noise_free(self):
        times = np.linspace(0.0, 1.0, 10)
        traj = Trajectory(TimeGrid(times), np.ones((10, 2)))
        series = corrupt(traj, 0.5, np.random.default_rng(0))
        assert np.array_equal(series.values, traj.states)

    def test_noise_std_calibration(self):
        # 1e5 noise samples; empirical std within 3% of sigma_rel * std_d
        rng = np.random.default_rng(11)
        n = 100_000
        times = np.arange(n, dtype=float)
        states = np.stack([np.linspace(-1, 1, n), np.linspace(0, 5, n)], axis=1)
        traj = Trajectory(TimeGrid(times), states)
        series = corrupt(traj, 0.1, rng)
        noise = series.values - states
        target = 0.1 * states.std(axis=0)
        emp = noise.std(axis=0)
        assert np.all(np.abs(emp - target) / target < 0.03)

    def test_diverged_trajectory_rejected(self):
        grid = TimeGrid(np.linspace(0, 1, 5))
        traj = Trajectory(grid, np.zeros((2, 1)), diverged=True)
        with pytest.raises(ValueError):
            corrupt(traj, 0.1, np.random.default_rng(0))


class TestGenerateRecord:
    def test_full_protocol_shape(self):
        cfg = GeneratorConfig(series_per_system=9, obs_per_series=200, horizon=9.95,
                              holdout_series=4, seed=5)
        record = generate_record(cfg, 0)
        assert len(record.observations) == 9
        assert all(len(s) == 200 for s in record.observations.series)
        assert len(record.clean_trajectories) == 9
        assert len(record.holdout_trajectories) == 4

    def test_single_series_setting(self):
        cfg = GeneratorConfig(series_per_system=1, seed=2, **{
            k: v for k, v in FAST.items() if k != "series_per_system"})
        record = generate_record(cfg, 3)
        assert len(record.observations) == 1

    def test_holdout_initial_states_differ_from_context(self):
        cfg = GeneratorConfig(seed=3, **FAST)
        record = generate_record(cfg, 1)
        ctx = {tuple(t.states[0]) for t in record.clean_trajectories}
        for t in record.holdout_trajectories:
            assert tuple(t.states[0]) not in ctx

    def test_rejection_soundness(self):
        cfg = GeneratorConfig(seed=17, **FAST)
        for rid in range(20):
            record = generate_record(cfg, rid)
            for t in record.clean_trajectories + record.holdout_trajectories:
                assert np.all(np.isfinite(t.states))
                assert np.max(np.abs(t.states)) <= cfg.solver.divergence_threshold
                assert not t.diverged

    def test_observations_live_on_clean_grid(self):
        cfg = GeneratorConfig(seed=29, **FAST)
        record = generate_record(cfg, 0)
        for s, t in zip(record.observations.series, record.clean_trajectories):
            assert np.array_equal(s.times, t.grid.times)

    def test_rejection_budget_exhaustion(self):
        from fimode.errors import GenerationFailure

        # enormous cubic coefficients make every candidate system blow up
        cfg = GeneratorConfig(coeff_scale=1e6, dim_weights=(0.0, 0.0, 1.0),
                              obs_per_series=8, series_per_system=1, horizon=5.0,
                              holdout_series=0, noise_level=0.0, seed=6,
                              rejection_budget=10)
        with pytest.raises(GenerationFailure):
            generate_record(cfg, 0)


class TestSeedDeterminism:
    def test_identical_seed_identical_bytes(self, tmp_path):
        cfg = GeneratorConfig(seed=123, **FAST)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(generate_dataset(cfg, 6), a)
        write_dataset(generate_dataset(cfg, 6), b)
        assert a.read_bytes() == b.read_bytes()

    def test_worker_count_does_not_change_bytes(self, tmp_path):
        cfg = GeneratorConfig(seed=123, **FAST)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(generate_dataset(cfg, 6, workers=1), a)
        write_dataset(generate_dataset(cfg, 6, workers=2), b)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self):
        cfg1 = GeneratorConfig(seed=1, **FAST)
        cfg2 = GeneratorConfig(seed=2, **FAST)
        r1, r2 = generate_record(cfg1, 0), generate_record(cfg2, 0)
        assert dumps_record(r1) != dumps_record(r2)


class TestNormalization:
    def _obs(self, rng, dim=2, k=3, n=20, time_span=10.0):
        series = []
        for _ in range(k):
            times = np.sort(rng.uniform(0, time_span, n))
            times[0] = 0.0
            series.append(ObservationSeries(times, rng.normal(2.0, 3.0, size=(n, dim))))
        return ObservationSet(dim, series)

    def test_time_scale_maps_max_time_to_one(self):
        rng = np.random.default_rng(0)
        obs = self._obs(rng, time_span=10.0)
        tf, obs_n = fit_normalization(obs)
        assert tf.time_scale == max(s.times[-1] for s in obs.series)
        assert max(s.times[-1] for s in obs_n.series) == pytest.approx(1.0)

    def test_states_in_unit_box(self):
        rng = np.random.default_rng(1)
        tf, obs_n = fit_normalization(self._obs(rng))
        pooled = obs_n.stacked_values()
        assert np.max(np.abs(pooled)) <= 1.0 + 1e-12
        assert np.max(np.abs(pooled.mean(axis=0))) < 1e-12

    def test_already_normalized_is_near_identity(self):
        rng = np.random.default_rng(2)
        obs = self._obs(rng)
        _, obs_n = fit_normalization(obs)
        tf2, _ = fit_normalization(obs_n)
        assert tf2.time_scale == pytest.approx(1.0)
        assert np.allclose(tf2.state_shift, 0.0, atol=1e-12)
        assert np.allclose(tf2.state_scale, 1.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        obs = self._obs(rng)
        tf, obs_n = fit_normalization(obs)
        for s, s_n in zip(obs.series, obs_n.series):
            back = tf.denormalize_series(s_n)
            assert np.max(np.abs(back.values - s.values)) < 1e-12
            assert np.max(np.abs(back.times - s.times)) < 1e-12

    def test_zero_spread_dimension_scale_one(self):
        times = np.linspace(0, 1, 5)
        vals = np.stack([np.linspace(-1, 1, 5), np.full(5, 2.0)], axis=1)
        obs = ObservationSet(2, [ObservationSeries(times, vals)])
        tf, obs_n = fit_normalization(obs)
        assert tf.state_scale[1] == 1.0
        assert np.allclose(obs_n.series[0].values[:, 1], 0.0)

    def test_equivariance_under_fitted_transform(self):
        # applying the fitted transform to the raw data and refitting gives
        # the same normalized observations
        rng = np.random.default_rng(4)
        obs = self._obs(rng)
        tf, obs_n = fit_normalization(obs)
        _, obs_nn = fit_normalization(obs_n)
        for a, b in zip(obs_n.series, obs_nn.series):
            assert np.max(np.abs(a.values - b.values)) < 1e-10
            assert np.max(np.abs(a.times - b.times)) < 1e-10


class TestDenormalizeFieldOutput:
    def test_identity_transform(self):
        tf = NormalizationTransform(1.0, np.zeros(2), np.ones(2))
        v = np.array([0.3, -0.7])
        assert np.array_equal(denormalize_field_output(v, tf), v)

    def test_time_rescaling_doubles_field(self):
        tf = NormalizationTransform(2.0, np.zeros(1), np.ones(1))
        f_val = np.array([1.5])
        f_norm = tf.normalize_field_output(f_val)
        assert f_norm[0] == 3.0
        assert denormalize_field_output(f_norm, tf)[0] == 1.5

    def test_chain_rule_against_solver_oracle(self):
        # integrate the normalized field on the normalized grid, denormalize
        # the states, and compare with direct integration
        field = PolynomialVectorField(
            2, [[(0.8, (0, 1))], [(-1.1, (1, 0)), (-0.2, (0, 1))]]
        )
        tf = NormalizationTransform(3.0, np.array([0.5, -1.0]), np.array([2.0, 4.0]))
        grid = TimeGrid(np.linspace(0.0, 3.0, 40))
        x0 = np.array([1.0, 0.3])
        tight = SolverConfig(rel_tol=1e-10, abs_tol=1e-12)
        direct = integrate(field, x0, grid, tight)

        def normalized_field(u):
            return tf.normalize_field_output(field(tf.denormalize_states(u)))

        grid_n = TimeGrid(grid.times / tf.time_scale)
        traj_n = integrate(normalized_field, tf.normalize_states(x0), grid_n, tight)
        back = tf.denormalize_states(traj_n.states)
        assert np.max(np.abs(back - direct.states)) < 1e-6


class TestDatasetIO:
    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_dataset([], path)
        assert path.read_bytes() == b""
        assert read_dataset(path) == []

    def test_round_trip_100_records_bit_identical(self, tmp_path):
        cfg = GeneratorConfig(seed=31, obs_per_series=8, series_per_system=2,
                              horizon=1.0, holdout_series=1, noise_level=0.05)
        records = generate_dataset(cfg, 100)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(records, p1)
        write_dataset(read_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_malformed_line_reports_number(self, tmp_path):
        cfg = GeneratorConfig(seed=8, **FAST)
        records = generate_dataset(cfg, 3)
        path = tmp_path / "broken.jsonl"
        lines = [dumps_record(r) for r in records]
        lines[2] = lines[2][: len(lines[2]) // 2]  # truncate record on line 3
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetParseError, match="line 3"):
            read_dataset(path)

    def test_missing_key_reports_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text(json.dumps({"id": 1}) + "\n")
        with pytest.raises(DatasetParseError, match="line 1"):
            read_dataset(path)

    def test_fields_survive_round_trip_exactly(self, tmp_path):
        cfg = GeneratorConfig(seed=21, **FAST)
        records = generate_dataset(cfg, 4)
        path = tmp_path / "ds.jsonl"
        write_dataset(records, path)
        back = read_dataset(path)
        for a, b in zip(records, back):
            assert a.field.components == b.field.components
            assert a.record_id == b.record_id


class TestObservationTypes:
    def test_series_rejects_decreasing_times(self):
        with pytest.raises(ValueError):
            ObservationSeries(np.array([0.0, 0.0]), np.zeros((2, 1)))

    def test_set_rejects_mixed_dims(self):
        s1 = ObservationSeries(np.array([0.0, 1.0]), np.zeros((2, 1)))
        s2 = ObservationSeries(np.array([0.0, 1.0]), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            ObservationSet(1, [s1, s2])

    def test_subset(self):
        s = [ObservationSeries(np.array([0.0, 1.0]), np.full((2, 1), i)) for i in range(3)]
        obs = ObservationSet(1, s)
        sub = obs.subset(2)
        assert len(sub) == 2
        assert sub.series[0] is s[0]
