import unittest

import numpy as np
import numpy.testing as npt

from simulate import (
    DivergentPathError,
    JumpPool,
    JumpSpec,
    PathSet,
    SdeModel,
    convergence_slope,
    sample_jump_config,
    sample_one_step,
    simulate_paths,
    tamed_drift,
)

DECAYING = SdeModel.from_expressions("-0.25*x^3", "0.57*x", 1.5)


class TestJumpSpec(unittest.TestCase):
    def test_parse_and_moments(self):
        spec = JumpSpec.parse(1.2, 0.8, "uniform:0.1")
        self.assertTrue(spec.active)
        self.assertAlmostEqual(spec.mu2, 0.01 / 3)
        self.assertAlmostEqual(JumpSpec.parse(1, 1, "normal:0.5").mu2, 0.25)
        self.assertAlmostEqual(JumpSpec.parse(1, 1, "laplace:0.1").mu2, 0.02)

    def test_inactive_without_intensity_or_scale(self):
        self.assertFalse(JumpSpec().active)
        self.assertFalse(JumpSpec(lam=1.0).active)

    def test_validation(self):
        with self.assertRaises(ValueError):
            JumpSpec(lam=-1.0)
        with self.assertRaises(ValueError):
            JumpSpec.parse(1, 1, "cauchy:1")
        with self.assertRaises(ValueError):
            JumpSpec.parse(1, 1, "uniform:abc")

    def test_sample_sizes_follow_law(self):
        rng = np.random.default_rng(0)
        sizes = JumpSpec.parse(1, 1, "uniform:0.5").sample_sizes(rng, 100000)
        self.assertLessEqual(np.abs(sizes).max(), 0.5)
        self.assertAlmostEqual(np.mean(sizes ** 2), 0.25 / 3, delta=0.002)


class TestOneStep(unittest.TestCase):
    def test_tamed_drift_is_bounded(self):
        fx = np.array([-1e6, -1.0, 0.0, 2.0, 1e6])
        dt = 0.01
        tamed = tamed_drift(fx, dt)
        self.assertTrue(np.all(np.abs(tamed) <= 0.5 / np.sqrt(dt) + 1e-12))
        self.assertAlmostEqual(tamed[3], 2.0 / 1.04)

    def test_zero_diffusion_is_deterministic(self):
        model = SdeModel.from_expressions("1-x", "0", 0.0)
        draws = sample_one_step(0.0, model, 0.1, np.random.default_rng(1), size=5)
        npt.assert_allclose(draws, 0.1 / 1.01)

    def test_scalar_in_scalar_out(self):
        value = sample_one_step(1.0, DECAYING, 0.01, np.random.default_rng(2))
        self.assertIsInstance(value, float)

    def test_diffusion_only_moments(self):
        model = SdeModel.from_expressions("1-x", "0.5*x", 1.0)
        x, dt = 1.5, 0.1
        draws = sample_one_step(x, model, dt, np.random.default_rng(3), size=400000)
        f = 1 - x
        mean = x + f / (1 + dt * f * f) * dt
        variance = 0.25 * x * x * dt + 0.5 * (0.25 * x * dt) ** 2
        self.assertAlmostEqual(draws.mean(), mean, delta=0.002)
        self.assertAlmostEqual(draws.var() / variance, 1.0, delta=0.02)

    def test_jump_config_times_inside_step(self):
        rng = np.random.default_rng(4)
        spec = JumpSpec.parse(50.0, 1.0, "normal:1")
        for _ in range(20):
            config = sample_jump_config(rng, 2.0, 0.1, spec)
            self.assertEqual(config.times.shape, (config.count,))
            self.assertTrue(np.all((config.times > 2.0) & (config.times <= 2.1)))
            self.assertTrue(np.all(np.diff(config.times) >= 0))


class TestPaths(unittest.TestCase):
    def test_shape_grid_and_start(self):
        paths = simulate_paths(DECAYING, 5.0, 1000, 10, seed=7, block_size=100)
        self.assertEqual(paths.paths.shape, (10, 1000))
        self.assertEqual(paths.R, 10)
        npt.assert_allclose(paths.grid, np.linspace(0, 5, 1000))
        npt.assert_array_equal(paths.paths[:, 0], 1.5)
        self.assertTrue(np.all(np.isfinite(paths.paths)))

    def test_reproducible_and_thread_independent(self):
        jumps = JumpSpec.parse(1.2, 0.8, "uniform:0.1")
        model = SdeModel.from_expressions("1-x", "0.31*x", 1.5, jumps)
        a = simulate_paths(model, 1.0, 200, 4, seed=11, block_size=50, threads=1)
        b = simulate_paths(model, 1.0, 200, 4, seed=11, block_size=50, threads=4)
        npt.assert_array_equal(a.paths, b.paths)
        c = simulate_paths(model, 1.0, 200, 4, seed=12, block_size=50)
        self.assertFalse(np.array_equal(a.paths, c.paths))

    def test_divergence_is_reported(self):
        model = SdeModel.from_expressions("0", "exp(x^2)", 5.0)
        with self.assertRaises(DivergentPathError) as ctx:
            simulate_paths(model, 10.0, 1000, 2, seed=0, block_size=100, threads=1)
        self.assertEqual(ctx.exception.seed, 0)
        self.assertIsNotNone(ctx.exception.path_index)

    def test_invalid_sizes(self):
        with self.assertRaises(ValueError):
            simulate_paths(DECAYING, 5.0, 1000, 10, seed=0, block_size=300)
        with self.assertRaises(ValueError):
            simulate_paths(DECAYING, 0.0, 1000, 10, seed=0, block_size=100)

    def test_blocks_do_not_cross_boundaries(self):
        grid = np.linspace(0, 1, 8)
        paths = PathSet(grid, np.arange(16, dtype=float).reshape(2, 8), 4)
        x, x_next, dts = paths.transitions(1, 1)
        npt.assert_array_equal(x, [12.0, 13.0, 14.0])
        npt.assert_array_equal(x_next, [13.0, 14.0, 15.0])
        npt.assert_allclose(dts, 1 / 7)
        with self.assertRaises(IndexError):
            paths.block_bounds(2)


class TestJumpPool(unittest.TestCase):
    def test_counts_follow_poisson(self):
        spec = JumpSpec.parse(1.7, 2.4, "uniform:0.5")
        pool = JumpPool.draw(np.random.default_rng(5), 20000, spec)
        batch = pool.batch(1.7, 0.5)
        self.assertEqual(batch.n_total, 20000)
        self.assertAlmostEqual(batch.zero_fraction, np.exp(-0.85), delta=0.01)
        self.assertAlmostEqual(batch.counts.sum() / 20000, 0.85, delta=0.02)

    def test_batch_layout(self):
        spec = JumpSpec.parse(3.0, 1.0, "normal:1")
        batch = JumpPool.draw(np.random.default_rng(6), 500, spec).batch(3.0, 0.4)
        self.assertTrue(np.all(batch.counts > 0))
        npt.assert_array_equal(batch.mask.sum(axis=1), batch.counts)
        self.assertTrue(np.all(np.diff(batch.offsets, axis=1) >= 0))
        self.assertTrue(np.all(batch.sizes[~batch.mask] == 0.0))
        npt.assert_allclose(batch.intervals(0.4).sum(axis=1), 0.4)
        self.assertTrue(np.all(batch.remaining(0.4)[~batch.mask] == 0.0))

    def test_larger_intensity_never_removes_jumps(self):
        spec = JumpSpec.parse(1.0, 1.0, "uniform:0.1")
        pool = JumpPool.draw(np.random.default_rng(8), 1000, spec)
        self.assertGreaterEqual(pool.batch(2.0, 0.5).counts.sum(), pool.batch(1.0, 0.5).counts.sum())
        self.assertIs(pool.batch(1.0, 0.5), pool.batch(1.0, 0.5))

    def test_zero_intensity(self):
        pool = JumpPool.draw(np.random.default_rng(9), 100, JumpSpec.parse(1, 1, "uniform:0.1"))
        batch = pool.batch(0.0, 0.5)
        self.assertEqual(batch.n_jumping, 0)
        self.assertEqual(batch.zero_fraction, 1.0)

    def test_cache_keeps_recent_batches_only(self):
        spec = JumpSpec.parse(1.0, 1.0, "uniform:0.1")
        pool = JumpPool.draw(np.random.default_rng(10), 200, spec)
        current = pool.batch(1.0, 0.5)
        for lam in np.linspace(0.5, 3.0, 100):
            pool.batch(lam, 0.5)
            self.assertIs(pool.batch(1.0, 0.5), current)
        self.assertLessEqual(pool.cached_batches, pool.cache_size)

        pool = JumpPool(pool.count_uniforms, pool.time_uniforms, pool.sizes, spec, cache_size=2)
        first = pool.batch(1.0, 0.5)
        pool.batch(2.0, 0.5)
        pool.batch(3.0, 0.5)
        self.assertEqual(pool.cached_batches, 2)
        rebuilt = pool.batch(1.0, 0.5)
        self.assertIsNot(rebuilt, first)
        npt.assert_array_equal(rebuilt.counts, first.counts)
        npt.assert_array_equal(rebuilt.offsets, first.offsets)


class TestConvergence(unittest.TestCase):
    def test_linear_sde_has_order_one(self):
        model = SdeModel.from_expressions("-x", "0.5*x", 1.5)
        result = convergence_slope(model, 1.0, [64, 128, 256, 512, 1024], K_mc=2000, seed=3, reference_N=16384)
        self.assertEqual(result.reference_N, 16384)
        self.assertGreaterEqual(result.slope, 0.8)
        self.assertLessEqual(result.slope, 1.2)
        self.assertTrue(all(a > b for a, b in zip(result.errors, result.errors[1:])))

    def test_rejects_jumps_and_bad_levels(self):
        jumps = SdeModel.from_expressions("1-x", "1", 1.5, JumpSpec.parse(1, 1, "uniform:0.1"))
        with self.assertRaises(ValueError):
            convergence_slope(jumps, 1.0, [8, 16], 10, 0)
        with self.assertRaises(ValueError):
            convergence_slope(DECAYING, 1.0, [8, 12], 10, 0)


if __name__ == "__main__":
    unittest.main()
