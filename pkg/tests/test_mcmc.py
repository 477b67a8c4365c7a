import unittest
from unittest import mock

import numpy as np
import numpy.testing as npt
from scipy.integrate import quad

from density import FourierConfig
from mcmc import (
    MhChain,
    MhConfig,
    approx_loglik,
    discriminator_log_ratio,
    h_stat,
    lognormal_density,
    mh_discriminator,
    mh_likelihood,
    minimize_h,
    nelder_mead,
    propose,
    run_sampler,
)
from simulate import JumpPool, JumpSpec, SdeModel, sample_one_step

MODEL = SdeModel.from_expressions("sin(x)", "0.35*x+0.2", 1.5, JumpSpec.parse(1.7, 2.4, "uniform:0.5"))
X, DT = 1.5, 0.5


def observations(count, seed=0):
    return sample_one_step(X, MODEL, DT, np.random.default_rng(seed), size=count)


class TestMhConfig(unittest.TestCase):
    def test_defaults(self):
        mh = MhConfig()
        self.assertEqual(mh.burn, 200)
        self.assertEqual(MhConfig(m=10, burn_in=0).burn, 0)
        self.assertEqual(MhConfig(init=[2, 3]).init, (2.0, 3.0))

    def test_validation(self):
        for kwargs in ({"m": 0}, {"sigma1": 0.0}, {"theta": -1.0}, {"init": (0.0, 1.0)}, {"init": (1.0,)}, {"m": 10, "burn_in": 10}):
            with self.subTest(**kwargs):
                with self.assertRaises(ValueError):
                    MhConfig(**kwargs)
        with self.assertRaises(ValueError):
            MhConfig.from_dict({"iterations": 5})


class TestProposal(unittest.TestCase):
    def test_mean_is_preserved(self):
        draws = propose(np.random.default_rng(0), 1.7, 0.05, size=100000)
        self.assertAlmostEqual(draws.mean(), 1.7, delta=0.002)
        self.assertTrue(np.all(draws > 0))

    def test_density_integrates_to_one(self):
        total, _ = quad(lambda v: lognormal_density(v, 2.4, 0.3), 0, np.inf)
        self.assertAlmostEqual(total, 1.0, places=6)
        with self.assertRaises(ValueError):
            lognormal_density(-1.0, 1.0, 0.1)

    def test_discriminator_acceptance(self):
        self.assertEqual(discriminator_log_ratio(0.5, 0.2, 5.0), 0.0)
        self.assertEqual(discriminator_log_ratio(0.5, 0.5, 5.0), 0.0)
        self.assertAlmostEqual(discriminator_log_ratio(0.2, 0.5, 5.0), 5.0 * (np.exp(0.2) - np.exp(0.5)))
        self.assertEqual(discriminator_log_ratio(0.0, 1e4, 5.0), -np.inf)


class TestScores(unittest.TestCase):
    def test_likelihood_prefers_truth(self):
        obs = observations(300)
        pool = JumpPool.draw(np.random.default_rng(1), 300, MODEL.jumps)
        truth = approx_loglik(1.7, 2.4, obs, X, DT, MODEL, pool=pool)
        self.assertTrue(np.isfinite(truth))
        self.assertGreater(truth, approx_loglik(0.2, 0.3, obs, X, DT, MODEL, pool=pool))
        self.assertEqual(approx_loglik(1.7, 2.4, [], X, DT, MODEL, pool=pool), 0.0)

    def test_h_statistic_prefers_truth(self):
        obs = observations(2000)
        pool = JumpPool.draw(np.random.default_rng(2), 2000, MODEL.jumps)
        self.assertLess(h_stat(1.7, 2.4, obs, X, DT, MODEL, pool), h_stat(0.2, 0.3, obs, X, DT, MODEL, pool))

    def test_minimize_h_does_not_increase_h(self):
        obs = observations(500)
        pool = JumpPool.draw(np.random.default_rng(3), 500, MODEL.jumps)
        lam, gamma = minimize_h(obs, X, DT, MODEL, pool, init=(1.0, 1.0))
        self.assertGreater(lam, 0.0)
        self.assertGreater(gamma, 0.0)
        self.assertLessEqual(h_stat(lam, gamma, obs, X, DT, MODEL, pool), h_stat(1.0, 1.0, obs, X, DT, MODEL, pool))

    def test_nelder_mead_quadratic(self):
        result = nelder_mead(lambda p: (p[0] - 1.0) ** 2 + 3.0 * (p[1] + 2.0) ** 2, [0.0, 0.0])
        npt.assert_allclose(result.x, [1.0, -2.0], atol=1e-4)


class TestChains(unittest.TestCase):
    def test_likelihood_chain(self):
        obs = observations(100)
        mh = MhConfig(m=40, sigma1=0.05, sigma2=0.01, init=(1.5, 2.0))
        first = mh_likelihood(obs, X, DT, MODEL, mh, FourierConfig(), n_mc=100, seed=4)
        second = mh_likelihood(obs, X, DT, MODEL, mh, FourierConfig(), n_mc=100, seed=4)
        npt.assert_array_equal(first.samples, second.samples)
        self.assertEqual(first.samples.shape, (40, 2))
        self.assertTrue(np.all(first.samples > 0))
        self.assertEqual(first.burn_in, 8)
        npt.assert_array_equal(first.samples[0] != (1.5, 2.0), [first.accepted[0]] * 2)

    def test_discriminator_chain(self):
        obs = observations(200)
        mh = MhConfig(m=150, theta=5.0)
        chain = run_sampler("discriminator", obs, X, DT, MODEL, mh, FourierConfig(), 500, seed=5)
        self.assertEqual(chain.algorithm, "discriminator")
        self.assertEqual(chain.samples.shape, (150, 2))
        self.assertGreater(chain.acceptance_rate, 0.0)
        again = mh_discriminator(obs, X, DT, MODEL, mh, n_mc=500, seed=5)
        npt.assert_array_equal(chain.samples, again.samples)

    def test_chain_can_start_from_h_minimum(self):
        obs = observations(200)
        mh = MhConfig(m=5, init_from_h=True)
        chain = mh_discriminator(obs, X, DT, MODEL, mh, n_mc=300, seed=6)
        self.assertNotEqual(chain.init, (1.0, 1.0))

    def test_chain_keeps_pool_cache_bounded(self):
        pools = []
        original = JumpPool.draw

        def record(*args, **kwargs):
            pool = original(*args, **kwargs)
            pools.append(pool)
            return pool

        obs = observations(100)
        with mock.patch.object(JumpPool, "draw", side_effect=record):
            chain = mh_discriminator(obs, X, DT, MODEL, MhConfig(m=200), n_mc=300, seed=7)
        self.assertEqual(chain.samples.shape, (200, 2))
        self.assertEqual(len(pools), 1)
        for pool in pools:
            self.assertLessEqual(pool.cached_batches, pool.cache_size)

    def test_empty_observations_and_unknown_algorithm(self):
        with self.assertRaises(ValueError):
            mh_likelihood([], X, DT, MODEL, MhConfig(m=2))
        with self.assertRaises(ValueError):
            run_sampler("gibbs", observations(5), X, DT, MODEL, MhConfig(m=2), FourierConfig(), None, 0)


class TestSummary(unittest.TestCase):
    def test_statistics_after_burn_in(self):
        samples = np.column_stack([np.r_[np.full(10, 100.0), np.linspace(1, 2, 41)], np.full(51, 0.5)])
        chain = MhChain(samples, np.ones(51, dtype=bool), 10, extra={"truth_in_ci": True})
        summary = chain.summary()
        self.assertAlmostEqual(summary["lambda"]["mean"], 1.5)
        self.assertAlmostEqual(summary["lambda"]["ci_low"], 1.025)
        self.assertAlmostEqual(summary["lambda"]["ci_high"], 1.975)
        self.assertEqual(summary["gamma"]["mean"], 0.5)
        self.assertEqual(summary["acceptance_rate"], 1.0)
        self.assertTrue(summary["truth_in_ci"])


if __name__ == "__main__":
    unittest.main()
