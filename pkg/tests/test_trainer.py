import unittest
from collections import Counter
from itertools import permutations
from unittest import mock

import numpy as np
import numpy.testing as npt

from density import FourierConfig
from neuralcore import Tape, forward, forward_with_input_deriv, value_of
from simulate import JumpSpec, PathSet, SdeModel, simulate_paths
from trainer import (
    NetworkPair,
    SelectiveTrainer,
    TrainConfig,
    TrainReport,
    TrainSeeds,
    network_model,
    train_full,
    train_joint,
    train_two_step,
    weighted_sample_without_replacement,
)

TRUTH = SdeModel.from_expressions("1-x", "0.5*(1+0.2*sin(x))", 1.0)
JUMPS = JumpSpec.parse(1.2, 0.8, "uniform:0.1")


def tiny_data(model=TRUTH):
    return simulate_paths(model, 1.0, 20, 2, seed=0, block_size=10, threads=1)


def tiny_config(**overrides):
    values = dict(
        epoch0=1,
        epoch1=1,
        epoch2=1,
        train_f=1,
        R1=2,
        R2=1,
        R3=1,
        R4=1,
        fourier=FourierConfig(M=400, h=0.1),
        n_mc_var=50,
        n_mc_cf=20,
        eval_grid=25,
    )
    values.update(overrides)
    return TrainConfig(**values)


def numeric_gradient(fn, array, eps=1e-6):
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        saved = array[index]
        array[index] = saved + eps
        up = fn()
        array[index] = saved - eps
        down = fn()
        array[index] = saved
        grad[index] = (up - down) / (2 * eps)
    return grad


def hand_data():
    grid = np.arange(8) * 0.1
    paths = np.array(
        [
            [1.0, 1.1, 0.95, 1.2, 1.05, 0.9, 1.0, 1.15],
            [0.5, 0.7, 0.6, 0.8, 0.75, 0.65, 0.9, 0.85],
        ]
    )
    return PathSet(grid, paths, 4)


def residuals_and_variance(trainer, nets, block, path_index):
    x, x_next, _ = trainer.data.transitions(block, path_index)
    dt = trainer.dt
    fx = forward(nets.f_net, x)
    gx, gpx = forward_with_input_deriv(nets.g_net, x, trainer.delta)
    residual = x_next - x - fx / (1.0 + dt * fx * fx) * dt
    variance = gx * gx * dt + 0.5 * (gx * gpx * dt) ** 2
    return residual, variance


class CoefficientNet:
    """Stands in for a network with a known function and derivative."""

    def __init__(self, fn, prime=None, scale=1.0):
        self.fn = fn
        self.prime = prime
        self.scale = scale


def coefficient_forward(net, x, tape=None):
    return net.scale * net.fn(np.asarray(x, dtype=float))


def coefficient_forward_with_input_deriv(net, x, delta, tape=None):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return net.scale * net.fn(x), net.scale * net.prime(x)


class TestWeightedSampling(unittest.TestCase):
    def test_zero_weights_are_never_drawn(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            chosen = weighted_sample_without_replacement([0.0, 1.0, 0.0, 2.0], 2, rng)
            self.assertEqual(sorted(chosen.tolist()), [1, 3])
        self.assertEqual(len(weighted_sample_without_replacement([0.0, 1.0, 0.0, 2.0], 4, rng)), 2)

    def test_all_zero_weights_fall_back_to_uniform(self):
        chosen = weighted_sample_without_replacement(np.zeros(5), 3, np.random.default_rng(1))
        self.assertEqual(len(set(chosen.tolist())), 3)

    def test_first_draw_is_proportional(self):
        rng = np.random.default_rng(2)
        counts = Counter(int(weighted_sample_without_replacement([1.0, 3.0], 1, rng)[0]) for _ in range(4000))
        self.assertAlmostEqual(counts[1] / 4000, 0.75, delta=0.03)

    def test_two_of_five_match_sequential_probabilities(self):
        weights = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        total = weights.sum()
        pairs = {(i, j): weights[i] / total * weights[j] / (total - weights[i]) for i, j in permutations(range(5), 2)}
        self.assertAlmostEqual(sum(pairs.values()), 1.0)
        inclusion = np.zeros(5)
        for (i, j), p in pairs.items():
            inclusion[i] += p
            inclusion[j] += p

        rng = np.random.default_rng(4)
        draws = 20000
        ordered = Counter()
        included = np.zeros(5)
        for _ in range(draws):
            chosen = weighted_sample_without_replacement(weights, 2, rng)
            ordered[tuple(chosen.tolist())] += 1
            included[chosen] += 1
        npt.assert_allclose(included / draws, inclusion, atol=0.015)
        for pair, p in pairs.items():
            with self.subTest(pair=pair):
                self.assertAlmostEqual(ordered[pair] / draws, p, delta=0.01)

    def test_invalid_arguments(self):
        rng = np.random.default_rng(3)
        with self.assertRaises(ValueError):
            weighted_sample_without_replacement([1.0, -1.0], 1, rng)
        with self.assertRaises(ValueError):
            weighted_sample_without_replacement([1.0, np.nan], 1, rng)
        with self.assertRaises(ValueError):
            weighted_sample_without_replacement([1.0, 2.0], 3, rng)


class TestTrainConfig(unittest.TestCase):
    def test_from_dict(self):
        cfg = TrainConfig.from_dict({"epoch1": 5, "fourier": {"M": 50, "h": 0.2}}, seed=9)
        self.assertEqual(cfg.epoch1, 5)
        self.assertEqual(cfg.fourier, FourierConfig(M=50, h=0.2))
        self.assertEqual(cfg.seeds, TrainSeeds.from_root(9))
        self.assertNotEqual(TrainSeeds.from_root(9), TrainSeeds.from_root(10))

    def test_unknown_keys(self):
        with self.assertRaises(ValueError):
            TrainConfig.from_dict({"epochs": 5})

    def test_default_warm_up_depends_on_jumps(self):
        cfg = TrainConfig()
        self.assertEqual(cfg.epochs0(False), 400)
        self.assertEqual(cfg.epochs0(True), 10)
        self.assertEqual(TrainConfig(epoch0=3).epochs0(True), 3)

    def test_validate(self):
        TrainConfig().validate(10)
        with self.assertRaises(ValueError):
            TrainConfig(R1=11).validate(10)
        with self.assertRaises(ValueError):
            TrainConfig(lr=0.0).validate(10)
        with self.assertRaises(ValueError):
            TrainConfig(epoch2=-1).validate(10)


class TestLossGradients(unittest.TestCase):
    def check_gradient(self, trainer, loss, train):
        nets = NetworkPair.create(TrainSeeds())
        trainer.start_epoch(1, 0)
        tape = Tape()
        root = loss(nets, tape)
        leaves = {name: tape.bind(nets.get(name)) for name in train}
        for name in train:
            net = nets.get(name)
            grads = tape.gradient(root, leaves[name])
            layers = len(net.weights)
            for position in (layers, 2 * layers - 1, layers - 1):
                with self.subTest(net=name, param=position):
                    param = net.params[position]
                    numeric = numeric_gradient(lambda: float(value_of(loss(nets, None))), param)
                    npt.assert_allclose(grads[position], numeric, rtol=1e-4, atol=1e-6)

    def test_drift_residual_loss(self):
        trainer = SelectiveTrainer(tiny_data(), JumpSpec(), tiny_config())
        self.check_gradient(trainer, lambda nets, tape: trainer.loss_d1(nets.f_net, 0, 1, tape), ("f",))

    def test_variance_loss_with_jumps(self):
        trainer = SelectiveTrainer(tiny_data(), JUMPS, tiny_config())
        self.check_gradient(trainer, lambda nets, tape: trainer.loss_l2(nets.f_net, nets.g_net, 1, 0, tape, ("g",)), ("g",))

    def test_likelihood_loss(self):
        for jumps in (JumpSpec(), JUMPS):
            with self.subTest(jumps=jumps.active):
                trainer = SelectiveTrainer(tiny_data(), jumps, tiny_config())
                self.check_gradient(trainer, lambda nets, tape: trainer.loss_d2(nets.f_net, nets.g_net, 0, 0, tape), ("f", "g"))

    def test_untrained_network_gets_no_tape(self):
        trainer = SelectiveTrainer(tiny_data(), JumpSpec(), tiny_config())
        nets = NetworkPair.create(TrainSeeds())
        tape = Tape()
        trainer.loss_l1(nets.f_net, nets.g_net, 0, 0, tape)
        self.assertIn(id(nets.f_net), tape.bound)
        self.assertNotIn(id(nets.g_net), tape.bound)

    def test_h_statistic_is_finite(self):
        trainer = SelectiveTrainer(tiny_data(), JUMPS, tiny_config())
        nets = NetworkPair.create(TrainSeeds())
        trainer.start_epoch(3, 0)
        value = trainer.stat_h(nets.f_net, nets.g_net, 1, 1)
        self.assertTrue(np.isfinite(value))
        self.assertGreaterEqual(value, 0.0)

    def test_refinement_losses_with_jumps(self):
        trainer = SelectiveTrainer(tiny_data(), JUMPS, tiny_config())
        self.check_gradient(trainer, lambda nets, tape: trainer.loss_l3(nets.f_net, nets.g_net, 0, 1, tape), ("f",))
        self.check_gradient(trainer, lambda nets, tape: trainer.loss_l34(nets.f_net, nets.g_net, 1, 0, tape), ("f",))
        self.check_gradient(trainer, lambda nets, tape: trainer.loss_l4(nets.f_net, nets.g_net, 1, 1, tape, ("g",)), ("g",))


class TestLossValues(unittest.TestCase):
    def setUp(self):
        self.trainer = SelectiveTrainer(hand_data(), JumpSpec(), tiny_config())
        self.nets = NetworkPair.create(TrainSeeds())

    def loss(self, name, block, path_index):
        fn = getattr(self.trainer, name)
        if name == "loss_d1":
            return float(value_of(fn(self.nets.f_net, block, path_index)))
        return float(value_of(fn(self.nets.f_net, self.nets.g_net, block, path_index)))

    def test_losses_match_direct_formulas(self):
        for block in range(2):
            for path_index in range(2):
                residual, variance = residuals_and_variance(self.trainer, self.nets, block, path_index)
                self.assertEqual(residual.shape, (3,))
                mismatch = (residual * residual - variance) ** 2
                expected = {
                    "loss_d1": np.mean(residual * residual),
                    "loss_l1": abs(np.mean(residual)),
                    "loss_l2": np.mean(mismatch),
                    "loss_l3": np.mean(residual * residual),
                    "loss_l4": np.mean(mismatch),
                    "loss_l34": np.mean(residual * residual) + np.mean(mismatch),
                }
                for name, value in expected.items():
                    with self.subTest(loss=name, block=block, path=path_index):
                        self.assertAlmostEqual(self.loss(name, block, path_index), value, delta=1e-12)

    def test_refinement_losses_split_on_vanishing_diffusion(self):
        residual, variance = residuals_and_variance(self.trainer, self.nets, 1, 0)
        mask = np.array([True, False, True])
        squared = residual * residual
        mismatch = (squared - variance) ** 2
        with mock.patch.object(self.trainer, "_split", return_value=mask):
            value = self.loss("loss_l3", 1, 0)
        self.assertAlmostEqual(value, squared[mask].mean() + squared[~mask].mean(), delta=1e-12)
        self.assertAlmostEqual(self.loss("loss_l4", 1, 0), mismatch.mean(), delta=1e-12)

    def test_h_statistic_is_one_under_true_coefficients(self):
        data = simulate_paths(TRUTH, 2.0, 4000, 1, seed=11, block_size=4000)
        trainer = SelectiveTrainer(data, JumpSpec(), tiny_config(R1=1))
        f_net = CoefficientNet(TRUTH.drift)
        with mock.patch("trainer.forward", coefficient_forward), mock.patch(
            "trainer.forward_with_input_deriv", coefficient_forward_with_input_deriv
        ):
            exact = trainer.stat_h(f_net, CoefficientNet(TRUTH.diffusion, TRUTH.diffusion_prime), 0, 0)
            halved = trainer.stat_h(f_net, CoefficientNet(TRUTH.diffusion, TRUTH.diffusion_prime, scale=0.5), 0, 0)
        self.assertAlmostEqual(exact, 1.0, delta=0.1)
        self.assertAlmostEqual(halved, 4.0, delta=0.4)


class TestTraining(unittest.TestCase):
    def test_three_phase_smoke(self):
        data = tiny_data()
        nets, report = train_full(data, JumpSpec(), tiny_config(), TRUTH)
        for key in ("phase1", "phase2_f", "phase2_g", "phase3_f", "phase3_g"):
            self.assertIn(key, report.traces)
            self.assertTrue(all(np.isfinite(report.traces[key])))
        self.assertEqual(len(report.traces["phase1"]), data.R * data.K)
        self.assertEqual(len(report.traces["phase2_f"]), 2)
        self.assertEqual(set(report.phase_mse), {"phase1", "phase2", "phase3"})
        self.assertTrue(np.isfinite(report.mse_f) and np.isfinite(report.mse_g))
        self.assertEqual(nets.f_net.train_meta["method"], "three-phase")
        self.assertEqual(nets.g_net.train_meta["reset_seed"], TrainSeeds().reset_g)

    def test_training_is_reproducible(self):
        data = tiny_data(SdeModel.from_expressions("1-x", "0.31*x", 1.5, JUMPS))
        first, _ = train_full(data, JUMPS, tiny_config())
        second, _ = train_full(data, JUMPS, tiny_config())
        for p, q in zip(first.f_net.params + first.g_net.params, second.f_net.params + second.g_net.params):
            npt.assert_array_equal(p, q)

    def test_baselines(self):
        data = tiny_data()
        nets, report = train_two_step(data, JumpSpec(), tiny_config(), TRUTH, epochs_f=2, epochs_g=1)
        self.assertEqual(len(report.traces["drift"]), 2 * data.R * data.K)
        self.assertEqual(len(report.traces["diffusion"]), data.R * data.K)
        self.assertIsNotNone(report.mse_f)

        nets, report = train_joint(data, JumpSpec(), tiny_config(), epochs=1)
        self.assertEqual(nets.g_net.train_meta["method"], "joint")
        self.assertIsNone(report.mse_f)

    def test_without_truth_no_mse(self):
        trainer = SelectiveTrainer(tiny_data(), JumpSpec(), tiny_config())
        self.assertEqual(trainer.mse(NetworkPair.create(TrainSeeds())), (None, None))

    def test_non_finite_gradient_is_counted_and_reported(self):
        trainer = SelectiveTrainer(tiny_data(), JumpSpec(), tiny_config())
        nets = NetworkPair.create(TrainSeeds())
        nets.f_net.params[0][0, 0] = np.nan
        before = [p.copy() for p in nets.f_net.params]
        optimizers = trainer._optimizers(nets, ("f",))
        loss = trainer._step(trainer._d1_step, nets, ("f",), optimizers, 0, 0)
        self.assertTrue(np.isnan(loss))
        self.assertEqual(trainer.skipped_updates, 1)
        self.assertEqual(optimizers["f"].skipped, 1)
        self.assertEqual(optimizers["f"].step, 0)
        for p, q in zip(nets.f_net.params, before):
            npt.assert_array_equal(p, q)

        _, report = trainer._finish(nets, TrainReport(), 0.0, "three-phase")
        self.assertEqual(report.skipped_updates, 1)
        self.assertEqual(report.to_dict()["skipped_updates"], 1)


class TestNetworkModel(unittest.TestCase):
    def test_wraps_networks(self):
        nets = NetworkPair.create(TrainSeeds())
        model = network_model(nets.f_net, nets.g_net, x0=0.5, jumps=JUMPS)
        self.assertIsInstance(model.drift(0.3), float)
        x = np.linspace(-1, 1, 5)
        npt.assert_allclose(model.drift(x), forward(nets.f_net, x))
        self.assertTrue(np.all(model.diffusion(x) > 0))
        numeric = (model.diffusion(x + 1e-5) - model.diffusion(x - 1e-5)) / 2e-5
        npt.assert_allclose(model.diffusion_prime(x), numeric, rtol=1e-3, atol=1e-6)
        self.assertEqual(model.diffusion(np.ones((2, 3))).shape, (2, 3))
        self.assertTrue(model.jumps.active)


if __name__ == "__main__":
    unittest.main()
