"""
Neural estimation of drift and diffusion from discretely observed paths.

Training runs in three phases:

1. Joint warm-up of both networks on the Fourier-inverted likelihood, after which
   the diffusion network is re-initialized.
2. Alternating moment matching: blocks are drawn with probability proportional to
   their first-moment (drift) or second-moment (diffusion) loss.
3. Refinement on standardized residuals: the drift trains on blocks with large H
   statistics, the diffusion on blocks with small ones.

Two simpler baselines (drift first then diffusion, and a single joint likelihood
fit) are kept for comparison runs.
"""

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from density import ClampCounter, FourierConfig, transition_density
from moments import second_moment_jump, second_moment_nojump
from neuralcore import (
    F_WIDTHS,
    G_WIDTHS,
    AdamState,
    Mlp,
    Tape,
    adam_step,
    forward,
    forward_with_input_deriv,
    value_of,
)
from simulate import JumpBatch, JumpPool, JumpSpec, PathSet, SdeModel, shifted_diffusion, tamed_drift

logger = structlog.get_logger(__name__)

BOTH = ("f", "g")
DRIFT_ONLY = ("f",)
DIFFUSION_ONLY = ("g",)


@dataclass
class TrainSeeds:
    init_f: int = 1
    init_g: int = 2
    reset_g: int = 3
    selection: int = 4
    mc: int = 5

    @classmethod
    def from_root(cls, seed: int) -> "TrainSeeds":
        """Derive every training seed from one root seed."""
        state = np.random.SeedSequence(seed).generate_state(5)
        return cls(*(int(s) for s in state))


@dataclass
class TrainConfig:
    """Hyperparameters of the three-phase algorithm. epoch0 defaults to 400 without jumps and 10 with them."""

    epoch0: Optional[int] = None
    epoch1: int = 100
    epoch2: int = 400
    train_f: int = 4
    R1: int = 8
    R2: int = 2
    R3: int = 4
    R4: int = 4
    lr: float = 1e-3
    fourier: FourierConfig = field(default_factory=FourierConfig)
    n_mc_var: int = 400
    n_mc_cf: int = 200
    seeds: TrainSeeds = field(default_factory=TrainSeeds)
    eval_grid: int = 200
    delta: float = 1e-3

    @classmethod
    def from_dict(cls, payload: dict, seed: Optional[int] = None) -> "TrainConfig":
        """
        Build from a task block, rejecting unknown keys.

        Args:
            payload: Task parameters (nested "fourier" and "seeds" blocks allowed)
            seed: Root seed used when no explicit "seeds" block is given
        """
        allowed = {f.name for f in fields(cls)}
        unknown = set(payload) - allowed
        if unknown:
            raise ValueError(f"Unknown training settings: {sorted(unknown)}")
        values = dict(payload)
        if "fourier" in values:
            values["fourier"] = FourierConfig.from_dict(values["fourier"])
        if "seeds" in values:
            values["seeds"] = TrainSeeds(**values["seeds"])
        elif seed is not None:
            values["seeds"] = TrainSeeds.from_root(seed)
        return cls(**values)

    def epochs0(self, jumps_active: bool) -> int:
        if self.epoch0 is not None:
            return self.epoch0
        return 10 if jumps_active else 400

    def validate(self, R: int) -> None:
        for name in ("R1", "R2", "R3", "R4"):
            value = getattr(self, name)
            if not 0 < value <= R:
                raise ValueError(f"{name}={value} must be between 1 and the number of blocks R={R}")
        for name in ("epoch1", "epoch2", "train_f", "n_mc_var", "n_mc_cf", "eval_grid"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epoch0 is not None and self.epoch0 < 0:
            raise ValueError("epoch0 must be non-negative")
        if not self.lr > 0 or not self.delta > 0:
            raise ValueError("Learning rate and finite-difference step must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkPair:
    f_net: Mlp
    g_net: Mlp

    @classmethod
    def create(cls, seeds: TrainSeeds) -> "NetworkPair":
        return cls(Mlp.create(F_WIDTHS, "linear", seeds.init_f), Mlp.create(G_WIDTHS, "softplus", seeds.init_g))

    def get(self, name: str) -> Mlp:
        return self.f_net if name == "f" else self.g_net


@dataclass
class TrainReport:
    traces: Dict[str, List[float]] = field(default_factory=dict)
    phase_mse: Dict[str, Dict[str, float]] = field(default_factory=dict)
    mse_f: Optional[float] = None
    mse_g: Optional[float] = None
    clamp_count: int = 0
    skipped_updates: int = 0
    density_evaluations: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_sample_without_replacement(weights: Sequence[float], k: int, rng: np.random.Generator) -> np.ndarray:
    """
    Sequentially draw k distinct indices, each with probability proportional to its
    remaining weight.

    Zero-weight indices are never drawn, so fewer than k indices come back when
    fewer than k weights are positive. All-zero weights fall back to uniform.
    """
    w = np.array(weights, dtype=float)
    if w.ndim != 1 or np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("Selection weights must be finite and non-negative")
    if not 0 <= k <= w.shape[0]:
        raise ValueError(f"Cannot select {k} of {w.shape[0]} indices")
    if w.sum() <= 0:
        logger.warning("All selection weights are zero, drawing uniformly", count=int(w.shape[0]))
        w = np.ones_like(w)

    chosen = []
    for _ in range(k):
        total = w.sum()
        if total <= 0:
            break
        index = int(rng.choice(w.shape[0], p=w / total))
        chosen.append(index)
        w[index] = 0.0
    return np.asarray(chosen, dtype=int)


def _masked_mean(values, mask: np.ndarray):
    """Mean over the masked entries, or 0 when the mask is empty."""
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0
    return (values * mask).sum() / float(count)


class SelectiveTrainer:
    """
    Losses and phases of the estimation algorithm for one data set.

    Jump configurations used inside the losses are frozen per (phase, epoch, block)
    so every optimizer step within an epoch sees the same Monte Carlo noise.
    """

    def __init__(self, data: PathSet, jumps: JumpSpec, cfg: TrainConfig, truth: Optional[SdeModel] = None):
        cfg.validate(data.R)
        self.data = data
        self.jumps = jumps
        self.cfg = cfg
        self.truth = truth
        self.dt = data.dt
        states = data.pooled_states()
        self.delta = cfg.delta * max(1.0, float(np.std(states)))
        self.counter = ClampCounter()
        self.skipped_updates = 0
        self._epoch_key = (0, 0)
        self._batches: Dict[tuple, JumpBatch] = {}

    # Monte Carlo pools

    def start_epoch(self, phase: int, epoch: int) -> None:
        self._epoch_key = (phase, epoch)
        self._batches.clear()

    def _batch(self, block: int, kind: int) -> Optional[JumpBatch]:
        if not self.jumps.active:
            return None
        key = self._epoch_key + (block, kind)
        if key not in self._batches:
            size = self.cfg.n_mc_var if kind == 0 else self.cfg.n_mc_cf
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seeds.mc, *key]))
            self._batches[key] = JumpPool.draw(rng, size, self.jumps).batch(self.jumps.lam, self.dt)
        return self._batches[key]

    # Building blocks

    def _transitions(self, block: int, path_index: int):
        x, x_next, _ = self.data.transitions(block, path_index)
        return x, x_next

    def _residual(self, f_net: Mlp, x, x_next, tape):
        fx = forward(f_net, x, tape)
        return x_next - x - tamed_drift(fx, self.dt) * self.dt

    def _variance(self, g_net: Mlp, x, block: int, tape):
        gx, gpx = forward_with_input_deriv(g_net, x, self.delta, tape)
        batch = self._batch(block, 0)
        if batch is None:
            return second_moment_nojump(gx, gpx, self.dt), gx
        shifted = shifted_diffusion(lambda p: forward(g_net, p, tape), x, gx, self.jumps.gamma, batch)
        variance = second_moment_jump(gx, gpx, shifted, batch, self.dt, self.jumps.gamma, self.jumps.mu2, self.jumps.lam)
        return variance, gx

    @staticmethod
    def _tape_for(name: str, train: Sequence[str], tape: Optional[Tape]):
        return tape if tape is not None and name in train else None

    # Losses

    def loss_d1(self, f_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None):
        """Mean squared drift residual over one block of one path."""
        x, x_next = self._transitions(block, path_index)
        residual = self._residual(f_net, x, x_next, tape)
        return np.abs((residual * residual).mean())

    def loss_d2(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=BOTH):
        """Negative log-likelihood of the block under the networks' one-step density."""
        x, x_next = self._transitions(block, path_index)
        fx = forward(f_net, x, self._tape_for("f", train, tape))
        g_tape = self._tape_for("g", train, tape)
        gx, gpx = forward_with_input_deriv(g_net, x, self.delta, g_tape)
        batch = self._batch(block, 1)
        shifted = None
        if batch is not None:
            shifted = shifted_diffusion(lambda p: forward(g_net, p, g_tape), x, gx, self.jumps.gamma, batch)
        densities = transition_density(
            x_next, x, fx, gx, gpx, self.dt, self.cfg.fourier, self.jumps if batch is not None else None, batch, shifted, self.counter
        )
        return -np.log(densities).sum()

    def loss_l1(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=DRIFT_ONLY):
        """Absolute mean of the signed drift residuals."""
        x, x_next = self._transitions(block, path_index)
        residual = self._residual(f_net, x, x_next, self._tape_for("f", train, tape))
        return np.abs(residual.mean())

    def loss_l2(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=DIFFUSION_ONLY):
        """Mean squared mismatch between squared residuals and the model variance."""
        x, x_next = self._transitions(block, path_index)
        residual = self._residual(f_net, x, x_next, self._tape_for("f", train, tape))
        variance, _ = self._variance(g_net, x, block, self._tape_for("g", train, tape))
        mismatch = residual * residual - variance
        return (mismatch * mismatch).mean()

    def _split(self, g_net: Mlp, x) -> np.ndarray:
        return value_of(forward(g_net, x)) != 0.0

    def stat_h(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int) -> float:
        """
        Average squared standardized residual, taken separately over the transitions
        where the diffusion network is non-zero and where it vanishes.
        """
        x, x_next = self._transitions(block, path_index)
        residual = value_of(self._residual(f_net, x, x_next, None))
        variance, gx = self._variance(g_net, x, block, None)
        variance = value_of(variance)
        nonzero = value_of(gx) != 0.0
        with np.errstate(all="ignore"):
            squared = np.where(variance > 0, residual * residual / np.where(variance > 0, variance, 1.0), residual * residual)
        return float(_masked_mean(squared, nonzero) + _masked_mean(squared, ~nonzero))

    def loss_l3(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=DRIFT_ONLY):
        x, x_next = self._transitions(block, path_index)
        residual = self._residual(f_net, x, x_next, self._tape_for("f", train, tape))
        nonzero = self._split(g_net, x)
        squared = residual * residual
        return _masked_mean(squared, nonzero) + _masked_mean(squared, ~nonzero)

    def loss_l4(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=DRIFT_ONLY):
        x, x_next = self._transitions(block, path_index)
        residual = self._residual(f_net, x, x_next, self._tape_for("f", train, tape))
        variance, gx = self._variance(g_net, x, block, self._tape_for("g", train, tape))
        nonzero = value_of(gx) != 0.0
        mismatch = residual * residual - variance
        squared = mismatch * mismatch
        return _masked_mean(squared, nonzero) + _masked_mean(squared, ~nonzero)

    def loss_l34(self, f_net: Mlp, g_net: Mlp, block: int, path_index: int, tape: Optional[Tape] = None, train=DRIFT_ONLY):
        return self.loss_l3(f_net, g_net, block, path_index, tape, train) + self.loss_l4(f_net, g_net, block, path_index, tape, train)

    # Optimization

    def _step(self, loss_fn, nets: NetworkPair, train: Sequence[str], optimizers: Dict[str, AdamState], block: int, path_index: int) -> float:
        tape = Tape()
        loss = loss_fn(nets.f_net, nets.g_net, block, path_index, tape=tape, train=train)
        trained = [nets.get(name) for name in train]
        leaves = [leaf for net in trained for leaf in tape.bind(net)]
        grads = tape.gradient(loss, leaves)
        offset = 0
        for name, net in zip(train, trained):
            count = len(net.params)
            if not adam_step(net.params, grads[offset : offset + count], optimizers[name]):
                self.skipped_updates += 1
            offset += count
        return float(value_of(loss))

    def _optimizers(self, nets: NetworkPair, train: Sequence[str]) -> Dict[str, AdamState]:
        return {name: AdamState.for_params(nets.get(name).params, self.cfg.lr) for name in train}

    def _d2_step(self, f_net, g_net, block, path_index, tape=None, train=BOTH):
        return self.loss_d2(f_net, g_net, block, path_index, tape, train)

    def _d1_step(self, f_net, g_net, block, path_index, tape=None, train=DRIFT_ONLY):
        return self.loss_d1(f_net, block, path_index, tape)

    def _selection_rng(self, phase: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seeds.selection, phase]))

    def _sweep(self, loss_fn, nets, train, optimizers, phase: int, epochs: int, trace: List[float]) -> None:
        """Train on every block of every path for a number of epochs."""
        for epoch in range(epochs):
            self.start_epoch(phase, epoch)
            for block in range(self.data.R):
                for path_index in range(self.data.K):
                    trace.append(self._step(loss_fn, nets, train, optimizers, block, path_index))
            logger.debug("Finished epoch", phase=phase, epoch=epoch, loss=trace[-1] if trace else None)

    def run_phase1(self, nets: NetworkPair, report: TrainReport) -> NetworkPair:
        """Joint likelihood warm-up, then a fresh diffusion network."""
        epochs = self.cfg.epochs0(self.jumps.active)
        trace = report.traces.setdefault("phase1", [])
        logger.info("Phase 1: joint likelihood training", epochs=epochs)
        self._sweep(self._d2_step, nets, BOTH, self._optimizers(nets, BOTH), 1, epochs, trace)
        nets.g_net = Mlp.create(G_WIDTHS, "softplus", self.cfg.seeds.reset_g)
        nets.g_net.train_meta["reset_seed"] = self.cfg.seeds.reset_g
        self._record_mse(nets, report, "phase1")
        return nets

    def run_phase2(self, nets: NetworkPair, report: TrainReport) -> NetworkPair:
        """Alternating moment matching with loss-weighted block selection."""
        rng = self._selection_rng(2)
        optimizers = self._optimizers(nets, BOTH)
        f_trace = report.traces.setdefault("phase2_f", [])
        g_trace = report.traces.setdefault("phase2_g", [])
        R, K = self.data.R, self.data.K
        logger.info("Phase 2: selective alternating training", epochs=self.cfg.epoch1)
        for epoch in range(self.cfg.epoch1):
            self.start_epoch(2, epoch)
            paths = rng.integers(K, size=R)
            weights = [float(value_of(self.loss_l1(nets.f_net, nets.g_net, j, paths[j]))) for j in range(R)]
            for j in weighted_sample_without_replacement(weights, self.cfg.R1, rng):
                f_trace.append(self._step(self.loss_l1, nets, DRIFT_ONLY, optimizers, j, paths[j]))

            paths = rng.integers(K, size=R)
            weights = [float(value_of(self.loss_l2(nets.f_net, nets.g_net, j, paths[j]))) for j in range(R)]
            for j in weighted_sample_without_replacement(weights, self.cfg.R2, rng):
                g_trace.append(self._step(self.loss_l2, nets, DIFFUSION_ONLY, optimizers, j, paths[j]))
        self._record_mse(nets, report, "phase2")
        return nets

    def run_phase3(self, nets: NetworkPair, report: TrainReport) -> NetworkPair:
        """Refinement on standardized residuals: drift on large H, diffusion on small H."""
        rng = self._selection_rng(3)
        optimizers = self._optimizers(nets, BOTH)
        f_trace = report.traces.setdefault("phase3_f", [])
        g_trace = report.traces.setdefault("phase3_g", [])
        R, K = self.data.R, self.data.K
        logger.info("Phase 3: standardized refinement", epochs=self.cfg.epoch2, train_f=self.cfg.train_f)
        for epoch in range(self.cfg.epoch2):
            self.start_epoch(3, epoch)
            for _ in range(self.cfg.train_f):
                paths = rng.integers(K, size=R)
                h_values = [self.stat_h(nets.f_net, nets.g_net, j, paths[j]) for j in range(R)]
                for j in weighted_sample_without_replacement(h_values, self.cfg.R3, rng):
                    f_trace.append(self._step(self.loss_l34, nets, DRIFT_ONLY, optimizers, j, paths[j]))

            paths = rng.integers(K, size=R)
            h_values = np.asarray([self.stat_h(nets.f_net, nets.g_net, j, paths[j]) for j in range(R)])
            inverse = np.where(h_values > 0, 1.0 / np.where(h_values > 0, h_values, 1.0), 0.0)
            for j in weighted_sample_without_replacement(inverse, self.cfg.R4, rng):
                g_trace.append(self._step(self.loss_l2, nets, DIFFUSION_ONLY, optimizers, j, paths[j]))
        self._record_mse(nets, report, "phase3")
        return nets

    # Evaluation

    def evaluation_grid(self) -> np.ndarray:
        states = self.data.pooled_states()
        return np.linspace(float(states.min()), float(states.max()), self.cfg.eval_grid)

    def mse(self, nets: NetworkPair) -> Tuple[Optional[float], Optional[float]]:
        """Mean squared errors of both networks against the true coefficients on the evaluation grid."""
        if self.truth is None:
            return None, None
        grid = self.evaluation_grid()
        mse_f = float(np.mean((forward(nets.f_net, grid) - self.truth.drift(grid)) ** 2))
        mse_g = float(np.mean((forward(nets.g_net, grid) - self.truth.diffusion(grid)) ** 2))
        return mse_f, mse_g

    def _record_mse(self, nets: NetworkPair, report: TrainReport, phase: str) -> None:
        mse_f, mse_g = self.mse(nets)
        if mse_f is not None:
            report.phase_mse[phase] = {"mse_f": mse_f, "mse_g": mse_g}
            logger.info("Phase finished", phase=phase, mse_f=mse_f, mse_g=mse_g)

    def _finish(self, nets: NetworkPair, report: TrainReport, started: float, method: str) -> Tuple[NetworkPair, TrainReport]:
        report.mse_f, report.mse_g = self.mse(nets)
        report.clamp_count = self.counter.clamped
        report.density_evaluations = self.counter.total
        report.skipped_updates = self.skipped_updates
        report.wall_time = time.perf_counter() - started
        if self.counter.clamped:
            logger.warning("Density values clamped to the floor", clamped=self.counter.clamped, total=self.counter.total)
        if self.skipped_updates:
            logger.warning("Optimizer updates skipped on non-finite gradients", skipped=self.skipped_updates)
        meta = {"method": method, "config": self.cfg.to_dict(), "delta": self.delta, "jumps": asdict(self.jumps)}
        nets.f_net.train_meta.update(meta)
        nets.g_net.train_meta.update(meta)
        return nets, report


def train_full(data: PathSet, jumps: JumpSpec, cfg: TrainConfig, truth: Optional[SdeModel] = None) -> Tuple[NetworkPair, TrainReport]:
    """
    Run the three phases and report final (and per-phase) errors.

    Args:
        data: Observed paths
        jumps: Known jump specification (lambda, gamma, law)
        cfg: Training configuration
        truth: True model, enables MSE reporting

    Returns:
        tuple: (trained networks, report)
    """
    started = time.perf_counter()
    trainer = SelectiveTrainer(data, jumps, cfg, truth)
    nets = NetworkPair.create(cfg.seeds)
    report = TrainReport()
    trainer.run_phase1(nets, report)
    trainer.run_phase2(nets, report)
    trainer.run_phase3(nets, report)
    return trainer._finish(nets, report, started, "three-phase")


def train_two_step(
    data: PathSet,
    jumps: JumpSpec,
    cfg: TrainConfig,
    truth: Optional[SdeModel] = None,
    epochs_f: int = 400,
    epochs_g: int = 30,
) -> Tuple[NetworkPair, TrainReport]:
    """Baseline: fit the drift on squared residuals, then the diffusion alone on the likelihood."""
    started = time.perf_counter()
    trainer = SelectiveTrainer(data, jumps, cfg, truth)
    nets = NetworkPair.create(cfg.seeds)
    report = TrainReport()
    trainer._sweep(trainer._d1_step, nets, DRIFT_ONLY, trainer._optimizers(nets, DRIFT_ONLY), 1, epochs_f, report.traces.setdefault("drift", []))
    trainer._sweep(trainer._d2_step, nets, DIFFUSION_ONLY, trainer._optimizers(nets, DIFFUSION_ONLY), 2, epochs_g, report.traces.setdefault("diffusion", []))
    return trainer._finish(nets, report, started, "two-step")


def train_joint(
    data: PathSet,
    jumps: JumpSpec,
    cfg: TrainConfig,
    truth: Optional[SdeModel] = None,
    epochs: int = 30,
) -> Tuple[NetworkPair, TrainReport]:
    """Baseline: fit both networks together on the likelihood only."""
    started = time.perf_counter()
    trainer = SelectiveTrainer(data, jumps, cfg, truth)
    nets = NetworkPair.create(cfg.seeds)
    report = TrainReport()
    trainer._sweep(trainer._d2_step, nets, BOTH, trainer._optimizers(nets, BOTH), 1, epochs, report.traces.setdefault("joint", []))
    return trainer._finish(nets, report, started, "joint")


def network_model(f_net: Mlp, g_net: Mlp, x0: float = 1.5, jumps: Optional[JumpSpec] = None, delta: float = 1e-3) -> SdeModel:
    """Wrap trained networks as a model with the finite-difference rule for g'."""

    def diffusion_prime(x):
        values = np.asarray(x, dtype=float)
        deriv = forward_with_input_deriv(g_net, values.ravel(), delta)[1]
        return float(deriv[0]) if values.ndim == 0 else deriv.reshape(values.shape)

    def drift(x):
        values = np.asarray(x, dtype=float)
        out = forward(f_net, values.ravel())
        return float(out[0]) if values.ndim == 0 else out.reshape(values.shape)

    def diffusion(x):
        values = np.asarray(x, dtype=float)
        out = forward(g_net, values.ravel())
        return float(out[0]) if values.ndim == 0 else out.reshape(values.shape)

    return SdeModel(drift, diffusion, diffusion_prime, float(x0), jumps or JumpSpec(), label="networks")
