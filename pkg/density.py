"""
Transition densities by Fourier inversion of the one-step characteristic function.

p(y) = h/(2 pi) * sum_{m=-M..M} exp(-i u_m y) phi(u_m), with u_m = m h + i a.
Densities below the floor are clamped to it and counted, so likelihoods stay finite.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import structlog
from scipy.integrate import cumulative_trapezoid

from charfun import conditional_cf, phase, scheme_cf_parts
from neuralcore import ComplexValue, value_of
from simulate import JumpPool, SdeModel, shifted_diffusion

logger = structlog.get_logger(__name__)

IMAGINARY_TOLERANCE = 1e-6


class ImaginaryResidueError(ArithmeticError):
    """Raised when an undamped inversion leaves a significant imaginary part."""


@dataclass(frozen=True)
class FourierConfig:
    M: int = 200
    h: float = 0.05
    a: float = 0.0
    floor: float = 1e-12

    def __post_init__(self):
        if self.M < 1 or not self.h > 0 or not self.floor > 0:
            raise ValueError(f"Invalid Fourier settings M={self.M}, h={self.h}, floor={self.floor}")

    def u_points(self) -> ComplexValue:
        re = np.arange(-self.M, self.M + 1) * self.h
        return ComplexValue(re, np.full_like(re, self.a))

    @classmethod
    def from_dict(cls, payload: dict) -> "FourierConfig":
        unknown = set(payload) - {"M", "h", "a", "floor"}
        if unknown:
            raise ValueError(f"Unknown Fourier settings: {sorted(unknown)}")
        return cls(**payload)


# Finer grid for density plots
ANALYSIS_FOURIER = FourierConfig(M=2000)


@dataclass
class ClampCounter:
    """Counts density evaluations that fell below the floor."""

    clamped: int = 0
    total: int = 0

    def add(self, raw: np.ndarray, floor: float) -> None:
        self.clamped += int(np.count_nonzero(raw < floor))
        self.total += int(raw.size)


def _invert(kernel_phase: ComplexValue, core: ComplexValue, cfg: FourierConfig, counter: Optional[ClampCounter]):
    """Sum exp(-i u y) phi(u) over the last axis and clamp."""
    summed = (core * kernel_phase).sum(axis=-1)
    scale = cfg.h / (2.0 * math.pi)
    raw = summed.re * scale
    if cfg.a == 0.0:
        residue = float(np.max(np.abs(value_of(summed.im)), initial=0.0)) * scale
        if residue > IMAGINARY_TOLERANCE:
            logger.error("Imaginary residue after inversion", residue=residue)
            raise ImaginaryResidueError(f"Imaginary part {residue:.3g} exceeds {IMAGINARY_TOLERANCE}")
    raw_value = value_of(raw)
    if counter is not None:
        counter.add(raw_value, cfg.floor)
    return np.maximum(raw, cfg.floor)


def fourier_density(
    x_eval,
    cf: Callable[[ComplexValue], ComplexValue],
    cfg: FourierConfig = FourierConfig(),
    counter: Optional[ClampCounter] = None,
):
    """
    Invert a characteristic function at one or more points.

    Args:
        x_eval: Evaluation point(s)
        cf: Maps a ComplexValue of U points to a ComplexValue of shape (U,)
        cfg: Inversion grid
        counter: Optional clamp counter

    Returns:
        Density value(s), clamped at cfg.floor
    """
    scalar = np.ndim(x_eval) == 0
    y = np.atleast_1d(np.asarray(x_eval, dtype=float))[:, None]
    u = cfg.u_points()
    values = cf(u)
    core = ComplexValue(np.asarray(value_of(values.re))[None, :], np.asarray(value_of(values.im))[None, :])
    density = _invert(phase(u.re[None, :], u.im[None, :], -y), core, cfg, counter)
    return float(density[0]) if scalar else density


def transition_density(
    x_next,
    x,
    fx,
    gx,
    gpx,
    dt: float,
    cfg: FourierConfig = FourierConfig(),
    jumps=None,
    batch=None,
    shifted=None,
    counter: Optional[ClampCounter] = None,
):
    """
    Densities p(x_next[b] | x[b]) for a batch of transitions.

    Coefficient values may be tracked, in which case the result is differentiable
    with respect to the network parameters behind them.
    """
    parts = scheme_cf_parts(cfg.u_points(), x, fx, gx, gpx, dt, jumps, batch, shifted)
    u = cfg.u_points()
    offset = (parts.location - x_next).reshape((-1, 1))
    return _invert(phase(u.re[None, :], u.im[None, :], offset), parts.core, cfg, counter)


def model_transition_density(x_next, x, model: SdeModel, dt: float, cfg: FourierConfig = FourierConfig(), pool: Optional[JumpPool] = None, counter=None):
    """Transition densities for a model with known coefficient functions."""
    states = np.atleast_1d(np.asarray(x, dtype=float))
    targets = np.atleast_1d(np.asarray(x_next, dtype=float))
    with np.errstate(all="ignore"):
        fx, gx, gpx = model.drift(states), model.diffusion(states), model.diffusion_prime(states)
        if model.jumps.active:
            if pool is None:
                raise ValueError("A jump pool is needed for densities with jumps")
            batch = pool.batch(model.jumps.lam, dt)
            shifted = shifted_diffusion(model.diffusion, states, gx, model.jumps.gamma, batch)
            return transition_density(targets, states, fx, gx, gpx, dt, cfg, model.jumps, batch, shifted, counter)
        return transition_density(targets, states, fx, gx, gpx, dt, cfg, counter=counter)


def loglik_path(
    states,
    grid,
    model: SdeModel,
    cfg: FourierConfig = FourierConfig(),
    n_mc: int = 200,
    rng: Optional[np.random.Generator] = None,
    pool: Optional[JumpPool] = None,
    counter: Optional[ClampCounter] = None,
) -> float:
    """
    Sum of log transition densities along one path.

    Args:
        states: Path values on the grid
        grid: Time grid (uniform when jumps are on)
        model: Model to score
        cfg: Inversion grid
        n_mc: Pool size when jumps are on and no pool is given
        rng: Generator for a fresh pool
        pool: Reusable jump pool
        counter: Optional clamp counter
    """
    states = np.asarray(states, dtype=float)
    steps = np.diff(np.asarray(grid, dtype=float))
    if not np.allclose(steps, steps[0]):
        raise ValueError("Path likelihood needs a uniform grid")
    if model.jumps.active and pool is None:
        pool = JumpPool.draw(rng if rng is not None else np.random.default_rng(), n_mc, model.jumps)
    densities = model_transition_density(states[1:], states[:-1], model, float(steps[0]), cfg, pool, counter)
    return float(np.sum(np.log(densities)))


def density_on_grid(x, model: SdeModel, dt: float, points, cfg: FourierConfig = ANALYSIS_FOURIER, pool: Optional[JumpPool] = None):
    """Density of X_{t+dt} given X_t = x on a grid of points."""
    return fourier_density(points, lambda u: conditional_cf(u, x, model, dt, pool=pool), cfg)


def tv_distance_to_histogram(density: Callable, samples, bins: int = 60, coverage: float = 0.99) -> float:
    """
    Total-variation distance between a density and the histogram of samples.

    Both are restricted to the central ``coverage`` range of the samples and
    normalized there, so heavy tails do not dominate.
    """
    samples = np.asarray(samples, dtype=float)
    tail = (1.0 - coverage) / 2.0
    lo, hi = np.quantile(samples, [tail, 1.0 - tail])
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    empirical = counts / max(counts.sum(), 1)

    fine = np.linspace(lo, hi, bins * 20 + 1)
    values = np.asarray(density(fine), dtype=float)
    cumulative = cumulative_trapezoid(values, fine, initial=0.0)
    masses = np.diff(np.interp(edges, fine, cumulative))
    masses = masses / max(masses.sum(), 1e-300)
    return float(0.5 * np.abs(empirical - masses).sum())
