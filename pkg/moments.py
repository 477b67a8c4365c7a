"""
Conditional moments of one Tamed-Milstein step.

The helpers below are written with numpy ufuncs and array methods only, so the
trainer can feed them tracked network outputs and differentiate through them.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from simulate import JumpBatch, JumpPool, SdeModel, shifted_diffusion, tamed_drift

logger = structlog.get_logger(__name__)


@dataclass
class MomentEstimate:
    mean: object
    variance: object
    mc_samples: int


def second_moment_nojump(gx, gpx, dt):
    """Exact variance of one diffusion-only step: g^2 dt + (g g' dt)^2 / 2."""
    return gx * gx * dt + 0.5 * (gx * gpx * dt) ** 2


def second_moment_jump(gx, gpx, shifted, batch: JumpBatch, dt: float, gamma: float, mu2: float, lam: float):
    """
    Variance of one step with jumps, averaged over a pool of jump configurations.

    Args:
        gx: g(x), shape (B,)
        gpx: g'(x), shape (B,)
        shifted: g(x + gamma z_i) - g(x) on the pool's jump sizes, shape (B, m, k), zero on padding
        batch: Jump configurations that contain at least one jump
        dt: Step size
        gamma: Jump scale
        mu2: Second moment of the jump-size law
        lam: Jump intensity

    Returns:
        Variance estimate of shape (B,)
    """
    variance = second_moment_nojump(gx, gpx, dt) + gamma * gamma * mu2 * lam * dt
    if batch.n_jumping == 0:
        return variance
    remaining = batch.remaining(dt)[None, :, :]
    overlap = np.minimum(remaining[:, :, :, None], remaining[:, :, None, :])
    single = (shifted * remaining).sum(axis=2)
    pairs = shifted.reshape(shifted.shape + (1,)) * shifted.reshape(shifted.shape[:2] + (1, shifted.shape[2]))
    double = (pairs * overlap).sum(axis=3).sum(axis=2)
    cross = (gx.reshape((-1, 1)) * single * 2.0 + double).sum(axis=1) / float(batch.n_total)
    return variance + cross


def cond_mean(x, model: SdeModel, dt):
    """E[X_{t+dt} | X_t = x] = x + tamed f(x) dt; jumps and the Milstein correction have zero mean."""
    return x + tamed_drift(model.drift(x), dt) * dt


def cond_var_nojump(x, model: SdeModel, dt):
    return second_moment_nojump(model.diffusion(x), model.diffusion_prime(x), dt)


def cond_var_jump_mc(
    x,
    model: SdeModel,
    dt: float,
    n_mc: int = 400,
    rng: Optional[np.random.Generator] = None,
    pool: Optional[JumpPool] = None,
) -> MomentEstimate:
    """
    Monte Carlo variance of one step with jumps.

    The closed part (diffusion plus gamma^2 mu2 lambda dt) is exact; the cross terms
    between the diffusion and the post-jump coefficient changes are averaged over
    n_mc jump configurations.

    Args:
        x: State (scalar or array)
        model: Model with lambda > 0 and gamma > 0
        dt: Step size
        n_mc: Pool size when no pool is supplied
        rng: Generator for a fresh pool
        pool: Reusable pool (common random numbers)
    """
    if not model.jumps.active:
        raise ValueError("Jump variance needs lambda > 0 and gamma > 0")
    if pool is None:
        pool = JumpPool.draw(rng if rng is not None else np.random.default_rng(), n_mc, model.jumps)
    scalar = np.ndim(x) == 0
    states = np.atleast_1d(np.asarray(x, dtype=float))
    batch = pool.batch(model.jumps.lam, dt)
    with np.errstate(all="ignore"):
        gx = model.diffusion(states)
        gpx = model.diffusion_prime(states)
        shifted = shifted_diffusion(model.diffusion, states, gx, model.jumps.gamma, batch)
        variance = second_moment_jump(gx, gpx, shifted, batch, dt, model.jumps.gamma, model.jumps.mu2, model.jumps.lam)
    mean = cond_mean(states, model, dt)
    if scalar:
        return MomentEstimate(float(mean[0]), float(variance[0]), pool.n_mc)
    return MomentEstimate(mean, variance, pool.n_mc)


def conditional_variance(x, model: SdeModel, dt: float, pool: Optional[JumpPool] = None, n_mc: int = 400, rng=None):
    """Variance of one step, exact without jumps and Monte Carlo with them."""
    if model.jumps.active:
        return cond_var_jump_mc(x, model, dt, n_mc=n_mc, rng=rng, pool=pool).variance
    return cond_var_nojump(x, model, dt)


def standardized_residual(x_next, x, model: SdeModel, dt, variance):
    """(x_next - mean) / sqrt(variance), or the raw residual where the variance vanishes."""
    residual = np.asarray(x_next, dtype=float) - cond_mean(x, model, dt)
    variance = np.asarray(variance, dtype=float)
    with np.errstate(all="ignore"):
        return np.where(variance > 0, residual / np.sqrt(np.where(variance > 0, variance, 1.0)), residual)
