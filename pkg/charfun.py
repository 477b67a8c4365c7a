"""
Characteristic functions of one Tamed-Milstein step.

Conditioned on the jump configuration, the step is a quadratic form in the
Gaussian sub-interval increments, whose characteristic function is known in
closed form. The unconditional characteristic function with jumps is the
Monte Carlo average of the conditional ones over a pool of configurations.

Results are factored as exp(i u loc) * core(u), with
loc = x + (tamed f(x) - g g'/2) dt, so density code can shift the location per
observation without recomputing the core.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog
from scipy.linalg import lu_factor, lu_solve

from neuralcore import BranchCutError, ComplexValue, value_of
from simulate import JumpBatch, JumpPool, SdeModel, shifted_diffusion, tamed_drift

logger = structlog.get_logger(__name__)

__all__ = [
    "BranchCutError",
    "CfParts",
    "cf_quadform_general",
    "cf_quadform_closed",
    "cf_nojump",
    "cf_jump_mc",
    "conditional_cf",
    "phase",
    "scheme_cf_parts",
]


@dataclass
class CfParts:
    """Characteristic function factored as exp(i u location) * core(u); core has shape (B, U)."""

    location: object
    core: ComplexValue


def _grid(u):
    """Plain (re, im) arrays of shape (U,) for the evaluation points."""
    u = ComplexValue.lift(u)
    re, im = np.broadcast_arrays(np.atleast_1d(value_of(u.re)), np.atleast_1d(value_of(u.im)))
    return re, im


def phase(u_re, u_im, shift) -> ComplexValue:
    """exp(i u shift) for real shift (array or tracked), broadcasting u against shift."""
    return ComplexValue(-u_im * shift, u_re * shift).exp()


def cf_quadform_general(sigma_diag, c: float, a_vec, d: float, u: complex) -> complex:
    """
    Characteristic function of Q = c (1'Z)^2 + a'Z + d with Z ~ N(0, diag(sigma)).

    Uses an LU determinant and a dense linear solve. This is the reference the
    closed form is checked against.

    Args:
        sigma_diag: Variances of the independent Gaussian components (all >= 0)
        c: Quadratic coefficient
        a_vec: Linear coefficients
        d: Constant term
        u: Argument (complex allowed)

    Raises:
        ArithmeticError: If the system matrix is singular
    """
    sigma = np.asarray(sigma_diag, dtype=float)
    a_vec = np.asarray(a_vec, dtype=float)
    n = sigma.shape[0]
    ones = np.ones((n, n))
    identity = np.eye(n)
    root = np.sqrt(sigma)

    lu, piv = lu_factor(identity - 2j * u * c * ones * sigma[None, :], check_finite=False)
    if np.any(np.abs(np.diag(lu)) == 0.0):
        logger.error("Singular quadratic-form system", u=complex(u), c=c)
        raise ArithmeticError("Singular matrix in quadratic-form characteristic function")
    swaps = np.count_nonzero(piv != np.arange(n))
    determinant = np.prod(np.diag(lu)) * (-1.0) ** swaps

    scaled = (root * a_vec).astype(complex)
    kernel = identity - 2j * u * c * root[:, None] * ones * root[None, :]
    quadratic = scaled @ lu_solve(lu_factor(kernel, check_finite=False), scaled, check_finite=False)
    return complex(np.exp(1j * u * d - 0.5 * u * u * quadratic) / np.sqrt(determinant))


def _quadratic_core(u: ComplexValue, s2, s1, c, dt) -> ComplexValue:
    """
    exp(-u^2/2 [S2 + 2 i u c S1^2 / w]) / sqrt(w) with w = 1 - 2 i u c dt.

    Raises:
        BranchCutError: If Re(w) <= 0
    """
    iu = ComplexValue(-u.im, u.re)
    w = 1.0 - iu * (c * (2.0 * dt))
    if np.any(value_of(w.re) <= 0.0):
        logger.error("Characteristic function argument crosses the branch cut")
        raise BranchCutError("Re(1 - 2 i u c dt) <= 0; use a smaller damping shift")
    bracket = (iu * (c * 2.0)) / w * (s1 * s1) + s2
    return (u * u * bracket * -0.5).exp() / w.sqrt()


def cf_quadform_closed(dtaus, coeffs, c: float, d: float, u) -> ComplexValue:
    """
    Closed form of the same characteristic function for Z_j ~ N(0, dtaus_j).

    Q = sum_j coeffs_j Z_j + c (sum_j Z_j)^2 + d.
    """
    dtaus = np.asarray(dtaus, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    u = ComplexValue.lift(u)
    s2 = float(np.sum(coeffs * coeffs * dtaus))
    s1 = float(np.sum(coeffs * dtaus))
    dt = float(np.sum(dtaus))
    return _quadratic_core(u, s2, s1, c, dt) * phase(u.re, u.im, d)


def scheme_cf_parts(u, x, fx, gx, gpx, dt, jumps=None, batch: Optional[JumpBatch] = None, shifted=None) -> CfParts:
    """
    Characteristic function of one step from each of B states.

    Args:
        u: Evaluation points, U of them
        x, fx, gx, gpx: State and coefficient values, shape (B,); may be tracked
        dt: Step size
        jumps: JumpSpec when jumps are on
        batch: Pool configurations for (lambda, dt)
        shifted: g(x + gamma z_i) - g(x), shape (B, m, k), zero on padding

    Returns:
        CfParts: location of shape (B,) and core of shape (B, U)
    """
    u_re, u_im = _grid(u)
    c = gx * gpx * 0.5
    location = x + (tamed_drift(fx, dt) - c) * dt

    g_col = gx.reshape((-1, 1))
    row = ComplexValue(u_re[None, :], u_im[None, :])
    no_jump = _quadratic_core(row, g_col * g_col * dt, g_col * dt, c.reshape((-1, 1)), dt)
    if jumps is None or batch is None or batch.n_jumping == 0:
        return CfParts(location, no_jump)

    # Interval j carries g(x) plus the shifts of the jumps before it
    m, k = batch.sizes.shape
    before = np.tril(np.ones((k + 1, k)), -1)
    increments = (shifted.reshape((-1, m, 1, k)) * before.reshape((1, 1, k + 1, k))).sum(axis=3)
    coeffs = gx.reshape((-1, 1, 1)) + increments
    taus = batch.intervals(dt)
    s2 = (coeffs * coeffs * taus).sum(axis=2)
    s1 = (coeffs * taus).sum(axis=2)

    cube = ComplexValue(u_re[None, None, :], u_im[None, None, :])
    jumping = _quadratic_core(
        cube,
        s2.reshape(s2.shape + (1,)),
        s1.reshape(s1.shape + (1,)),
        c.reshape((-1, 1, 1)),
        dt,
    )
    totals = (batch.sizes.sum(axis=1) * jumps.gamma)[None, :, None]
    jumping = jumping * phase(cube.re, cube.im, totals)
    core = no_jump * batch.zero_fraction + jumping.sum(axis=1) * (1.0 / batch.n_total)
    return CfParts(location, core)


def _coefficients(x, model: SdeModel):
    states = np.atleast_1d(np.asarray(x, dtype=float))
    return states, model.drift(states), model.diffusion(states), model.diffusion_prime(states)


def _assemble(u, parts: CfParts, scalar_x: bool) -> ComplexValue:
    u_re, u_im = _grid(u)
    location = np.asarray(value_of(parts.location)).reshape((-1, 1))
    result = parts.core * phase(u_re[None, :], u_im[None, :], location)
    re, im = np.broadcast_arrays(value_of(result.re), value_of(result.im))
    if scalar_x:
        re, im = re[0], im[0]
    lifted = ComplexValue.lift(u)
    if np.ndim(value_of(lifted.re)) == 0 and np.ndim(value_of(lifted.im)) == 0:
        re, im = re[..., 0], im[..., 0]
    return ComplexValue(np.array(re), np.array(im))


def cf_nojump(u, x, model: SdeModel, dt: float) -> ComplexValue:
    """
    Characteristic function of one diffusion-only step from x.

    A scalar x gives a result shaped like u; an array of B states gives (B, U).
    """
    states, fx, gx, gpx = _coefficients(x, model)
    with np.errstate(all="ignore"):
        parts = scheme_cf_parts(u, states, fx, gx, gpx, dt)
    return _assemble(u, parts, np.ndim(x) == 0)


def cf_jump_mc(
    u,
    x,
    model: SdeModel,
    dt: float,
    n_mc: int = 200,
    rng: Optional[np.random.Generator] = None,
    pool: Optional[JumpPool] = None,
) -> ComplexValue:
    """
    Monte Carlo characteristic function of one step with jumps.

    Configurations without jumps share the closed no-jump value; the rest are
    averaged configuration by configuration. Pass a pool to reuse the same
    configurations across calls.
    """
    if not model.jumps.active:
        return cf_nojump(u, x, model, dt)
    if pool is None:
        pool = JumpPool.draw(rng if rng is not None else np.random.default_rng(), n_mc, model.jumps)
    states, fx, gx, gpx = _coefficients(x, model)
    batch = pool.batch(model.jumps.lam, dt)
    with np.errstate(all="ignore"):
        shifted = shifted_diffusion(model.diffusion, states, gx, model.jumps.gamma, batch)
        parts = scheme_cf_parts(u, states, fx, gx, gpx, dt, model.jumps, batch, shifted)
    return _assemble(u, parts, np.ndim(x) == 0)


def conditional_cf(u, x, model: SdeModel, dt: float, pool: Optional[JumpPool] = None, n_mc: int = 200, rng=None):
    """Characteristic function of one step, with or without jumps."""
    if model.jumps.active:
        return cf_jump_mc(u, x, model, dt, n_mc=n_mc, rng=rng, pool=pool)
    return cf_nojump(u, x, model, dt)
