"""
Estimation of the jump intensity and jump scale (lambda, gamma) from one-step data.

All observations start from the same known state x after the same step dt. Two
Metropolis-Hastings samplers are provided: one scores candidates with the
Fourier-approximated likelihood, the other with a moment-matching statistic h.
A Nelder-Mead minimizer of h gives a point estimate, which can also seed the
chains.
"""

from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

import numpy as np
import structlog
from scipy.optimize import minimize
from scipy.stats import lognorm

from charfun import conditional_cf
from density import ClampCounter, FourierConfig, fourier_density
from moments import cond_mean, conditional_variance
from simulate import JumpPool, SdeModel

logger = structlog.get_logger(__name__)

ALGORITHMS = ("likelihood", "discriminator")


@dataclass
class MhConfig:
    """Sampler settings. burn_in defaults to m // 5."""

    m: int = 1000
    sigma1: float = 0.05
    sigma2: float = 0.01
    theta: float = 5.0
    init: Tuple[float, float] = (1.0, 1.0)
    burn_in: Optional[int] = None
    init_from_h: bool = False

    def __post_init__(self):
        self.init = tuple(float(v) for v in self.init)
        if self.m < 1:
            raise ValueError(f"Chain length must be positive, got {self.m}")
        if not self.sigma1 > 0 or not self.sigma2 > 0 or not self.theta > 0:
            raise ValueError("Proposal spreads and theta must be positive")
        if len(self.init) != 2 or min(self.init) <= 0:
            raise ValueError(f"Initial (lambda, gamma) must be positive, got {self.init}")
        if self.burn_in is not None and not 0 <= self.burn_in < self.m:
            raise ValueError(f"Burn-in {self.burn_in} must be in [0, m)")

    @property
    def burn(self) -> int:
        return self.m // 5 if self.burn_in is None else self.burn_in

    @classmethod
    def from_dict(cls, payload: dict) -> "MhConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(payload) - allowed
        if unknown:
            raise ValueError(f"Unknown sampler settings: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class MhChain:
    samples: np.ndarray
    accepted: np.ndarray
    burn_in: int
    algorithm: str = "likelihood"
    clamp_count: int = 0
    init: Tuple[float, float] = (1.0, 1.0)
    extra: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.accepted.size else 0.0

    def summary(self) -> dict:
        """Posterior means and 2.5%/97.5% empirical quantiles after burn-in."""
        kept = self.samples[self.burn_in :]
        result = {
            "algorithm": self.algorithm,
            "iterations": int(self.samples.shape[0]),
            "burn_in": int(self.burn_in),
            "acceptance_rate": self.acceptance_rate,
            "init": list(self.init),
            "clamp_count": int(self.clamp_count),
        }
        for column, name in enumerate(("lambda", "gamma")):
            lo, hi = np.quantile(kept[:, column], [0.025, 0.975])
            result[name] = {"mean": float(kept[:, column].mean()), "ci_low": float(lo), "ci_high": float(hi)}
        result.update(self.extra)
        return result


def _lognormal(center: float, sigma: float):
    return lognorm(s=sigma, scale=np.exp(np.log(center) - 0.5 * sigma * sigma))


def lognormal_density(x, center: float, sigma: float):
    """
    Density of the mean-preserving log-normal proposal centred at ``center``.

    Raises:
        ValueError: If x, center or sigma is not positive
    """
    if np.any(np.asarray(x) <= 0) or center <= 0 or sigma <= 0:
        raise ValueError("Log-normal density needs positive x, center and sigma")
    return _lognormal(center, sigma).pdf(x)


def propose(rng: np.random.Generator, center: float, sigma: float, size=None):
    """Draw from the log-normal proposal; its mean equals ``center``."""
    return _lognormal(center, sigma).rvs(size=size, random_state=rng)


def _candidate(model: SdeModel, lam: float, gamma: float) -> SdeModel:
    return model.with_jumps(lam, gamma)


def approx_loglik(
    lam: float,
    gamma: float,
    observations,
    x: float,
    dt: float,
    model: SdeModel,
    cfg: FourierConfig = FourierConfig(),
    pool: Optional[JumpPool] = None,
    counter: Optional[ClampCounter] = None,
) -> float:
    """
    Log of the approximated likelihood of one-step observations at candidate (lambda, gamma).

    The characteristic function is computed once per candidate and inverted at
    every observation. Reusing ``pool`` across candidates gives common random numbers.
    """
    observations = np.asarray(observations, dtype=float)
    if observations.size == 0:
        return 0.0
    candidate = _candidate(model, lam, gamma)
    densities = fourier_density(observations, lambda u: conditional_cf(u, x, candidate, dt, pool=pool), cfg, counter)
    return float(np.sum(np.log(densities)))


def h_stat(lam: float, gamma: float, observations, x: float, dt: float, model: SdeModel, pool: Optional[JumpPool] = None) -> float:
    """
    Moment-matching statistic: mean over observations of
    (squared residual - model variance at the candidate)^2.
    """
    observations = np.asarray(observations, dtype=float)
    candidate = _candidate(model, lam, gamma)
    residual = observations - cond_mean(x, candidate, dt)
    variance = float(conditional_variance(x, candidate, dt, pool=pool))
    return float(np.mean((residual * residual - variance) ** 2))


def nelder_mead(fun, x0, max_iter: int = 500, tol: float = 1e-6):
    """Nelder-Mead simplex with the standard coefficients; stops on iterations or simplex size."""
    return minimize(
        fun,
        np.asarray(x0, dtype=float),
        method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": tol, "fatol": np.inf},
    )


def minimize_h(observations, x: float, dt: float, model: SdeModel, pool: JumpPool, init=(1.0, 1.0)) -> Tuple[float, float]:
    """Point estimate of (lambda, gamma) minimizing h over log-parameters."""

    def objective(log_params):
        lam, gamma = np.exp(log_params)
        return h_stat(lam, gamma, observations, x, dt, model, pool)

    result = nelder_mead(objective, np.log(np.asarray(init, dtype=float)))
    lam, gamma = (float(v) for v in np.exp(result.x))
    logger.info("Minimized moment statistic", lam=lam, gamma=gamma, h=float(result.fun), iterations=int(result.nit))
    return lam, gamma


def _streams(seed: int):
    pool_seq, chain_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(pool_seq), np.random.default_rng(chain_seq)


def _initial_state(mh: MhConfig, observations, x, dt, model, pool) -> Tuple[float, float]:
    if mh.init_from_h:
        return minimize_h(observations, x, dt, model, pool, mh.init)
    return mh.init


def _run_chain(score, mh: MhConfig, rng: np.random.Generator, init, hastings: bool):
    """
    Generic Metropolis-Hastings loop over (lambda, gamma).

    ``score`` returns a log-score; the log acceptance ratio is the score
    difference plus, when ``hastings`` is set, the log-normal proposal correction.
    """
    samples = np.empty((mh.m, 2))
    accepted = np.zeros(mh.m, dtype=bool)
    lam, gamma = init
    current = score(lam, gamma)
    for i in range(mh.m):
        lam_new = float(propose(rng, lam, mh.sigma1))
        gamma_new = float(propose(rng, gamma, mh.sigma2))
        proposed = score(lam_new, gamma_new)
        log_ratio = proposed - current
        if hastings:
            log_ratio += np.log(lognormal_density(lam, lam_new, mh.sigma1)) - np.log(lognormal_density(lam_new, lam, mh.sigma1))
            log_ratio += np.log(lognormal_density(gamma, gamma_new, mh.sigma2)) - np.log(lognormal_density(gamma_new, gamma, mh.sigma2))
        if np.log(rng.uniform()) < min(0.0, log_ratio):
            lam, gamma, current = lam_new, gamma_new, proposed
            accepted[i] = True
        samples[i] = (lam, gamma)
    return samples, accepted


def mh_likelihood(
    observations,
    x: float,
    dt: float,
    model: SdeModel,
    mh: MhConfig = MhConfig(),
    fourier: FourierConfig = FourierConfig(),
    n_mc: int = 200,
    seed: int = 0,
) -> MhChain:
    """
    Metropolis-Hastings with the approximated likelihood ratio.

    Candidates are accepted with probability min(1, R q(old|new) / q(new|old)),
    where R is the likelihood ratio and q the log-normal proposal.
    """
    observations = np.asarray(observations, dtype=float)
    if observations.size == 0:
        raise ValueError("Need at least one observation")
    pool_rng, chain_rng = _streams(seed)
    pool = JumpPool.draw(pool_rng, n_mc, model.jumps)
    counter = ClampCounter()
    init = _initial_state(mh, observations, x, dt, model, pool)
    logger.info("Starting likelihood sampler", m=mh.m, n_obs=int(observations.size), init=init, seed=seed)

    def score(lam, gamma):
        return approx_loglik(lam, gamma, observations, x, dt, model, fourier, pool, counter)

    samples, accepted = _run_chain(score, mh, chain_rng, init, hastings=True)
    if counter.clamped:
        logger.warning("Density values clamped to the floor", clamped=counter.clamped, total=counter.total)
    return MhChain(samples, accepted, mh.burn, "likelihood", counter.clamped, tuple(init))


def discriminator_log_ratio(h_old: float, h_new: float, theta: float) -> float:
    """log of min(1, d(new)/d(old)), taking the exp(h) difference inside a single exponent."""
    if h_new <= h_old:
        return 0.0
    with np.errstate(over="ignore"):
        return float(theta * (np.exp(h_old) - np.exp(h_new)))


def mh_discriminator(
    observations,
    x: float,
    dt: float,
    model: SdeModel,
    mh: MhConfig = MhConfig(m=10000),
    n_mc: int = 4000,
    seed: int = 0,
) -> MhChain:
    """
    Metropolis-Hastings driven by the moment-matching discriminator.

    A proposal is accepted with probability exp(theta (exp(h_old) - exp(h_new)))
    capped at 1, so a candidate that lowers h is always accepted.
    """
    observations = np.asarray(observations, dtype=float)
    if observations.size == 0:
        raise ValueError("Need at least one observation")
    pool_rng, chain_rng = _streams(seed)
    pool = JumpPool.draw(pool_rng, n_mc, model.jumps)
    init = _initial_state(mh, observations, x, dt, model, pool)
    logger.info("Starting discriminator sampler", m=mh.m, n_obs=int(observations.size), init=init, seed=seed)

    samples = np.empty((mh.m, 2))
    accepted = np.zeros(mh.m, dtype=bool)
    lam, gamma = init
    h_current = h_stat(lam, gamma, observations, x, dt, model, pool)
    for i in range(mh.m):
        lam_new = float(propose(chain_rng, lam, mh.sigma1))
        gamma_new = float(propose(chain_rng, gamma, mh.sigma2))
        h_new = h_stat(lam_new, gamma_new, observations, x, dt, model, pool)
        if np.log(chain_rng.uniform()) < discriminator_log_ratio(h_current, h_new, mh.theta):
            lam, gamma, h_current = lam_new, gamma_new, h_new
            accepted[i] = True
        samples[i] = (lam, gamma)
    return MhChain(samples, accepted, mh.burn, "discriminator", 0, tuple(init))


def run_sampler(algorithm: str, observations, x: float, dt: float, model: SdeModel, mh: MhConfig, fourier: FourierConfig, n_mc: Optional[int], seed: int) -> MhChain:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"Unknown algorithm {algorithm!r}, expected one of {ALGORITHMS}")
    if algorithm == "likelihood":
        return mh_likelihood(observations, x, dt, model, mh, fourier, n_mc or 200, seed)
    return mh_discriminator(observations, x, dt, model, mh, n_mc or 4000, seed)
