"""
Tamed-Milstein simulation of scalar jump-diffusions.

The drift is tamed as f(x) / (1 + dt * f(x)^2) so it stays bounded for fixed dt.
Jumps arrive as a compound Poisson process with symmetric, zero-mean sizes, so no
compensator is needed. Within a step the Brownian increment is split at the jump
times and the diffusion coefficient is re-evaluated after each jump.
"""

import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.stats import poisson

from exprlang import Expression

logger = structlog.get_logger(__name__)

JUMP_LAWS = ("uniform", "normal", "laplace")
DIVERGENCE_BOUND = 1e12


class DivergentPathError(ArithmeticError):
    """Raised when a simulated path leaves the finite range."""

    def __init__(self, message: str, seed=None, path_index: int = None, step: int = None):
        self.seed = seed
        self.path_index = path_index
        self.step = step
        super().__init__(message)


@dataclass(frozen=True)
class JumpSpec:
    """
    Compound Poisson jump specification.

    ``scale`` is the half-width b of U(-b, b), the standard deviation of N(0, s^2)
    or the scale b of Laplace(0, b). Jump contributions are gamma * z.
    """

    lam: float = 0.0
    gamma: float = 0.0
    law: str = "uniform"
    scale: float = 0.1

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError(f"Jump intensity and scale must be non-negative, got lambda={self.lam}, gamma={self.gamma}")
        if self.law not in JUMP_LAWS:
            raise ValueError(f"Unknown jump law {self.law!r}, expected one of {JUMP_LAWS}")
        if not self.scale > 0:
            raise ValueError(f"Jump law scale must be positive, got {self.scale}")

    @classmethod
    def parse(cls, lam: float, gamma: float, law: str) -> "JumpSpec":
        """Build from a law string such as "uniform:0.1", "normal:0.3" or "laplace:0.1"."""
        name, _, scale = law.partition(":")
        try:
            return cls(float(lam), float(gamma), name.strip(), float(scale) if scale else 0.1)
        except ValueError as e:
            raise ValueError(f"Invalid jump law {law!r}: {e}") from e

    @property
    def active(self) -> bool:
        return self.lam > 0 and self.gamma > 0

    @property
    def mu2(self) -> float:
        """Second moment of the jump-size law."""
        if self.law == "uniform":
            return self.scale ** 2 / 3.0
        if self.law == "normal":
            return self.scale ** 2
        return 2.0 * self.scale ** 2

    def describe(self) -> str:
        return f"{self.law}:{self.scale:g}"

    def with_params(self, lam: float, gamma: float) -> "JumpSpec":
        return replace(self, lam=float(lam), gamma=float(gamma))

    def sample_sizes(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.law == "uniform":
            return rng.uniform(-self.scale, self.scale, size=shape)
        if self.law == "normal":
            return rng.normal(0.0, self.scale, size=shape)
        return rng.laplace(0.0, self.scale, size=shape)


@dataclass
class JumpConfig:
    """Jumps inside one step: times in (t, t+dt] sorted ascending, and their sizes z."""

    count: int
    times: np.ndarray
    sizes: np.ndarray


@dataclass
class SdeModel:
    """
    Scalar jump-diffusion dX = f(X) dt + g(X) dW + gamma dJ.

    The coefficient callables must accept numpy arrays.
    """

    drift: Callable
    diffusion: Callable
    diffusion_prime: Callable
    x0: float = 1.5
    jumps: JumpSpec = field(default_factory=JumpSpec)
    label: str = ""

    @classmethod
    def from_expressions(cls, drift: str, diffusion: str, x0: float = 1.5, jumps: JumpSpec = None) -> "SdeModel":
        f = Expression(drift)
        g = Expression(diffusion)
        return cls(f, g, g.prime, float(x0), jumps or JumpSpec(), label=f"f={drift}; g={diffusion}")

    def with_jumps(self, lam: float, gamma: float) -> "SdeModel":
        return replace(self, jumps=self.jumps.with_params(lam, gamma))


def tamed_drift(fx, dt):
    """Tamed drift f / (1 + dt f^2); works on arrays and tracked values."""
    return fx / (1.0 + dt * fx * fx)


def sample_jump_config(rng: np.random.Generator, t: float, dt: float, jumps: JumpSpec) -> JumpConfig:
    """Draw the jumps falling in (t, t+dt]."""
    if not jumps.active:
        return JumpConfig(0, np.empty(0), np.empty(0))
    count = int(rng.poisson(jumps.lam * dt))
    times = t + dt * np.sort(1.0 - rng.uniform(size=count))
    sizes = jumps.sample_sizes(rng, count)
    return JumpConfig(count, times, sizes)


def _step_batch(x: np.ndarray, model: SdeModel, dt: float, rng: np.random.Generator) -> np.ndarray:
    fx = model.drift(x)
    gx = model.diffusion(x)
    gpx = model.diffusion_prime(x)
    base = x + tamed_drift(fx, dt) * dt

    jumps = model.jumps
    counts = rng.poisson(jumps.lam * dt, size=x.shape[0]) if jumps.active else np.zeros(x.shape[0], dtype=int)
    k = int(counts.max()) if x.shape[0] else 0
    if k == 0:
        dw = rng.standard_normal(x.shape[0]) * np.sqrt(dt)
        return base + gx * dw + 0.5 * gx * gpx * (dw * dw - dt)

    mask = np.arange(k)[None, :] < counts[:, None]
    # Padding sits at the end of the step so it yields empty sub-intervals
    offsets = np.sort(np.where(mask, 1.0 - rng.uniform(size=mask.shape), 1.0), axis=1) * dt
    sizes = np.where(mask, jumps.sample_sizes(rng, mask.shape), 0.0)
    edges = np.concatenate([np.zeros((x.shape[0], 1)), offsets, np.full((x.shape[0], 1), dt)], axis=1)
    pieces = rng.standard_normal((x.shape[0], k + 1)) * np.sqrt(np.diff(edges, axis=1))
    dw = pieces.sum(axis=1)
    # tails[:, i] is the Brownian increment from jump i to the end of the step
    tails = np.cumsum(pieces[:, ::-1], axis=1)[:, ::-1][:, 1:]
    shifted = model.diffusion(x[:, None] + jumps.gamma * sizes) - gx[:, None]
    bridge = np.where(mask, shifted * tails, 0.0).sum(axis=1)
    return base + gx * dw + 0.5 * gx * gpx * (dw * dw - dt) + jumps.gamma * sizes.sum(axis=1) + bridge


def sample_one_step(x, model: SdeModel, dt: float, rng: np.random.Generator, size: int = None):
    """
    Draw X_{t+dt} given X_t = x with the full scheme, vectorized over draws.

    Args:
        x: Current state (scalar or array)
        model: Model to step
        dt: Step size
        rng: Random generator
        size: Number of draws when x is scalar

    Returns:
        Next states with the broadcast shape of x and size
    """
    if size is not None:
        x = np.broadcast_to(np.asarray(x, dtype=float), (size,))
    scalar = np.ndim(x) == 0
    states = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    with np.errstate(all="ignore"):
        out = _step_batch(states, model, dt, rng)
    return float(out[0]) if scalar else out


def milstein_step(x: float, model: SdeModel, t: float, dt: float, rng: np.random.Generator) -> float:
    """One Tamed-Milstein step from time t; t only locates the jump times."""
    return sample_one_step(float(x), model, dt, rng)


@dataclass
class PathSet:
    """
    K paths on a shared uniform grid, split into R blocks of block_size points.

    Transitions never cross a block boundary, so a block contributes
    block_size - 1 transitions per path.
    """

    grid: np.ndarray
    paths: np.ndarray
    block_size: int
    seed: Optional[int] = None

    def __post_init__(self):
        self.paths = np.atleast_2d(self.paths)
        if self.paths.shape[1] != self.grid.shape[0]:
            raise ValueError(f"Paths have {self.paths.shape[1]} points but the grid has {self.grid.shape[0]}")
        if self.block_size < 2 or self.grid.shape[0] % self.block_size != 0:
            raise ValueError(f"Block size {self.block_size} must be >= 2 and divide N={self.grid.shape[0]}")

    @property
    def K(self) -> int:
        return self.paths.shape[0]

    @property
    def N(self) -> int:
        return self.grid.shape[0]

    @property
    def R(self) -> int:
        return self.N // self.block_size

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def block_bounds(self, block: int) -> Tuple[int, int]:
        if not 0 <= block < self.R:
            raise IndexError(f"Block {block} out of range for R={self.R}")
        start = block * self.block_size
        return start, start + self.block_size

    def transitions(self, block: int, path_index: int):
        """(x, x_next, dt) arrays for one block of one path."""
        start, stop = self.block_bounds(block)
        states = self.paths[path_index, start:stop]
        return states[:-1], states[1:], np.diff(self.grid[start:stop])

    def pooled_states(self) -> np.ndarray:
        return self.paths.ravel()


def path_streams(seed: int, count: int) -> List[np.random.Generator]:
    """Independent per-path generators derived from one root seed."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def _worker_count(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    return os.cpu_count() or 1


def _simulate_one(model: SdeModel, grid: np.ndarray, rng: np.random.Generator, seed, path_index: int) -> np.ndarray:
    path = np.empty(grid.shape[0])
    path[0] = model.x0
    dt = float(grid[1] - grid[0])
    for n in range(grid.shape[0] - 1):
        path[n + 1] = milstein_step(path[n], model, grid[n], dt, rng)
        if not np.isfinite(path[n + 1]) or abs(path[n + 1]) > DIVERGENCE_BOUND:
            logger.error("Path diverged", seed=seed, path=path_index, step=n + 1, value=float(path[n + 1]))
            raise DivergentPathError(
                f"Path {path_index} diverged at step {n + 1} (seed {seed})",
                seed=seed,
                path_index=path_index,
                step=n + 1,
            )
    return path


def simulate_paths(
    model: SdeModel,
    T: float,
    N: int,
    K: int,
    seed: int,
    block_size: int,
    threads: Optional[int] = None,
) -> PathSet:
    """
    Simulate K independent paths on a uniform grid of N points over [0, T].

    Each path draws from its own stream spawned from ``seed``, so results do not
    depend on the number of worker threads.

    Raises:
        ValueError: On invalid sizes
        DivergentPathError: If any path becomes non-finite or exceeds 1e12 in magnitude
    """
    if N < 2 or K < 1 or not T > 0:
        raise ValueError(f"Need N >= 2, K >= 1 and T > 0 (got N={N}, K={K}, T={T})")
    if block_size < 2 or N % block_size != 0:
        raise ValueError(f"Block size {block_size} must be >= 2 and divide N={N}")

    grid = np.linspace(0.0, T, N)
    streams = path_streams(seed, K)
    workers = min(_worker_count(threads), K)
    logger.info("Simulating paths", K=K, N=N, T=T, seed=seed, threads=workers, model=model.label)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_simulate_one, model, grid, streams[i], seed, i) for i in range(K)]
        paths = np.vstack([future.result() for future in futures])
    return PathSet(grid, paths, block_size, seed)


@dataclass
class ConvergenceResult:
    levels: List[int]
    step_sizes: List[float]
    errors: List[float]
    slope: float
    reference_N: int


def convergence_slope(
    model: SdeModel,
    T: float,
    levels: Sequence[int],
    K_mc: int,
    seed: int,
    reference_N: Optional[int] = None,
    chunk: int = 250,
) -> ConvergenceResult:
    """
    Estimate the strong order of the diffusion-only scheme.

    Coarse Brownian increments are sums of the reference-grid increments, so every
    level is driven by the same noise. The error at level N is the RMS difference
    at T against the reference solution, and the slope is the least-squares fit
    of log2 error against log2 step size.

    Args:
        model: Model without jumps
        T: Horizon
        levels: Step counts, each a power of two
        K_mc: Number of Monte Carlo paths
        seed: Root seed
        reference_N: Reference step count (default 16 * max(levels))
    """
    if model.jumps.active:
        raise ValueError("Strong-order measurement is only defined for the diffusion-only scheme")
    levels = sorted(int(n) for n in levels)
    if len(levels) < 2 or any(n < 1 or n & (n - 1) for n in levels):
        raise ValueError(f"Need at least two power-of-two levels, got {levels}")
    reference_N = int(reference_N or 16 * levels[-1])
    if any(reference_N % n for n in levels) or reference_N <= levels[-1]:
        raise ValueError(f"Reference step count {reference_N} must be a finer multiple of every level")

    h_ref = T / reference_N
    rng = np.random.default_rng(seed)
    squared = np.zeros(len(levels))

    with np.errstate(all="ignore"):
        for begin in range(0, K_mc, chunk):
            size = min(chunk, K_mc - begin)
            fine = rng.standard_normal((size, reference_N)) * np.sqrt(h_ref)
            reference = _integrate_nojump(model, T, fine)
            for i, n in enumerate(levels):
                coarse = fine.reshape(size, n, reference_N // n).sum(axis=2)
                squared[i] += np.sum((_integrate_nojump(model, T, coarse) - reference) ** 2)

    errors = np.sqrt(squared / K_mc)
    steps = np.asarray([T / n for n in levels])
    slope = float(np.polyfit(np.log2(steps), np.log2(errors), 1)[0])
    logger.info("Measured strong order", slope=slope, levels=levels, reference_N=reference_N)
    return ConvergenceResult(levels, steps.tolist(), errors.tolist(), slope, reference_N)


def _integrate_nojump(model: SdeModel, T: float, increments: np.ndarray) -> np.ndarray:
    steps = increments.shape[1]
    h = T / steps
    x = np.full(increments.shape[0], float(model.x0))
    for n in range(steps):
        dw = increments[:, n]
        gx = model.diffusion(x)
        x = x + tamed_drift(model.drift(x), h) * h + gx * dw + 0.5 * gx * model.diffusion_prime(x) * (dw * dw - h)
    return x


@dataclass
class JumpBatch:
    """
    Jump configurations of a Monte Carlo pool for one (lambda, dt).

    Only configurations with at least one jump are stored; ``n_total`` counts all
    of them, so the zero-jump share is (n_total - len(counts)) / n_total.
    Padded entries have offset dt, size 0 and mask False.
    """

    n_total: int
    counts: np.ndarray
    offsets: np.ndarray
    sizes: np.ndarray
    mask: np.ndarray

    @property
    def n_jumping(self) -> int:
        return int(self.counts.shape[0])

    @property
    def zero_fraction(self) -> float:
        return (self.n_total - self.n_jumping) / self.n_total

    def remaining(self, dt: float) -> np.ndarray:
        """Time from each jump to the end of the step (0 on padding)."""
        return np.where(self.mask, dt - self.offsets, 0.0)

    def intervals(self, dt: float) -> np.ndarray:
        """Sub-interval lengths between consecutive jump times, shape (m, k+1)."""
        m = self.n_jumping
        edges = np.concatenate([np.zeros((m, 1)), self.offsets, np.full((m, 1), dt)], axis=1)
        return np.diff(edges, axis=1)


def shifted_diffusion(diffusion, states, gx, gamma: float, batch: JumpBatch):
    """
    g(x + gamma z_i) - g(x) for every jump of every pool configuration.

    ``diffusion`` may be a coefficient function or a tracked network evaluation;
    the result has shape (B, m, k) and is zero on padding.
    """
    points = states[:, None, None] + gamma * batch.sizes[None, :, :]
    shifted = diffusion(points.ravel()).reshape(points.shape) - gx.reshape((-1, 1, 1))
    return shifted * batch.mask[None, :, :]


class JumpPool:
    """
    Frozen uniforms that map to jump configurations for any (lambda, dt).

    Counts come from the Poisson quantile of a fixed uniform, so configurations
    vary smoothly with lambda and the same noise is reused across candidates.
    Only the ``cache_size`` most recently used (lambda, dt) batches are kept.
    """

    def __init__(self, count_uniforms, time_uniforms, sizes, jumps: JumpSpec, cache_size: int = 4):
        self.count_uniforms = count_uniforms
        self.time_uniforms = time_uniforms
        self.sizes = sizes
        self.jumps = jumps
        self.cache_size = max(1, int(cache_size))
        self._cache = OrderedDict()

    @classmethod
    def draw(cls, rng: np.random.Generator, n_mc: int, jumps: JumpSpec, capacity: int = 32) -> "JumpPool":
        if n_mc < 1:
            raise ValueError(f"Monte Carlo size must be positive, got {n_mc}")
        count_uniforms = rng.uniform(size=n_mc)
        time_uniforms = 1.0 - rng.uniform(size=(n_mc, capacity))
        sizes = jumps.sample_sizes(rng, (n_mc, capacity))
        return cls(count_uniforms, time_uniforms, sizes, jumps)

    @property
    def n_mc(self) -> int:
        return int(self.count_uniforms.shape[0])

    @property
    def capacity(self) -> int:
        return int(self.time_uniforms.shape[1])

    @property
    def cached_batches(self) -> int:
        return len(self._cache)

    def batch(self, lam: float, dt: float) -> JumpBatch:
        key = (float(lam), float(dt))
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        mean = lam * dt
        if mean > 0:
            counts = np.maximum(poisson.ppf(self.count_uniforms, mean), 0).astype(int)
        else:
            counts = np.zeros(self.n_mc, dtype=int)
        if counts.max(initial=0) > self.capacity:
            logger.warning("Truncating jump counts to pool capacity", capacity=self.capacity, largest=int(counts.max()))
            counts = np.minimum(counts, self.capacity)

        jumping = counts > 0
        counts_j = counts[jumping]
        k = int(counts_j.max(initial=0))
        mask = np.arange(k)[None, :] < counts_j[:, None]
        offsets = np.sort(np.where(mask, self.time_uniforms[jumping, :k], 1.0), axis=1) * dt
        sizes = np.where(mask, self.sizes[jumping, :k], 0.0)
        result = JumpBatch(self.n_mc, counts_j, offsets, sizes, mask)
        self._cache[key] = result
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return result
