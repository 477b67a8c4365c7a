import numpy as np
import structlog
from scipy.integrate import trapezoid

from commands.common import CommandContext, add_model_arguments, parse_grid, require_positive
from density import FourierConfig, density_on_grid, tv_distance_to_histogram
from moments import cond_mean, conditional_variance
from simulate import JumpPool, SdeModel, sample_one_step

logger = structlog.get_logger(__name__)

TASK_KEYS = {"x", "dt", "M", "h", "a", "n_mc", "grid", "hist_sim", "bins", "out"}


def histogram_on_grid(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Histogram density with one bin centred on each grid point, normalized by all samples."""
    width = grid[1] - grid[0]
    edges = np.concatenate([[grid[0] - width / 2], grid + width / 2])
    counts, _ = np.histogram(samples, bins=edges)
    return counts / (samples.size * width)


def default_grid(x: float, model: SdeModel, dt: float, pool, points: int = 401) -> np.ndarray:
    """Eight conditional standard deviations either side of the conditional mean."""
    mean = float(cond_mean(x, model, dt))
    spread = 8.0 * float(np.sqrt(max(float(conditional_variance(x, model, dt, pool=pool)), 1e-12)))
    return np.linspace(mean - spread, mean + spread, points)


def run_density(model: SdeModel, x: float, dt: float, fourier: FourierConfig, grid, n_mc: int, hist_sim: int, bins: int, seed: int):
    """
    Density of one step from x on a grid, with an optional histogram check.

    Returns:
        tuple: (csv header, csv rows, summary dict)
    """
    pool_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    pool = JumpPool.draw(np.random.default_rng(pool_seq), n_mc, model.jumps) if model.jumps.active else None
    if grid is None:
        grid = default_grid(x, model, dt, pool)
    values = np.asarray(density_on_grid(x, model, dt, grid, fourier, pool), dtype=float)
    integral = float(trapezoid(values, grid))
    summary = {
        "x": x,
        "dt": dt,
        "M": fourier.M,
        "h": fourier.h,
        "a": fourier.a,
        "n_mc": n_mc if pool is not None else 0,
        "integral": integral,
        "grid": [float(grid[0]), float(grid[-1]), int(grid.size)],
    }
    if abs(integral - 1.0) > 0.01:
        logger.warning("Density integral differs from one", integral=integral)

    if not hist_sim:
        return ["x", "density"], list(zip(grid, values)), summary

    samples = sample_one_step(x, model, dt, np.random.default_rng(sample_seq), size=hist_sim)
    hist = histogram_on_grid(samples, grid)
    summary["hist_samples"] = int(hist_sim)
    summary["bins"] = int(bins)
    summary["tv_distance"] = tv_distance_to_histogram(
        lambda points: density_on_grid(x, model, dt, points, fourier, pool), samples, bins=bins
    )
    logger.info("Compared density with histogram", integral=integral, tv=summary["tv_distance"], samples=hist_sim)
    return ["x", "density", "hist"], list(zip(grid, values, hist)), summary


class DensityCommand:
    """Fourier-inverted one-step density on a grid, optionally against a simulated histogram."""

    name = "density"
    help = "Approximated transition density of one step"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--x0-state", dest="x", type=float, help="State the step starts from")
        parser.add_argument("--dt", type=float, help="Step size")
        parser.add_argument("--M", type=int, help="Fourier grid half-size (default 200)")
        parser.add_argument("--h", type=float, help="Fourier grid spacing (default 0.05)")
        parser.add_argument("--a", type=float, help="Imaginary shift of the Fourier grid (default 0)")
        parser.add_argument("--n-mc", dest="n_mc", type=int, help="Jump configurations (default 200)")
        parser.add_argument("--grid", help="Evaluation grid lo:hi:n (default mean +/- 8 sd, 401 points)")
        parser.add_argument("--hist-sim", dest="hist_sim", type=int, help="Simulated steps for a histogram column")
        parser.add_argument("--bins", type=int, help="Histogram bins for the TV distance (default 60)")
        parser.add_argument("--seed", type=int, help="Root seed (default 0)")
        parser.add_argument("--out", help="Output CSV name (default density.csv)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        x = ctx.task("x")
        if x is None:
            raise ValueError("Missing required field: x0-state")
        dt = float(require_positive("dt", ctx.task("dt")))
        fourier = FourierConfig(int(ctx.task("M", 200)), float(ctx.task("h", 0.05)), float(ctx.task("a", 0.0)))
        grid_text = ctx.task("grid")
        grid = np.linspace(*parse_grid(grid_text)) if grid_text else None
        n_mc = int(require_positive("n_mc", ctx.task("n_mc", 200)))
        hist_sim = int(ctx.task("hist_sim", 0) or 0)
        bins = int(require_positive("bins", ctx.task("bins", 60)))
        out = ctx.task("out", "density.csv")
        store = ctx.store()

        header, rows, summary = run_density(model, float(x), dt, fourier, grid, n_mc, hist_sim, bins, ctx.seed())
        store.write_csv(out, header, rows)
        store.write_json(out.rsplit(".", 1)[0] + "_summary.json", summary)


def setup(cli):
    cli.add_command(DensityCommand(cli))
