import numpy as np

from commands.common import CommandContext, add_model_arguments, print_json, require_positive
from moments import cond_mean, cond_var_jump_mc, cond_var_nojump
from simulate import JumpPool, sample_one_step

TASK_KEYS = {"x", "dt", "n_mc", "samples"}


class MomentsCommand:
    """Print the one-step conditional mean and variance as JSON."""

    name = "moments"
    help = "Conditional mean and variance of one step"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--x", type=float, help="Current state")
        parser.add_argument("--dt", type=float, help="Step size")
        parser.add_argument("--n-mc", dest="n_mc", type=int, help="Jump configurations for the variance (default 400)")
        parser.add_argument("--samples", type=int, help="Also report the sample moments of this many simulated steps")
        parser.add_argument("--seed", type=int, help="Root seed (default 0)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        x = ctx.task("x")
        if x is None:
            raise ValueError("Missing required field: x")
        x = float(x)
        dt = float(require_positive("dt", ctx.task("dt")))
        n_mc = int(require_positive("n_mc", ctx.task("n_mc", 400)))
        samples = ctx.task("samples")
        pool_seq, sample_seq = np.random.SeedSequence(ctx.seed()).spawn(2)

        if model.jumps.active:
            pool = JumpPool.draw(np.random.default_rng(pool_seq), n_mc, model.jumps)
            estimate = cond_var_jump_mc(x, model, dt, pool=pool)
            payload = {"mean": estimate.mean, "variance": estimate.variance, "mc_samples": estimate.mc_samples}
        else:
            payload = {"mean": float(cond_mean(x, model, dt)), "variance": float(cond_var_nojump(x, model, dt)), "mc_samples": 0}

        if samples:
            draws = sample_one_step(x, model, dt, np.random.default_rng(sample_seq), size=int(require_positive("samples", samples)))
            payload["sample_mean"] = float(np.mean(draws))
            payload["sample_variance"] = float(np.var(draws, ddof=1)) if draws.size > 1 else 0.0
            payload["samples"] = int(draws.size)
        print_json(payload)


def setup(cli):
    cli.add_command(MomentsCommand(cli))
