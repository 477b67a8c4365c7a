import structlog

from commands.common import CommandContext, add_model_arguments, require_positive
from simulate import simulate_paths

logger = structlog.get_logger(__name__)

TASK_KEYS = {"T", "N", "K", "block_size", "out"}


class SimulateCommand:
    """Simulate K paths of the model and write them as CSV (path,t,x)."""

    name = "simulate"
    help = "Simulate paths with the tamed Milstein scheme"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--T", type=float, help="Horizon (default 5)")
        parser.add_argument("--N", type=int, help="Grid points per path (default 1000)")
        parser.add_argument("--K", type=int, help="Number of paths (default 10)")
        parser.add_argument("--seed", type=int, help="Root seed (default 0)")
        parser.add_argument("--block-size", dest="block_size", type=int, help="Points per block (default 100)")
        parser.add_argument("--out", help="Output CSV name inside the output directory (default paths.csv)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        T = float(require_positive("T", ctx.task("T", 5.0)))
        N = int(ctx.task("N", 1000))
        K = int(ctx.task("K", 10))
        block_size = int(ctx.task("block_size", 100))
        seed = ctx.seed()
        store = ctx.store()

        pathset = simulate_paths(model, T, N, K, seed, block_size, threads=ctx.threads())
        store.write_paths(pathset, ctx.task("out", "paths.csv"))
        logger.info("Simulated paths", paths=K, points=N, seed=seed, jumps=model.jumps.describe())


def setup(cli):
    cli.add_command(SimulateCommand(cli))
