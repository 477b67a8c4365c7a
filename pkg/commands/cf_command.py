import numpy as np
import structlog

from charfun import conditional_cf
from commands.common import CommandContext, add_model_arguments, require_positive
from simulate import JumpPool

logger = structlog.get_logger(__name__)

TASK_KEYS = {"x", "dt", "umax", "n_points", "n_mc", "out"}
CF_HEADER = ["u_re", "u_im", "phi_re", "phi_im"]


class CfCommand:
    """Evaluate the one-step characteristic function on a symmetric real grid."""

    name = "cf"
    help = "Conditional characteristic function of one step"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--x", type=float, help="Current state")
        parser.add_argument("--dt", type=float, help="Step size")
        parser.add_argument("--umax", type=float, help="Grid covers [-umax, umax] (default 10)")
        parser.add_argument("--n-points", dest="n_points", type=int, help="Grid points (default 201)")
        parser.add_argument("--n-mc", dest="n_mc", type=int, help="Jump configurations (default 200)")
        parser.add_argument("--seed", type=int, help="Root seed (default 0)")
        parser.add_argument("--out", help="Output CSV name (default cf.csv)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        x = ctx.task("x")
        if x is None:
            raise ValueError("Missing required field: x")
        dt = float(require_positive("dt", ctx.task("dt")))
        umax = float(require_positive("umax", ctx.task("umax", 10.0)))
        n_points = int(ctx.task("n_points", 201))
        if n_points < 2:
            raise ValueError(f"n_points must be at least 2, got {n_points}")
        n_mc = int(require_positive("n_mc", ctx.task("n_mc", 200)))
        store = ctx.store()

        u = np.linspace(-umax, umax, n_points)
        pool = JumpPool.draw(np.random.default_rng(ctx.seed()), n_mc, model.jumps) if model.jumps.active else None
        phi = conditional_cf(u, float(x), model, dt, pool=pool).to_complex()
        if not np.all(np.isfinite(phi)):
            logger.error("Characteristic function is not finite", x=float(x), dt=dt)
            raise ArithmeticError("Characteristic function is not finite on the requested grid")

        rows = zip(u, np.zeros_like(u), phi.real, phi.imag)
        store.write_csv(ctx.task("out", "cf.csv"), CF_HEADER, rows)


def setup(cli):
    cli.add_command(CfCommand(cli))
