from commands.common import CommandContext, add_model_arguments, require_positive
from config import ConfigError
from simulate import ConvergenceResult, convergence_slope
from storage import ArtifactStore

TASK_KEYS = {"T", "levels", "K_mc", "reference_N"}
DEFAULT_LEVELS = (16, 32, 64, 128)


def parse_levels(value):
    if isinstance(value, str):
        try:
            return [int(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"Levels must be comma-separated integers, got {value!r}")
    return [int(v) for v in value]


def write_convergence(store: ArtifactStore, result: ConvergenceResult, extra: dict = None) -> None:
    store.write_csv("convergence.csv", ["steps", "h", "rms_error"], zip(result.levels, result.step_sizes, result.errors))
    payload = {"slope": result.slope, "levels": result.levels, "reference_N": result.reference_N, "errors": result.errors}
    payload.update(extra or {})
    store.write_json("convergence.json", payload)


class ConvergenceCommand:
    """Empirical strong order of the diffusion-only scheme."""

    name = "convergence"
    help = "Measure the strong convergence order by coupled refinement"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--T", type=float, help="Horizon (default 1)")
        parser.add_argument("--levels", help="Comma-separated power-of-two step counts (default 16,32,64,128)")
        parser.add_argument("--K-mc", dest="K_mc", type=int, help="Monte Carlo paths (default 2000)")
        parser.add_argument("--reference-N", dest="reference_N", type=int, help="Reference step count (default 16 x finest)")
        parser.add_argument("--seed", type=int, help="Root seed (default 0)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        T = float(require_positive("T", ctx.task("T", 1.0)))
        levels = parse_levels(ctx.task("levels", DEFAULT_LEVELS))
        K_mc = int(require_positive("K_mc", ctx.task("K_mc", 2000)))
        reference_N = ctx.task("reference_N")
        seed = ctx.seed()
        store = ctx.store()

        result = convergence_slope(model, T, levels, K_mc, seed, reference_N)
        write_convergence(store, result, {"seed": seed, "K_mc": K_mc, "T": T})


def setup(cli):
    cli.add_command(ConvergenceCommand(cli))
