from dataclasses import fields

import numpy as np
import structlog

from commands.common import CommandContext, add_model_arguments, require_positive
from config import ConfigError
from density import FourierConfig
from mcmc import ALGORITHMS, MhChain, MhConfig, run_sampler
from storage import ArtifactStore, read_observations_csv

logger = structlog.get_logger(__name__)

MH_FIELDS = {f.name for f in fields(MhConfig)}
TASK_KEYS = MH_FIELDS | {"algorithm", "obs", "x", "dt", "n_mc", "M", "h", "a"}
CHAIN_HEADER = ["iter", "lambda", "gamma", "accepted"]


def write_chain(store: ArtifactStore, chain: MhChain, extra: dict = None) -> None:
    rows = ((i, lam, gamma, chain.accepted[i]) for i, (lam, gamma) in enumerate(chain.samples))
    store.write_csv("chain.csv", CHAIN_HEADER, rows)
    summary = chain.summary()
    summary.update(extra or {})
    store.write_json("summary.json", summary)


class MhCommand:
    """Estimate (lambda, gamma) from one-step observations with a Metropolis-Hastings chain."""

    name = "mh"
    help = "Metropolis-Hastings estimation of the jump intensity and scale"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--algorithm", choices=ALGORITHMS, help="Likelihood or discriminator chain (default likelihood)")
        parser.add_argument("--obs", help="CSV with one column of observed next states")
        parser.add_argument("--x", type=float, help="Known starting state of every observation")
        parser.add_argument("--dt", type=float, help="Step size of every observation")
        parser.add_argument("--m", type=int, help="Chain length")
        parser.add_argument("--sigma1", type=float, help="Proposal spread for lambda (default 0.05)")
        parser.add_argument("--sigma2", type=float, help="Proposal spread for gamma (default 0.01)")
        parser.add_argument("--theta", type=float, help="Discriminator sharpness (default 5)")
        parser.add_argument("--burn-in", dest="burn_in", type=int, help="Discarded iterations (default m/5)")
        parser.add_argument("--init-from-h", dest="init_from_h", action="store_true", default=None,
                            help="Start from the Nelder-Mead minimizer of the moment statistic")
        parser.add_argument("--n-mc", dest="n_mc", type=int, help="Jump configurations (default 200, or 4000 for the discriminator)")
        parser.add_argument("--M", type=int, help="Fourier grid half-size (default 200)")
        parser.add_argument("--h", type=float, help="Fourier grid spacing (default 0.05)")
        parser.add_argument("--seed", type=int, help="Root seed (required)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        model = ctx.model()
        algorithm = ctx.task("algorithm", "likelihood")
        obs_file = ctx.task("obs")
        if not obs_file:
            raise ConfigError("Missing required field: obs")
        x = ctx.task("x")
        if x is None:
            raise ConfigError("Missing required field: x")
        dt = float(require_positive("dt", ctx.task("dt")))
        seed = ctx.seed(required=True)

        settings = {name: ctx.task(name) for name in MH_FIELDS if ctx.task(name) is not None}
        if algorithm == "discriminator":
            settings.setdefault("m", 10000)
        mh = MhConfig.from_dict(settings)
        fourier = FourierConfig(int(ctx.task("M", 200)), float(ctx.task("h", 0.05)), float(ctx.task("a", 0.0)))
        n_mc = ctx.task("n_mc")
        observations = read_observations_csv(obs_file)
        store = ctx.store()

        chain = run_sampler(algorithm, observations, float(x), dt, model, mh, fourier, n_mc, seed)
        logger.info("Chain finished", algorithm=algorithm, acceptance=chain.acceptance_rate, observations=int(np.size(observations)))
        write_chain(store, chain, {"seed": seed, "observations": int(np.size(observations))})


def setup(cli):
    cli.add_command(MhCommand(cli))
