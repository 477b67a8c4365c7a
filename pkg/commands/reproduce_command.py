import os
from dataclasses import replace

import numpy as np
import structlog

from commands import convergence_command, density_command, mh_command, train_command
from commands.common import CommandContext
from config import DEFAULT_OUTPUT_DIR, MODEL_KEYS, ConfigError, build_model
from density import FourierConfig
from mcmc import MhConfig, run_sampler
from recipes import RECIPES, Recipe, apply_overrides, get_recipe
from simulate import convergence_slope, sample_one_step, simulate_paths
from storage import ArtifactStore
from trainer import TrainConfig

logger = structlog.get_logger(__name__)

PATH_KEYS = {"T", "N", "K", "block_size"}
TASK_KEYS_BY_KIND = {
    "simulate": PATH_KEYS,
    "train": PATH_KEYS | train_command.TRAIN_FIELDS | {"method", "epochs_f", "epochs_g", "epochs_joint"},
    "density": density_command.TASK_KEYS - {"grid", "out"},
    "mh": mh_command.MH_FIELDS | {"algorithm", "x", "dt", "n_obs", "n_mc", "M", "h", "a"},
    "convergence": convergence_command.TASK_KEYS,
}


def _child_seeds(seed: int, count: int):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def validate_recipe(recipe: Recipe) -> None:
    unknown = set(recipe.model) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"Unknown model keys: {', '.join(sorted(unknown))}")
    unknown = set(recipe.task) - TASK_KEYS_BY_KIND[recipe.kind]
    if unknown:
        raise ConfigError(f"Unknown task keys for {recipe.name}: {', '.join(sorted(unknown))}")


def reproduce_simulate(recipe: Recipe, store: ArtifactStore, seed: int, threads: int) -> dict:
    model = build_model(recipe.model)
    task = recipe.task
    pathset = simulate_paths(model, float(task["T"]), int(task["N"]), int(task["K"]), seed, int(task["block_size"]), threads=threads)
    store.write_paths(pathset)
    final = pathset.paths[:, -1]
    return {"K": pathset.K, "N": pathset.N, "T": task["T"], "final_mean": float(final.mean()), "final_std": float(final.std())}


def reproduce_train(recipe: Recipe, store: ArtifactStore, seed: int, threads: int) -> dict:
    """Simulate the data set, then train on it with the recipe's method."""
    model = build_model(recipe.model)
    task = recipe.task
    data_seed, train_seed = _child_seeds(seed, 2)
    data = simulate_paths(model, float(task["T"]), int(task["N"]), int(task["K"]), data_seed, int(task["block_size"]), threads=threads)
    store.write_paths(data)

    values = {k: v for k, v in task.items() if k in train_command.TRAIN_FIELDS}
    cfg = TrainConfig.from_dict(values, seed=None if "seeds" in values else train_seed)
    nets, report = train_command.run_training(
        data,
        model.jumps,
        cfg,
        model,
        task.get("method", "three-phase"),
        int(task.get("epochs_f", 400)),
        int(task.get("epochs_g", 30)),
        int(task.get("epochs_joint", 30)),
    )
    extra = {"method": task.get("method", "three-phase"), "data_seed": data_seed}
    train_command.write_training(store, nets, report, extra)
    return {"MSE_f": report.mse_f, "MSE_g": report.mse_g}


def reproduce_density(recipe: Recipe, store: ArtifactStore, seed: int, threads: int) -> dict:
    model = build_model(recipe.model)
    task = recipe.task
    fourier = FourierConfig(int(task.get("M", 200)), float(task.get("h", 0.05)), float(task.get("a", 0.0)))
    header, rows, summary = density_command.run_density(
        model,
        float(task["x"]),
        float(task["dt"]),
        fourier,
        None,
        int(task.get("n_mc", 200)),
        int(task.get("hist_sim", 0)),
        int(task.get("bins", 60)),
        seed,
    )
    store.write_csv("density.csv", header, rows)
    return summary


def reproduce_mh(recipe: Recipe, store: ArtifactStore, seed: int, threads: int) -> dict:
    """Draw one-step observations from the true model, then sample (lambda, gamma)."""
    model = build_model(recipe.model)
    task = recipe.task
    data_seed, chain_seed = _child_seeds(seed, 2)
    x, dt = float(task["x"]), float(task["dt"])
    observations = sample_one_step(x, model, dt, np.random.default_rng(data_seed), size=int(task["n_obs"]))
    store.write_csv("observations.csv", ["x_next"], ((v,) for v in observations))

    mh = MhConfig.from_dict({k: v for k, v in task.items() if k in mh_command.MH_FIELDS})
    fourier = FourierConfig(int(task.get("M", 200)), float(task.get("h", 0.05)), float(task.get("a", 0.0)))
    chain = run_sampler(task["algorithm"], observations, x, dt, model, mh, fourier, task.get("n_mc"), chain_seed)
    truth = {"lambda": model.jumps.lam, "gamma": model.jumps.gamma}
    mh_command.write_chain(store, chain, {"seed": seed, "truth": truth})

    summary = chain.summary()
    covered = {
        name: summary[name]["ci_low"] <= truth[name] <= summary[name]["ci_high"]
        for name in ("lambda", "gamma")
    }
    return {"lambda": summary["lambda"], "gamma": summary["gamma"], "truth_in_ci": covered}


def reproduce_convergence(recipe: Recipe, store: ArtifactStore, seed: int, threads: int) -> dict:
    model = build_model(recipe.model)
    task = recipe.task
    levels = convergence_command.parse_levels(task["levels"])
    result = convergence_slope(model, float(task["T"]), levels, int(task["K_mc"]), seed, task.get("reference_N"))
    convergence_command.write_convergence(store, result, {"seed": seed})
    return {"slope": result.slope, "errors": result.errors}


RUNNERS = {
    "simulate": reproduce_simulate,
    "train": reproduce_train,
    "density": reproduce_density,
    "mh": reproduce_mh,
    "convergence": reproduce_convergence,
}


class ReproduceCommand:
    """Run a named recipe end to end and write its report."""

    name = "reproduce"
    help = "Run a named experiment recipe"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        parser.add_argument("recipe", help=f"One of: {', '.join(RECIPES)}")
        parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                            help="Override a model or task field (repeatable)")
        parser.add_argument("--seed", type=int, help="Root seed (required for training and sampler recipes)")

    def run(self, args):
        ctx = CommandContext(args, set().union(*TASK_KEYS_BY_KIND.values()))
        recipe = get_recipe(args.recipe)
        # Config file values sit between the recipe and explicit overrides
        recipe = replace(recipe, model={**recipe.model, **ctx.config.model}, task={**recipe.task, **ctx.config.task})
        recipe = apply_overrides(recipe, args.override, MODEL_KEYS)
        validate_recipe(recipe)
        seed = ctx.seed(required=recipe.needs_seed)
        # Recipes write into their own subdirectory unless told otherwise
        output_dir = args.out_dir or ctx.config.output_dir or os.path.join(DEFAULT_OUTPUT_DIR, recipe.name)
        store = ArtifactStore(output_dir)

        logger.info("Running recipe", recipe=recipe.name, kind=recipe.kind, seed=seed)
        results = RUNNERS[recipe.kind](recipe, store, seed, ctx.threads())
        report = {"recipe": recipe.name, "description": recipe.description, "seed": seed,
                  "model": recipe.model, "task": recipe.task, "results": results}
        name = "report.json" if recipe.kind != "train" else "recipe.json"
        store.write_json(name, report)


def setup(cli):
    cli.add_command(ReproduceCommand(cli))
