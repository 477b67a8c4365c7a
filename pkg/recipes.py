"""
Named experiment recipes.

Each recipe fixes a model and the task parameters of one pipeline (simulate,
train, density, mh or convergence). Values can be overridden per run with
``key=value`` strings, where the key is a model or task field name, optionally
prefixed with ``model.`` or ``task.``.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable

import structlog

logger = structlog.get_logger(__name__)

KINDS = ("simulate", "train", "density", "mh", "convergence")


@dataclass(frozen=True)
class Recipe:
    name: str
    kind: str
    description: str
    model: Dict = field(default_factory=dict)
    task: Dict = field(default_factory=dict)
    needs_seed: bool = False


# Shared data-generation settings of the training experiments
PATH_TASK = {"T": 5.0, "N": 1000, "K": 10, "block_size": 100}
DECAYING = {"drift": "-0.25*x^3", "diffusion": "0.57*x", "x0": 1.5}


def _training(name, description, model, **task):
    return Recipe(name, "train", description, dict(model), {**PATH_TASK, "method": "three-phase", **task}, needs_seed=True)


def _jumps(lam, gamma, law):
    return {"lambda": lam, "gamma": gamma, "jump_law": law}


RECIPES = {
    recipe.name: recipe
    for recipe in [
        Recipe("fig1", "simulate", "Ten paths of dX = -0.25 X^3 dt + 0.57 X dW on [0, 5]", DECAYING, dict(PATH_TASK)),
        _training("fig2", "Two-step baseline on the decaying model (drift, then diffusion)", DECAYING, method="two-step", epochs_f=400, epochs_g=30),
        _training("fig3", "Joint likelihood baseline on the decaying model, 30 epochs", DECAYING, method="joint", epochs_joint=30),
        _training("table1-row1", "Three-phase training, f = -0.25 x^3, g = 0.57 x", DECAYING),
        _training("table1-row2", "Three-phase training, f = 0.15 (x - x^5), g = 0.32 sin x", {"drift": "0.15*(x-x^5)", "diffusion": "0.32*sin(x)", "x0": 1.5}),
        _training("table1-row3", "Three-phase training, f = 1 - x, g = 1", {"drift": "1-x", "diffusion": "1", "x0": 1.5}),
        _training("table1-row4", "Three-phase training, f = sin x, g = 1", {"drift": "sin(x)", "diffusion": "1", "x0": 1.5}),
        _training(
            "table2-row1",
            "Three-phase training with jumps, gamma = 0.8, lambda = 1.2, U(-0.1, 0.1)",
            {"drift": "1-x", "diffusion": "0.31*x", "x0": 1.5, **_jumps(1.2, 0.8, "uniform:0.1")},
        ),
        _training(
            "table2-row2",
            "Three-phase training with jumps, gamma = 0.31, lambda = 1.7, N(0, 0.12)",
            {"drift": "0.28*(x-x^3)", "diffusion": "1", "x0": 1.5, **_jumps(1.7, 0.31, "normal:0.34641016151377546")},
        ),
        _training(
            "table2-row3",
            "Three-phase training with jumps, gamma = 1.47, lambda = 0.5, Laplace(0, 0.1)",
            {"drift": "cos(x)", "diffusion": "1", "x0": 1.5, **_jumps(0.5, 1.47, "laplace:0.1")},
        ),
        Recipe(
            "fig5",
            "density",
            "Density of one step from x = 2.3 with uniform jumps against a simulated histogram",
            {"drift": "0.17*(x-x^3)", "diffusion": "0.76*(1+cos(x))", **_jumps(0.94, 0.8, "uniform:0.1")},
            {"x": 2.3, "dt": 0.5, "M": 2000, "h": 0.05, "a": 0.0, "n_mc": 150, "hist_sim": 100000, "bins": 60},
        ),
        Recipe(
            "fig6",
            "density",
            "Density of one step from x = 2.3 with normal jumps against a simulated histogram",
            {"drift": "1-x", "diffusion": "0.84*(1+sin(x))", **_jumps(0.81, 0.25, "normal:1")},
            {"x": 2.3, "dt": 0.5, "M": 2000, "h": 0.05, "a": 0.0, "n_mc": 150, "hist_sim": 100000, "bins": 60},
        ),
        Recipe(
            "appC-alg1",
            "mh",
            "Likelihood sampler for (lambda, gamma) from 250 one-step observations",
            {"drift": "sin(x)", "diffusion": "0.35*x+0.2", **_jumps(1.7, 2.4, "uniform:0.5")},
            {"algorithm": "likelihood", "x": 1.5, "dt": 0.5, "n_obs": 250, "n_mc": 200, "M": 200, "h": 0.05, "a": 0.0,
             "m": 1000, "sigma1": 0.05, "sigma2": 0.01},
            needs_seed=True,
        ),
        Recipe(
            "appC-alg2",
            "mh",
            "Discriminator sampler for (lambda, gamma) from 250 one-step observations",
            {"drift": "sin(x)", "diffusion": "0.35*x+0.2", **_jumps(1.7, 2.4, "uniform:0.5")},
            {"algorithm": "discriminator", "x": 1.5, "dt": 0.5, "n_obs": 250, "n_mc": 4000,
             "m": 10000, "sigma1": 0.05, "sigma2": 0.01, "theta": 5.0},
            needs_seed=True,
        ),
        Recipe(
            "convergence",
            "convergence",
            "Strong order of the diffusion-only scheme for dX = -X dt + 0.5 X dW against a 16384-step reference",
            {"drift": "-x", "diffusion": "0.5*x", "x0": 1.5},
            {"T": 1.0, "levels": [64, 128, 256, 512, 1024], "reference_N": 16384, "K_mc": 2000},
        ),
    ]
}


def get_recipe(name: str) -> Recipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise ValueError(f"Unknown recipe {name!r}, expected one of: {', '.join(RECIPES)}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(recipe: Recipe, overrides: Iterable[str], model_keys: Iterable[str]) -> Recipe:
    """
    Return a copy of the recipe with ``key=value`` overrides applied.

    Bare keys that name a model field go to the model block, everything else to
    the task block. Values are parsed as JSON when possible.
    """
    model, task = dict(recipe.model), dict(recipe.task)
    model_keys = set(model_keys)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ValueError(f"Override must look like key=value, got {item!r}")
        value = _parse_value(raw.strip())
        section, _, bare = key.rpartition(".")
        if section not in ("", "model", "task"):
            raise ValueError(f"Unknown override section {section!r} in {item!r}")
        target = model if section == "model" or (not section and bare in model_keys) else task
        target[bare] = value
        logger.debug("Applied override", recipe=recipe.name, key=bare, value=value)
    return replace(recipe, model=model, task=task)
