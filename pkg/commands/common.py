"""Helpers shared by the subcommands: model flags, config merging, seeds and output."""

import json
import sys
from typing import Iterable, Optional

from config import DEFAULT_OUTPUT_DIR, ConfigError, RunConfig, build_model, merge, thread_count
from simulate import SdeModel
from storage import ArtifactStore, to_jsonable


def add_model_arguments(parser) -> None:
    """Flags describing the model; each overrides the config's model block."""
    group = parser.add_argument_group("model")
    group.add_argument("--drift", help="Drift expression in x, e.g. '1-x'")
    group.add_argument("--diffusion", help="Diffusion expression in x, e.g. '0.5*x'")
    group.add_argument("--x0", type=float, help="Initial state (default 1.5)")
    group.add_argument("--lambda", dest="lam", type=float, help="Jump intensity (default 0)")
    group.add_argument("--gamma", type=float, help="Jump scale (default 0)")
    group.add_argument("--jump-law", dest="jump_law", help="Jump law: uniform:a, normal:s or laplace:b")
    group.add_argument("--drift-checkpoint", dest="drift_checkpoint", help="Trained drift network checkpoint")
    group.add_argument("--diffusion-checkpoint", dest="diffusion_checkpoint", help="Trained diffusion network checkpoint")


def model_overrides(args) -> dict:
    return {
        "drift": getattr(args, "drift", None),
        "diffusion": getattr(args, "diffusion", None),
        "x0": getattr(args, "x0", None),
        "lambda": getattr(args, "lam", None),
        "gamma": getattr(args, "gamma", None),
        "jump_law": getattr(args, "jump_law", None),
        "drift_checkpoint": getattr(args, "drift_checkpoint", None),
        "diffusion_checkpoint": getattr(args, "diffusion_checkpoint", None),
    }


class CommandContext:
    """
    Resolved inputs of one command run.

    Flags given on the command line win over the --config file; the file wins
    over built-in defaults. Everything is validated here, before any output.
    """

    def __init__(self, args, task_keys: Iterable[str]):
        self.args = args
        self.config = RunConfig.load(getattr(args, "config", None))
        self.config.check_task(task_keys)

    def task(self, name: str, default=None, attr: Optional[str] = None):
        value = getattr(self.args, attr or name, None)
        if value is not None:
            return value
        return self.config.task.get(name, default)

    def model_block(self) -> dict:
        return merge(self.config.model, model_overrides(self.args))

    def model(self) -> SdeModel:
        return build_model(self.model_block())

    def seed(self, required: bool = False, default: int = 0) -> int:
        value = getattr(self.args, "seed", None)
        if value is None:
            value = self.config.seeds.get("seed")
        if value is None:
            if required:
                raise ConfigError("Missing required field: seed")
            value = default
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"Seed must be an integer, got {value!r}")

    def threads(self) -> int:
        return thread_count()

    def store(self) -> ArtifactStore:
        return ArtifactStore(getattr(self.args, "out_dir", None) or self.config.output_dir or DEFAULT_OUTPUT_DIR)


def require_positive(name: str, value, allow_zero: bool = False):
    if value is None:
        raise ConfigError(f"Missing required field: {name}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


def parse_grid(text: str):
    """Parse 'lo:hi:n' into (lo, hi, n)."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except (AttributeError, ValueError):
        raise ConfigError(f"Grid must look like lo:hi:n, got {text!r}")
    if not hi > lo or n < 2:
        raise ConfigError(f"Grid needs hi > lo and at least 2 points, got {text!r}")
    return lo, hi, n


def print_json(payload: dict) -> None:
    sys.stdout.write(json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n")
