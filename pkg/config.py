import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import structlog
from dotenv import load_dotenv

from simulate import JumpSpec, SdeModel

# Load environment variables
load_dotenv()

logger = structlog.get_logger(__name__)

# Defaults that can be overridden from the environment
DEFAULT_OUTPUT_DIR = os.getenv("JUMPSDE_OUTPUT_DIR", "runs")
LOG_LEVEL = os.getenv("JUMPSDE_LOG_LEVEL", "INFO").upper()

TOP_LEVEL_KEYS = {"model", "task", "seeds", "output_dir"}
MODEL_KEYS = {"drift", "diffusion", "x0", "lambda", "gamma", "jump_law", "drift_checkpoint", "diffusion_checkpoint"}


class ConfigError(ValueError):
    """Raised for invalid run configuration (missing or unknown fields, bad values)."""


def thread_count() -> int:
    """Parallelism cap from JUMPSDE_THREADS, defaulting to the CPU count."""
    raw = os.getenv("JUMPSDE_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        logger.error(f"JUMPSDE_THREADS must be an integer, got {raw!r}")
        raise ConfigError(f"JUMPSDE_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"JUMPSDE_THREADS must be at least 1, got {value}")
    return value


@dataclass
class RunConfig:
    """
    Contents of a --config JSON file.

    Top-level keys are model, task, seeds and output_dir; anything else is rejected.
    """

    model: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        if not isinstance(payload, dict):
            raise ConfigError("Config must be a JSON object")
        unknown = set(payload) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")
        model = payload.get("model", {}) or {}
        task = payload.get("task", {}) or {}
        seeds = payload.get("seeds", {}) or {}
        for name, block in (("model", model), ("task", task), ("seeds", seeds)):
            if not isinstance(block, dict):
                raise ConfigError(f"Config block '{name}' must be an object")
        unknown = set(model) - MODEL_KEYS
        if unknown:
            raise ConfigError(f"Unknown model keys: {', '.join(sorted(unknown))}")
        return cls(model, task, seeds, payload.get("output_dir"))

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        """Load and validate a config file; no path gives an empty config."""
        if not path:
            return cls()
        try:
            with open(path, encoding="utf-8") as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Could not read config {path}: {e}")
            raise ConfigError(f"Could not read config {path}: {e}") from e
        return cls.from_dict(payload)

    def check_task(self, allowed: Iterable[str]) -> None:
        unknown = set(self.task) - set(allowed)
        if unknown:
            raise ConfigError(f"Unknown task keys: {', '.join(sorted(unknown))}")


def merge(config_values: dict, overrides: dict) -> dict:
    """Config values overridden by explicit (non-None) command-line values."""
    merged = dict(config_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def build_jumps(block: dict) -> JumpSpec:
    try:
        return JumpSpec.parse(block.get("lambda", 0.0), block.get("gamma", 0.0), block.get("jump_law", "uniform:0.1"))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def build_model(block: dict) -> SdeModel:
    """
    Build a model from a merged model block.

    Closed-form coefficients come from the drift/diffusion expressions; trained
    networks come from checkpoint files. Either source is required for each.
    """
    jumps = build_jumps(block)
    x0 = float(block.get("x0", 1.5))
    drift, diffusion = block.get("drift"), block.get("diffusion")
    f_ckpt, g_ckpt = block.get("drift_checkpoint"), block.get("diffusion_checkpoint")

    if f_ckpt or g_ckpt:
        if not (f_ckpt and g_ckpt):
            raise ConfigError("Both drift_checkpoint and diffusion_checkpoint are required")
        # Imported here to keep expression-only runs free of the training stack
        from storage import load_checkpoint
        from trainer import network_model

        f_net, g_net = load_checkpoint(f_ckpt), load_checkpoint(g_ckpt)
        delta = float(g_net.train_meta.get("delta", 1e-3))
        return network_model(f_net, g_net, x0, jumps, delta)

    if not drift:
        raise ConfigError("Missing required field: drift")
    if not diffusion:
        raise ConfigError("Missing required field: diffusion")
    return SdeModel.from_expressions(drift, diffusion, x0, jumps)
