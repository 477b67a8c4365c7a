from dataclasses import fields
from typing import Optional

import structlog

from commands.common import CommandContext, add_model_arguments
from config import ConfigError, build_jumps
from simulate import JumpSpec, PathSet, SdeModel
from storage import ArtifactStore, read_paths_csv
from trainer import NetworkPair, TrainConfig, TrainReport, train_full, train_joint, train_two_step

logger = structlog.get_logger(__name__)

METHODS = ("three-phase", "two-step", "joint")
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
TASK_KEYS = TRAIN_FIELDS | {"paths", "block_size", "method", "truth_drift", "truth_diffusion", "epochs_f", "epochs_g", "epochs_joint"}
LOSS_HEADER = ["trace", "step", "loss"]


def run_training(
    data: PathSet,
    jumps: JumpSpec,
    cfg: TrainConfig,
    truth: Optional[SdeModel] = None,
    method: str = "three-phase",
    epochs_f: int = 400,
    epochs_g: int = 30,
    epochs_joint: int = 30,
):
    """Dispatch to the requested training method."""
    if method not in METHODS:
        raise ValueError(f"Unknown training method {method!r}, expected one of {METHODS}")
    logger.info("Starting training", method=method, paths=data.K, points=data.N, blocks=data.R, jumps=jumps.active)
    if method == "two-step":
        return train_two_step(data, jumps, cfg, truth, epochs_f, epochs_g)
    if method == "joint":
        return train_joint(data, jumps, cfg, truth, epochs_joint)
    return train_full(data, jumps, cfg, truth)


def write_training(store: ArtifactStore, nets: NetworkPair, report: TrainReport, extra: Optional[dict] = None) -> None:
    """Checkpoints, report.json and loss_trace.csv."""
    store.write_checkpoint("drift.json", nets.f_net)
    store.write_checkpoint("diffusion.json", nets.g_net)
    payload = report.to_dict()
    payload.pop("traces")
    payload["MSE_f"] = report.mse_f
    payload["MSE_g"] = report.mse_g
    payload.update(extra or {})
    store.write_json("report.json", payload)
    rows = ((name, step, loss) for name in sorted(report.traces) for step, loss in enumerate(report.traces[name]))
    store.write_csv("loss_trace.csv", LOSS_HEADER, rows)


class TrainCommand:
    """Fit drift and diffusion networks to observed paths."""

    name = "train"
    help = "Train drift and diffusion networks on a path CSV"

    def __init__(self, cli):
        self.cli = cli

    def add_arguments(self, parser):
        add_model_arguments(parser)
        parser.add_argument("--paths", help="Path CSV written by the simulate command")
        parser.add_argument("--block-size", dest="block_size", type=int, help="Points per block (default 100)")
        parser.add_argument("--method", choices=METHODS, help="Training method (default three-phase)")
        parser.add_argument("--truth-drift", dest="truth_drift", help="True drift expression, enables MSE reporting")
        parser.add_argument("--truth-diffusion", dest="truth_diffusion", help="True diffusion expression")
        parser.add_argument("--epoch0", type=int, help="Phase 1 epochs (default 400 without jumps, 10 with)")
        parser.add_argument("--epoch1", type=int, help="Phase 2 epochs (default 100)")
        parser.add_argument("--epoch2", type=int, help="Phase 3 epochs (default 400)")
        parser.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
        parser.add_argument("--seed", type=int, help="Root seed (required)")

    def run(self, args):
        ctx = CommandContext(args, TASK_KEYS)
        paths_file = ctx.task("paths")
        if not paths_file:
            raise ConfigError("Missing required field: paths")
        seed = ctx.seed(required=True)
        jumps = build_jumps(ctx.model_block())
        values = {name: ctx.task(name) for name in TRAIN_FIELDS if ctx.task(name) is not None}
        cfg = TrainConfig.from_dict(values, seed=None if "seeds" in values else seed)

        truth_drift, truth_diffusion = ctx.task("truth_drift"), ctx.task("truth_diffusion")
        if bool(truth_drift) != bool(truth_diffusion):
            raise ConfigError("Both truth-drift and truth-diffusion are required for MSE reporting")
        x0 = float(ctx.model_block().get("x0", 1.5))
        truth = SdeModel.from_expressions(truth_drift, truth_diffusion, x0, jumps) if truth_drift else None

        data = read_paths_csv(paths_file, int(ctx.task("block_size", 100)))
        method = ctx.task("method", "three-phase")
        store = ctx.store()
        nets, report = run_training(
            data,
            jumps,
            cfg,
            truth,
            method,
            int(ctx.task("epochs_f", 400)),
            int(ctx.task("epochs_g", 30)),
            int(ctx.task("epochs_joint", 30)),
        )
        write_training(store, nets, report, {"method": method, "seed": seed})


def setup(cli):
    cli.add_command(TrainCommand(cli))
