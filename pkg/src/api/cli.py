"""
Command-line interface: generate synthetic clips, fit scenes, render, evaluate
and edit physical parameters of fitted scenes.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import matplotlib
import pandas as pd
import torch

from src.app.checkpoint import LoadedCheckpoint, load_checkpoint
from src.app.config import load_config, load_environment, parse_override, save_config
from src.app.dataset import (
    FrameDataset,
    check_family,
    ensure_dir,
    frame_file,
    load_dataset,
    mask_file,
    parse_frame_range,
    read_json,
    write_json,
    write_mask,
    write_rgb,
    write_times,
)
from src.app.errors import (
    AutodiffError,
    ConfigurationError,
    DatasetError,
    NumericalError,
    PhysParamError,
)
from src.app.initializer import initialize_scene
from src.app.metrics import evaluate
from src.app.renderer import render_frames
from src.app.scene import build_scene
from src.app.synthgen import default_scenario, generate, scenario_from_truth, with_homography
from src.app.training import fit

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

CHECKPOINT_FILE = "checkpoint.safetensors"
METRICS_FILE = "metrics.json"
HISTORY_CSV = "history.csv"
HISTORY_PLOT = "history.png"
CONFIG_FILE = "config.json"
LOSS_TERMS = ("photo", "bce", "reg", "seg", "attach", "outside")


def exit_code(error: Exception) -> int:
    """Exit status for an error raised by a command."""
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, DatasetError):
        return EXIT_DATA
    if isinstance(error, (NumericalError, AutodiffError)):
        return EXIT_NUMERICAL
    return EXIT_UNEXPECTED


def _require(value: Any, flag: str, command: str) -> Any:
    if value is None:
        raise ConfigurationError(f"'{command}' needs {flag}")
    return value


def _frames(text: str | None, default: Sequence[int]) -> list[int]:
    return parse_frame_range(text) if text else list(default)


def _emit(payload: dict[str, Any], out: Path | None) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))
    if out is not None:
        write_json(out / METRICS_FILE, payload)


def plot_history(history: pd.DataFrame, path: Path) -> None:
    """Loss curve and physical value curves, one panel each."""
    if history.empty:
        return
    skip = {"epoch", "step", "active_frames", "total"}
    losses = [c for c in history.columns if c in LOSS_TERMS]
    physical = [c for c in history.columns
                if c not in skip and c not in losses and not c.startswith("lr_")]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].semilogy(history["epoch"], history["total"], label="total")
    for column in losses:
        if (history[column] > 0).any():
            axes[0].semilogy(history["epoch"], history[column], label=column, alpha=0.7)
    axes[0].set_xlabel("epoch")
    axes[0].set_title("loss")
    axes[0].legend(fontsize="small")
    for column in physical:
        axes[1].plot(history["epoch"], history[column], label=column)
    axes[1].set_xlabel("epoch")
    axes[1].set_title("physical values")
    axes[1].legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(_require(args.out, "--out", "synth"))
    if args.truth:
        truth = read_json(args.truth)
        seed = args.seed if args.seed is not None else int(truth.get("seed", 0))
        generate(scenario_from_truth(truth), seed, out)
        print(str(out))
        return EXIT_OK
    overrides: dict[str, Any] = {}
    values: dict[str, float] = {}
    for text in args.set:
        path, value = parse_override(text)
        if path[0] == "values" and len(path) == 2:
            values[path[1]] = float(value)
        elif len(path) == 1:
            overrides[path[0]] = value
        else:
            raise ConfigurationError(f"Unsupported scenario override '{text}'",
                                     details="use values.<name>=x or <field>=x")
    scenario = default_scenario(args.scenario, values=values, **overrides)
    if args.homography:
        scenario = with_homography(scenario)
    generate(scenario, args.seed if args.seed is not None else 0, out)
    print(str(out))
    return EXIT_OK


def _dataset_for(args: argparse.Namespace, configured: str | None) -> FrameDataset:
    path = args.dataset or configured
    if path is None:
        raise ConfigurationError("No dataset given", details="pass --dataset or set 'dataset'")
    return load_dataset(path)


def cmd_fit(args: argparse.Namespace) -> int:
    out = Path(_require(args.out, "--out", "fit"))
    config = load_config(args.config, args.set, args.seed)
    dataset = _dataset_for(args, config.dataset)
    check_family(dataset, config.dynamics_family)
    ensure_dir(out)
    save_config(config, out / CONFIG_FILE)

    scene = build_scene(config)
    initialize_scene(scene, dataset, config)
    result = fit(dataset, scene, config, checkpoint_path=out / CHECKPOINT_FILE,
                 show_progress=not args.quiet, max_steps=args.max_steps)
    try:
        result.history.to_csv(out / HISTORY_CSV, index=False)
        plot_history(result.history, out / HISTORY_PLOT)
    except OSError as e:
        raise DatasetError(f"Cannot write the fit history to {out}", details=str(e)) from e

    indices = _frames(args.frames, dataset.test_indices or dataset.train_indices)
    report = evaluate(scene, dataset, indices, config_hash=config.config_hash(),
                      wall_clock=result.seconds)
    _emit(report.to_dict(), out)
    return EXIT_OK


def _write_render(loaded: LoadedCheckpoint, indices: list[int], out: Path) -> None:
    times = loaded.times_for(indices)
    frames = render_frames(times, loaded.grid, loaded.scene)
    for index, frame in zip(indices, frames):
        if loaded.scene.background is not None:
            write_rgb(out / "frames" / frame_file(index), frame.rgb)
        write_mask(out / "masks" / mask_file(index), frame.occupancy)
    write_times(out / "times.txt", times)
    logger.info("Rendered %d frame(s) to %s", len(indices), out)


def cmd_render(args: argparse.Namespace) -> int:
    out = Path(_require(args.out, "--out", "render"))
    loaded = load_checkpoint(_require(args.checkpoint, "--checkpoint", "render"))
    _write_render(loaded, _frames(args.frames, range(loaded.times.size)), out)
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    out = Path(_require(args.out, "--out", "edit"))
    loaded = load_checkpoint(_require(args.checkpoint, "--checkpoint", "edit"))
    before = loaded.scene.physical_values()
    for text in args.set:
        path, value = parse_override(text)
        name = ".".join(path)
        try:
            number = float(value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Value of '{name}' must be a number", details=text) from e
        loaded.scene.set_physical(name, number)
        logger.info("Edited %s: %.6g -> %.6g", name, before.get(name, float("nan")), number)
    _write_render(loaded, _frames(args.frames, range(loaded.times.size)), out)
    write_json(out / "edited.json", loaded.scene.physical_values())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_checkpoint(_require(args.checkpoint, "--checkpoint", "eval"))
    dataset = _dataset_for(args, loaded.config.dataset)
    check_family(dataset, loaded.scene.family)
    indices = _frames(args.frames, dataset.test_indices or dataset.train_indices)
    report = evaluate(loaded.scene, dataset, indices, config_hash=loaded.config_hash)
    out = Path(args.out) if args.out else None
    if out is not None:
        ensure_dir(out)
    _emit(report.to_dict(), out)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "render": cmd_render,
    "eval": cmd_eval,
    "edit": cmd_edit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physparam",
        description="Estimate physical parameters from video by differentiable rendering.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name: str, help_text: str) -> argparse.ArgumentParser:
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--out", help="output directory")
        command.add_argument("--seed", type=int, help="random seed")
        command.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                             help="override (repeatable)")
        command.add_argument("--frames", metavar="A..B", help="inclusive frame index range")
        return command

    synth = common("synth", "generate a synthetic dataset")
    synth.add_argument("--scenario", default="pendulum",
                       help="pendulum, pendulum-mask, spring, block or ball")
    synth.add_argument("--homography", action="store_true",
                       help="render through a fixed non-identity homography")
    synth.add_argument("--truth", metavar="FILE",
                       help="regenerate the clip described by a truth file")

    fit_cmd = common("fit", "fit a scene to a dataset")
    fit_cmd.add_argument("--config", help="run config (JSON or YAML)")
    fit_cmd.add_argument("--dataset", help="dataset directory")
    fit_cmd.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    fit_cmd.add_argument("--quiet", action="store_true", help="hide the progress bar")

    render = common("render", "render frames and masks from a checkpoint")
    render.add_argument("--checkpoint", help="checkpoint file")

    evaluate_cmd = common("eval", "evaluate a checkpoint on a dataset")
    evaluate_cmd.add_argument("--checkpoint", help="checkpoint file")
    evaluate_cmd.add_argument("--dataset", help="dataset directory")

    edit = common("edit", "change physical values and re-render")
    edit.add_argument("--checkpoint", help="checkpoint file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        env = load_environment()
        logging.basicConfig(level=env.log_level,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        if env.num_threads is not None:
            torch.set_num_threads(env.num_threads)
        return COMMANDS[args.command](args)
    except PhysParamError as e:
        logger.error("%s failed: %s", args.command, e.message)
        print(f"Error: {e.message}" + (f" ({e.details})" if e.details else ""), file=sys.stderr)
        return exit_code(e)
    except Exception as e:  # pylint: disable=broad-exception-caught
        logger.exception("%s failed unexpectedly", args.command)
        print(f"Unexpected error occurred: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
