"""Module for the optimization loop: Adam, learning-rate decay and the online frame curriculum."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from src.app.autodiff import Tape, Tensor, backward
from src.app.checkpoint import save_checkpoint
from src.app.config import RunConfig, TrainConfig
from src.app.dataset import FrameDataset, check_family
from src.app.errors import DatasetError, NonFiniteError, NumericalError
from src.app.losses import Batch, total_loss
from src.app.scene import SceneModel

logger = logging.getLogger(__name__)


def lr_schedule(epoch: float, r0: float, beta: float, n_decay: float) -> float:
    """Exponential decay r(e) = r0 * beta ** (e / n_decay) with a real-valued exponent."""
    return r0 * beta ** (epoch / n_decay)


def frame_curriculum(step: int, n_fr0: int, n_incr: int, total_frames: int) -> int:
    """Number of leading training frames active at `step`."""
    return min(total_frames, n_fr0 + step // n_incr)


def build_optimizer(scene: SceneModel, train: TrainConfig) -> tuple[torch.optim.Adam, LambdaLR]:
    """Adam over the MLP and physics groups, each with its own rate and decay flag."""
    groups = scene.parameter_groups()
    param_groups = [
        {"params": [t.data for t in groups.mlp], "lr": train.lr_mlp, "name": "mlp"},
        {"params": [t.data for t in groups.physics], "lr": train.lr_physics, "name": "physics"},
    ]
    optimizer = torch.optim.Adam([g for g in param_groups if g["params"]],
                                 betas=(train.adam_beta1, train.adam_beta2), eps=train.adam_eps)

    def factor(decay: bool):
        if not decay:
            return lambda epoch: 1.0
        return lambda epoch: lr_schedule(epoch, 1.0, train.decay_rate, train.decay_steps)

    flags = {"mlp": train.decay_mlp, "physics": train.decay_physics}
    scheduler = LambdaLR(optimizer, [factor(flags[g["name"]]) for g in optimizer.param_groups])
    return optimizer, scheduler


def adam_step(optimizer: torch.optim.Optimizer, named: dict[str, Tensor]) -> None:
    """
    One bias-corrected Adam update.

    Raises:
        NonFiniteError: A gradient contains NaN or infinity; nothing is updated.
    """
    for name, tensor in named.items():
        grad = tensor.grad
        if grad is not None and not bool(torch.isfinite(grad).all()):
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}'", details=name)
    optimizer.step()


@dataclass
class FitResult:
    scene: SceneModel
    history: pd.DataFrame
    step: int = 0
    epoch: int = 0
    seconds: float = 0.0


@dataclass
class _Targets:
    coords: np.ndarray
    colors: np.ndarray | None = None
    masks: np.ndarray | None = None
    coarse: list[np.ndarray] | None = None
    frames: list[int] = field(default_factory=list)


class Trainer:
    """
    Runs epochs of batched Adam steps over the training frames of one dataset.

    An epoch visits every pixel of every active frame once in a seeded random order.
    """

    def __init__(self, scene: SceneModel, dataset: FrameDataset, config: RunConfig,
                 checkpoint_path: str | Path | None = None) -> None:
        check_family(dataset, scene.family)
        if not dataset.train_indices:
            raise DatasetError("Dataset has no training frames", details=str(dataset.root))
        self.scene = scene
        self.dataset = dataset
        self.config = config
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path is not None else None
        self.named = {name: t for name, t in scene.named_parameters().items() if t.requires_grad}
        self.optimizer, self.scheduler = build_optimizer(scene, config.train)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.targets = self._targets()
        self.step = 0
        self.epoch = 0

    def _targets(self) -> _Targets:
        dataset, scene = self.dataset, self.scene
        frames = sorted(self.dataset.train_indices)
        targets = _Targets(coords=dataset.grid.coords(), frames=frames)
        pixels = dataset.grid.n_pixels
        if dataset.has_rgb and scene.background is not None:
            targets.colors = dataset.frames[frames].reshape(len(frames), pixels, 3)
        else:
            if not dataset.has_full_masks(frames):
                raise DatasetError("Mask-only training needs object masks on every training frame",
                                   details=str(dataset.root))
            targets.masks = np.stack([dataset.union_mask(i).reshape(pixels) for i in frames])
        if dataset.coarse_masks is not None:
            targets.coarse = [m.reshape(pixels) for m in dataset.coarse_masks]
        return targets

    def active_frames(self) -> int:
        train = self.config.train
        clock = self.step if train.curriculum_unit == "steps" else self.epoch
        return frame_curriculum(clock, train.frames_start, train.frames_every,
                                len(self.targets.frames))

    def learning_rates(self) -> dict[str, float]:
        return {f"lr_{g['name']}": g["lr"] for g in self.optimizer.param_groups}

    def adam_moments(self) -> dict[str, torch.Tensor]:
        """First and second Adam moments keyed by parameter name."""
        moments = {}
        for name, tensor in self.named.items():
            state = self.optimizer.state.get(tensor.data)
            if state:
                moments[f"adam.exp_avg.{name}"] = state["exp_avg"]
                moments[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"]
        return moments

    def _batch(self, slots: np.ndarray, pixels: np.ndarray, times: np.ndarray) -> Batch:
        targets = self.targets
        return Batch(
            coords=Tensor(targets.coords[pixels]),
            frame_ids=slots,
            times=times,
            grid=self.dataset.grid,
            colors=None if targets.colors is None else Tensor(targets.colors[slots, pixels]),
            masks=None if targets.masks is None else Tensor(targets.masks[slots, pixels][:, None]),
            coarse_masks=targets.coarse,
        )

    def save(self, path: str | Path | None = None) -> Path | None:
        path = Path(path) if path is not None else self.checkpoint_path
        if path is None:
            return None
        save_checkpoint(path, self.scene, self.config, self.dataset, step=self.step,
                        epoch=self.epoch, moments=self.adam_moments())
        return path

    def train_step(self, batch: Batch) -> dict[str, float]:
        self.optimizer.zero_grad(set_to_none=True)
        with Tape():
            breakdown = total_loss(self.scene, batch, self.epoch, self.config.loss)
            if not np.isfinite(breakdown.terms["total"]):
                raise NonFiniteError(f"Non-finite loss at step {self.step}",
                                     details=str(breakdown.terms))
            backward(breakdown.total)
        adam_step(self.optimizer, self.named)
        self.step += 1
        logger.debug("step %d: %s", self.step, breakdown.terms)
        return breakdown.terms

    def run_epoch(self, max_steps: int | None = None) -> dict[str, Any]:
        n_active = self.active_frames()
        frames = self.targets.frames[:n_active]
        times = self.dataset.times[frames]
        pixels = self.dataset.grid.n_pixels
        order = torch.randperm(n_active * pixels, generator=self.generator).numpy()
        totals: dict[str, float] = {}
        n_batches = 0
        for start in range(0, order.size, self.config.train.batch_size):
            if max_steps is not None and self.step >= max_steps:
                break
            chunk = order[start:start + self.config.train.batch_size]
            terms = self.train_step(self._batch(chunk // pixels, chunk % pixels, times))
            for key, value in terms.items():
                totals[key] = totals.get(key, 0.0) + value
            n_batches += 1
        row: dict[str, Any] = {"epoch": self.epoch, "step": self.step, "active_frames": n_active}
        row.update({key: value / max(n_batches, 1) for key, value in totals.items()})
        row.update(self.learning_rates())
        row.update(self.scene.physical_values())
        self.epoch += 1
        self.scheduler.step()
        return row

    def fit(self, epochs: int | None = None, max_steps: int | None = None,
            show_progress: bool = False) -> FitResult:
        """
        Train for `epochs` (default: the configured count), stopping early after
        `max_steps` optimizer steps when given.
        """
        epochs = self.config.train.epochs if epochs is None else epochs
        rows = []
        started = time.perf_counter()
        progress = tqdm(range(epochs), desc="fit", unit="epoch", disable=not show_progress)
        saturated = False
        try:
            for _ in progress:
                if max_steps is not None and self.step >= max_steps:
                    break
                row = self.run_epoch(max_steps)
                rows.append(row)
                progress.set_postfix(loss=f"{row['total']:.3e}", frames=row["active_frames"])
                if not saturated and row["active_frames"] == len(self.targets.frames):
                    saturated = True
                    logger.info("All %d training frames active from epoch %d",
                                row["active_frames"], row["epoch"])
                if row["epoch"] % self.config.log_every == 0:
                    logger.info("epoch %d step %d loss %.6e", row["epoch"], row["step"],
                                row["total"])
        except NumericalError:
            dumped = self.save()
            if dumped is not None:
                logger.error("Numerical failure; last checkpoint written to %s", dumped)
            raise
        finally:
            progress.close()

        seconds = time.perf_counter() - started
        self.save()
        logger.info("Fit finished after %d epoch(s), %d step(s) in %.1f s", self.epoch,
                    self.step, seconds)
        return FitResult(scene=self.scene, history=pd.DataFrame(rows), step=self.step,
                         epoch=self.epoch, seconds=seconds)


def fit(dataset: FrameDataset, scene: SceneModel, config: RunConfig,
        checkpoint_path: str | Path | None = None, show_progress: bool = False,
        max_steps: int | None = None) -> FitResult:
    """Optimize the scene against the dataset's training frames."""
    trainer = Trainer(scene, dataset, config, checkpoint_path)
    return trainer.fit(max_steps=max_steps, show_progress=show_progress)
