"""Module for saving and restoring scenes as safetensors checkpoints."""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from src.app.config import RunConfig, config_from_dict
from src.app.dataset import FrameDataset
from src.app.errors import CheckpointError, PhysParamError
from src.app.renderer import PixelGrid
from src.app.scene import SceneModel, build_scene

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
_REQUIRED_METADATA = ("format_version", "step", "epoch", "config", "config_hash", "family",
                      "t0", "times", "frame_interval", "width", "height")


@dataclass
class LoadedCheckpoint:
    """A restored scene with the run context it was trained in."""
    scene: SceneModel
    config: RunConfig
    times: np.ndarray
    frame_interval: float
    grid: PixelGrid
    step: int = 0
    epoch: int = 0
    config_hash: str = ""
    moments: dict[str, torch.Tensor] = field(default_factory=dict)

    def times_for(self, indices: list[int]) -> np.ndarray:
        """Timestamps of frame indices; indices past the training clip extrapolate."""
        last = self.times.size - 1
        return np.array([self.times[i] if i <= last
                         else self.times[last] + (i - last) * self.frame_interval
                         for i in indices], dtype=np.float64)


def save_checkpoint(path: str | Path, scene: SceneModel, config: RunConfig,
                    dataset: FrameDataset, step: int = 0, epoch: int = 0,
                    moments: dict[str, torch.Tensor] | None = None) -> Path:
    """Write every scene tensor, the Fourier matrices and the Adam moments atomically."""
    path = Path(path)
    tensors = {name: t.data.detach().clone().contiguous()
               for name, t in scene.named_parameters().items()}
    tensors.update({name: m.detach().clone().contiguous()
                    for name, m in scene.fourier_matrices().items()})
    tensors.update({name: m.detach().clone().contiguous() for name, m in (moments or {}).items()})
    metadata = {
        "format_version": FORMAT_VERSION,
        "step": str(step),
        "epoch": str(epoch),
        "config": config.to_json(),
        "config_hash": config.config_hash(),
        "family": scene.family.value,
        "t0": repr(float(scene.t0)),
        "times": json.dumps([float(t) for t in dataset.times]),
        "frame_interval": repr(dataset.frame_interval),
        "width": str(dataset.grid.width),
        "height": str(dataset.grid.height),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}", details=str(e)) from e
    try:
        save_file(tensors, tmp, metadata=metadata)
        os.replace(tmp, path)
    except (OSError, SafetensorError) as e:
        Path(tmp).unlink(missing_ok=True)
        raise CheckpointError(f"Cannot write checkpoint {path}", details=str(e)) from e
    logger.info("Checkpoint written to %s (step %d, epoch %d)", path, step, epoch)
    return path


def _read(path: Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}", details=str(path))
    try:
        with safe_open(str(path), framework="pt") as handle:
            metadata = handle.metadata() or {}
        tensors = load_file(str(path))
    except (OSError, SafetensorError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}", details=str(e)) from e
    missing = [key for key in _REQUIRED_METADATA if key not in metadata]
    if missing:
        raise CheckpointError("Checkpoint metadata is incomplete", details=", ".join(missing))
    if metadata["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {metadata['format_version']}",
                              details=f"expected {FORMAT_VERSION}")
    return tensors, metadata


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """Rebuild the scene from the stored config and overwrite every tensor with saved values."""
    path = Path(path)
    tensors, metadata = _read(path)
    try:
        config = config_from_dict(json.loads(metadata["config"]))
        scene = build_scene(config)
    except (json.JSONDecodeError, PhysParamError) as e:
        raise CheckpointError("Checkpoint holds an invalid config", details=str(e)) from e

    with torch.no_grad():
        for name, tensor in scene.named_parameters().items():
            stored = tensors.get(name)
            if stored is None:
                raise CheckpointError(f"Checkpoint is missing tensor '{name}'", details=str(path))
            if tuple(stored.shape) != tensor.shape:
                raise CheckpointError(f"Tensor '{name}' has shape {tuple(stored.shape)}, "
                                      f"expected {tensor.shape}", details=str(path))
            tensor.data.copy_(stored)
    fields = list(scene.objects) + ([scene.background] if scene.background is not None else [])
    for field_ in fields:
        key = f"fourier.{field_.net.name}"
        if key not in tensors:
            raise CheckpointError(f"Checkpoint is missing tensor '{key}'", details=str(path))
        field_.mapping.set_matrix(tensors[key])
    scene.t0 = float(metadata["t0"])

    loaded = LoadedCheckpoint(
        scene=scene,
        config=config,
        times=np.asarray(json.loads(metadata["times"]), dtype=np.float64),
        frame_interval=float(metadata["frame_interval"]),
        grid=PixelGrid(int(metadata["width"]), int(metadata["height"])),
        step=int(metadata["step"]),
        epoch=int(metadata["epoch"]),
        config_hash=metadata["config_hash"],
        moments={k: v for k, v in tensors.items() if k.startswith("adam.")},
    )
    logger.info("Loaded %s checkpoint %s (step %d)", metadata["family"], path, loaded.step)
    return loaded
