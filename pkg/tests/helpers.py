"""Small scenes, batches and datasets shared by the unit tests."""

from pathlib import Path
from typing import Any

import numpy as np

from src.app.autodiff import Tensor
from src.app.config import RunConfig, resolve_config
from src.app.dataset import FrameDataset, load_dataset
from src.app.losses import Batch
from src.app.renderer import PixelGrid
from src.app.scene import SceneModel, build_scene
from src.app.synthgen import default_scenario, generate

TINY_FIELD = {"n_fourier": 4, "sigma": 1.0, "n_layers": 2, "width": 8}

# non-degenerate starting states per family
STATES = {
    "pendulum": {"phi0": 0.4, "omega0": -0.3},
    "spring": {"p1x0": -0.3, "p1y0": 0.05, "p2x0": 0.3, "p2y0": -0.05, "v1y0": 0.2},
    "block": {"v0": 0.5},
    "ball": {"vx0": 0.4, "vy0": -0.6},
}


def tiny_config(family: str = "pendulum", **changes: Any) -> RunConfig:
    """Config with two-layer, eight-unit fields and a short schedule."""
    raw: dict[str, Any] = {
        "family": family,
        "background": TINY_FIELD,
        "object": TINY_FIELD,
        "train": {"batch_size": 128, "epochs": 2, "substeps": 4, "frames_start": 2,
                  "frames_every": 2},
        "log_every": 1,
    }
    raw.update(changes)
    return resolve_config(raw)


def tiny_scene(family: str = "pendulum", **changes: Any) -> SceneModel:
    scene = build_scene(tiny_config(family, **changes))
    for name, value in STATES[family].items():
        scene.set_physical(name, value)
    return scene


def tiny_batch(grid: PixelGrid, times: list[float], seed: int = 0,
               with_colors: bool = True) -> Batch:
    """Every pixel of every frame, with random colors and a centered square mask."""
    rng = np.random.default_rng(seed)
    coords = np.tile(grid.coords(), (len(times), 1))
    frame_ids = np.repeat(np.arange(len(times)), grid.n_pixels)
    rows, cols = np.mgrid[0:grid.height, 0:grid.width]
    square = ((np.abs(rows - grid.height / 2 + 0.5) < grid.height / 4)
              & (np.abs(cols - grid.width / 2 + 0.5) < grid.width / 4)).astype(np.float64)
    masks = np.tile(square.reshape(-1), len(times))[:, None]
    return Batch(
        coords=Tensor(coords),
        frame_ids=frame_ids,
        times=np.asarray(times, dtype=np.float64),
        grid=grid,
        colors=Tensor(rng.random((coords.shape[0], 3))) if with_colors else None,
        masks=Tensor(masks),
        coarse_masks=[square.reshape(-1), np.roll(square, 1, axis=1).reshape(-1)],
    )


def synth_dataset(root: Path, name: str = "pendulum", seed: int = 0,
                  **overrides: Any) -> FrameDataset:
    """Generate a default scenario into `root` and load it back."""
    generate(default_scenario(name, **overrides), seed, root)
    return load_dataset(root)
