"""Module for generating synthetic videos with known physical parameters."""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import torch.nn.functional as F

from src.app.autodiff import DTYPE, Tensor, no_grad
from src.app.dataset import write_dataset
from src.app.dynamics import DYNAMICS, GRAVITY, RHS, Family, OdeParams, integrate
from src.app.errors import ConfigurationError, HomographyError, ScenarioError
from src.app.geometry import Homography, TransformExtras, object_transform
from src.app.renderer import PixelGrid

logger = logging.getLogger(__name__)

SPRITE_DENSITY = 4
COARSE_MARGIN = 2

REQUIRED_VALUES: dict[Family, tuple[str, ...]] = {
    Family.PENDULUM: ("l", "c", "phi0", "omega0", "pivot_x", "pivot_y"),
    Family.SPRING: ("k", "l_rest", "p1x0", "p1y0", "p2x0", "p2y0", "v1x0", "v1y0", "v2x0", "v2y0"),
    Family.BLOCK: ("alpha", "mu", "x0", "v0", "origin_x", "origin_y", "track_angle", "scale"),
    Family.BALL: ("x0", "y0", "vx0", "vy0", "origin_x", "origin_y", "scale"),
}
BACKGROUNDS = ("noise", "checker", "flat")


@dataclass
class Scenario:
    """
    A synthetic clip: family, true physical values, textures, resolution and split.

    `values` uses the same names as SceneModel.physical_values(). A non-None
    `homography` warps the whole scene through that fixed 3x3 matrix.
    """
    family: str
    values: dict[str, float]
    width: int = 64
    height: int = 64
    fps: float = 30.0
    n_frames: int = 41
    train: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    background: str = "noise"
    rgb: bool = True
    sprite_scale: float = 1.0
    homography: list[list[float]] | None = None
    substeps: int = 50
    gravity: float = GRAVITY

    def __post_init__(self) -> None:
        family = Family.parse(self.family)
        missing = [k for k in REQUIRED_VALUES[family] if k not in self.values]
        if missing:
            raise ScenarioError(f"Scenario lacks values for {family.value}",
                                details=", ".join(missing))
        if self.width < 2 or self.height < 2 or self.n_frames < 1 or self.fps <= 0:
            raise ScenarioError("Scenario needs at least a 2x2 grid, one frame and fps > 0")
        if self.sprite_scale <= 0:
            raise ScenarioError("Sprite has zero size", details=f"sprite_scale={self.sprite_scale}")
        if self.background not in BACKGROUNDS:
            raise ScenarioError(f"Unknown background '{self.background}'",
                                details=", ".join(BACKGROUNDS))
        if set(self.train) & set(self.test):
            raise ScenarioError("Train and test frames overlap",
                                details=str(sorted(set(self.train) & set(self.test))))
        if any(i < 0 or i >= self.n_frames for i in self.train + self.test):
            raise ScenarioError("Split index out of range", details=f"{self.n_frames} frames")

    @property
    def dynamics_family(self) -> Family:
        return Family.parse(self.family)

    @property
    def grid(self) -> PixelGrid:
        return PixelGrid(self.width, self.height)

    def times(self) -> np.ndarray:
        return np.arange(self.n_frames, dtype=np.float64) / self.fps


def _split(train: range | list[int], n_frames: int) -> dict[str, list[int]]:
    train = list(train)
    return {"train": train, "test": [i for i in range(n_frames) if i not in train]}


_DEFAULTS: dict[str, dict[str, Any]] = {
    "pendulum": {
        "family": "pendulum",
        "values": {"l": 0.8, "c": 0.3, "phi0": 0.6, "omega0": 0.0,
                   "pivot_x": 0.0, "pivot_y": -0.6},
        "n_frames": 41, "fps": 30.0, **_split(range(0, 30, 2), 41),
    },
    "pendulum-mask": {
        "family": "pendulum",
        "values": {"l": 0.8, "c": 0.25, "phi0": 0.7, "omega0": 0.0,
                   "pivot_x": 0.0, "pivot_y": -0.6},
        "n_frames": 20, "fps": 15.0, "rgb": False, **_split(range(10), 20),
    },
    "spring": {
        "family": "spring",
        "values": {"k": 4.0, "l_rest": 0.25, "p1x0": -0.35, "p1y0": 0.0, "p2x0": 0.35,
                   "p2y0": 0.05, "v1x0": 0.0, "v1y0": 0.1, "v2x0": 0.0, "v2y0": -0.1},
        "n_frames": 25, "fps": 10.0, **_split(range(13), 25),
    },
    "block": {
        "family": "block",
        "values": {"alpha": 0.35, "mu": 0.2, "x0": 0.0, "v0": 0.3, "origin_x": -0.6,
                   "origin_y": -0.4, "track_angle": 0.35, "scale": 0.3},
        "n_frames": 31, "fps": 30.0, **_split(range(20), 31),
    },
    "ball": {
        "family": "ball",
        "values": {"x0": 0.0, "y0": 0.0, "vx0": 2.0, "vy0": -2.0, "origin_x": -0.5,
                   "origin_y": -0.3, "scale": 0.2},
        "n_frames": 25, "fps": 30.0, **_split(range(16), 25),
    },
}

ABLATION_HOMOGRAPHY = [[1.0, 0.05, 0.0], [0.0, 1.0, 0.0], [0.06, 0.05, 1.0]]


def default_scenario(name: str, **overrides: Any) -> Scenario:
    """
    Named default clip: pendulum, pendulum-mask, spring, block or ball.

    `values` overrides are merged into the defaults; every other keyword replaces the
    scenario field.
    """
    if name not in _DEFAULTS:
        raise ConfigurationError(f"Unknown scenario '{name}'", details=", ".join(sorted(_DEFAULTS)))
    base = dict(_DEFAULTS[name])
    values = {**base.pop("values"), **overrides.pop("values", {})}
    return Scenario(values=values, **{**base, **overrides})


@dataclass
class Sprite:
    """Texture and silhouette rasters covering `extent` = (x0, y0, x1, y1) in local units."""
    texture: np.ndarray
    silhouette: np.ndarray
    extent: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.extent
        if x1 <= x0 or y1 <= y0 or not self.silhouette.any():
            raise ScenarioError("Sprite has zero size", details=str(self.extent))


def value_noise(rng: np.random.Generator, height: int, width: int, cells: int) -> np.ndarray:
    """Smooth noise in [0, 1]: a random lattice upsampled bilinearly."""
    lattice = torch.as_tensor(rng.random((1, 1, cells + 1, cells + 1)), dtype=DTYPE)
    smooth = F.interpolate(lattice, size=(height, width), mode="bilinear", align_corners=True)
    return smooth[0, 0].numpy()


def background_texture(kind: str, grid: PixelGrid, rng: np.random.Generator) -> np.ndarray:
    if kind == "flat":
        return np.full((grid.height, grid.width, 3), 0.5)
    if kind == "checker":
        rows, cols = np.mgrid[0:grid.height, 0:grid.width]
        light = ((rows // 8 + cols // 8) % 2).astype(np.float64)[..., None]
        dark_color, light_color = rng.uniform(0.15, 0.4, 3), rng.uniform(0.6, 0.85, 3)
        return dark_color + light * (light_color - dark_color)
    channels = [0.65 * value_noise(rng, grid.height, grid.width, 6)
                + 0.35 * value_noise(rng, grid.height, grid.width, 16) for _ in range(3)]
    return 0.2 + 0.6 * np.stack(channels, axis=-1)


def _raster(extent: tuple[float, float, float, float], step: float) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = extent
    nx, ny = max(1, round((x1 - x0) / step)), max(1, round((y1 - y0) / step))
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    return np.meshgrid(xs, ys)


def make_sprite(inside: Callable[[np.ndarray, np.ndarray], np.ndarray],
                extent: tuple[float, float, float, float], color: Callable[[np.ndarray, np.ndarray], np.ndarray],
                step: float, rng: np.random.Generator) -> Sprite:
    lx, ly = _raster(extent, step)
    noise = value_noise(rng, *lx.shape, cells=4)[..., None]
    texture = np.clip(color(lx, ly) + 0.3 * (noise - 0.5), 0.0, 1.0)
    return Sprite(texture=texture, silhouette=inside(lx, ly).astype(np.float64), extent=extent)


def _pendulum_sprites(size: float, step: float, rng: np.random.Generator) -> list[Sprite]:
    rod, half_width, bob, hub = 0.9 * size, 0.03 * size, 0.12 * size, 0.06 * size

    def inside(lx, ly):
        on_rod = (np.abs(lx) <= half_width) & (ly >= 0) & (ly <= rod)
        on_bob = lx ** 2 + (ly - rod) ** 2 <= bob ** 2
        on_hub = lx ** 2 + ly ** 2 <= hub ** 2
        return on_rod | on_bob | on_hub

    def color(lx, ly):
        bob_part = (lx ** 2 + (ly - rod) ** 2 <= bob ** 2)[..., None]
        return np.where(bob_part, [0.85, 0.25, 0.2], [0.95, 0.85, 0.2])

    margin = 2 * step
    extent = (-bob - margin, -hub - margin, bob + margin, rod + bob + margin)
    return [make_sprite(inside, extent, color, step, rng)]


def _spring_sprites(size: float, step: float, rng: np.random.Generator) -> list[Sprite]:
    a0, b0 = 0.13 * size, 0.17 * size
    a1, b1 = 0.07 * size, 0.17 * size

    def ring(lx, ly):
        outer = (lx / a0) ** 2 + (ly / b0) ** 2 <= 1.0
        inner = (lx / (0.5 * a0)) ** 2 + (ly / (0.55 * b0)) ** 2 <= 1.0
        return outer & ~inner

    def bar(lx, ly):
        return (lx / a1) ** 2 + (ly / b1) ** 2 <= 1.0

    margin = 2 * step
    return [
        make_sprite(ring, (-a0 - margin, -b0 - margin, a0 + margin, b0 + margin),
                    lambda lx, ly: np.broadcast_to([0.9, 0.3, 0.2], lx.shape + (3,)), step, rng),
        make_sprite(bar, (-a1 - margin, -b1 - margin, a1 + margin, b1 + margin),
                    lambda lx, ly: np.broadcast_to([0.2, 0.4, 0.95], lx.shape + (3,)), step, rng),
    ]


def _block_sprites(size: float, step: float, rng: np.random.Generator) -> list[Sprite]:
    a, b = 0.12 * size, 0.07 * size
    margin = 2 * step
    return [make_sprite(lambda lx, ly: (np.abs(lx) <= a) & (np.abs(ly) <= b),
                        (-a - margin, -b - margin, a + margin, b + margin),
                        lambda lx, ly: np.broadcast_to([0.3, 0.8, 0.3], lx.shape + (3,)), step, rng)]


def _ball_sprites(size: float, step: float, rng: np.random.Generator) -> list[Sprite]:
    r = 0.1 * size
    margin = 2 * step
    return [make_sprite(lambda lx, ly: lx ** 2 + ly ** 2 <= r ** 2,
                        (-r - margin, -r - margin, r + margin, r + margin),
                        lambda lx, ly: np.broadcast_to([0.95, 0.55, 0.1], lx.shape + (3,)), step, rng)]


SPRITES = {
    Family.PENDULUM: _pendulum_sprites,
    Family.SPRING: _spring_sprites,
    Family.BLOCK: _block_sprites,
    Family.BALL: _ball_sprites,
}


def rasterize_sprite(sprite: Sprite, transform: Callable[[np.ndarray], np.ndarray],
                     grid: PixelGrid) -> tuple[np.ndarray, np.ndarray]:
    """
    Sample a sprite at every pixel through a global-to-local transform.

    Returns:
        tuple: (rgb (H, W, 3), mask (H, W)) where the mask is the bilinearly sampled
        silhouette coverage thresholded at 0.5.
    """
    try:
        local = transform(grid.coords())
    except HomographyError as e:
        raise ScenarioError("Sprite transform is not invertible on the image", details=e.message) from e
    if not np.isfinite(local).all():
        raise ScenarioError("Sprite transform produced non-finite coordinates")
    x0, y0, x1, y1 = sprite.extent
    sample_grid = np.stack([2.0 * (local[:, 0] - x0) / (x1 - x0) - 1.0,
                            2.0 * (local[:, 1] - y0) / (y1 - y0) - 1.0], axis=-1)
    image = np.concatenate([sprite.texture, sprite.silhouette[..., None]], axis=-1)
    sampled = F.grid_sample(
        torch.as_tensor(image, dtype=DTYPE).permute(2, 0, 1)[None],
        torch.as_tensor(sample_grid, dtype=DTYPE).reshape(1, grid.height, grid.width, 2),
        mode="bilinear", padding_mode="zeros", align_corners=False,
    )[0].permute(1, 2, 0).numpy()
    mask = (sampled[..., 3] >= 0.5).astype(np.float64)
    return sampled[..., :3], mask


def _truth_extras(family: Family, values: dict[str, float]) -> TransformExtras:
    extras = TransformExtras.create(
        family,
        pivot=(values.get("pivot_x", 0.0), values.get("pivot_y", 0.0)),
        origin=(values.get("origin_x", 0.0), values.get("origin_y", 0.0)),
        track_angle=values.get("track_angle", 0.0),
        scale=values.get("scale", 0.1),
        n_objects=DYNAMICS[family].n_objects,
    )
    return extras


def simulate(scenario: Scenario) -> list[np.ndarray]:
    """True ODE states at every frame time."""
    family = scenario.dynamics_family
    spec = DYNAMICS[family]
    values = scenario.values
    params = OdeParams(family, {name: Tensor([values[name]]) for name in spec.param_names},
                       gravity=scenario.gravity)
    z0 = Tensor([values[f"{name}0"] for name in spec.state_names])
    with no_grad():
        trajectory = integrate(RHS[family], z0, params, scenario.times(), scenario.substeps)
    return [state.numpy() for state in trajectory.states]


def _coarse(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    coarse = np.zeros_like(mask)
    if rows.size:
        coarse[max(0, rows.min() - COARSE_MARGIN):rows.max() + COARSE_MARGIN + 1,
               max(0, cols.min() - COARSE_MARGIN):cols.max() + COARSE_MARGIN + 1] = 1.0
    return coarse


def render_scenario(scenario: Scenario, seed: int) -> tuple[list[np.ndarray], list[list[np.ndarray]]]:
    """Frames (H, W, 3) and per-object masks for every frame of the scenario."""
    family = scenario.dynamics_family
    grid = scenario.grid
    rng = np.random.default_rng(seed)
    background = background_texture(scenario.background, grid, rng)
    sprites = SPRITES[family](scenario.sprite_scale, grid.scale / SPRITE_DENSITY, rng)
    extras = _truth_extras(family, scenario.values)
    homography = Homography(None if scenario.homography is None else np.asarray(scenario.homography),
                            learnable=False)

    frames: list[np.ndarray] = []
    masks: list[list[np.ndarray]] = [[] for _ in sprites]
    for state in simulate(scenario):
        frame = background.copy()
        # object 0 is drawn last and ends up on top
        for index in reversed(range(len(sprites))):
            def transform(points: np.ndarray, k: int = index) -> np.ndarray:
                with no_grad():
                    return object_transform(family, Tensor(state), extras, homography,
                                            Tensor(points), k).numpy()
            rgb, mask = rasterize_sprite(sprites[index], transform, grid)
            frame = np.where(mask[..., None] > 0, rgb, frame)
            masks[index].append(mask)
        frames.append(frame)
    return frames, masks


def truth_payload(scenario: Scenario, seed: int) -> dict[str, Any]:
    matrix = np.eye(3) if scenario.homography is None else np.asarray(scenario.homography)
    return {
        "family": scenario.dynamics_family.value,
        "values": dict(scenario.values),
        "homography": matrix.tolist(),
        "split": {"train": list(scenario.train), "test": list(scenario.test)},
        "width": scenario.width,
        "height": scenario.height,
        "fps": scenario.fps,
        "gravity": scenario.gravity,
        "seed": seed,
        "scenario": asdict(scenario),
    }


def generate(scenario: Scenario, seed: int, out_dir: str | Path) -> Path:
    """
    Simulate, rasterize and write a dataset directory.

    Writes frames (unless the scenario is mask-only), per-object masks, coarse first-frame
    masks for spring scenes, times.txt and truth.json with the split.
    """
    frames, masks = render_scenario(scenario, seed)
    coarse = [_coarse(m[0]) for m in masks] if scenario.dynamics_family is Family.SPRING else None
    root = write_dataset(out_dir, scenario.times(), frames if scenario.rgb else None, masks,
                         truth=truth_payload(scenario, seed), coarse=coarse)
    logger.info("Generated %s scenario (%d frames, seed %d) in %s", scenario.family,
                scenario.n_frames, seed, root)
    return root


def scenario_from_truth(truth: dict[str, Any]) -> Scenario:
    """Rebuild the scenario stored in a truth file."""
    if "scenario" not in truth:
        raise ScenarioError("Truth file carries no scenario")
    try:
        return Scenario(**truth["scenario"])
    except TypeError as e:
        raise ScenarioError("Truth file carries a malformed scenario", details=str(e)) from e


def with_homography(scenario: Scenario, matrix: list[list[float]] | None = None) -> Scenario:
    return replace(scenario, homography=matrix or ABLATION_HOMOGRAPHY)
