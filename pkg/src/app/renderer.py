"""Module for differentiable compositing of background and object fields on a pixel grid."""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.app.autodiff import Tensor, maximum, no_grad, ones
from src.app.dynamics import Trajectory
from src.app.geometry import object_transform
from src.app.scene import SceneModel

logger = logging.getLogger(__name__)

RENDER_CHUNK = 16384


@dataclass(frozen=True)
class PixelGrid:
    """Regular pixel grid; the longer side spans [-1, 1] in normalized coordinates."""
    width: int
    height: int

    @property
    def scale(self) -> float:
        """Normalized units per pixel."""
        return 2.0 / max(self.width, self.height)

    @property
    def diagonal(self) -> float:
        return self.scale * float(np.hypot(self.width, self.height))

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def to_normalized(self, px: np.ndarray | float, py: np.ndarray | float) -> np.ndarray:
        """Pixel indices (column, row) to normalized coordinates of the pixel centers."""
        x = (np.asarray(px, dtype=np.float64) + 0.5 - self.width / 2.0) * self.scale
        y = (np.asarray(py, dtype=np.float64) + 0.5 - self.height / 2.0) * self.scale
        return np.stack([x, y], axis=-1)

    def to_pixel(self, x: np.ndarray | float, y: np.ndarray | float) -> np.ndarray:
        px = np.asarray(x, dtype=np.float64) / self.scale + self.width / 2.0 - 0.5
        py = np.asarray(y, dtype=np.float64) / self.scale + self.height / 2.0 - 0.5
        return np.stack([px, py], axis=-1)

    def coords(self) -> np.ndarray:
        """Normalized centers of all pixels in row-major order, shape (H*W, 2)."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return self.to_normalized(cols.reshape(-1), rows.reshape(-1))


@dataclass
class RenderOutput:
    """Per-point render result, differentiable when produced under a tape."""
    rgb: Tensor
    opacity: Tensor
    object_opacities: list[Tensor]
    winner: np.ndarray


@dataclass
class RenderedFrame:
    rgb: np.ndarray
    occupancy: np.ndarray
    object_occupancy: list[np.ndarray] = field(default_factory=list)


def layered_opacity(opacities: Sequence[Tensor]) -> tuple[Tensor, np.ndarray]:
    """
    Combine per-object opacities by their maximum.

    Returns:
        tuple: (combined opacity, index of the winning object per point); ties go to the
        lowest object index and the gradient flows only through the winner.
    """
    combined = opacities[0]
    for opacity in opacities[1:]:
        combined = maximum(combined, opacity)
    if len(opacities) == 1:
        return combined, np.zeros(combined.size, dtype=np.int64)
    stacked = np.stack([o.numpy().reshape(-1) for o in opacities])
    return combined, np.argmax(stacked, axis=0)


def _select(colors: list[Tensor], winner: np.ndarray) -> Tensor:
    if len(colors) == 1:
        return colors[0]
    selected = None
    for index, color in enumerate(colors):
        pick = Tensor(np.repeat((winner == index)[:, None], color.shape[-1], axis=1)
                      .astype(np.float64).reshape(color.shape))
        term = pick * color
        selected = term if selected is None else selected + term
    return selected


def render_points(scene: SceneModel, coords: Tensor, states: Tensor) -> RenderOutput:
    """
    Blend c = (1 - o) c_bg + o c_obj at global points.

    Args:
        scene: Scene to render.
        coords: Normalized global points (N, 2).
        states: One ODE state (n,) for all points or one per point (N, n).
    """
    colors, opacities = [], []
    for index, obj in enumerate(scene.objects):
        local = object_transform(scene.family, states, scene.extras, scene.homography,
                                 coords, index)
        color, opacity = obj(local)
        colors.append(color)
        opacities.append(opacity)

    combined, winner = layered_opacity(opacities)
    object_color = _select(colors, winner)
    if scene.background is not None:
        background = scene.background(coords)
    else:
        background = Tensor(np.zeros((coords.shape[0], 3)))
    alpha = combined @ ones(1, 3)
    rgb = (1.0 - alpha) * background + alpha * object_color
    return RenderOutput(rgb=rgb, opacity=combined, object_opacities=opacities, winner=winner)


def gather_states(trajectory: Trajectory, frame_ids: np.ndarray) -> Tensor:
    """Per-point states (N, n) selected from the trajectory by a one-hot product."""
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    selector = np.zeros((frame_ids.size, len(trajectory)))
    selector[np.arange(frame_ids.size), frame_ids] = 1.0
    return Tensor(selector) @ trajectory.stacked()


def render_samples(scene: SceneModel, coords: Tensor, frame_ids: np.ndarray,
                   trajectory: Trajectory) -> RenderOutput:
    """Render a batch of points drawn from several frames of one trajectory."""
    return render_points(scene, coords, gather_states(trajectory, frame_ids))


def render_pixel(x: Sequence[float], t: float, scene: SceneModel) -> Tensor:
    """Color (3,) of one global point at time t."""
    state = scene.trajectory([t]).states[0]
    out = render_points(scene, Tensor(np.asarray(x, dtype=np.float64).reshape(1, 2)), state)
    return out.rgb[0]


def _render_state(scene: SceneModel, grid: PixelGrid, state: Tensor) -> RenderedFrame:
    coords = grid.coords()
    rgb = np.empty((grid.n_pixels, 3))
    occupancy = np.empty(grid.n_pixels)
    per_object = [np.empty(grid.n_pixels) for _ in scene.objects]
    for start in range(0, grid.n_pixels, RENDER_CHUNK):
        stop = min(start + RENDER_CHUNK, grid.n_pixels)
        out = render_points(scene, Tensor(coords[start:stop]), state)
        rgb[start:stop] = out.rgb.numpy()
        occupancy[start:stop] = out.opacity.numpy().reshape(-1)
        for target, opacity in zip(per_object, out.object_opacities):
            target[start:stop] = opacity.numpy().reshape(-1)
    shape = (grid.height, grid.width)
    return RenderedFrame(rgb=rgb.reshape(*shape, 3), occupancy=occupancy.reshape(shape),
                         object_occupancy=[o.reshape(shape) for o in per_object])


def render_frames(times: Sequence[float], grid: PixelGrid, scene: SceneModel) -> list[RenderedFrame]:
    """Render full frames (no gradient recording) at sorted times."""
    with no_grad():
        trajectory = scene.trajectory(times)
        frames = [_render_state(scene, grid, state) for state in trajectory.states]
    logger.debug("Rendered %d frames at %dx%d", len(frames), grid.width, grid.height)
    return frames


def render_frame(t: float, grid: PixelGrid, scene: SceneModel) -> RenderedFrame:
    return render_frames([t], grid, scene)[0]
