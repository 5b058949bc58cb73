"""Module for estimating initial states and transform extras from object masks."""

import logging
import math
from typing import Sequence

import numpy as np

from src.app.config import InitConfig, RunConfig
from src.app.dataset import FrameDataset
from src.app.dynamics import Family
from src.app.errors import InitializationError
from src.app.renderer import PixelGrid
from src.app.scene import SceneModel

logger = logging.getLogger(__name__)

# a pivot should stay covered in at least this share of the averaged masks
PIVOT_MIN_COVERAGE = 0.5
ANGLE_SNAP = 1e-9


def wrap_axis_angle(angle: float) -> float:
    """Wrap an axis angle (defined modulo pi) into (-pi/2, pi/2]."""
    wrapped = -((-angle + math.pi / 2) % math.pi - math.pi / 2)
    if abs(wrapped + math.pi / 2) < ANGLE_SNAP:
        return math.pi / 2
    return wrapped


def _foreground(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(np.asarray(mask) >= 0.5)
    return cols.astype(np.float64), rows.astype(np.float64)


def centroid(mask: np.ndarray, grid: PixelGrid) -> np.ndarray:
    """Mean foreground pixel center in normalized coordinates."""
    cols, rows = _foreground(mask)
    if cols.size == 0:
        raise InitializationError("Cannot take the centroid of an empty mask")
    return grid.to_normalized(cols.mean(), rows.mean())


def estimate_pivot(masks: Sequence[np.ndarray], grid: PixelGrid) -> np.ndarray:
    """
    Pivot as the most frequently covered pixel of the averaged masks.

    Ties go to the first pixel in row-major order. When no pixel is covered in at
    least half of the frames the pivot is probably outside the image; the estimate is
    still returned and a warning is logged.

    Raises:
        InitializationError: Fewer than two masks or an empty mask.
    """
    if len(masks) < 2:
        raise InitializationError("Pivot estimation needs at least two masks",
                                  details=f"got {len(masks)}")
    stacked = np.stack([(np.asarray(m) >= 0.5).astype(np.float64) for m in masks])
    empty = [i for i, m in enumerate(stacked) if not m.any()]
    if empty:
        raise InitializationError("Pivot estimation got empty masks", details=f"masks {empty}")
    mean = stacked.mean(axis=0)
    flat = int(np.argmax(mean))
    row, col = divmod(flat, mean.shape[1])
    if mean.flat[flat] < PIVOT_MIN_COVERAGE:
        logger.warning("Pivot pixel (%d, %d) is covered in only %.0f%% of the masks; "
                       "the pivot is probably outside the image", col, row,
                       100 * mean.flat[flat])
    return grid.to_normalized(col, row)


def estimate_angle_pca(mask: np.ndarray) -> float:
    """
    Angle between the principal axis of the foreground pixels and the downward vertical.

    Positive angles lean the lower end toward -x; the result lies in (-pi/2, pi/2].
    """
    cols, rows = _foreground(mask)
    if cols.size < 2:
        raise InitializationError("PCA needs at least two foreground pixels",
                                  details=f"{cols.size} pixel(s)")
    covariance = np.cov(np.stack([cols, rows]))
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    if eigenvalues[-1] <= 0:
        raise InitializationError("Degenerate mask covariance", details=str(eigenvalues))
    ax, ay = eigenvectors[:, -1]
    if ay < 0 or (ay == 0 and ax > 0):
        ax, ay = -ax, -ay
    return wrap_axis_angle(math.atan2(-ax, ay))


def estimate_angular_velocity(mask0: np.ndarray, mask1: np.ndarray, dt: float) -> float:
    """Difference of the PCA angles of two frames, wrapped into (-pi/2, pi/2], over dt."""
    if dt <= 0:
        raise InitializationError("Time difference must be positive", details=str(dt))
    delta = wrap_axis_angle(estimate_angle_pca(mask1) - estimate_angle_pca(mask0))
    return delta / dt


def estimate_position_velocity(masks: Sequence[np.ndarray], times: Sequence[float],
                               grid: PixelGrid) -> tuple[np.ndarray, np.ndarray]:
    """
    Centroids of every mask and the velocity from the first two.

    Returns:
        tuple: (positions (F, 2) in normalized coordinates, velocity (2,) per second).
    """
    if len(masks) < 2 or len(times) != len(masks):
        raise InitializationError("Need at least two masks with one time each",
                                  details=f"{len(masks)} masks, {len(times)} times")
    positions = np.stack([centroid(m, grid) for m in masks])
    dt = float(times[1]) - float(times[0])
    if dt <= 0:
        raise InitializationError("Mask times must increase", details=str(list(times[:2])))
    return positions, (positions[1] - positions[0]) / dt


def _mask_frames(dataset: FrameDataset, obj: int) -> list[int]:
    available = set(dataset.mask_indices(obj))
    indices = [i for i in sorted(dataset.train_indices) if i in available]
    if len(indices) < 2:
        raise InitializationError(f"Object {obj} needs masks on at least two training frames",
                                  details=f"masked training frames: {indices}")
    return indices


def _init_pendulum(scene: SceneModel, dataset: FrameDataset) -> None:
    indices = _mask_frames(dataset, 0)
    masks = dataset.object_masks(0, indices)
    pivot = estimate_pivot(masks, dataset.grid)
    dt = float(dataset.times[indices[1]] - dataset.times[indices[0]])
    scene.set_physical("pivot_x", float(pivot[0]))
    scene.set_physical("pivot_y", float(pivot[1]))
    scene.set_physical("phi0", estimate_angle_pca(masks[0]))
    scene.set_physical("omega0", estimate_angular_velocity(masks[0], masks[1], dt))


def _init_spring(scene: SceneModel, dataset: FrameDataset) -> None:
    positions, velocities = [], []
    for obj in range(len(scene.objects)):
        if obj < dataset.n_objects and len(dataset.mask_indices(obj)) >= 2:
            indices = _mask_frames(dataset, obj)[:2]
            found, velocity = estimate_position_velocity(
                dataset.object_masks(obj, indices), dataset.times_for(indices), dataset.grid)
            positions.append(found[0])
            velocities.append(velocity)
        elif dataset.coarse_masks is not None and obj < len(dataset.coarse_masks):
            positions.append(centroid(dataset.coarse_masks[obj], dataset.grid))
            velocities.append(np.zeros(2))
        else:
            raise InitializationError(f"No masks for spring object {obj}")
    distance = float(np.linalg.norm(positions[0] - positions[1]))
    if distance <= 0:
        raise InitializationError("Spring objects share one centroid")
    for name, value in zip(scene.spec.state_names, np.concatenate(positions + velocities)):
        scene.set_physical(f"{name}0", float(value))
    scene.set_physical("l_rest", distance)


def _init_translation(scene: SceneModel, dataset: FrameDataset, alpha0: float) -> None:
    indices = _mask_frames(dataset, 0)[:2]
    positions, velocity = estimate_position_velocity(
        dataset.object_masks(0, indices), dataset.times_for(indices), dataset.grid)
    scale = scene.physical_values()["scale"]
    scene.set_physical("origin_x", float(positions[0][0]))
    scene.set_physical("origin_y", float(positions[0][1]))
    if scene.family is Family.BLOCK:
        speed = float(np.linalg.norm(velocity))
        if speed > 1e-9:
            track_angle = math.atan2(velocity[1], velocity[0])
            alpha = math.asin(max(-1.0, min(1.0, velocity[1] / speed)))
        else:
            track_angle = alpha = alpha0
        scene.set_physical("track_angle", track_angle)
        scene.set_physical("alpha", alpha)
        scene.set_physical("x0", 0.0)
        scene.set_physical("v0", speed / scale)
    else:
        scene.set_physical("x0", 0.0)
        scene.set_physical("y0", 0.0)
        scene.set_physical("vx0", float(velocity[0]) / scale)
        scene.set_physical("vy0", float(velocity[1]) / scale)


def initialize_scene(scene: SceneModel, dataset: FrameDataset,
                     config: RunConfig | None = None) -> dict[str, float]:
    """
    Write mask-based estimates of z0 and the transform extras into the scene.

    The scene's initial time becomes the first dataset timestamp. Values the masks do not
    determine keep the configured starting values.

    Returns:
        dict: The scene's physical values after initialization.
    """
    init = config.init if config is not None else InitConfig()
    scene.t0 = float(dataset.times[0])
    if not init.from_masks:
        logger.info("Mask initialization disabled; keeping the configured starting values")
        return scene.physical_values()
    if not dataset.masks and not dataset.coarse_masks:
        logger.warning("Dataset has no masks; keeping the configured starting values")
        return scene.physical_values()

    if scene.family is Family.PENDULUM:
        _init_pendulum(scene, dataset)
    elif scene.family is Family.SPRING:
        _init_spring(scene, dataset)
    else:
        _init_translation(scene, dataset, init.alpha0)

    values = scene.physical_values()
    logger.info("Initial estimates: %s",
                ", ".join(f"{k}={v:.4g}" for k, v in sorted(values.items())))
    return values
