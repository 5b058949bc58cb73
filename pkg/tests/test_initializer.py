"""Unit tests for mask-based initial estimates."""

import math
from pathlib import Path

import numpy as np
import pytest

from src.app.errors import InitializationError
from src.app.initializer import (
    centroid,
    estimate_angle_pca,
    estimate_angular_velocity,
    estimate_pivot,
    estimate_position_velocity,
    initialize_scene,
    wrap_axis_angle,
)
from src.app.renderer import PixelGrid
from src.app.scene import build_scene
from tests.helpers import synth_dataset, tiny_config

GRID = PixelGrid(64, 64)


def _rod(angle: float, pivot: tuple[int, int] = (32, 10), length: int = 40) -> np.ndarray:
    """Thin rod mask from a pivot pixel (col, row), swung by `angle` toward -x."""
    mask = np.zeros((GRID.height, GRID.width))
    for t in np.linspace(0, length, 4 * length):
        col = round(pivot[0] - t * math.sin(angle))
        row = round(pivot[1] + t * math.cos(angle))
        mask[row, col] = 1.0
    return mask


@pytest.mark.parametrize("angle,expected", [
    (math.pi, 0.0),
    (math.pi / 2, math.pi / 2),
    (-math.pi / 2, math.pi / 2),
    (3.0, 3.0 - math.pi),
    (0.4, 0.4),
])
def test_wrap_axis_angle(angle: float, expected: float) -> None:
    """Axis angles wrap into (-pi/2, pi/2]."""
    assert wrap_axis_angle(angle) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("angle", [0.0, 0.5, -0.7])
def test_pca_angle_of_a_rod(angle: float) -> None:
    """The principal axis of a rod mask recovers its swing angle."""
    assert estimate_angle_pca(_rod(angle)) == pytest.approx(angle, abs=0.03)


def test_pca_needs_two_pixels() -> None:
    """A single pixel has no axis."""
    mask = np.zeros((4, 4))
    mask[1, 1] = 1.0
    with pytest.raises(InitializationError):
        estimate_angle_pca(mask)


def test_angular_velocity_from_two_masks() -> None:
    """The wrapped angle difference over dt."""
    omega = estimate_angular_velocity(_rod(0.2), _rod(0.3), dt=1.0)
    assert omega == pytest.approx(0.1, abs=0.06)
    with pytest.raises(InitializationError):
        estimate_angular_velocity(_rod(0.2), _rod(0.3), dt=0.0)


def test_pivot_is_the_shared_pixel() -> None:
    """Rods swinging about one pixel locate it."""
    pivot = estimate_pivot([_rod(a) for a in (-0.5, 0.0, 0.5)], GRID)
    assert np.allclose(pivot, GRID.to_normalized(32, 10))


def test_disjoint_single_pixels_use_row_major_tie_rule(caplog: pytest.LogCaptureFixture) -> None:
    """Disjoint masks tie; the first pixel in row-major order wins and a warning is logged."""
    grid = PixelGrid(4, 4)
    masks = []
    for row, col in ((2, 1), (0, 3), (3, 0)):
        mask = np.zeros((4, 4))
        mask[row, col] = 1.0
        masks.append(mask)
    with caplog.at_level("WARNING", logger="src.app.initializer"):
        pivot = estimate_pivot(masks, grid)
    assert np.allclose(pivot, grid.to_normalized(3, 0))
    assert "outside the image" in caplog.text


def test_shared_pivot_logs_no_warning(caplog: pytest.LogCaptureFixture) -> None:
    """A pixel covered in every frame is a confident estimate."""
    with caplog.at_level("WARNING", logger="src.app.initializer"):
        estimate_pivot([_rod(a) for a in (-0.5, 0.0, 0.5)], GRID)
    assert caplog.text == ""


def test_pivot_input_validation() -> None:
    """One mask or an empty mask is not enough."""
    with pytest.raises(InitializationError):
        estimate_pivot([_rod(0.0)], GRID)
    with pytest.raises(InitializationError):
        estimate_pivot([_rod(0.0), np.zeros((64, 64))], GRID)


def test_position_and_velocity_from_centroids() -> None:
    """Centroids move by the displacement of the masks."""
    a = np.zeros((64, 64))
    a[20:24, 10:14] = 1.0
    b = np.roll(a, 4, axis=1)
    positions, velocity = estimate_position_velocity([a, b], [0.0, 0.5], GRID)
    assert np.allclose(positions[0], GRID.to_normalized(11.5, 21.5))
    assert np.allclose(velocity, [4 * GRID.scale / 0.5, 0.0])
    with pytest.raises(InitializationError):
        centroid(np.zeros((4, 4)), GRID)
    with pytest.raises(InitializationError):
        estimate_position_velocity([a, b], [0.5, 0.5], GRID)


@pytest.mark.parametrize("dx,dy", [(5, -3), (-7, 4)])
def test_estimates_are_translation_equivariant(dx: int, dy: int) -> None:
    """Shifting every mask moves pivot and centroids by the same offset and keeps angles."""
    masks = [_rod(a) for a in (-0.5, 0.1, 0.5)]
    shifted = [np.roll(m, (dy, dx), axis=(0, 1)) for m in masks]
    offset = np.array([dx, dy]) * GRID.scale

    assert np.allclose(estimate_pivot(shifted, GRID), estimate_pivot(masks, GRID) + offset)
    positions, velocity = estimate_position_velocity(masks, [0.0, 0.1, 0.2], GRID)
    moved, moved_velocity = estimate_position_velocity(shifted, [0.0, 0.1, 0.2], GRID)
    assert np.allclose(moved, positions + offset)
    assert np.allclose(moved_velocity, velocity)
    for original, moved_mask in zip(masks, shifted):
        assert estimate_angle_pca(moved_mask) == pytest.approx(estimate_angle_pca(original), abs=1e-12)
    assert estimate_angular_velocity(shifted[0], shifted[1], 0.1) == pytest.approx(
        estimate_angular_velocity(masks[0], masks[1], 0.1), abs=1e-9)


def test_initialize_pendulum_from_synthetic_masks(tmp_path: Path) -> None:
    """Pivot and starting angle land near the generating values."""
    dataset = synth_dataset(tmp_path, "pendulum")
    config = tiny_config("pendulum")
    scene = build_scene(config)
    values = initialize_scene(scene, dataset, config)
    assert values["pivot_x"] == pytest.approx(0.0, abs=0.1)
    assert values["pivot_y"] == pytest.approx(-0.6, abs=0.1)
    assert values["phi0"] == pytest.approx(0.6, abs=0.05)
    assert math.isfinite(values["omega0"])
    assert scene.t0 == 0.0


def test_initialize_spring_from_synthetic_masks(tmp_path: Path) -> None:
    """Object centroids give the positions and the rest length."""
    dataset = synth_dataset(tmp_path, "spring")
    config = tiny_config("spring")
    values = initialize_scene(build_scene(config), dataset, config)
    assert values["p1x0"] == pytest.approx(-0.35, abs=0.05)
    assert values["p2x0"] == pytest.approx(0.35, abs=0.05)
    distance = math.hypot(values["p1x0"] - values["p2x0"], values["p1y0"] - values["p2y0"])
    assert values["l_rest"] == pytest.approx(distance)


def test_initialize_ball_origin(tmp_path: Path) -> None:
    """The first centroid becomes the origin; the state starts at zero."""
    dataset = synth_dataset(tmp_path, "ball")
    config = tiny_config("ball")
    values = initialize_scene(build_scene(config), dataset, config)
    assert values["origin_x"] == pytest.approx(-0.5, abs=0.03)
    assert values["origin_y"] == pytest.approx(-0.3, abs=0.03)
    assert values["x0"] == 0.0 and values["y0"] == 0.0
    assert math.isfinite(values["vx0"]) and math.isfinite(values["vy0"])


def test_initialization_can_be_disabled(tmp_path: Path) -> None:
    """from_masks=false keeps the configured values."""
    dataset = synth_dataset(tmp_path, "pendulum")
    config = tiny_config("pendulum", init={"from_masks": False})
    scene = build_scene(config)
    before = scene.physical_values()
    assert initialize_scene(scene, dataset, config) == before
