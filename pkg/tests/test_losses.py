"""Unit tests for the loss terms, their schedules and the gradients of the full objective."""

import math

import numpy as np
import pytest
import torch

from src.app.autodiff import Tape, Tensor, backward, no_grad
from src.app.errors import ConfigurationError, DatasetError, ShapeMismatchError
from src.app.losses import (
    LossWeights,
    band_coords,
    mask_bce,
    occupancy_regularizer,
    photometric_mse,
    spring_auxiliaries,
    total_loss,
)
from src.app.renderer import PixelGrid
from tests.helpers import tiny_batch, tiny_scene

SPRING_WEIGHTS = LossWeights(reg=1e-3, seg=0.01, attach=0.05, outside=1.0)


def test_photometric_zero_at_perfect_fit() -> None:
    """Identical colors give zero loss."""
    colors = Tensor(np.random.default_rng(0).random((10, 3)))
    assert photometric_mse(colors, colors).item() == 0.0
    assert photometric_mse(Tensor(np.zeros((2, 3))), Tensor(np.full((2, 3), 0.5))).item() == 0.25


def test_photometric_shape_mismatch() -> None:
    """Rendered and target pixel counts must agree."""
    with pytest.raises(ShapeMismatchError):
        photometric_mse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


def test_regularizer_identities() -> None:
    """o (1 - o) peaks at 0.25 and vanishes at 0 and 1."""
    assert occupancy_regularizer(Tensor([[0.5], [0.5]])).item() == pytest.approx(0.25)
    assert occupancy_regularizer(Tensor([[0.0], [1.0]])).item() == 0.0
    samples = Tensor(np.random.default_rng(1).random((100, 1)))
    assert occupancy_regularizer(samples).item() <= 0.25


def test_bce_identities() -> None:
    """BCE is ln 2 at o = 0.5 and near zero for confident correct predictions."""
    assert mask_bce(Tensor([[0.5], [0.5]]), np.array([[0.0], [1.0]])).item() == pytest.approx(math.log(2))
    assert mask_bce(Tensor([[0.0], [1.0]]), np.array([[0.0], [1.0]])).item() < 1e-6


def test_bce_binarizes_and_validates_targets() -> None:
    """Targets are thresholded at 0.5 and must lie in [0, 1]."""
    soft = mask_bce(Tensor([[0.9]]), np.array([[0.7]])).item()
    hard = mask_bce(Tensor([[0.9]]), np.array([[1.0]])).item()
    assert soft == pytest.approx(hard)
    with pytest.raises(DatasetError):
        mask_bce(Tensor([[0.5]]), np.array([[1.5]]))


def test_loss_weight_schedules() -> None:
    """The regularizer switches on late; the coarse-mask weight decays stepwise."""
    weights = LossWeights(reg=1e-3, reg_start_epoch=400, seg=0.01, seg_decay=0.2, seg_interval=100)
    assert weights.reg_weight(399) == 0.0
    assert weights.reg_weight(400) == 1e-3
    assert weights.seg_weight(0) == pytest.approx(0.01)
    assert weights.seg_weight(99) == pytest.approx(0.01)
    assert weights.seg_weight(100) == pytest.approx(0.002)
    assert weights.seg_weight(250) == pytest.approx(0.0004)


@pytest.mark.parametrize("kwargs", [{"reg": -1.0}, {"seg_decay": 0.0}, {"seg_interval": 0}])
def test_loss_weight_validation(kwargs: dict) -> None:
    """Negative weights and empty schedules are configuration errors."""
    with pytest.raises(ConfigurationError):
        LossWeights(**kwargs)


def test_band_lies_outside_the_image() -> None:
    """Every band point is outside the visible area."""
    band = band_coords(PixelGrid(16, 16), margin=0.25)
    assert band.shape[0] > 0
    assert (np.abs(band).max(axis=1) > 1.0).all()


def test_total_loss_photometric_terms() -> None:
    """RGB batches use the photometric term; the regularizer appears when active."""
    scene = tiny_scene("pendulum")
    batch = tiny_batch(PixelGrid(4, 4), [0.0, 0.1])
    with no_grad():
        off = total_loss(scene, batch, 0, LossWeights(reg=1e-3, reg_start_epoch=5))
        on = total_loss(scene, batch, 5, LossWeights(reg=1e-3, reg_start_epoch=5))
    assert set(off.terms) == {"photo", "total"}
    assert set(on.terms) == {"photo", "reg", "total"}
    assert on.terms["total"] == pytest.approx(on.terms["photo"] + 1e-3 * on.terms["reg"])


def test_total_loss_mask_only() -> None:
    """Without colors or background the data term is the mask BCE."""
    scene = tiny_scene("pendulum", background=None)
    batch = tiny_batch(PixelGrid(4, 4), [0.0, 0.1])
    with no_grad():
        breakdown = total_loss(scene, batch, 0, LossWeights())
    assert "bce" in breakdown.terms and "photo" not in breakdown.terms
    batch.masks = None
    with pytest.raises(DatasetError):
        total_loss(scene, batch, 0, LossWeights())


def test_spring_auxiliaries() -> None:
    """Attachments start at zero; the terms need a spring scene and coarse masks."""
    scene = tiny_scene("spring")
    grid = PixelGrid(4, 4)
    batch = tiny_batch(grid, [0.0, 0.1])
    with no_grad():
        trajectory = scene.trajectory(batch.times)
        seg, attach, outside = spring_auxiliaries(scene, batch.coarse_masks, grid, trajectory)
    assert attach.item() == 0.0
    assert seg.item() > 0 and 0 <= outside.item() <= 1
    with pytest.raises(DatasetError):
        spring_auxiliaries(scene, None, grid, trajectory)
    with pytest.raises(ConfigurationError):
        spring_auxiliaries(tiny_scene("ball"), batch.coarse_masks, grid, trajectory)


def _loss_value(scene, batch, weights) -> float:
    with no_grad():
        return total_loss(scene, batch, 0, weights).total.item()


@pytest.mark.parametrize("family", ["pendulum", "spring", "block", "ball"])
def test_total_loss_gradients_match_finite_differences(family: str) -> None:
    """Analytic gradients of the full objective agree with central differences."""
    scene = tiny_scene(family)
    batch = tiny_batch(PixelGrid(4, 4), [0.0, 0.1])
    weights = SPRING_WEIGHTS if family == "spring" else LossWeights(reg=1e-3)
    named = scene.named_parameters()
    with Tape():
        backward(total_loss(scene, batch, 0, weights).total)

    checked = 0
    step = 1e-6
    for name, tensor in named.items():
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad.reshape(-1) if tensor.grad is not None else None
        flat = tensor.data.detach().view(-1)
        for i in range(min(2, flat.numel())):
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + step
            plus = _loss_value(scene, batch, weights)
            with torch.no_grad():
                flat[i] = original - step
            minus = _loss_value(scene, batch, weights)
            with torch.no_grad():
                flat[i] = original
            central = (plus - minus) / (2 * step)
            value = 0.0 if analytic is None else float(analytic[i])
            assert abs(value - central) <= 1e-4 * max(abs(central), 1e-3), (name, i, value, central)
            checked += 1
    assert checked > 0
