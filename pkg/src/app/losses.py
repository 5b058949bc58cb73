"""Module for the training objectives and their epoch-dependent weighting."""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.app.autodiff import Tensor, clamp, log
from src.app.dynamics import Family, Trajectory
from src.app.errors import ConfigurationError, DatasetError, ShapeMismatchError
from src.app.geometry import object_transform
from src.app.renderer import PixelGrid, gather_states, layered_opacity, render_samples
from src.app.scene import SceneModel

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
OUTSIDE_STRIDE = 2


@dataclass(frozen=True)
class LossWeights:
    """
    Loss weights and schedules.

    The occupancy regularizer switches on at `reg_start_epoch`; the coarse-mask weight
    starts at `seg` and is multiplied by `seg_decay` every `seg_interval` epochs.
    """
    photo: float = 1.0
    reg: float = 0.0
    reg_start_epoch: int = 0
    seg: float = 0.0
    seg_decay: float = 0.2
    seg_interval: int = 100
    attach: float = 0.0
    outside: float = 0.0
    outside_margin: float = 0.2

    def __post_init__(self) -> None:
        for name in ("photo", "reg", "seg", "attach", "outside", "outside_margin"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"Loss weight '{name}' must be non-negative",
                                         details=str(getattr(self, name)))
        if not 0 < self.seg_decay <= 1:
            raise ConfigurationError("seg_decay must lie in (0, 1]", details=str(self.seg_decay))
        if self.seg_interval < 1:
            raise ConfigurationError("seg_interval must be at least 1")

    def reg_weight(self, epoch: int) -> float:
        return self.reg if epoch >= self.reg_start_epoch else 0.0

    def seg_weight(self, epoch: int) -> float:
        return self.seg * self.seg_decay ** (epoch // self.seg_interval)


@dataclass
class Batch:
    """Sampled pixels: global coords, the frame each one belongs to, and its targets."""
    coords: Tensor
    frame_ids: np.ndarray
    times: np.ndarray
    grid: PixelGrid
    colors: Tensor | None = None
    masks: Tensor | None = None
    coarse_masks: list[np.ndarray] | None = None


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def photometric_mse(rendered: Tensor, target: Tensor) -> Tensor:
    """Mean squared RGB difference over all sampled pixels and channels."""
    if rendered.shape != target.shape:
        raise ShapeMismatchError("photometric_mse: pixel counts differ",
                                 details=f"{rendered.shape} vs {target.shape}")
    diff = rendered - target
    return (diff * diff).mean()


def occupancy_regularizer(opacities: Tensor) -> Tensor:
    """Mean of o (1 - o); zero when every opacity is 0 or 1."""
    return (opacities * (1.0 - opacities)).mean()


def _binary_targets(target: Tensor | np.ndarray) -> np.ndarray:
    values = target.numpy() if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise DatasetError("Mask targets must lie in [0, 1]",
                           details=f"range [{values.min()}, {values.max()}]")
    return (values >= 0.5).astype(np.float64)


def mask_bce(predicted: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Binary cross entropy of clamped opacities against a binary mask."""
    mask = _binary_targets(target)
    if mask.shape != predicted.shape:
        raise ShapeMismatchError("mask_bce: prediction and mask shapes differ",
                                 details=f"{predicted.shape} vs {mask.shape}")
    p = clamp(predicted, BCE_EPS, 1.0 - BCE_EPS)
    m = Tensor(mask)
    return -(m * log(p) + (1.0 - m) * log(1.0 - p)).mean()


def band_coords(grid: PixelGrid, margin: float = 0.2, stride: int = OUTSIDE_STRIDE) -> np.ndarray:
    """Normalized pixel centers in a band of `margin` image sizes around the visible area."""
    pad_x = int(round(margin * grid.width))
    pad_y = int(round(margin * grid.height))
    cols = np.arange(-pad_x, grid.width + pad_x, stride)
    rows = np.arange(-pad_y, grid.height + pad_y, stride)
    cc, rr = np.meshgrid(cols, rows)
    outside = (cc < 0) | (cc >= grid.width) | (rr < 0) | (rr >= grid.height)
    return grid.to_normalized(cc[outside], rr[outside])


def spring_auxiliaries(scene: SceneModel, coarse_masks: list[np.ndarray] | None,
                       grid: PixelGrid, trajectory: Trajectory,
                       margin: float = 0.2) -> tuple[Tensor, Tensor, Tensor]:
    """
    Auxiliary terms for the two-mass spring scene.

    Returns:
        tuple: (seg, attach, outside) where seg is the first-frame BCE of each object's
        opacity against its coarse mask, attach the squared norm of the attachment
        offsets and outside the mean squared opacity in the band around the image.
    """
    if scene.family is not Family.SPRING:
        raise ConfigurationError("spring_auxiliaries needs a spring scene",
                                 details=scene.family.value)
    if not coarse_masks or len(coarse_masks) != len(scene.objects):
        raise DatasetError("Spring scenes need one coarse first-frame mask per object")

    coords = Tensor(grid.coords())
    seg = None
    for index, (obj, coarse) in enumerate(zip(scene.objects, coarse_masks)):
        local = object_transform(scene.family, scene.z0, scene.extras, scene.homography,
                                 coords, index)
        _, opacity = obj(local)
        term = mask_bce(opacity, np.asarray(coarse, dtype=np.float64).reshape(-1, 1))
        seg = term if seg is None else seg + term

    attach = None
    for attachment in scene.extras.attachments:
        term = (attachment * attachment).sum()
        attach = term if attach is None else attach + term

    band = band_coords(grid, margin)
    frame_ids = np.repeat(np.arange(len(trajectory)), band.shape[0])
    points = Tensor(np.tile(band, (len(trajectory), 1)))
    states = gather_states(trajectory, frame_ids)
    opacities = []
    for index, obj in enumerate(scene.objects):
        local = object_transform(scene.family, states, scene.extras, scene.homography,
                                 points, index)
        opacities.append(obj(local)[1])
    combined, _ = layered_opacity(opacities)
    outside = (combined * combined).mean()
    return seg, attach, outside


def total_loss(scene: SceneModel, batch: Batch, epoch: int, weights: LossWeights) -> LossBreakdown:
    """
    Weighted sum of the data term and the active regularizers.

    The data term is the photometric MSE, or the mask BCE when either the batch carries
    no colors or the scene has no background field.
    """
    trajectory = scene.trajectory(batch.times)
    out = render_samples(scene, batch.coords, batch.frame_ids, trajectory)
    terms: dict[str, float] = {}

    if batch.colors is not None and scene.background is not None:
        data = photometric_mse(out.rgb, batch.colors)
        terms["photo"] = data.item()
    else:
        if batch.masks is None:
            raise DatasetError("Mask-only training needs object masks")
        data = mask_bce(out.opacity, batch.masks)
        terms["bce"] = data.item()
    total = weights.photo * data

    reg_weight = weights.reg_weight(epoch)
    if reg_weight > 0:
        reg = occupancy_regularizer(out.opacity)
        terms["reg"] = reg.item()
        total = total + reg_weight * reg

    if scene.family is Family.SPRING:
        seg_weight = weights.seg_weight(epoch)
        if seg_weight > 0 or weights.attach > 0 or weights.outside > 0:
            seg, attach, outside = spring_auxiliaries(scene, batch.coarse_masks, batch.grid,
                                                      trajectory, weights.outside_margin)
            terms.update(seg=seg.item(), attach=attach.item(), outside=outside.item())
            total = total + seg_weight * seg + weights.attach * attach + weights.outside * outside

    terms["total"] = total.item()
    return LossBreakdown(total=total, terms=terms)
