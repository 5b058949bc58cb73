"""Module for the time-dependent global-to-local transforms and the learnable homography."""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.app.autodiff import Tensor, concat, cos, inverse_softplus, sin, softplus
from src.app.dynamics import Family
from src.app.errors import HomographyError

logger = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-8
DEFAULT_PIXEL_SCALE = 0.1


@dataclass
class TransformExtras:
    """
    Additional transform parameters per family.

    pendulum: pivot A; spring: one attachment offset per object; block: track origin,
    track direction angle and pixel scale; ball: origin and pixel scale. The pixel
    scale is stored unconstrained and read through softplus.
    """
    family: Family
    pivot: Tensor | None = None
    origin: Tensor | None = None
    track_angle: Tensor | None = None
    raw_scale: Tensor | None = None
    attachments: list[Tensor] = field(default_factory=list)

    @classmethod
    def create(cls, family: Family, pivot: tuple[float, float] = (0.0, 0.0),
               origin: tuple[float, float] = (0.0, 0.0), track_angle: float = 0.0,
               scale: float = DEFAULT_PIXEL_SCALE, n_objects: int = 2) -> "TransformExtras":
        extras = cls(family=family)
        if family is Family.PENDULUM:
            extras.pivot = Tensor(pivot, requires_grad=True, name="extras.pivot")
        elif family is Family.SPRING:
            extras.attachments = [Tensor([0.0, 0.0], requires_grad=True, name=f"extras.attach{i}")
                                  for i in range(n_objects)]
        else:
            extras.origin = Tensor(origin, requires_grad=True, name="extras.origin")
            extras.raw_scale = Tensor([inverse_softplus(scale)], requires_grad=True,
                                      name="extras.raw_scale")
            if family is Family.BLOCK:
                extras.track_angle = Tensor([track_angle], requires_grad=True,
                                            name="extras.track_angle")
        return extras

    def scale(self) -> Tensor:
        if self.raw_scale is None:
            raise HomographyError(f"{self.family.value} has no pixel scale")
        return softplus(self.raw_scale)

    def named_parameters(self) -> dict[str, Tensor]:
        tensors = [self.pivot, self.origin, self.track_angle, self.raw_scale, *self.attachments]
        return {t.name: t for t in tensors if t is not None}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Homography:
    """3x3 projective matrix with H[2, 2] fixed to 1 and eight learnable entries."""

    def __init__(self, matrix: np.ndarray | None = None, learnable: bool = True) -> None:
        m = np.eye(3) if matrix is None else np.asarray(matrix, dtype=np.float64)
        if m.shape != (3, 3) or abs(m[2, 2]) < DENOMINATOR_EPS:
            raise HomographyError("Homography must be 3x3 with a non-zero H33",
                                  details=str(m))
        m = m / m[2, 2]
        self.learnable = learnable
        self.params = Tensor(m.reshape(-1)[:8], requires_grad=learnable, name="homography")

    def matrix(self) -> np.ndarray:
        return np.append(self.params.numpy(), 1.0).reshape(3, 3)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix(), np.eye(3)))

    def parameters(self) -> list[Tensor]:
        return [self.params] if self.learnable else []

    def __call__(self, x: Tensor) -> Tensor:
        return apply_homography(self, x)


def apply_homography(H: Homography, x: Tensor) -> Tensor:
    """Map normalized point(s) (N, 2) or (2,) through H with perspective division."""
    if not H.learnable and H.is_identity():
        return x
    points = x[None, :] if x.ndim == 1 else x
    h = H.params
    px, py = points[:, 0:1], points[:, 1:2]
    u = h[0:1] * px + h[1:2] * py + h[2:3]
    v = h[3:4] * px + h[4:5] * py + h[5:6]
    w = h[6:7] * px + h[7:8] * py + 1.0
    smallest = float(w.values.abs().min())
    if smallest <= DENOMINATOR_EPS:
        raise HomographyError("Homography maps a point to the plane at infinity",
                              details=f"min |w| = {smallest:.3e}")
    mapped = concat([u / w, v / w], axis=1)
    return mapped[0] if x.ndim == 1 else mapped


def _component(state: Tensor, index: int) -> Tensor:
    return state[index:index + 1] if state.ndim == 1 else state[:, index:index + 1]


def object_transform(family: Family, state: Tensor, extras: TransformExtras, H: Homography,
                     x_global: Tensor, object_index: int = 0) -> Tensor:
    """
    Map global normalized coordinates to the local frame of one object.

    Args:
        family: Dynamics family.
        state: One state (n,) shared by all points, or per-point states (N, n).
        extras: Transform extras of the family.
        H: Homography applied to global coordinates first.
        x_global: Points (N, 2) or a single point (2,).
        object_index: Which object (spring only).

    Returns:
        Tensor: Local coordinates with the shape of x_global.
    """
    warped = apply_homography(H, x_global)
    points = warped[None, :] if warped.ndim == 1 else warped
    gx, gy = points[:, 0:1], points[:, 1:2]

    if family is Family.PENDULUM:
        phi = _component(state, 0)
        dx, dy = gx - extras.pivot[0:1], gy - extras.pivot[1:2]
        c, s = cos(phi), sin(phi)
        lx, ly = c * dx + s * dy, c * dy - s * dx
    elif family is Family.SPRING:
        attachment = extras.attachments[object_index]
        px, py = _component(state, 2 * object_index), _component(state, 2 * object_index + 1)
        lx = gx - px + attachment[0:1]
        ly = gy - py + attachment[1:2]
    elif family is Family.BLOCK:
        theta = extras.track_angle
        dx, dy = gx - extras.origin[0:1], gy - extras.origin[1:2]
        c, s = cos(theta), sin(theta)
        lx = c * dx + s * dy - extras.scale() * _component(state, 0)
        ly = c * dy - s * dx
    else:
        scale = extras.scale()
        lx = gx - scale * _component(state, 0) - extras.origin[0:1]
        ly = gy - scale * _component(state, 1) - extras.origin[1:2]

    local = concat([lx, ly], axis=1)
    return local[0] if x_global.ndim == 1 else local
