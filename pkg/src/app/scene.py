"""Module holding all learnable state of a scene: fields, ODE parameters, z0, extras and H."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from src.app.autodiff import Tensor, inverse_softplus, no_grad, softplus
from src.app.dynamics import (
    DYNAMICS,
    GRAVITY,
    RHS,
    DynamicsSpec,
    Family,
    OdeParams,
    Trajectory,
    integrate,
)
from src.app.errors import ConfigurationError, IntegrationError
from src.app.fields import BackgroundField, ObjectField
from src.app.geometry import Homography, TransformExtras

if TYPE_CHECKING:
    from src.app.config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class ParamGroups:
    """Learnable tensors split by learning-rate group; every tensor is in exactly one."""
    mlp: list[Tensor]
    physics: list[Tensor]


class SceneModel:
    """Appearance fields plus the physical model that places the objects over time."""

    def __init__(self, family: Family, background: BackgroundField | None,
                 objects: list[ObjectField], ode_raw: dict[str, Tensor], z0: Tensor,
                 extras: TransformExtras, homography: Homography, t0: float = 0.0,
                 substeps: int = 20, gravity: float = GRAVITY) -> None:
        self.family = family
        self.background = background
        self.objects = objects
        self.ode_raw = ode_raw
        self.z0 = z0
        self.extras = extras
        self.homography = homography
        self.t0 = t0
        self.substeps = substeps
        self.gravity = gravity

    @property
    def spec(self) -> DynamicsSpec:
        return DYNAMICS[self.family]

    def ode_params(self) -> OdeParams:
        positive = self.spec.positive
        values = {name: softplus(raw) if name in positive else raw
                  for name, raw in self.ode_raw.items()}
        return OdeParams(self.family, values, gravity=self.gravity)

    def trajectory(self, times: Sequence[float]) -> Trajectory:
        """Integrate from t0 to sorted query times; the result holds only the queried times."""
        grid = np.asarray(times, dtype=np.float64)
        if grid.size == 0:
            raise IntegrationError("No query times given", time=self.t0)
        if grid[0] < self.t0 - 1e-9:
            raise IntegrationError(f"Time {grid[0]} precedes the initial time {self.t0}",
                                   time=float(grid[0]))
        prepend = not np.isclose(grid[0], self.t0, rtol=0.0, atol=1e-9)
        full = np.concatenate([[self.t0], grid]) if prepend else grid
        trajectory = integrate(RHS[self.family], self.z0, self.ode_params(), full, self.substeps)
        if prepend:
            return Trajectory(times=full[1:], states=trajectory.states[1:])
        return trajectory

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        if self.background is not None:
            named.update(self.background.net.named_parameters())
        for field in self.objects:
            named.update(field.net.named_parameters())
        named.update({f"ode.{name}": raw for name, raw in self.ode_raw.items()})
        named["z0"] = self.z0
        named.update(self.extras.named_parameters())
        named["homography"] = self.homography.params
        return named

    def parameter_groups(self) -> ParamGroups:
        mlp = [] if self.background is None else self.background.parameters()
        for field in self.objects:
            mlp = mlp + field.parameters()
        physics = list(self.ode_raw.values()) + [self.z0] + self.extras.parameters()
        physics += self.homography.parameters()
        return ParamGroups(mlp=mlp, physics=physics)

    def fourier_matrices(self) -> dict[str, torch.Tensor]:
        matrices = {f"fourier.{f.net.name}": f.mapping.B for f in self.objects}
        if self.background is not None:
            matrices["fourier.background"] = self.background.mapping.B
        return matrices

    def physical_values(self) -> dict[str, float]:
        """Interpretable values: ODE parameters, z0 entries and transform extras."""
        with no_grad():
            values = {name: t.item() for name, t in self.ode_params().values.items()}
            for name, value in zip(self.spec.state_names, self.z0.numpy()):
                values[f"{name}0"] = float(value)
            extras = self.extras
            if extras.pivot is not None:
                values["pivot_x"], values["pivot_y"] = map(float, extras.pivot.numpy())
            if extras.origin is not None:
                values["origin_x"], values["origin_y"] = map(float, extras.origin.numpy())
            if extras.track_angle is not None:
                values["track_angle"] = extras.track_angle.item()
            if extras.raw_scale is not None:
                values["scale"] = extras.scale().item()
            for i, attachment in enumerate(extras.attachments):
                values[f"attach{i}_x"], values[f"attach{i}_y"] = map(float, attachment.numpy())
        return values

    def _check_domain(self, name: str, value: float) -> None:
        allows_zero = name in self.spec.non_negative
        if not np.isfinite(value) or value < 0 or (value == 0 and not allows_zero):
            bound = ">= 0" if allows_zero else "> 0"
            raise ConfigurationError(f"Parameter '{name}' must be {bound}",
                                     details=f"{name}={value}")

    def set_physical(self, name: str, value: float) -> None:
        """
        Overwrite one interpretable value in place (inverse of physical_values).

        Raises:
            ConfigurationError: Unknown name, or a value outside the parameter's domain
                (l, k, l_rest and scale > 0; c and mu >= 0).
        """
        with torch.no_grad():
            if name in self.ode_raw:
                if name in self.spec.positive:
                    self._check_domain(name, value)
                    raw = inverse_softplus(value)
                else:
                    raw = value
                self.ode_raw[name].data.fill_(raw)
            elif name.endswith("0") and name[:-1] in self.spec.state_names:
                self.z0.data[self.spec.state_names.index(name[:-1])] = value
            elif name in ("pivot_x", "pivot_y") and self.extras.pivot is not None:
                self.extras.pivot.data[0 if name.endswith("x") else 1] = value
            elif name in ("origin_x", "origin_y") and self.extras.origin is not None:
                self.extras.origin.data[0 if name.endswith("x") else 1] = value
            elif name == "track_angle" and self.extras.track_angle is not None:
                self.extras.track_angle.data.fill_(value)
            elif name == "scale" and self.extras.raw_scale is not None:
                self._check_domain(name, value)
                self.extras.raw_scale.data.fill_(inverse_softplus(value))
            else:
                raise ConfigurationError(f"Unknown physical parameter '{name}' for "
                                         f"{self.family.value}",
                                         details=", ".join(sorted(self.physical_values())))


def build_scene(config: RunConfig, generator: torch.Generator | None = None) -> SceneModel:
    """Allocate a scene from a run config; all random draws come from the seeded generator."""
    generator = generator or torch.Generator().manual_seed(config.seed)
    family = Family.parse(config.family)
    spec = DYNAMICS[family]

    background = (BackgroundField(config.background, generator)
                  if config.background is not None else None)
    objects = [ObjectField(config.object, generator, name=f"object{i}")
               for i in range(spec.n_objects)]

    initial = {"l": config.init.l0, "c": config.init.c0, "k": config.init.k0,
               "l_rest": config.init.l_rest0, "alpha": config.init.alpha0,
               "mu": config.init.mu0}
    ode_raw = {}
    for name in spec.param_names:
        value = initial[name]
        if name in spec.positive:
            # keep strictly positive values away from the softplus floor
            value = inverse_softplus(max(value, 1e-6))
        ode_raw[name] = Tensor([value], requires_grad=True, name=f"ode.{name}")

    z0 = Tensor(np.zeros(spec.state_dim), requires_grad=True, name="z0")
    extras = TransformExtras.create(family, scale=config.init.scale0, n_objects=spec.n_objects)
    homography = Homography(learnable=config.use_homography)
    if not config.use_homography:
        logger.warning("Homography disabled: H is fixed to identity")

    logger.info("Built %s scene with %d object field(s)%s", family.value, len(objects),
                "" if background is not None else " and no background")
    return SceneModel(family, background, objects, ode_raw, z0, extras, homography,
                      substeps=config.train.substeps, gravity=config.gravity)
