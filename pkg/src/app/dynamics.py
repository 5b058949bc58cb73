"""Module for the parametric ODE families and the differentiable RK4 integrator."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from src.app.autodiff import Tensor, concat, cos, sin, sqrt, stack_rows
from src.app.errors import (
    ConfigurationError,
    DomainError,
    IntegrationError,
    SpringSingularityError,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.81
SPRING_MASS = 1.0
SEPARATION_EPS = 1e-6


class Family(str, Enum):
    """Supported dynamics families."""
    PENDULUM = "pendulum"
    SPRING = "spring"
    BLOCK = "block"
    BALL = "ball"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        try:
            return cls(value)
        except ValueError as e:
            raise ConfigurationError(f"Unknown dynamics family: {value}",
                                     details=", ".join(f.value for f in cls)) from e


@dataclass(frozen=True)
class DynamicsSpec:
    """Static description of a family: state layout, learnable ODE parameters and objects."""
    family: Family
    state_names: tuple[str, ...]
    param_names: tuple[str, ...]
    positive: tuple[str, ...]
    n_objects: int = 1
    gravity: float = GRAVITY
    mass: float = SPRING_MASS
    # constrained parameters whose domain includes zero
    non_negative: tuple[str, ...] = ()

    @property
    def state_dim(self) -> int:
        return len(self.state_names)


DYNAMICS: dict[Family, DynamicsSpec] = {
    Family.PENDULUM: DynamicsSpec(Family.PENDULUM, ("phi", "omega"), ("l", "c"), ("l", "c"),
                                  non_negative=("c",)),
    Family.SPRING: DynamicsSpec(
        Family.SPRING,
        ("p1x", "p1y", "p2x", "p2y", "v1x", "v1y", "v2x", "v2y"),
        ("k", "l_rest"), ("k", "l_rest"), n_objects=2),
    Family.BLOCK: DynamicsSpec(Family.BLOCK, ("x", "v"), ("alpha", "mu"), ("mu",),
                               non_negative=("mu",)),
    Family.BALL: DynamicsSpec(Family.BALL, ("x", "y", "vx", "vy"), (), ()),
}


@dataclass
class OdeParams:
    """Constrained ODE parameters of one family plus the fixed constants."""
    family: Family
    values: dict[str, Tensor] = field(default_factory=dict)
    gravity: float = GRAVITY
    mass: float = SPRING_MASS

    def __getitem__(self, name: str) -> Tensor:
        return self.values[name]


@dataclass
class Trajectory:
    """States of the ODE solution at strictly increasing times; states[0] is z0."""
    times: np.ndarray
    states: list[Tensor]

    def __len__(self) -> int:
        return len(self.states)

    def index_of(self, t: float) -> int:
        matches = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-9))
        if matches.size == 0:
            raise IntegrationError(f"Time {t} is not covered by the trajectory", time=float(t),
                                   details=f"covered: [{self.times[0]}, {self.times[-1]}]")
        return int(matches[0])

    def state_at(self, t: float) -> Tensor:
        return self.states[self.index_of(t)]

    def stacked(self) -> Tensor:
        """All states as one (len(times), state_dim) tensor."""
        return stack_rows(self.states)


Rhs = Callable[[Tensor, OdeParams], Tensor]


def _require_positive(params: OdeParams, name: str) -> None:
    if bool((params[name].values <= 0).any()):
        raise DomainError(f"{params.family.value}: parameter {name} must be positive",
                          details=f"{name}={params[name].item()}")


def rhs_pendulum(z: Tensor, params: OdeParams) -> Tensor:
    """(phi, omega)' = (omega, -(g/l) sin(phi) - c omega)."""
    _require_positive(params, "l")
    phi, omega = z[0:1], z[1:2]
    acceleration = (-params.gravity) / params["l"] * sin(phi) - params["c"] * omega
    return concat([omega, acceleration])


def spring_forces(z: Tensor, params: OdeParams) -> tuple[Tensor, Tensor]:
    """
    Hooke forces between the two masses.

    F_1 = -k((p1 - p2) - 2 l (p1 - p2) / |p1 - p2|) and F_2 = -F_1.
    """
    offset = z[0:2] - z[2:4]
    separation = float(np.linalg.norm(offset.numpy()))
    if separation < SEPARATION_EPS:
        raise SpringSingularityError("Spring masses coincide",
                                     details=f"separation {separation:.3e} < {SEPARATION_EPS}")
    distance = sqrt((offset * offset).sum())
    factor = params["k"] * (2.0 * params["l_rest"] / distance - 1.0)
    force = offset * factor
    return force, -force


def rhs_spring(z: Tensor, params: OdeParams) -> Tensor:
    """Two unit masses in the plane connected by a spring; 8-dimensional state."""
    force_1, force_2 = spring_forces(z, params)
    return concat([z[4:8], force_1 / params.mass, force_2 / params.mass])


def rhs_block(z: Tensor, params: OdeParams) -> Tensor:
    """(x, v)' = (v, g (sin(alpha) - mu cos(alpha)))."""
    alpha = params["alpha"]
    acceleration = params.gravity * (sin(alpha) - params["mu"] * cos(alpha))
    return concat([z[1:2], acceleration])


def rhs_ball(z: Tensor, params: OdeParams) -> Tensor:
    """(x, y, vx, vy)' = (vx, vy, 0, g); gravity along +y of the image."""
    return concat([z[2:4], Tensor([0.0, params.gravity])])


RHS: dict[Family, Rhs] = {
    Family.PENDULUM: rhs_pendulum,
    Family.SPRING: rhs_spring,
    Family.BLOCK: rhs_block,
    Family.BALL: rhs_ball,
}


def rk4_step(rhs: Rhs, z: Tensor, params: OdeParams, h: float) -> Tensor:
    k1 = rhs(z, params)
    k2 = rhs(z + (0.5 * h) * k1, params)
    k3 = rhs(z + (0.5 * h) * k2, params)
    k4 = rhs(z + h * k3, params)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Rhs, z0: Tensor, params: OdeParams, times: Sequence[float],
              substeps_per_interval: int = 20) -> Trajectory:
    """
    Integrate with classical RK4 using uniform substeps inside every inter-frame interval.

    Every arithmetic step is recorded on the active tape, so gradients of the states
    with respect to z0 and the parameters are exact for the discrete scheme.

    Args:
        rhs: Right-hand side f(z, params).
        z0: State at times[0].
        params: ODE parameters.
        times: Strictly increasing query times.
        substeps_per_interval: RK4 steps between consecutive query times.

    Returns:
        Trajectory: One state per query time.
    """
    grid = np.asarray(times, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ConfigurationError("integrate: times must be a non-empty 1-D sequence")
    if grid.size > 1 and not np.all(np.diff(grid) > 0):
        raise ConfigurationError("integrate: times must be strictly increasing")
    if substeps_per_interval < 1:
        raise ConfigurationError("integrate: substeps must be at least 1",
                                 details=str(substeps_per_interval))

    states = [z0]
    z = z0
    for start, stop in zip(grid[:-1], grid[1:]):
        h = float(stop - start) / substeps_per_interval
        for _ in range(substeps_per_interval):
            z = rk4_step(rhs, z, params, h)
        if not bool(np.isfinite(z.numpy()).all()):
            raise IntegrationError(f"Non-finite ODE state at t={stop:.6g}", time=float(stop),
                                   details=str(z.numpy()))
        states.append(z)
    logger.debug("Integrated %d intervals with %d substeps", grid.size - 1, substeps_per_interval)
    return Trajectory(times=grid, states=states)
