"""Unit tests for the ODE families and the RK4 integrator."""

import math

import numpy as np
import pytest

from src.app.autodiff import Tensor, grad_check, no_grad
from src.app.dynamics import (
    DYNAMICS,
    GRAVITY,
    Family,
    OdeParams,
    integrate,
    rhs_ball,
    rhs_block,
    rhs_pendulum,
    rhs_spring,
    spring_forces,
)
from src.app.errors import (
    ConfigurationError,
    DomainError,
    IntegrationError,
    SpringSingularityError,
)


def _params(family: Family, **values: float) -> OdeParams:
    return OdeParams(family, {k: Tensor([v]) for k, v in values.items()})


def _pendulum(phi0: float, omega0: float, l: float, c: float, times, substeps: int):
    with no_grad():
        return integrate(rhs_pendulum, Tensor([phi0, omega0]),
                         _params(Family.PENDULUM, l=l, c=c), times, substeps)


def test_parse_family() -> None:
    """Family names parse; unknown names are configuration errors."""
    assert Family.parse("spring") is Family.SPRING
    with pytest.raises(ConfigurationError):
        Family.parse("double-pendulum")


def test_dynamics_table_layout() -> None:
    """State and parameter layouts per family."""
    assert DYNAMICS[Family.PENDULUM].state_names == ("phi", "omega")
    assert DYNAMICS[Family.SPRING].state_dim == 8
    assert DYNAMICS[Family.SPRING].n_objects == 2
    assert DYNAMICS[Family.BALL].param_names == ()


def test_pendulum_rhs() -> None:
    """omega' = -(g/l) sin(phi) - c omega."""
    out = rhs_pendulum(Tensor([0.5, 0.2]), _params(Family.PENDULUM, l=2.0, c=0.1)).numpy()
    assert out[0] == pytest.approx(0.2)
    assert out[1] == pytest.approx(-(GRAVITY / 2.0) * math.sin(0.5) - 0.1 * 0.2)


def test_pendulum_rejects_non_positive_length() -> None:
    """l <= 0 is outside the domain."""
    with pytest.raises(DomainError):
        rhs_pendulum(Tensor([0.5, 0.2]), _params(Family.PENDULUM, l=0.0, c=0.1))


def test_spring_forces_are_opposite() -> None:
    """F_2 = -F_1."""
    z = Tensor([0.1, -0.2, 0.6, 0.3, 0, 0, 0, 0])
    f1, f2 = spring_forces(z, _params(Family.SPRING, k=3.0, l_rest=0.2))
    assert np.allclose(f1.numpy(), -f2.numpy())
    assert np.linalg.norm(f1.numpy()) > 0


def test_spring_force_vanishes_at_twice_rest_length() -> None:
    """Separation 2 l gives zero force."""
    z = Tensor([0.0, 0.0, 0.5, 0.0, 0, 0, 0, 0])
    f1, _ = spring_forces(z, _params(Family.SPRING, k=3.0, l_rest=0.25))
    assert np.allclose(f1.numpy(), 0.0, atol=1e-15)


def test_spring_pulls_stretched_masses_together() -> None:
    """A stretched spring accelerates mass 1 toward mass 2."""
    z = Tensor([0.0, 0.0, 1.0, 0.0, 0, 0, 0, 0])
    out = rhs_spring(z, _params(Family.SPRING, k=2.0, l_rest=0.25)).numpy()
    assert out[4] > 0 > out[6]


def test_spring_total_momentum_is_conserved() -> None:
    """Equal and opposite forces keep the summed velocity of the two masses fixed over 5 s."""
    z0 = Tensor([-0.3, 0.0, 0.3, 0.1, 0.1, 0.2, -0.3, 0.05])
    with no_grad():
        trajectory = integrate(rhs_spring, z0, _params(Family.SPRING, k=4.0, l_rest=0.25),
                               np.arange(151) / 30.0, 20)
    start = z0.numpy()[4:6] + z0.numpy()[6:8]
    for state in trajectory.states:
        v = state.numpy()
        assert np.abs(v[4:6] + v[6:8] - start).max() < 1e-9


def test_spring_singularity() -> None:
    """Coinciding masses raise."""
    z = Tensor([0.3, 0.3, 0.3, 0.3, 0, 0, 0, 0])
    with pytest.raises(SpringSingularityError):
        spring_forces(z, _params(Family.SPRING, k=1.0, l_rest=0.2))


def test_block_and_ball_rhs() -> None:
    """Sliding block and projectile accelerations."""
    block = rhs_block(Tensor([0.0, 1.0]), _params(Family.BLOCK, alpha=0.4, mu=0.1)).numpy()
    assert block[1] == pytest.approx(GRAVITY * (math.sin(0.4) - 0.1 * math.cos(0.4)))
    ball = rhs_ball(Tensor([0.0, 0.0, 1.5, -2.0]), _params(Family.BALL)).numpy()
    assert ball.tolist() == [1.5, -2.0, 0.0, GRAVITY]


def test_small_angle_pendulum_matches_analytic_solution() -> None:
    """Undamped small oscillations follow phi0 cos(sqrt(g/l) t)."""
    trajectory = _pendulum(0.01, 0.0, 1.0, 0.0, [0.0, 1.0], 100)
    expected = 0.01 * math.cos(math.sqrt(GRAVITY) * 1.0)
    assert trajectory.states[-1].numpy()[0] == pytest.approx(expected, abs=1e-5)


def test_rk4_convergence_order() -> None:
    """Halving the step size reduces the error about sixteenfold."""
    reference = _pendulum(1.0, 0.0, 1.0, 0.3, [0.0, 1.0], 4000).states[-1].numpy()
    coarse = _pendulum(1.0, 0.0, 1.0, 0.3, [0.0, 1.0], 10).states[-1].numpy()
    fine = _pendulum(1.0, 0.0, 1.0, 0.3, [0.0, 1.0], 20).states[-1].numpy()
    order = math.log2(np.linalg.norm(coarse - reference) / np.linalg.norm(fine - reference))
    assert order >= 3.7


def test_undamped_energy_is_conserved() -> None:
    """Energy drift over 5 s stays below 1e-6 relative."""
    def energy(state):
        phi, omega = state
        return 0.5 * omega ** 2 - GRAVITY * math.cos(phi)

    trajectory = _pendulum(0.5, 0.0, 1.0, 0.0, np.linspace(0.0, 5.0, 51), 100)
    start = energy(trajectory.states[0].numpy())
    drift = max(abs(energy(s.numpy()) - start) for s in trajectory.states)
    assert drift / abs(start) < 1e-6


def test_damping_reduces_amplitude() -> None:
    """A damped pendulum loses energy."""
    trajectory = _pendulum(0.5, 0.0, 1.0, 0.5, np.linspace(0.0, 4.0, 41), 20)
    angles = np.abs([s.numpy()[0] for s in trajectory.states])
    assert angles[-10:].max() < angles[:10].max()


def test_integrate_returns_z0_first() -> None:
    """The first state is z0 and there is one state per time."""
    z0 = Tensor([0.2, 0.0])
    trajectory = integrate(rhs_pendulum, z0, _params(Family.PENDULUM, l=1.0, c=0.1),
                           [0.0, 0.1, 0.3], 5)
    assert len(trajectory) == 3
    assert trajectory.states[0] is z0
    assert trajectory.index_of(0.3) == 2
    with pytest.raises(IntegrationError):
        trajectory.index_of(0.2)


@pytest.mark.parametrize("times", [[], [0.0, 0.2, 0.1], [0.0, 0.0]])
def test_integrate_rejects_bad_times(times) -> None:
    """Times must be non-empty and strictly increasing."""
    with pytest.raises(ConfigurationError):
        integrate(rhs_pendulum, Tensor([0.1, 0.0]), _params(Family.PENDULUM, l=1.0, c=0.1),
                  times, 5)


def test_integrate_reports_non_finite_state_time() -> None:
    """A blow-up raises with the failing time attached."""
    def explode(z, params):
        return z * float("inf")

    with pytest.raises(IntegrationError) as exc:
        integrate(explode, Tensor([1.0]), _params(Family.BALL), [0.0, 0.5, 1.0], 2)
    assert exc.value.time == pytest.approx(0.5)


def test_gradient_through_integrator() -> None:
    """Gradients of a final state with respect to l, c and z0 match central differences."""
    def final_angle(params):
        ode = OdeParams(Family.PENDULUM, {"l": params[0], "c": params[1]})
        trajectory = integrate(rhs_pendulum, params[2], ode, [0.0, 0.25, 0.5], 10)
        return trajectory.states[-1][0:1].sum()

    assert grad_check(final_angle, [[1.0], [0.3], [0.5, -0.2]]) < 1e-6
