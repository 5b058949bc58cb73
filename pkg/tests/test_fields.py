"""Unit tests for the Fourier-feature fields."""

import numpy as np
import pytest
import torch

from src.app.autodiff import Tape, Tensor, backward
from src.app.errors import ConfigurationError, ShapeMismatchError
from src.app.fields import (
    BackgroundField,
    FieldConfig,
    FourierMapping,
    Mlp,
    ObjectField,
    box_muller,
    eval_background,
    eval_object,
    fourier_features,
)
from src.app.renderer import PixelGrid


def _generator(seed: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def test_box_muller_is_standard_normal() -> None:
    """Samples have mean about 0 and standard deviation about 1."""
    samples = box_muller(_generator(), (20001,))
    assert samples.shape == (20001,)
    assert abs(float(samples.mean())) < 0.05
    assert abs(float(samples.std()) - 1.0) < 0.05


def test_box_muller_is_seeded() -> None:
    """Same seed, same draws."""
    assert torch.equal(box_muller(_generator(3), (5, 2)), box_muller(_generator(3), (5, 2)))


def test_fourier_features_shapes_and_origin() -> None:
    """At x = 0 all cosines are 1 and all sines are 0."""
    mapping = FourierMapping(6, 2.0, _generator())
    assert tuple(mapping.B.shape) == (6, 2)
    single = fourier_features(Tensor([0.0, 0.0]), mapping)
    assert single.shape == (12,)
    assert np.allclose(single.numpy(), [1.0] * 6 + [0.0] * 6)
    batch = mapping(Tensor(np.zeros((4, 2))))
    assert batch.shape == (4, 12)


def test_fourier_features_match_definition() -> None:
    """gamma(x) = [cos(2 pi B x), sin(2 pi B x)]."""
    mapping = FourierMapping(3, 1.5, _generator(1))
    x = np.array([0.25, -0.4])
    projected = 2 * np.pi * mapping.B.numpy() @ x
    expected = np.concatenate([np.cos(projected), np.sin(projected)])
    assert np.allclose(fourier_features(Tensor(x), mapping).numpy(), expected)


def test_fourier_features_reject_wrong_dimension() -> None:
    """Points must be two-dimensional."""
    mapping = FourierMapping(3, 1.0, _generator())
    with pytest.raises(ShapeMismatchError):
        fourier_features(Tensor([1.0, 2.0, 3.0]), mapping)


def test_set_matrix_checks_shape() -> None:
    """Restored Fourier matrices must match the configured size."""
    mapping = FourierMapping(3, 1.0, _generator())
    mapping.set_matrix(torch.zeros(3, 2, dtype=torch.float64))
    assert np.allclose(mapping(Tensor([0.3, 0.9])).numpy()[:3], 1.0)
    with pytest.raises(ShapeMismatchError):
        mapping.set_matrix(torch.zeros(2, 3))


def test_mlp_output_in_unit_interval() -> None:
    """Sigmoid output keeps every value in (0, 1)."""
    net = Mlp(4, 8, 3, 5, _generator(), name="net")
    out = net(Tensor(np.random.default_rng(0).normal(size=(10, 4)) * 10))
    assert out.shape == (10, 5)
    assert (out.numpy() > 0).all() and (out.numpy() < 1).all()
    assert sorted(net.named_parameters()) == sorted(
        ["net.w0", "net.b0", "net.w1", "net.b1", "net.w2", "net.b2"])


def test_background_field_returns_color_in_unit_interval() -> None:
    """The background is RGB in (0, 1) and repeatable at the same point."""
    field = BackgroundField(FieldConfig(4, 1.0, 2, 8), _generator())
    x = Tensor(np.array([[0.0, 0.0], [0.5, -0.25], [-1.0, 1.0]]))
    rgb = eval_background(x, field).numpy()
    assert rgb.shape == (3, 3)
    assert np.all((rgb > 0) & (rgb < 1))
    np.testing.assert_array_equal(field(x).numpy(), rgb)


def test_object_field_returns_color_and_opacity() -> None:
    """Objects produce RGB and one opacity channel."""
    field = ObjectField(FieldConfig(4, 1.0, 2, 8), _generator(), name="object0")
    rgb, opacity = eval_object(Tensor(np.zeros((7, 2))), field)
    assert rgb.shape == (7, 3)
    assert opacity.shape == (7, 1)
    rgb_one, opacity_one = field(Tensor([0.1, 0.2]))
    assert rgb_one.shape == (3,) and opacity_one.shape == (1,)


def test_fields_are_deterministic_in_the_seed() -> None:
    """Two fields built from equally seeded generators are identical."""
    config = FieldConfig(4, 1.0, 2, 8)
    a, b = BackgroundField(config, _generator(7)), BackgroundField(config, _generator(7))
    assert torch.equal(a.mapping.B, b.mapping.B)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p.data, q.data)
    c = BackgroundField(config, _generator(8))
    assert not torch.equal(a.mapping.B, c.mapping.B)


@pytest.mark.parametrize("kwargs", [{"sigma": 0.0}, {"n_fourier": 0}, {"width": -1}])
def test_field_config_validation(kwargs: dict) -> None:
    """Non-positive sizes or bandwidth are configuration errors."""
    with pytest.raises(ConfigurationError):
        FieldConfig(**kwargs)


def _overfit(field, x: Tensor, target: Tensor, output, lr: float, steps: int) -> None:
    optimizer = torch.optim.Adam([p.data for p in field.parameters()], lr=lr)
    for _ in range(steps):
        optimizer.zero_grad(set_to_none=True)
        with Tape():
            diff = output(field, x) - target
            backward((diff * diff).mean())
        optimizer.step()


def test_background_overfits_constant_image() -> None:
    """200 Adam steps bring a small background field within 0.01 of constant red."""
    grid = PixelGrid(16, 16)
    x = Tensor(grid.coords())
    red = Tensor(np.tile([1.0, 0.0, 0.0], (grid.n_pixels, 1)))
    field = BackgroundField(FieldConfig(16, 1.0, 2, 32), _generator(1))
    _overfit(field, x, red, lambda f, p: f(p), lr=0.05, steps=200)
    assert np.abs(field(x).numpy() - red.numpy()).max() <= 0.01


def test_object_opacity_overfits_disk() -> None:
    """An object field fitted to a disk mask is opaque inside and clear at the corner."""
    grid = PixelGrid(32, 32)
    coords = grid.coords()
    disk = (np.hypot(coords[:, 0], coords[:, 1]) < 0.5).astype(np.float64)[:, None]
    field = ObjectField(FieldConfig(32, 2.0, 3, 32), _generator(2))
    _overfit(field, Tensor(coords), Tensor(disk), lambda f, p: f(p)[1], lr=1e-2, steps=300)
    _, center = field(Tensor([0.0, 0.0]))
    _, corner = field(Tensor(grid.to_normalized(0, 0)))
    assert center.item() > 0.9
    assert corner.item() < 0.1
