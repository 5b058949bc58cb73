"""Module for the Fourier-feature MLP fields representing background and object appearance."""

import logging
import math
from dataclasses import dataclass

import torch

from src.app.autodiff import (
    DTYPE,
    Tensor,
    concat,
    cos,
    ones,
    relu,
    sigmoid,
    sin,
)
from src.app.errors import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FieldConfig:
    """Size of one implicit field: Fourier features, bandwidth, layer count and width."""
    n_fourier: int = 64
    sigma: float = 2.0
    n_layers: int = 4
    width: int = 64

    def __post_init__(self) -> None:
        if self.n_fourier < 1 or self.n_layers < 1 or self.width < 1:
            raise ConfigurationError("Field sizes must be positive",
                                     details=f"{self}")
        if self.sigma <= 0:
            raise ConfigurationError("Fourier bandwidth sigma must be positive",
                                     details=f"sigma={self.sigma}")


def box_muller(generator: torch.Generator, shape: tuple[int, ...]) -> torch.Tensor:
    """Standard normal samples from pairs of uniforms drawn with the given generator."""
    count = math.prod(shape)
    pairs = (count + 1) // 2
    u1 = torch.rand(pairs, generator=generator, dtype=DTYPE)
    u2 = torch.rand(pairs, generator=generator, dtype=DTYPE)
    radius = torch.sqrt(-2.0 * torch.log1p(-u1))
    angle = 2.0 * math.pi * u2
    normals = torch.cat([radius * torch.cos(angle), radius * torch.sin(angle)])
    return normals[:count].reshape(shape)


class FourierMapping:
    """
    Fixed random Fourier features gamma(x) = [cos(2 pi B x), sin(2 pi B x)].

    B has shape (n_features, input_dim) with entries drawn from N(0, sigma^2) once at
    construction; it is a constant and never reaches the optimizer.
    """

    def __init__(self, n_features: int, sigma: float, generator: torch.Generator,
                 input_dim: int = 2) -> None:
        self.n_features = n_features
        self.sigma = sigma
        self.input_dim = input_dim
        self.B = sigma * box_muller(generator, (n_features, input_dim))
        # stored transposed so encoding is a single matmul of row-vector points
        self._projection = Tensor(2.0 * math.pi * self.B.T)

    @property
    def output_dim(self) -> int:
        return 2 * self.n_features

    def set_matrix(self, matrix: torch.Tensor) -> None:
        """Replace B, e.g. when restoring from a checkpoint."""
        if tuple(matrix.shape) != (self.n_features, self.input_dim):
            raise ShapeMismatchError("Fourier matrix has the wrong shape",
                                     details=f"{tuple(matrix.shape)}")
        self.B = matrix.to(DTYPE).clone()
        self._projection = Tensor(2.0 * math.pi * self.B.T)

    def __call__(self, x: Tensor) -> Tensor:
        return fourier_features(x, self)


def fourier_features(x: Tensor, mapping: FourierMapping) -> Tensor:
    """
    Encode points with random Fourier features.

    Args:
        x: A single point of shape (d,) or a batch of shape (N, d).
        mapping: The Fourier mapping.

    Returns:
        Tensor: Shape (2 * n_features,) or (N, 2 * n_features); cosines first, then sines.
    """
    if x.shape[-1] != mapping.input_dim or x.ndim not in (1, 2):
        raise ShapeMismatchError("fourier_features: point dimension mismatch",
                                 details=f"expected (..., {mapping.input_dim}), got {x.shape}")
    batch = x[None, :] if x.ndim == 1 else x
    projected = batch @ mapping._projection
    encoded = concat([cos(projected), sin(projected)], axis=1)
    return encoded[0] if x.ndim == 1 else encoded


class Mlp:
    """Fully connected network: ReLU between layers, sigmoid on the output."""

    def __init__(self, in_dim: int, width: int, n_layers: int, out_dim: int,
                 generator: torch.Generator, name: str = "mlp") -> None:
        sizes = [in_dim] + [width] * (n_layers - 1) + [out_dim]
        self.name = name
        self.width = width
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = (2.0 * torch.rand(fan_in, fan_out, generator=generator, dtype=DTYPE) - 1.0) * bound
            b = (2.0 * torch.rand(1, fan_out, generator=generator, dtype=DTYPE) - 1.0) * bound
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{index}"))
            self.biases.append(Tensor(b, requires_grad=True, name=f"{name}.b{index}"))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def __call__(self, x: Tensor) -> Tensor:
        batch = x[None, :] if x.ndim == 1 else x
        # bias rows are broadcast over the batch with a column of ones
        column = ones(batch.shape[0], 1)
        h = batch
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + column @ b
            if index < self.n_layers - 1:
                h = relu(h)
        out = sigmoid(h)
        return out[0] if x.ndim == 1 else out


class BackgroundField:
    """Static background color c_bg(x) = F(gamma(x))."""

    def __init__(self, config: FieldConfig, generator: torch.Generator) -> None:
        self.config = config
        self.mapping = FourierMapping(config.n_fourier, config.sigma, generator)
        self.net = Mlp(self.mapping.output_dim, config.width, config.n_layers, 3,
                       generator, name="background")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return eval_background(x, self)


class ObjectField:
    """Object color and opacity (c_obj, o) = G(gamma(x')) in local coordinates."""

    def __init__(self, config: FieldConfig, generator: torch.Generator, name: str = "object") -> None:
        self.config = config
        self.mapping = FourierMapping(config.n_fourier, config.sigma, generator)
        self.net = Mlp(self.mapping.output_dim, config.width, config.n_layers, 4,
                       generator, name=name)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def __call__(self, x_local: Tensor) -> tuple[Tensor, Tensor]:
        return eval_object(x_local, self)


def eval_background(x: Tensor, field: BackgroundField) -> Tensor:
    """Background RGB in (0, 1) at normalized point(s) x."""
    return field.net(field.mapping(x))


def eval_object(x_local: Tensor, field: ObjectField) -> tuple[Tensor, Tensor]:
    """
    Object RGB and opacity at local point(s).

    Returns:
        tuple: (rgb, opacity) with shapes (N, 3) and (N, 1), or (3,) and (1,) for one point.
    """
    out = field.net(field.mapping(x_local))
    if out.ndim == 1:
        return out[0:3], out[3:4]
    return out[:, 0:3], out[:, 3:4]
