"""Dense layers, the weight-tied generator pair and the discriminators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

ACTIVATIONS = ("leaky_relu", "sigmoid", "linear")
DEFAULT_SLOPE = 0.2
_STD_EPS = 1e-8


def glorot_uniform(n_in: int, n_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def _check_keep(keep_prob: float) -> None:
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must lie in (0, 1], got {keep_prob}")


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: ``1/p`` where kept, 0 where dropped.

    Draws 16-bit uniforms straight from the bit generator (mask generation
    dominates small-network training time otherwise). ``p`` is ``keep_prob``
    rounded to a multiple of 2**-16 and the scale uses that exact ``p``, so
    the output stays unbiased.
    """
    n = int(np.prod(shape))
    threshold = int(round(keep_prob * 65536))
    if threshold == 0:
        raise ConfigError(f"keep_prob {keep_prob} is too small to represent")
    raw = rng.bit_generator.random_raw((n + 3) // 4).view(np.uint16)[:n]
    mask = np.less(raw, threshold).astype(np.float64)
    mask *= 65536.0 / threshold
    return mask.reshape(shape)


def dropout_apply(
    x: Tensor, keep_prob: float, rng: np.random.Generator | None, training: bool = True
) -> Tensor:
    """Inverted dropout: keep each element with ``keep_prob``, rescale by its inverse."""
    _check_keep(keep_prob)
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    return ad.mul(x, Tensor(dropout_mask(x.shape, keep_prob, rng)))


@dataclass(eq=False)
class DenseLayer:
    weights: Tensor
    bias: Tensor
    activation: str = "leaky_relu"
    dropout: bool = False
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @classmethod
    def create(
        cls,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        activation: str = "leaky_relu",
        dropout: bool = False,
        slope: float = DEFAULT_SLOPE,
    ) -> "DenseLayer":
        return cls(
            weights=Tensor.parameter(glorot_uniform(n_in, n_out, rng)),
            bias=Tensor.parameter(np.zeros(n_out)),
            activation=activation,
            dropout=dropout,
            slope=slope,
        )

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def __call__(self, x, training=False, keep_prob=1.0, rng=None) -> Tensor:
        return dense_forward(self, x, training, keep_prob, rng)


def dense_forward(
    layer: DenseLayer,
    x: Tensor,
    training: bool = False,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``activation(x @ W + b)``, followed by dropout on hidden layers in training."""
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != layer.n_in:
        raise DimensionError(f"dense layer expects {layer.n_in} input columns, got shape {x.shape}")
    _check_keep(keep_prob)
    scale = None
    if layer.dropout and training and keep_prob < 1.0:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng")
        scale = dropout_mask(x.shape[:-1] + (layer.n_out,), keep_prob, rng)
    return ad.dense(x, layer.weights, layer.bias, layer.activation, layer.slope, scale)


def normalize_direction(direction) -> str:
    """Map the accepted spellings of a mapping direction to ``"12"`` or ``"21"``."""
    key = str(direction).replace("->", "").replace(" ", "")
    if key in ("12", "21"):
        return key
    raise ContractError(f"unknown direction {direction!r}; use 12 or 21")


@dataclass(eq=False)
class GeneratorPair:
    """G12 and G21 with a single shared middle layer.

    G12 runs ``in1 -> core -> out2`` and G21 runs ``in2 -> core -> out1``;
    both directions hold a reference to the same ``core`` object, so an
    update through either path is seen by the other.
    """

    in1: DenseLayer
    in2: DenseLayer
    core: DenseLayer
    out1: DenseLayer
    out2: DenseLayer

    def __post_init__(self):
        h = self.core.n_in
        if self.in1.n_out != h or self.in2.n_out != h or self.core.n_out != self.out1.n_in:
            raise DimensionError("generator adapter widths do not match the shared core")
        if self.out1.n_in != self.out2.n_in:
            raise DimensionError("output adapters disagree on the core width")
        if self.out1.activation != "linear" or self.out2.activation != "linear":
            raise ConfigError("generator output layers must be linear")

    @classmethod
    def create(
        cls,
        dim1: int,
        dim2: int,
        hidden: int,
        rng: np.random.Generator,
        slope: float = DEFAULT_SLOPE,
    ) -> "GeneratorPair":
        def hid(n_in, n_out):
            return DenseLayer.create(n_in, n_out, rng, "leaky_relu", dropout=True, slope=slope)

        return cls(
            in1=hid(dim1, hidden),
            in2=hid(dim2, hidden),
            core=hid(hidden, hidden),
            out1=DenseLayer.create(hidden, dim1, rng, "linear"),
            out2=DenseLayer.create(hidden, dim2, rng, "linear"),
        )

    @property
    def dim1(self) -> int:
        return self.in1.n_in

    @property
    def dim2(self) -> int:
        return self.in2.n_in

    def path(self, direction) -> tuple[DenseLayer, DenseLayer, DenseLayer]:
        if normalize_direction(direction) == "12":
            return (self.in1, self.core, self.out2)
        return (self.in2, self.core, self.out1)

    def named_layers(self) -> dict[str, DenseLayer]:
        return {"in1": self.in1, "in2": self.in2, "core": self.core, "out1": self.out1, "out2": self.out2}

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.named_layers().values() for p in layer.parameters()]

    def __call__(self, x, direction, training=False, keep_prob=1.0, rng=None) -> Tensor:
        return generator_forward(self, x, direction, training, keep_prob, rng)


def generator_forward(
    pair: GeneratorPair,
    x: Tensor,
    direction,
    training: bool = False,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = ad.as_tensor(x)
    for layer in pair.path(direction):
        h = dense_forward(layer, h, training, keep_prob, rng)
    return h


def shared_params_view(pair: GeneratorPair) -> list[Tensor]:
    """The shared-core parameter tensors, one storage for both directions."""
    return pair.core.parameters()


def untied_parameter_count(dim1: int, dim2: int, hidden: int) -> int:
    """Parameters two independent 3-layer generators of the same widths would need."""

    def mlp(d_in, d_out):
        return (d_in * hidden + hidden) + (hidden * hidden + hidden) + (hidden * d_out + d_out)

    return mlp(dim1, dim2) + mlp(dim2, dim1)


@dataclass(eq=False)
class Discriminator:
    """Five dense layers ending in a sigmoid, plus a minibatch-statistics branch.

    The branch looks at the batch transposed: for every input feature it
    takes the mean and standard deviation over the rows, maps that vector
    through one dense layer, and the result is appended to every row's
    hidden state before the last two trunk layers. Batch statistics are
    invariant to row order, so the scores are permutation equivariant.
    """

    trunk: list[DenseLayer]
    minibatch: DenseLayer
    n_features: int = field(init=False)

    def __post_init__(self):
        if len(self.trunk) != 5:
            raise ConfigError(f"discriminator trunk needs 5 layers, got {len(self.trunk)}")
        self.n_features = self.trunk[0].n_in
        if self.minibatch.n_in != 2 * self.n_features:
            raise DimensionError("minibatch branch input must be twice the feature count")
        if self.trunk[3].n_in != self.trunk[2].n_out + self.minibatch.n_out:
            raise DimensionError("fourth trunk layer must accept trunk + minibatch features")
        if self.trunk[-1].n_out != 1 or self.trunk[-1].activation != "sigmoid":
            raise ConfigError("discriminator output must be a single sigmoid unit")

    @classmethod
    def create(
        cls,
        dim: int,
        hidden: int,
        rng: np.random.Generator,
        minibatch_features: int = 16,
        slope: float = DEFAULT_SLOPE,
    ) -> "Discriminator":
        def hid(n_in, n_out):
            return DenseLayer.create(n_in, n_out, rng, "leaky_relu", dropout=True, slope=slope)

        trunk = [
            hid(dim, hidden),
            hid(hidden, hidden),
            hid(hidden, hidden),
            hid(hidden + minibatch_features, hidden),
            DenseLayer.create(hidden, 1, rng, "sigmoid"),
        ]
        branch = DenseLayer.create(2 * dim, minibatch_features, rng, "leaky_relu", slope=slope)
        return cls(trunk=trunk, minibatch=branch)

    def named_layers(self) -> dict[str, DenseLayer]:
        layers = {f"trunk{i}": layer for i, layer in enumerate(self.trunk)}
        layers["minibatch"] = self.minibatch
        return layers

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.named_layers().values() for p in layer.parameters()]

    def __call__(self, x, training=False, keep_prob=1.0, rng=None) -> Tensor:
        return discriminator_forward(self, x, training, keep_prob, rng)


def minibatch_features(d: Discriminator, x: Tensor) -> Tensor:
    """Per-feature mean and std over the batch axis, mapped to a fixed width."""
    return dense_forward(d.minibatch, ad.batch_moments(x, _STD_EPS))


def discriminator_forward(
    d: Discriminator,
    x: Tensor,
    training: bool = False,
    keep_prob: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-row scores in (0, 1) for a ``batch x features`` matrix.

    Leading axes are treated as independent minibatches, each with its
    own batch statistics.
    """
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ContractError(f"discriminator needs a non-empty batch, got shape {x.shape}")
    if x.shape[-1] != d.n_features:
        raise DimensionError(f"discriminator expects {d.n_features} columns, got shape {x.shape}")
    h = x
    for layer in d.trunk[:3]:
        h = dense_forward(layer, h, training, keep_prob, rng)
    h = ad.append_broadcast(h, minibatch_features(d, x))
    h = dense_forward(d.trunk[3], h, training, keep_prob, rng)
    return dense_forward(d.trunk[4], h, training, keep_prob, rng)
