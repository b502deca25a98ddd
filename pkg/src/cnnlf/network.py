"""The filter network: a residual CNN conditioned on the quantization parameter.

The network takes two planes, the decoded reconstruction and a constant
QP map, both normalized to [0, 1].  They are concatenated into a
2-channel input and passed through a chain of convolution layers; all
but the last are followed by batch normalization and ReLU.  The last
layer produces a single-channel residual that is added back onto the
normalized reconstruction, so an all-zero network is an exact identity.

One model serves every QP and, because it is single-plane, luma and
chroma planes alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from . import tensor
from .tensor import BNParams, ConvParams


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and input-range description.

    ``per_layer_filters`` holds the output channel counts of layers
    1..L-1; the final layer always outputs one channel (the residual).
    Normalization divides pixels by ``2**bit_depth - 1`` so the maximum
    pixel maps exactly to 1.0, and the QP map by ``qp_max``.
    """

    num_conv_layers: int = 8
    kernel_size: int = 3
    base_filters: int = 64
    per_layer_filters: tuple = None
    bit_depth: int = 8
    qp_max: int = 51

    def __post_init__(self):
        if self.per_layer_filters is None:
            object.__setattr__(self, "per_layer_filters",
                               (self.base_filters,) * (self.num_conv_layers - 1))
        else:
            object.__setattr__(self, "per_layer_filters", tuple(self.per_layer_filters))
        if self.num_conv_layers < 2:
            raise ConfigError("need at least 2 conv layers (hidden + residual output)")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if len(self.per_layer_filters) != self.num_conv_layers - 1:
            raise ConfigError(
                f"per_layer_filters has {len(self.per_layer_filters)} entries, "
                f"expected {self.num_conv_layers - 1}")
        if any(f < 1 or f > self.base_filters for f in self.per_layer_filters):
            raise ConfigError(f"per-layer filter counts must lie in [1, {self.base_filters}]")
        if self.bit_depth < 1 or self.qp_max < 1:
            raise ConfigError("bit_depth and qp_max must be positive")

    @property
    def pixel_max(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def receptive_field(self) -> int:
        return 1 + self.num_conv_layers * (self.kernel_size - 1)


@dataclass
class Layer:
    """One stage of the chain: conv, optional BN, optional ReLU."""

    conv: ConvParams
    bn: BNParams | None
    relu: bool

    def copy(self) -> "Layer":
        return Layer(self.conv.copy(), self.bn.copy() if self.bn is not None else None, self.relu)


@dataclass
class NetworkModel:
    """Ordered layer chain plus the config describing its input contract."""

    config: NetworkConfig
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model has no layers")
        if self.layers[0].conv.in_channels != 2:
            raise ShapeError(
                f"first layer must take 2 input channels (reconstruction + QP map), "
                f"got {self.layers[0].conv.in_channels}")
        prev = None
        for i, layer in enumerate(self.layers):
            if prev is not None and layer.conv.in_channels != prev:
                raise ShapeError(
                    f"layer {i + 1} expects {layer.conv.in_channels} input channels "
                    f"but layer {i} outputs {prev}")
            if layer.bn is not None and layer.bn.channels != layer.conv.out_channels:
                raise ShapeError(
                    f"layer {i + 1} BN has {layer.bn.channels} channels, conv outputs "
                    f"{layer.conv.out_channels}")
            prev = layer.conv.out_channels
        if prev != 1:
            raise ShapeError(f"last layer must output 1 channel (residual), got {prev}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def has_bn(self) -> bool:
        return any(layer.bn is not None for layer in self.layers)

    def copy(self) -> "NetworkModel":
        return NetworkModel(self.config, [layer.copy() for layer in self.layers])


@dataclass(frozen=True)
class QPMap:
    """A constant plane carrying the quantization parameter as side information."""

    width: int
    height: int
    qp: int

    def plane(self) -> np.ndarray:
        return np.full((self.height, self.width), self.qp, dtype=np.int64)


def build_cnnf(config: NetworkConfig, rng_seed: int,
               zero_init_output: bool = True) -> NetworkModel:
    """Build a freshly initialized model; the same seed gives bit-identical models.

    Hidden weights use He-style fan-in scaling, biases start at zero, BN
    at identity (scale 1, shift 0, running mean 0, running var 1).  The
    output layer starts at zero by default so the residual network begins
    as an exact identity, which keeps early training stable; pass
    ``zero_init_output=False`` for fan-in scaling there too.
    """
    rng = np.random.default_rng(rng_seed)
    k = config.kernel_size
    channels = [2] + list(config.per_layer_filters) + [1]
    layers = []
    last = len(channels) - 2
    for i in range(len(channels) - 1):
        cin, cout = channels[i], channels[i + 1]
        std = np.sqrt(2.0 / (cin * k * k))
        weights = rng.normal(0.0, std, size=(cout, cin, k, k))
        if i == last and zero_init_output:
            weights = np.zeros_like(weights)
        conv = ConvParams(weights, np.zeros(cout))
        bn = BNParams.identity(cout) if i < last else None
        layers.append(Layer(conv, bn, relu=i < last))
    return NetworkModel(config, layers)


def normalize_inputs(plane: np.ndarray, qp: int, config: NetworkConfig):
    """Map an integer plane and a QP to the network's two [0, 1] input planes."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ShapeError(f"plane must be 2-d, got shape {plane.shape}")
    pmax = config.pixel_max
    if plane.min() < 0 or plane.max() > pmax:
        raise DataError(
            f"pixel values outside [0, {pmax}]: min={plane.min()}, max={plane.max()}")
    if not (0 <= qp <= config.qp_max):
        raise DataError(f"qp {qp} outside [0, {config.qp_max}]")
    recon = plane.astype(np.float64) / pmax
    qpmap = np.full(plane.shape, qp / config.qp_max, dtype=np.float64)
    return recon, qpmap


def forward_network(model: NetworkModel, inp: np.ndarray, mode: str = "infer",
                    keep_cache: bool = False, weight_override: list | None = None):
    """Run the conv chain plus residual add on a batched 2-channel input.

    Returns ``(output, caches)`` where output is (N, 1, H, W).  With
    ``keep_cache`` each layer contributes the intermediates its backward
    pass needs.  ``weight_override`` substitutes ConvParams per layer
    (used by quantization-aware training) without touching the model.
    """
    if inp.ndim != 4 or inp.shape[1] != 2:
        raise ShapeError(f"network input must be (N,2,H,W), got {inp.shape}")
    x = inp
    caches = [] if keep_cache else None
    for i, layer in enumerate(model.layers):
        conv = layer.conv if weight_override is None else weight_override[i]
        conv_in = x
        x = tensor.conv2d(x, conv)
        bn_cache = None
        if layer.bn is not None:
            x, _, bn_cache = tensor.batchnorm_forward(x, layer.bn, mode)
        pre_relu = x
        if layer.relu:
            x = tensor.relu(x)
        if keep_cache:
            caches.append({"conv_in": conv_in, "bn_cache": bn_cache, "pre_relu": pre_relu})
    out = tensor.add_elementwise(x, inp[:, :1])
    return out, caches


def forward_float(model: NetworkModel, recon: np.ndarray, qpmap: np.ndarray) -> np.ndarray:
    """Float inference on one plane; returns the unclamped filtered plane.

    ``recon`` and ``qpmap`` are the outputs of :func:`normalize_inputs`.
    """
    recon = np.asarray(recon, dtype=np.float64)
    qpmap = np.asarray(qpmap, dtype=np.float64)
    if recon.shape != qpmap.shape:
        raise ShapeError(f"recon {recon.shape} and qpmap {qpmap.shape} differ in size")
    if recon.ndim == 2:
        inp = tensor.concat_channels(recon[None, None], qpmap[None, None])
        out, _ = forward_network(model, inp, mode="infer")
        return out[0, 0]
    inp = tensor.concat_channels(recon, qpmap)
    out, _ = forward_network(model, inp, mode="infer")
    return out


def denormalize(output: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Back to integer pixels: scale, round half away from zero, clamp to range."""
    pmax = config.pixel_max
    pixels = tensor.round_half_away(np.asarray(output, dtype=np.float64) * pmax)
    pixels = np.clip(pixels, 0, pmax)
    dtype = np.uint8 if config.bit_depth <= 8 else np.uint16
    return pixels.astype(dtype)


def filter_plane(model: NetworkModel, plane: np.ndarray, qp: int) -> np.ndarray:
    """Full float filtering path: normalize, forward, denormalize."""
    recon, qpmap = normalize_inputs(plane, qp, model.config)
    return denormalize(forward_float(model, recon, qpmap), model.config)
