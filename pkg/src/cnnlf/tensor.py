"""Dense tensor math for the loop-filter network.

Activations are float64 arrays in (N, C, H, W) order, kernels in
(Cout, Cin, Kh, Kw).  Only the five layer kinds the filter network needs
are provided: same-size convolution, batch normalization, ReLU, channel
concatenation and elementwise addition, each with an exact analytic
backward pass.

Convolutions are stride-1 and same-size.  Borders are handled with
replicate (edge) padding: an out-of-bounds tap reads the nearest edge
pixel.  Replicate padding keeps a constant input channel exactly constant
under convolution, which the channel-pruning bias fold in
:mod:`cnnlf.compress` relies on for bit-exact output preservation.

Per output element the accumulation order is fixed (a single dot product
over taps), so forward results are bit-identical run to run on one
platform regardless of internal threading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


@dataclass
class ConvParams:
    """Weights (Cout, Cin, k, k) and per-channel bias of one convolution.

    Stride is 1 and spatial size is preserved; the kernel must be square
    with odd side so the padding (k - 1) / 2 is integral.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d (Cout,Cin,Kh,Kw), got shape {self.weights.shape}")
        cout, _, kh, kw = self.weights.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd side, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ShapeError(f"bias length {self.bias.shape} does not match Cout={cout}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "ConvParams":
        return ConvParams(self.weights.copy(), self.bias.copy())


@dataclass
class BNParams:
    """Per-channel batch-normalization parameters.

    ``scale`` is the multiplicative parameter (gamma) whose magnitude drives
    filter pruning; ``shift`` is beta.  Running statistics are updated in
    training mode with ``r <- momentum * r + (1 - momentum) * batch_stat``
    using the biased batch variance.
    """

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        n = self.scale.shape
        for name, v in (("shift", self.shift), ("running_mean", self.running_mean),
                        ("running_var", self.running_var)):
            if v.shape != n:
                raise ShapeError(f"BN {name} length {v.shape} does not match scale length {n}")
        if np.any(self.running_var < 0.0):
            raise ShapeError("BN running_var must be nonnegative")

    @classmethod
    def identity(cls, channels: int) -> "BNParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def copy(self) -> "BNParams":
        return BNParams(self.scale.copy(), self.shift.copy(), self.running_mean.copy(),
                        self.running_var.copy(), self.epsilon, self.momentum)


def _check_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-d (N,C,H,W), got shape {x.shape}")
    n, cin, h, w = x.shape
    k = params.kernel_size
    if cin != params.in_channels:
        raise ShapeError(f"conv input has {cin} channels but weights expect {params.in_channels}")
    if h < k or w < k:
        raise ShapeError(f"spatial dims {h}x{w} smaller than kernel {k}x{k}")


def pad_same(x: np.ndarray, k: int) -> np.ndarray:
    """Replicate-pad the two trailing spatial axes by (k - 1) / 2 on each side."""
    p = (k - 1) // 2
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Same-size cross-correlation plus per-channel bias.

    Input (N, Cin, H, W) -> output (N, Cout, H, W).
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, params)
    n, _, h, w = x.shape
    k = params.kernel_size
    xp = pad_same(x, k)
    acc = np.zeros((params.out_channels, n, h, w))
    for ky in range(k):
        for kx in range(k):
            acc += np.tensordot(params.weights[:, :, ky, kx],
                                xp[:, :, ky:ky + h, kx:kx + w], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    out += params.bias[None, :, None, None]
    return out


def _fold_pad_grad(dxp: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    """Collapse gradients in the replicate-padded ring onto their source edge pixels.

    Replication clips each axis independently, so folding columns first and
    rows second is exact.
    """
    if p == 0:
        return dxp
    dxp = dxp.copy()
    dxp[:, :, :, p] += dxp[:, :, :, :p].sum(axis=3)
    dxp[:, :, :, w + p - 1] += dxp[:, :, :, w + p:].sum(axis=3)
    d = dxp[:, :, :, p:p + w]
    d[:, :, p] += d[:, :, :p].sum(axis=2)
    d[:, :, h + p - 1] += d[:, :, h + p:].sum(axis=2)
    return d[:, :, p:p + h, :]


def conv2d_grad(x: np.ndarray, params: ConvParams, upstream: np.ndarray):
    """Exact gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(x, params)
    n, _, h, w = x.shape
    k = params.kernel_size
    expected = (n, params.out_channels, h, w)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} does not match conv output {expected}")
    p = (k - 1) // 2
    xp = pad_same(x, k)
    d_w = np.zeros_like(params.weights)
    d_xp = np.zeros_like(xp)
    for ky in range(k):
        for kx in range(k):
            window = xp[:, :, ky:ky + h, kx:kx + w]
            d_w[:, :, ky, kx] = np.tensordot(upstream, window, axes=([0, 2, 3], [0, 2, 3]))
            d_xp[:, :, ky:ky + h, kx:kx + w] += np.tensordot(
                upstream, params.weights[:, :, ky, kx], axes=([1], [0])).transpose(0, 3, 1, 2)
    d_x = _fold_pad_grad(d_xp, h, w, p)
    d_bias = upstream.sum(axis=(0, 2, 3))
    return d_x, d_w, d_bias


def batchnorm(x: np.ndarray, params: BNParams, mode: str = "infer"):
    """Batch normalization.  Returns (output, batch_stats).

    ``mode='train'`` normalizes by batch statistics over (N, H, W), applies
    scale/shift, and updates the running statistics in place; it requires a
    batch of at least 2.  ``mode='infer'`` uses the stored running
    statistics only.  Zero variance is harmless: epsilon keeps the
    denominator positive.
    """
    out, stats, _ = batchnorm_forward(x, params, mode)
    return out, stats


def batchnorm_forward(x: np.ndarray, params: BNParams, mode: str = "infer"):
    """Like :func:`batchnorm` but also returns the cache used by the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-d (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != params.channels:
        raise ShapeError(f"batchnorm input has {x.shape[1]} channels, params expect {params.channels}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError(f"train-mode batchnorm needs batch size >= 2, got {x.shape[0]}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        params.running_mean[:] = m * params.running_mean + (1.0 - m) * mean
        params.running_var[:] = m * params.running_var + (1.0 - m) * var
    elif mode == "infer":
        mean = params.running_mean
        var = params.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    invstd = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = params.scale[None, :, None, None] * xhat + params.shift[None, :, None, None]
    stats = {"mean": mean.copy(), "var": var.copy()}
    cache = (xhat, invstd, params.scale.copy(), mode)
    return out, stats, cache


def batchnorm_backward(upstream: np.ndarray, cache):
    """Gradients of batchnorm w.r.t. input, scale and shift.

    In train mode the batch statistics depend on the input, so the full
    three-term expression is used; in infer mode the map is affine.
    """
    xhat, invstd, scale, mode = cache
    d_shift = upstream.sum(axis=(0, 2, 3))
    d_scale = (upstream * xhat).sum(axis=(0, 2, 3))
    d_xhat = upstream * scale[None, :, None, None]
    if mode == "infer":
        d_x = d_xhat * invstd[None, :, None, None]
        return d_x, d_scale, d_shift
    n, _, h, w = upstream.shape
    m = float(n * h * w)
    sum_dxhat = d_xhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (d_xhat * xhat).sum(axis=(0, 2, 3))
    d_x = (invstd[None, :, None, None] / m) * (
        m * d_xhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return d_x, d_scale, d_shift


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of relu; the subgradient at exactly zero is taken as zero."""
    return upstream * (np.asarray(x) > 0.0)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two activation tensors along the channel axis, ``a`` first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat expects 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat needs matching N,H,W: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise add needs identical shapes: {a.shape} vs {b.shape}")
    return a + b
