"""Dynamic fixed-point representation and the integer-only inference path.

A dynamic fixed-point value is an integer mantissa ``m`` in a two's
complement range ``[-2^(B-1), 2^(B-1) - 1]`` together with a per-group
fractional length ``fl``; the represented value is ``m * 2^-fl``.
Weights use 8 bits, biases 32, layer inputs/outputs 16.  Each group in a
layer shares one ``fl``, estimated from the largest magnitude the group
has to carry.

Inference runs entirely on integers: inputs become 16-bit mantissas at
fl 15, each convolution accumulates 8x16-bit products in 64-bit signed
arithmetic, biases are aligned by exact left shift, accumulators are
requantized to 16 bits between layers (round half away from zero,
saturating), the residual add saturates at 16 bits, and denormalization
is an integer scale-and-shift.  Because integer addition is associative,
results are bit-identical for any worker partitioning, which is the
point: encoder and decoder agree across platforms by construction.

A float-simulation mode mirrors the historical practice of emulating
fixed point with floating point; every intermediate fits in 53 bits so
it reproduces the integer mantissas exactly (asserted in tests).
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ModelFormatError, ShapeError, VerificationError
from .network import NetworkConfig, NetworkModel, forward_network, normalize_inputs
from .tensor import round_half_away

WEIGHT_BITS = 8
BIAS_BITS = 32
OUTPUT_BITS = 16
INPUT_FL = 15
HASH_NAME = "sha256"

CONFORMANCE_MAGIC = b"CNFV"
CONFORMANCE_VERSION = 1


@dataclass(frozen=True)
class DFPFormat:
    """Bit width and fractional length of one mantissa group."""

    bit_width: int
    fl: int

    @property
    def min_mantissa(self) -> int:
        return -(1 << (self.bit_width - 1))

    @property
    def max_mantissa(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


def quantize_value(v, fmt: DFPFormat) -> np.ndarray:
    """Real value(s) to clamped integer mantissa(s), rounding half away from zero."""
    t = np.asarray(v, dtype=np.float64) * (2.0 ** fmt.fl)
    m = np.trunc(t + np.copysign(0.5, t))
    return np.clip(m, fmt.min_mantissa, fmt.max_mantissa).astype(np.int64)


def dequantize_value(m, fmt: DFPFormat) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) * (2.0 ** -fmt.fl)


def estimate_fl(values, bit_width: int) -> int:
    """Largest fractional length at which the maximum magnitude does not clip.

    All-zero input yields the maximum-precision choice ``bit_width - 1``.
    """
    a = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if not np.isfinite(a):
        raise DataError("cannot estimate a fractional length from non-finite values")
    if a == 0.0:
        return bit_width - 1
    limit = (1 << (bit_width - 1)) - 1
    fl = bit_width - 1 - int(np.ceil(np.log2(a)))
    while round_half_away(a * 2.0 ** fl) > limit:
        fl -= 1
    while round_half_away(a * 2.0 ** (fl + 1)) <= limit:
        fl += 1
    return fl


def requantize(acc, from_fl: int, to_format: DFPFormat):
    """Shift a wide accumulator down to a narrower format, saturating.

    Integer-only round half away from zero:
    ``sign(acc) * ((|acc| + 2^(shift-1)) >> shift)`` with
    ``shift = from_fl - to_format.fl``.  Upscaling (negative shift) is
    never needed in this pipeline and is rejected.
    """
    shift = from_fl - to_format.fl
    if shift < 0:
        raise ConfigError(f"requantize cannot upscale: from fl {from_fl} to fl {to_format.fl}")
    acc = np.asarray(acc, dtype=np.int64)
    if shift == 0:
        m = acc
    else:
        offset = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(acc) + offset) >> np.int64(shift)
        m = np.where(acc < 0, -mag, mag)
    return np.clip(m, to_format.min_mantissa, to_format.max_mantissa)


@dataclass(frozen=True)
class LayerFL:
    """Fractional lengths of one conv layer's weights, bias and output."""

    fl_w: int
    fl_b: int
    fl_o: int


@dataclass
class FLTable:
    """Per-layer fractional lengths plus the shared concat / summation fl."""

    layers: list
    fl_concat: int = INPUT_FL
    fl_sum: int = INPUT_FL

    def check_complete(self, num_layers: int) -> None:
        if len(self.layers) != num_layers:
            raise ConfigError(
                f"FL table covers {len(self.layers)} layers, model has {num_layers}")
        for i, e in enumerate(self.layers):
            for name in ("fl_w", "fl_b", "fl_o"):
                v = getattr(e, name)
                if not isinstance(v, (int, np.integer)):
                    raise ConfigError(f"layer {i + 1} {name} is not an integer: {v!r}")

    def to_dict(self) -> dict:
        return {
            "layers": [{"fl_w": e.fl_w, "fl_b": e.fl_b, "fl_o": e.fl_o} for e in self.layers],
            "fl_concat": self.fl_concat,
            "fl_sum": self.fl_sum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FLTable":
        return cls([LayerFL(int(e["fl_w"]), int(e["fl_b"]), int(e["fl_o"]))
                    for e in d["layers"]],
                   int(d.get("fl_concat", INPUT_FL)), int(d.get("fl_sum", INPUT_FL)))


def reference_fl_8layer() -> FLTable:
    """Fractional lengths estimated for the original 8-layer 64-filter model.

    Shipped as a loadable preset for that architecture; not a derivation
    target for models trained here.
    """
    fl_w = [9, 8, 8, 8, 8, 8, 8, 10]
    fl_b = [17, 15, 14, 16, 15, 13, 13, 16]
    fl_o = [15, 14, 14, 15, 15, 15, 16, 18]
    return FLTable([LayerFL(w, b, o) for w, b, o in zip(fl_w, fl_b, fl_o)])


def _calibration_max_abs(model: NetworkModel, calibration) -> list:
    """Max |conv output| per layer (before ReLU) over all calibration planes."""
    maxima = [0.0] * len(model.layers)
    count = 0
    for plane, qp in calibration:
        recon, qpmap = normalize_inputs(np.asarray(plane), qp, model.config)
        inp = np.stack([recon, qpmap])[None]
        _, caches = forward_network(model, inp, mode="infer", keep_cache=True)
        for i, cache in enumerate(caches):
            maxima[i] = max(maxima[i], float(np.abs(cache["pre_relu"]).max()))
        count += 1
    if count == 0:
        raise ConfigError("calibration set is empty")
    return maxima


def build_fl_table(model: NetworkModel, calibration) -> FLTable:
    """Estimate per-layer fractional lengths for a BN-folded model.

    Weight and bias fl come from the parameter tensors, output fl from
    the largest conv-output magnitude observed on the calibration planes.
    Constraints forced by the integer pipeline: the bias fl never exceeds
    the accumulator fl (bias alignment must be an exact left shift), the
    output fl never exceeds the accumulator fl (requantization only
    shifts down), and the final layer's output fl is at least the
    summation fl so the residual add can requantize down onto it.
    """
    if model.has_bn:
        raise ConfigError("build_fl_table expects a BN-folded model")
    maxima = _calibration_max_abs(model, calibration)
    entries = []
    fl_in = INPUT_FL
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        fl_w = estimate_fl(layer.conv.weights, WEIGHT_BITS)
        fl_acc = fl_w + fl_in
        fl_b = min(estimate_fl(layer.conv.bias, BIAS_BITS), fl_acc)
        fl_o = min(estimate_fl(maxima[i], OUTPUT_BITS), fl_acc)
        if i == last:
            fl_o = max(fl_o, INPUT_FL)
            if fl_o > fl_acc:
                raise ConfigError(
                    f"final layer accumulator fl {fl_acc} below the summation fl {INPUT_FL}")
        entries.append(LayerFL(fl_w, fl_b, fl_o))
        fl_in = fl_o
    return FLTable(entries)


@dataclass
class DFPLayer:
    """Integer mantissas of one conv layer plus its activation flag."""

    weights_m: np.ndarray
    bias_m: np.ndarray
    relu: bool


@dataclass
class DFPModel:
    """The deterministic artifact: all parameters as integer mantissas.

    Mirrors a BN-folded NetworkModel layer for layer.  Every weight
    mantissa fits 8 bits, every bias mantissa 32 bits, activations run at
    16 bits with the fractional lengths recorded in ``fl_table``.
    """

    config: NetworkConfig
    layers: list
    fl_table: FLTable

    def __post_init__(self):
        self.fl_table.check_complete(len(self.layers))
        wfmt_range = (-(1 << (WEIGHT_BITS - 1)), (1 << (WEIGHT_BITS - 1)) - 1)
        bfmt_range = (-(1 << (BIAS_BITS - 1)), (1 << (BIAS_BITS - 1)) - 1)
        for i, layer in enumerate(self.layers):
            if layer.weights_m.min() < wfmt_range[0] or layer.weights_m.max() > wfmt_range[1]:
                raise ConfigError(f"layer {i + 1} weight mantissas exceed {WEIGHT_BITS}-bit range")
            if layer.bias_m.size and (layer.bias_m.min() < bfmt_range[0]
                                      or layer.bias_m.max() > bfmt_range[1]):
                raise ConfigError(f"layer {i + 1} bias mantissas exceed {BIAS_BITS}-bit range")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def dequantized(self) -> NetworkModel:
        """Float model carrying the exact values the integer path computes with."""
        from .network import Layer
        from .tensor import ConvParams
        layers = []
        for layer, fl in zip(self.layers, self.fl_table.layers):
            w = dequantize_value(layer.weights_m, DFPFormat(WEIGHT_BITS, fl.fl_w))
            b = dequantize_value(layer.bias_m, DFPFormat(BIAS_BITS, fl.fl_b))
            layers.append(Layer(ConvParams(w, b), None, layer.relu))
        return NetworkModel(self.config, layers)


def quantize_model(model: NetworkModel, fl_table: FLTable) -> DFPModel:
    """Quantize a BN-folded model's parameters onto their fixed-point grids."""
    if model.has_bn:
        raise ConfigError("quantize_model expects a BN-folded model; call fold_batchnorm first")
    fl_table.check_complete(len(model.layers))
    layers = []
    for layer, fl in zip(model.layers, fl_table.layers):
        w_m = quantize_value(layer.conv.weights, DFPFormat(WEIGHT_BITS, fl.fl_w))
        b_m = quantize_value(layer.conv.bias, DFPFormat(BIAS_BITS, fl.fl_b))
        layers.append(DFPLayer(w_m, b_m, layer.relu))
    return DFPModel(model.config, layers, fl_table)


def _pad_edge_chw(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)), mode="edge")


def _conv_rows(weights, xp, bias_aligned, row0, row1, width, shift_fn=None):
    """Accumulate conv rows [row0, row1) from the padded input; int64 exact."""
    k = weights.shape[2]
    rows = row1 - row0
    acc = None
    for ky in range(k):
        for kx in range(k):
            part = np.tensordot(weights[:, :, ky, kx],
                                xp[:, row0 + ky:row0 + ky + rows, kx:kx + width],
                                axes=([1], [0]))
            acc = part if acc is None else acc + part
    return acc + bias_aligned[:, None, None]


def _shift_round_half_away(v, shift: int, float_mode: bool):
    """(|v| + 2^(shift-1)) >> shift with the sign restored; exact in both modes."""
    if shift == 0:
        return v
    if float_mode:
        mag = np.floor((np.abs(v) + 2.0 ** (shift - 1)) / 2.0 ** shift)
        return np.where(v < 0, -mag, mag)
    offset = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(v) + offset) >> np.int64(shift)
    return np.where(v < 0, -mag, mag)


def input_mantissas(plane: np.ndarray, qp: int, config: NetworkConfig):
    """Integer-exact 16-bit mantissas (fl 15) of the normalized inputs."""
    plane = np.asarray(plane)
    pmax = config.pixel_max
    if plane.ndim != 2:
        raise ShapeError(f"plane must be 2-d, got shape {plane.shape}")
    if plane.min() < 0 or plane.max() > pmax:
        raise DataError(f"pixel values outside [0, {pmax}]")
    if not (0 <= qp <= config.qp_max):
        raise DataError(f"qp {qp} outside [0, {config.qp_max}]")
    scale = 1 << (INPUT_FL + 1)
    hi = (1 << (OUTPUT_BITS - 1)) - 1
    recon_m = (plane.astype(np.int64) * scale + pmax) // (2 * pmax)
    recon_m = np.minimum(recon_m, hi)
    qp_m = min((int(qp) * scale + config.qp_max) // (2 * config.qp_max), hi)
    return recon_m, np.int64(qp_m)


def dfp_forward(model: DFPModel, plane: np.ndarray, qp: int, threads: int = 1,
                simulate_float: bool = False, check_overflow: bool = False) -> np.ndarray:
    """Integer-only filtering of one plane; bit-identical for any thread count.

    ``simulate_float`` carries the very same integer mantissas in float64
    (every intermediate fits 53 bits, so the results are identical); it
    exists to demonstrate equivalence with float-emulated fixed point.
    """
    cfg = model.config
    recon_m, qp_m = input_mantissas(plane, qp, cfg)
    h, w = recon_m.shape
    dtype = np.float64 if simulate_float else np.int64
    x = np.empty((2, h, w), dtype=dtype)
    x[0] = recon_m
    x[1] = qp_m
    fl_in = model.fl_table.fl_concat
    out_fmt = DFPFormat(OUTPUT_BITS, 0)
    for layer, fl in zip(model.layers, model.fl_table.layers):
        weights = layer.weights_m.astype(dtype)
        k = weights.shape[2]
        fl_acc = fl.fl_w + fl_in
        bshift = fl_acc - fl.fl_b
        if bshift < 0:
            raise ConfigError(
                f"bias fl {fl.fl_b} exceeds accumulator fl {fl_acc}; table is inconsistent")
        if simulate_float:
            bias_aligned = layer.bias_m.astype(dtype) * 2.0 ** bshift
        else:
            bias_aligned = layer.bias_m.astype(np.int64) << np.int64(bshift)
        xp = _pad_edge_chw(x, k)
        cout = weights.shape[0]
        acc = np.empty((cout, h, w), dtype=dtype)
        if threads <= 1 or h < 2 * threads:
            acc[:] = _conv_rows(weights, xp, bias_aligned, 0, h, w)
        else:
            bounds = np.linspace(0, h, threads + 1, dtype=int)
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [
                    pool.submit(_conv_rows, weights, xp, bias_aligned, int(r0), int(r1), w)
                    for r0, r1 in zip(bounds[:-1], bounds[1:]) if r1 > r0
                ]
                row = 0
                for fut in futures:
                    part = fut.result()
                    acc[:, row:row + part.shape[1]] = part
                    row += part.shape[1]
        if check_overflow and not simulate_float:
            if np.abs(acc).max() > (1 << 62):
                raise ArithmeticError("64-bit accumulator overflow detected")
        shift = fl_acc - fl.fl_o
        if shift < 0:
            raise ConfigError(f"output fl {fl.fl_o} exceeds accumulator fl {fl_acc}")
        m = _shift_round_half_away(acc, shift, simulate_float)
        m = np.clip(m, out_fmt.min_mantissa, out_fmt.max_mantissa)
        if layer.relu:
            m = np.maximum(m, 0)
        x = m
        fl_in = fl.fl_o
    # summation layer: bring the residual down to the input grid and add
    shift = fl_in - model.fl_table.fl_sum
    if shift < 0:
        raise ConfigError(f"final output fl {fl_in} below the summation fl")
    resid = np.clip(_shift_round_half_away(x[0], shift, simulate_float),
                    out_fmt.min_mantissa, out_fmt.max_mantissa)
    total = np.clip(resid + recon_m.astype(dtype), out_fmt.min_mantissa, out_fmt.max_mantissa)
    pmax = cfg.pixel_max
    if simulate_float:
        pixels = np.floor((total * pmax + 2.0 ** (INPUT_FL - 1)) / 2.0 ** INPUT_FL)
    else:
        pixels = (total * np.int64(pmax) + (np.int64(1) << np.int64(INPUT_FL - 1))) \
            >> np.int64(INPUT_FL)
    pixels = np.clip(pixels, 0, pmax)
    return pixels.astype(np.uint8 if cfg.bit_depth <= 8 else np.uint16)


def plane_bytes(plane: np.ndarray, bit_depth: int) -> bytes:
    """Canonical little-endian byte serialization of an integer plane."""
    dtype = "<u1" if bit_depth <= 8 else "<u2"
    return np.ascontiguousarray(plane.astype(dtype)).tobytes()


def verify_determinism(model: DFPModel, corpus, threads: int = 1) -> str:
    """Canonical digest over all filtered output planes, in corpus order."""
    digest = hashlib.new(HASH_NAME)
    for plane, qp in corpus:
        out = dfp_forward(model, plane, qp, threads=threads)
        digest.update(plane_bytes(out, model.config.bit_depth))
    return digest.hexdigest()


@dataclass
class ConformanceEntry:
    """One frozen (input plane, qp, expected output) conformance vector."""

    plane: np.ndarray
    qp: int
    output_hash: bytes
    output: np.ndarray


def make_conformance(model: DFPModel, corpus, threads: int = 1) -> list:
    entries = []
    for plane, qp in corpus:
        out = dfp_forward(model, plane, qp, threads=threads)
        out_bytes = plane_bytes(out, model.config.bit_depth)
        entries.append(ConformanceEntry(np.asarray(plane), int(qp),
                                        hashlib.new(HASH_NAME, out_bytes).digest(), out))
    return entries


def corpus_digest(entries) -> str:
    digest = hashlib.new(HASH_NAME)
    for e in entries:
        digest.update(plane_bytes(e.output, 8 if e.output.dtype == np.uint8 else 16))
    return digest.hexdigest()


def write_conformance(path, entries, bit_depth: int = 8) -> None:
    """Binary conformance container; layout documented in the package README.

    Header: magic ``CNFV``, u16 version, u16 hash-name length, hash name.
    Then u32 entry count; per entry u32 width, u32 height, u16 bit depth,
    u16 qp, the raw input plane (little-endian), the 32-byte expected
    output hash, and the expected output plane for pixel-level diffing.
    A 32-byte digest over all output planes closes the file.
    """
    with open(path, "wb") as f:
        f.write(CONFORMANCE_MAGIC)
        f.write(struct.pack("<HH", CONFORMANCE_VERSION, len(HASH_NAME)))
        f.write(HASH_NAME.encode("ascii"))
        f.write(struct.pack("<I", len(entries)))
        for e in entries:
            hgt, wid = e.plane.shape
            f.write(struct.pack("<IIHH", wid, hgt, bit_depth, e.qp))
            f.write(plane_bytes(e.plane, bit_depth))
            f.write(e.output_hash)
            f.write(plane_bytes(e.output, bit_depth))
        f.write(bytes.fromhex(corpus_digest(entries)))


def read_conformance(path) -> list:
    data = open(path, "rb").read()
    if data[:4] != CONFORMANCE_MAGIC:
        raise ModelFormatError("not a conformance container (bad magic)", offset=0)
    version, hlen = struct.unpack_from("<HH", data, 4)
    if version != CONFORMANCE_VERSION:
        raise ModelFormatError(f"unsupported conformance version {version}", offset=4)
    pos = 8
    name = data[pos:pos + hlen].decode("ascii")
    if name != HASH_NAME:
        raise ModelFormatError(f"unsupported hash algorithm {name!r}", offset=pos)
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    try:
        for _ in range(count):
            wid, hgt, depth, qp = struct.unpack_from("<IIHH", data, pos)
            pos += 12
            nbytes = wid * hgt * (1 if depth <= 8 else 2)
            dtype = "<u1" if depth <= 8 else "<u2"
            plane = np.frombuffer(data[pos:pos + nbytes], dtype=dtype).reshape(hgt, wid)
            pos += nbytes
            out_hash = data[pos:pos + 32]
            if len(out_hash) != 32:
                raise ModelFormatError("truncated conformance entry", offset=pos)
            pos += 32
            output = np.frombuffer(data[pos:pos + nbytes], dtype=dtype).reshape(hgt, wid)
            pos += nbytes
            entries.append(ConformanceEntry(plane.copy(), qp, out_hash, output.copy()))
    except (ValueError, struct.error) as exc:
        raise ModelFormatError(f"truncated conformance container: {exc}", offset=pos) from None
    if len(data) < pos + 32:
        raise ModelFormatError("missing corpus digest", offset=pos)
    return entries


def replay_conformance(model: DFPModel, entries, threads: int = 1) -> str:
    """Re-run every stored vector; any mismatch names the plane and first pixel."""
    for i, e in enumerate(entries):
        out = dfp_forward(model, e.plane, e.qp, threads=threads)
        out_bytes = plane_bytes(out, model.config.bit_depth)
        if hashlib.new(HASH_NAME, out_bytes).digest() != e.output_hash:
            diff = np.nonzero(out != e.output)
            if diff[0].size:
                y, x = int(diff[0][0]), int(diff[1][0])
                raise VerificationError(
                    f"conformance mismatch at plane {i}, first differing pixel "
                    f"(y={y}, x={x}): got {int(out[y, x])}, expected {int(e.output[y, x])}")
            raise VerificationError(
                f"conformance mismatch at plane {i}: hash differs but stored output "
                f"matches; container is inconsistent")
    return corpus_digest(entries)
