"""Model container: bit-exact serialization and content hashing.

Layout (all integers little-endian):

    magic  b"CLF1"
    u32    container version (currently 1)
    u64    header length in bytes
    header UTF-8 JSON, sorted keys
    blobs  raw parameter bytes, concatenated in header order

The header describes the architecture (per-layer shapes, BN presence,
activation flags), the input contract (bit depth, qp max), provenance
(seed, config digest) and a blob table with dtype, shape and byte length
for every parameter tensor.  Float parameters are stored as ``<f8`` so a
save/load round trip is bit-exact; mantissas are stored at their natural
width (``<i1`` weights, ``<i4`` biases).  The model hash is the SHA-256
of the serialized byte stream, so it is stable across platforms.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .errors import ModelFormatError
from .dfp import DFPLayer, DFPModel, FLTable
from .network import Layer, NetworkConfig, NetworkModel
from .tensor import BNParams, ConvParams

MAGIC = b"CLF1"
VERSION = 1


def _config_dict(config: NetworkConfig) -> dict:
    return {
        "num_conv_layers": config.num_conv_layers,
        "kernel_size": config.kernel_size,
        "base_filters": config.base_filters,
        "per_layer_filters": list(config.per_layer_filters),
        "bit_depth": config.bit_depth,
        "qp_max": config.qp_max,
    }


def _config_from_dict(d: dict) -> NetworkConfig:
    return NetworkConfig(
        num_conv_layers=d["num_conv_layers"],
        kernel_size=d["kernel_size"],
        base_filters=d["base_filters"],
        per_layer_filters=tuple(d["per_layer_filters"]),
        bit_depth=d["bit_depth"],
        qp_max=d["qp_max"],
    )


def _serialize(model, provenance: dict | None) -> bytes:
    blobs = []
    blob_table = []

    def add(name, array, dtype):
        arr = np.ascontiguousarray(np.asarray(array), dtype=dtype)
        blob_table.append({"name": name, "dtype": dtype,
                           "shape": list(arr.shape), "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())

    header: dict = {"provenance": provenance or {}}
    if isinstance(model, NetworkModel):
        header["kind"] = "float"
        header["config"] = _config_dict(model.config)
        layer_desc = []
        for i, layer in enumerate(model.layers):
            desc = {"out": layer.conv.out_channels, "in": layer.conv.in_channels,
                    "k": layer.conv.kernel_size, "relu": layer.relu,
                    "has_bn": layer.bn is not None}
            add(f"layer{i}.weights", layer.conv.weights, "<f8")
            add(f"layer{i}.bias", layer.conv.bias, "<f8")
            if layer.bn is not None:
                desc["bn_epsilon"] = layer.bn.epsilon
                desc["bn_momentum"] = layer.bn.momentum
                add(f"layer{i}.bn_scale", layer.bn.scale, "<f8")
                add(f"layer{i}.bn_shift", layer.bn.shift, "<f8")
                add(f"layer{i}.bn_mean", layer.bn.running_mean, "<f8")
                add(f"layer{i}.bn_var", layer.bn.running_var, "<f8")
            layer_desc.append(desc)
        header["layers"] = layer_desc
    elif isinstance(model, DFPModel):
        header["kind"] = "dfp"
        header["config"] = _config_dict(model.config)
        header["fl_table"] = model.fl_table.to_dict()
        layer_desc = []
        for i, layer in enumerate(model.layers):
            layer_desc.append({"out": layer.weights_m.shape[0],
                               "in": layer.weights_m.shape[1],
                               "k": layer.weights_m.shape[2], "relu": layer.relu})
            add(f"layer{i}.weights_m", layer.weights_m, "<i1")
            add(f"layer{i}.bias_m", layer.bias_m, "<i4")
        header["layers"] = layer_desc
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")

    header["blobs"] = blob_table
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<Q", len(header_bytes)))
    out.write(header_bytes)
    for b in blobs:
        out.write(b)
    return out.getvalue()


def save_model(model, path, provenance: dict | None = None) -> None:
    """Write a float or DFP model; load reproduces it bit-exactly."""
    with open(path, "wb") as f:
        f.write(_serialize(model, provenance))


def model_hash(model) -> str:
    """SHA-256 hex digest over the canonical serialization."""
    return hashlib.sha256(_serialize(model, provenance=None)).hexdigest()


def load_model(path):
    """Read a model container; returns NetworkModel or DFPModel.

    Raises :class:`ModelFormatError` with the failing byte offset for
    corrupt or truncated files, and a distinct message on version
    mismatch.  Never returns a partially read model.
    """
    data = open(path, "rb").read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model container (bad magic)", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported container version {version} "
                               f"(this build reads {VERSION})", offset=4)
    (header_len,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + header_len:
        raise ModelFormatError(f"{path}: truncated header", offset=len(data))
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})", offset=16) from None
    pos = 16 + header_len
    arrays = {}
    for entry in header["blobs"]:
        nbytes = entry["nbytes"]
        if len(data) < pos + nbytes:
            raise ModelFormatError(f"{path}: truncated blob {entry['name']!r}", offset=pos)
        arr = np.frombuffer(data[pos:pos + nbytes], dtype=entry["dtype"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)

    config = _config_from_dict(header["config"])
    if header["kind"] == "float":
        layers = []
        for i, desc in enumerate(header["layers"]):
            conv = ConvParams(arrays[f"layer{i}.weights"].astype(np.float64),
                              arrays[f"layer{i}.bias"].astype(np.float64))
            bn = None
            if desc["has_bn"]:
                bn = BNParams(arrays[f"layer{i}.bn_scale"], arrays[f"layer{i}.bn_shift"],
                              arrays[f"layer{i}.bn_mean"], arrays[f"layer{i}.bn_var"],
                              epsilon=desc["bn_epsilon"], momentum=desc["bn_momentum"])
            layers.append(Layer(conv, bn, desc["relu"]))
        return NetworkModel(config, layers)
    if header["kind"] == "dfp":
        fl_table = FLTable.from_dict(header["fl_table"])
        layers = []
        for i, desc in enumerate(header["layers"]):
            layers.append(DFPLayer(arrays[f"layer{i}.weights_m"].astype(np.int64),
                                   arrays[f"layer{i}.bias_m"].astype(np.int64),
                                   desc["relu"]))
        return DFPModel(config, layers, fl_table)
    raise ModelFormatError(f"{path}: unknown model kind {header['kind']!r}", offset=16)
