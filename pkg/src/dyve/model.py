"""Network description, weights, shape inference and the ``.dyve`` model file.

File layout (all little-endian)::

    b"DYVE" | version:u8 (=1) | manifest_len:u32 | manifest (UTF-8 JSON) | blob

The blob is a flat float32 array; manifest tensor entries give ``offset`` and
``length`` in float32 elements.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ModelFormatError,
    ShapeInferenceError,
    TruncatedBlobError,
    ValidationError,
    VersionMismatchError,
)

MAGIC = b"DYVE"
VERSION = 1

CONV = "Conv"
FC = "FullyConnected"
RELU = "ReLU"
MAXPOOL = "MaxPool"
SOFTMAX = "Softmax"
KINDS = (CONV, FC, RELU, MAXPOOL, SOFTMAX)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    window: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV and (self.kernel < 1 or self.in_channels < 1 or self.out_channels < 1):
            raise ValidationError("conv layer needs kernel, in_channels, out_channels >= 1")
        if self.kind == FC and (self.in_features < 1 or self.out_features < 1):
            raise ValidationError("fully connected layer needs in/out features >= 1")
        if self.kind == MAXPOOL and self.window < 1:
            raise ValidationError("max-pool window must be >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ValidationError("stride must be >= 1 and padding >= 0")

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV, FC)

    def to_dict(self) -> dict:
        keys = {
            CONV: ("in_channels", "out_channels", "kernel", "stride", "padding"),
            FC: ("in_features", "out_features"),
            MAXPOOL: ("window", "stride"),
        }.get(self.kind, ())
        return {"kind": self.kind, **{k: getattr(self, k) for k in keys}}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def Conv(in_channels, out_channels, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec(CONV, in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def FullyConnected(in_features, out_features) -> LayerSpec:
    return LayerSpec(FC, in_features=in_features, out_features=out_features)


def ReLU() -> LayerSpec:
    return LayerSpec(RELU)


def MaxPool(window, stride=None) -> LayerSpec:
    return LayerSpec(MAXPOOL, window=window, stride=window if stride is None else stride)


def Softmax() -> LayerSpec:
    return LayerSpec(SOFTMAX)


@dataclass
class LayerParams:
    """Weights of one Conv/FC layer.

    Conv weight is (out, in, k, k); FC weight is (out, in). For conv layers
    ``kernel_sum`` and ``kernel_abs_sum`` are (out, in) tables of per-slice
    sums, stored alongside the kernels.
    """

    weight: np.ndarray
    bias: np.ndarray
    kernel_sum: np.ndarray | None = None
    kernel_abs_sum: np.ndarray | None = None

    @classmethod
    def build(cls, weight, bias) -> "LayerParams":
        weight = np.ascontiguousarray(weight, dtype=np.float32)
        bias = np.ascontiguousarray(bias, dtype=np.float32)
        if weight.ndim == 4:
            ksum, kabs = kernel_sums(weight)
            return cls(weight, bias, ksum, kabs)
        return cls(weight, bias)


def kernel_sums(weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = weight.astype(np.float64)
    ksum = w.sum(axis=(2, 3)).astype(np.float32)
    kabs = np.abs(w).sum(axis=(2, 3)).astype(np.float32)
    return ksum, kabs


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[LayerParams | None]
    input_shape: tuple[int, ...]
    class_count: int
    shapes: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.params) != len(self.layers):
            raise ValidationError("params list must align with layers")
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if spec.has_params != (p is not None):
                raise ValidationError(f"layer {i} ({spec.kind}): params presence mismatch")
        self.shapes = infer_shapes(self)
        if int(np.prod(self.shapes[-1])) != self.class_count:
            raise ShapeInferenceError(
                f"final output has {int(np.prod(self.shapes[-1]))} values, expected {self.class_count}")
        for i, (spec, p) in enumerate(zip(self.layers, self.params)):
            if spec.kind == CONV:
                want = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
                if p.weight.shape != want or p.bias.shape != (spec.out_channels,):
                    raise ShapeInferenceError(f"layer {i}: conv weight {p.weight.shape} != {want}")
            elif spec.kind == FC:
                want = (spec.out_features, spec.in_features)
                if p.weight.shape != want or p.bias.shape != (spec.out_features,):
                    raise ShapeInferenceError(f"layer {i}: fc weight {p.weight.shape} != {want}")

    def input_shape_of(self, index: int) -> tuple[int, ...]:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def conv_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == CONV]

    def fc_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == FC]


def conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(net: Network) -> list[tuple[int, ...]]:
    """Per-layer output shapes; raises ShapeInferenceError naming the bad layer."""
    shape = tuple(net.input_shape)
    if len(shape) not in (1, 3) or min(shape) < 1:
        raise ShapeInferenceError(f"input shape {shape} must be rank 1 or 3 with dims >= 1")
    out = []
    for i, spec in enumerate(net.layers):
        where = f"layer {i} ({spec.kind})"
        if spec.kind == CONV:
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ShapeInferenceError(f"{where}: expects {spec.in_channels} channels, got input {shape}")
            h = conv_out(shape[1], spec.kernel, spec.stride, spec.padding)
            w = conv_out(shape[2], spec.kernel, spec.stride, spec.padding)
            if h < 1 or w < 1:
                raise ShapeInferenceError(f"{where}: kernel larger than padded input {shape}")
            shape = (spec.out_channels, h, w)
        elif spec.kind == FC:
            n = int(np.prod(shape))
            if n != spec.in_features:
                raise ShapeInferenceError(f"{where}: expects {spec.in_features} inputs, got {n} from {shape}")
            shape = (spec.out_features,)
        elif spec.kind == MAXPOOL:
            if len(shape) != 3:
                raise ShapeInferenceError(f"{where}: needs a rank-3 input, got {shape}")
            h = conv_out(shape[1], spec.window, spec.stride, 0)
            w = conv_out(shape[2], spec.window, spec.stride, 0)
            if h < 1 or w < 1:
                raise ShapeInferenceError(f"{where}: window larger than input {shape}")
            shape = (shape[0], h, w)
        out.append(shape)
    return out


def init_params(layers, input_shape, seed: int = 0) -> list[LayerParams | None]:
    """He-normal weights and zero biases for every Conv/FC layer."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        if spec.kind == CONV:
            fan_in = spec.in_channels * spec.kernel ** 2
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
            params.append(LayerParams.build(w, np.zeros(spec.out_channels)))
        elif spec.kind == FC:
            w = rng.normal(0.0, np.sqrt(2.0 / spec.in_features), (spec.out_features, spec.in_features))
            params.append(LayerParams.build(w, np.zeros(spec.out_features)))
        else:
            params.append(None)
    return params


def build_network(layers, input_shape, class_count, seed: int = 0) -> Network:
    return Network(list(layers), init_params(layers, input_shape, seed), tuple(input_shape), class_count)


# ---------------------------------------------------------------- file format

def _tensor_entries(net: Network):
    for i, p in enumerate(net.params):
        if p is None:
            continue
        yield f"layer{i}.weight", p.weight
        yield f"layer{i}.bias", p.bias
        if p.kernel_sum is not None:
            yield f"layer{i}.kernel_sum", p.kernel_sum
            yield f"layer{i}.kernel_abs_sum", p.kernel_abs_sum


def dumps_model(net: Network) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _tensor_entries(net):
        flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": [s.to_dict() for s in net.layers],
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(text)) + text + b"".join(chunks)


def loads_model(data: bytes) -> Network:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not a .dyve model file")
    if len(data) < 9:
        raise TruncatedBlobError("truncated header")
    version, mlen = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"model version {version}, expected {VERSION}")
    if len(data) < 9 + mlen:
        raise TruncatedBlobError("truncated manifest")
    try:
        manifest = json.loads(data[9 : 9 + mlen].decode("utf-8"))
        layers = [LayerSpec.from_dict(d) for d in manifest["layers"]]
        tensors = {e["name"]: e for e in manifest["tensors"]}
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable manifest: {exc}") from exc
    blob = data[9 + mlen :]
    if len(blob) % 4:
        raise TruncatedBlobError("blob length is not a multiple of 4 bytes")
    floats = np.frombuffer(blob, dtype="<f4")

    def take(name):
        e = tensors.get(name)
        if e is None:
            raise ModelFormatError(f"manifest lacks tensor {name}")
        end = e["offset"] + e["length"]
        if e["length"] != int(np.prod(e["shape"])):
            raise ModelFormatError(f"tensor {name}: length disagrees with shape")
        if end > floats.size:
            raise TruncatedBlobError(f"truncated blob: {name} needs {end} floats, blob holds {floats.size}")
        return floats[e["offset"] : end].astype(np.float32).reshape(e["shape"])

    params = []
    for i, spec in enumerate(layers):
        if not spec.has_params:
            params.append(None)
            continue
        p = LayerParams(take(f"layer{i}.weight"), take(f"layer{i}.bias"))
        if spec.kind == CONV:
            p.kernel_sum = take(f"layer{i}.kernel_sum")
            p.kernel_abs_sum = take(f"layer{i}.kernel_abs_sum")
        params.append(p)
    return Network(layers, params, tuple(manifest["input_shape"]), int(manifest["class_count"]))


def save_model(net: Network, path) -> None:
    Path(path).write_bytes(dumps_model(net))


def load_model(path) -> Network:
    return loads_model(Path(path).read_bytes())
