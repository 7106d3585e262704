"""Dense generator networks ``G: z -> image`` with exact reverse-mode gradients.

Weights are held as float32 (the on-disk precision) and evaluated in
float64. Model file layout, little-endian::

    b"GDQM" 0x01 | u32 layers | per layer: u32 rows, u32 cols, u8 activation,
    f32 slope, f32[rows*cols] weights (row-major), f32[rows] biases |
    u32 height, u32 width, u32 channels
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .image import ImageTensor

MAGIC = b"GDQM"
VERSION = 1
LEAKY_SLOPE = 0.2

LINEAR, LEAKY_RELU, SIGMOID = "linear", "leaky-relu", "sigmoid"
_ACT_CODES = {LINEAR: 0, LEAKY_RELU: 1, SIGMOID: 2}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ChainViolationError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray  # (rows, cols), float32
    bias: np.ndarray  # (rows,), float32
    activation: str = LEAKY_RELU
    slope: float = LEAKY_SLOPE
    _w64: np.ndarray = field(init=False, repr=False)
    _b64: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float32)
        b = np.array(self.bias, dtype=np.float32).reshape(-1)
        if w.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"bias length {b.shape[0]} does not match {w.shape[0]} weight rows")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        slope = float(np.float32(self.slope))
        for arr in (w, b):
            arr.setflags(write=False)
        w64, b64 = w.astype(np.float64), b.astype(np.float64)
        w64.setflags(write=False)
        b64.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "slope", slope)
        object.__setattr__(self, "_w64", w64)
        object.__setattr__(self, "_b64", b64)

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    @property
    def cols(self) -> int:
        return self.weight.shape[1]

    def pre(self, h: np.ndarray) -> np.ndarray:
        return self._w64 @ h + self._b64

    def act(self, a: np.ndarray) -> np.ndarray:
        if self.activation == LEAKY_RELU:
            if 0.0 <= self.slope <= 1.0:
                return np.maximum(a, self.slope * a)
            return np.where(a > 0, a, self.slope * a)
        if self.activation == SIGMOID:
            return _sigmoid(a)
        return a

    def act_grad(self, a: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.activation == LEAKY_RELU:
            return np.where(a > 0, 1.0, self.slope)
        if self.activation == SIGMOID:
            return out * (1.0 - out)
        return np.ones_like(a)


def _sigmoid(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0, e) / (1.0 + e)


class GeneratorModel:
    """Immutable stack of dense layers with an output image shape.

    A non-sigmoid final layer is clamped into [0, 1]; the clamp passes zero
    gradient for saturated outputs.
    """

    def __init__(self, layers: Sequence[DenseLayer], output_shape: tuple[int, int, int]):
        self.layers = tuple(layers)
        self.output_shape = tuple(int(s) for s in output_shape)
        if not self.layers:
            raise ValueError("generator needs at least one layer")
        if len(self.output_shape) != 3 or self.output_shape[2] not in (1, 3) or min(self.output_shape) < 1:
            raise ValueError(f"invalid output shape {self.output_shape}")
        for i in range(1, len(self.layers)):
            if self.layers[i].cols != self.layers[i - 1].rows:
                raise ChainViolationError(
                    f"layer {i} expects {self.layers[i].cols} inputs but layer {i - 1} "
                    f"produces {self.layers[i - 1].rows}"
                )
        h, w, c = self.output_shape
        if self.layers[-1].rows != h * w * c:
            raise ChainViolationError(
                f"final layer produces {self.layers[-1].rows} values, "
                f"output shape {self.output_shape} needs {h * w * c}"
            )

    @property
    def latent_dim(self) -> int:
        return self.layers[0].cols

    @property
    def output_size(self) -> int:
        return self.layers[-1].rows

    @property
    def clamps_output(self) -> bool:
        return self.layers[-1].activation != SIGMOID

    def _check_z(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.latent_dim:
            raise ValueError(f"latent has dimension {z.shape[0]}, generator expects {self.latent_dim}")
        return z

    def forward_flat(self, z) -> np.ndarray:
        h = self._check_z(z)
        for layer in self.layers:
            h = layer.act(layer.pre(h))
        if self.clamps_output:
            h = np.clip(h, 0.0, 1.0)
        return h

    def forward(self, z) -> ImageTensor:
        return ImageTensor(self.forward_flat(z).reshape(self.output_shape))

    def forward_with_tape(self, z):
        """Forward pass that also returns the activations needed by :meth:`backward`."""
        h = self._check_z(z)
        tape = []
        for layer in self.layers:
            a = layer.pre(h)
            out = layer.act(a)
            tape.append((a, out))
            h = out
        if self.clamps_output:
            h = np.clip(h, 0.0, 1.0)
        return h, tape

    def backward(self, tape, upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if g.shape[0] != self.output_size:
            raise ValueError(f"cotangent has {g.shape[0]} values, generator output has {self.output_size}")
        if self.clamps_output:
            raw = tape[-1][1]
            g = np.where((raw >= 0.0) & (raw <= 1.0), g, 0.0)
        for layer, (a, out) in zip(reversed(self.layers), reversed(tape)):
            g = layer._w64.T @ (g * layer.act_grad(a, out))
        return g

    def vjp(self, z, upstream) -> np.ndarray:
        """Gradient of ``<upstream, G(z)>`` with respect to ``z``."""
        upstream = np.asarray(upstream.data if isinstance(upstream, ImageTensor) else upstream,
                              dtype=np.float64)
        if upstream.size != self.output_size:
            raise ValueError(f"cotangent shape {upstream.shape} does not match output {self.output_shape}")
        _, tape = self.forward_with_tape(z)
        return self.backward(tape, upstream)

    def __repr__(self):
        dims = [self.latent_dim] + [layer.rows for layer in self.layers]
        return f"GeneratorModel({'->'.join(map(str, dims))}, shape={self.output_shape})"


def forward(model: GeneratorModel, z) -> ImageTensor:
    return model.forward(z)


def vjp(model: GeneratorModel, z, upstream) -> np.ndarray:
    return model.vjp(z, upstream)


# --- serialization ---------------------------------------------------------------

def dump_model(model: GeneratorModel) -> bytes:
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIBf", layer.rows, layer.cols, _ACT_CODES[layer.activation], layer.slope))
        parts.append(layer.weight.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    parts.append(struct.pack("<III", *model.output_shape))
    return b"".join(parts)


def parse_model(raw: bytes) -> GeneratorModel:
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if raw[4] != VERSION:
        raise ModelFormatError(f"unsupported model version {raw[4]}")
    pos = 5

    def take(n, what, layer=None):
        nonlocal pos
        if pos + n > len(raw):
            where = f" in layer {layer}" if layer is not None else ""
            raise TruncatedModelError(f"file truncated while reading {what}{where}", layer=layer)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "layer count"))
    layers = []
    for i in range(count):
        rows, cols, code, slope = struct.unpack("<IIBf", take(13, "layer header", i))
        if code not in _CODE_ACTS:
            raise ModelFormatError(f"layer {i}: unknown activation code {code}")
        if layers and cols != layers[-1].rows:
            raise ChainViolationError(
                f"layer {i} expects {cols} inputs but layer {i - 1} produces {layers[-1].rows}"
            )
        w = np.frombuffer(take(4 * rows * cols, "weights", i), dtype="<f4").reshape(rows, cols)
        b = np.frombuffer(take(4 * rows, "biases", i), dtype="<f4")
        layers.append(DenseLayer(w, b, _CODE_ACTS[code], slope))
    shape = struct.unpack("<III", take(12, "output shape trailer"))
    if pos != len(raw):
        raise ModelFormatError(f"{len(raw) - pos} trailing bytes after model payload")
    return GeneratorModel(layers, shape)


def save_model(model: GeneratorModel, path) -> None:
    Path(path).write_bytes(dump_model(model))


def load_model(path) -> GeneratorModel:
    return parse_model(Path(path).read_bytes())


# --- toy generators -------------------------------------------------------------

def make_toy_generator(kind: str, output_shape=(8, 8, 1), seed: int = 0,
                       latent_dim: int | None = None, widths: Sequence[int] = (32, 64),
                       output_gain: float = 2.0) -> GeneratorModel:
    """Small deterministic generators for tests and desk-scale experiments.

    ``identity``: ``G(z) = clamp(z)``, latent size = output size.
    ``linear``: ``G(z) = clamp(0.5 + A z)``, ``A ~ N(0, 1/fan_in)``.
    ``mlp``: leaky-ReLU hidden ``widths`` and a sigmoid output layer whose
    pre-activations are scaled by ``output_gain`` so intensities spread over
    most of [0, 1].
    """
    h, w, c = output_shape
    n_out = h * w * c
    rng = np.random.default_rng(seed)
    if kind == "identity":
        if latent_dim not in (None, n_out):
            raise ValueError("identity generator needs latent_dim == output size")
        layer = DenseLayer(np.eye(n_out), np.zeros(n_out), LINEAR)
        return GeneratorModel([layer], output_shape)
    if kind == "linear":
        d = latent_dim or 2
        weight = rng.standard_normal((n_out, d)) / np.sqrt(d)
        return GeneratorModel([DenseLayer(weight, np.full(n_out, 0.5), LINEAR)], output_shape)
    if kind == "mlp":
        d = latent_dim or 8
        dims = [d, *widths, n_out]
        if any(int(x) != x or x < 1 for x in dims):
            raise ValueError(f"invalid layer widths {dims}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            gain = output_gain if last else np.sqrt(2.0)
            weight = rng.standard_normal((fan_out, fan_in)) * gain / np.sqrt(fan_in)
            bias = 0.1 * rng.standard_normal(fan_out)
            layers.append(DenseLayer(weight, bias, SIGMOID if last else LEAKY_RELU))
        return GeneratorModel(layers, output_shape)
    raise ValueError(f"unknown toy generator kind {kind!r}")
