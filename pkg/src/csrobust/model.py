"""Feed-forward ReLU classifiers, convolution lowering, and the model file format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numcore import NumericalError, Rng, relu

MAGIC = b"CSRB"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """Malformed or unreadable model file."""


class VersionMismatchError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


@dataclass(frozen=True)
class AffineLayer:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"bias shape {self.b.shape} does not match weights {self.W.shape}")


@dataclass
class Network:
    """Affine layers with a ReLU between consecutive ones; the last layer is bare.

    With ``L`` affine layers the network has ``K = L + 1`` layers in the usual
    counting (input, ``L - 1`` hidden, output).
    """

    layers: list[AffineLayer]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one affine layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def K(self) -> int:
        return len(self.layers) + 1

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.W.shape[0] for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def with_params(self, params) -> "Network":
        it = iter(params)
        layers = [AffineLayer(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                  for W, b in zip(it, it)]
        return Network(layers, dict(self.metadata))

    def copy(self) -> "Network":
        return self.with_params([p.copy() for p in self.params()])


def pairs(params):
    """Group a flat ``[W1, b1, W2, b2, ...]`` list into ``(W, b)`` tuples."""
    it = iter(params)
    return list(zip(it, it))


def logits_of(params, X):
    """Output scores for a batch ``X`` (rows are examples); tape-aware."""
    z = X
    layers = pairs(params)
    for k, (W, b) in enumerate(layers):
        z = z @ W.T + b
        if k < len(layers) - 1:
            z = relu(z)
    return z


class ForwardTrace(NamedTuple):
    logits: np.ndarray
    activations: list  # z_1 = x, z_2, ..., z_{K-1}
    preacts: list  # inputs to each ReLU, one per hidden layer


def forward(net: Network, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"expected input of length {net.input_dim}, got {x.shape[-1]}")
    acts, pre = [x], []
    z = x
    for k, layer in enumerate(net.layers):
        zhat = z @ layer.W.T + layer.b
        if k < len(net.layers) - 1:
            pre.append(zhat)
            z = np.maximum(zhat, 0.0)
            acts.append(z)
        else:
            z = zhat
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite network output")
    return ForwardTrace(z, acts, pre)


def predict(net: Network, x):
    """Index of the largest score; ties go to the lowest index."""
    return np.argmax(forward(net, x).logits, axis=-1)


def init_params(sizes, rng: Rng) -> Network:
    """He-normal weights (variance 2/fan_in) and zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid architecture {sizes}")
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(AffineLayer(W, np.zeros(fan_out)))
    return Network(layers)


@dataclass(frozen=True)
class ConvSpec:
    kernel: np.ndarray  # (out_channels, in_channels, kh, kw)
    input_shape: tuple  # (in_channels, height, width)
    stride: int = 1
    padding: int = 0
    bias: np.ndarray | None = None

    @property
    def output_shape(self):
        oc, ic, kh, kw = self.kernel.shape
        _, H, W = self.input_shape
        return (oc, (H + 2 * self.padding - kh) // self.stride + 1,
                (W + 2 * self.padding - kw) // self.stride + 1)


def lower_conv(spec: ConvSpec, max_entries: int = 50_000_000) -> AffineLayer:
    """Explicit matrix for a 2-D convolution acting on C-H-W flattened inputs."""
    kernel = np.asarray(spec.kernel, dtype=np.float64)
    oc, ic, kh, kw = kernel.shape
    c, H, W = spec.input_shape
    if c != ic:
        raise ValueError(f"kernel expects {ic} input channels, input has {c}")
    if spec.stride < 1 or spec.padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    _, Ho, Wo = spec.output_shape
    if Ho < 1 or Wo < 1:
        raise ValueError(f"non-positive output shape {spec.output_shape}")
    rows, cols = oc * Ho * Wo, c * H * W
    if rows * cols > max_entries:
        raise MemoryError(f"lowered convolution needs {rows}x{cols} entries, budget is {max_entries}")
    M = np.zeros((rows, cols))
    for o in range(oc):
        for i in range(Ho):
            for j in range(Wo):
                r = (o * Ho + i) * Wo + j
                for ci in range(ic):
                    for a in range(kh):
                        y = i * spec.stride + a - spec.padding
                        if not 0 <= y < H:
                            continue
                        for bb in range(kw):
                            x = j * spec.stride + bb - spec.padding
                            if 0 <= x < W:
                                M[r, (ci * H + y) * W + x] += kernel[o, ci, a, bb]
    bias = np.zeros(oc) if spec.bias is None else np.asarray(spec.bias, dtype=np.float64)
    return AffineLayer(M, np.repeat(bias, Ho * Wo))


def _descriptor(net: Network) -> bytes:
    return json.dumps({"sizes": net.sizes, "metadata": net.metadata}, sort_keys=True).encode()


def save(net: Network, path) -> None:
    desc = _descriptor(net)
    payload = b"".join(p.astype("<f8").tobytes() for p in net.params())
    n = sum(p.size for p in net.params())
    crc = zlib.crc32(desc + payload) & 0xFFFFFFFF
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(desc)) + desc + struct.pack("<QI", n, crc)
    Path(path).write_bytes(header + payload)


def load(path) -> Network:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    version, dlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model file version {version}, expected {FORMAT_VERSION}")
    off = 12 + dlen
    if len(raw) < off + 12:
        raise ModelFileError("truncated header")
    desc = raw[12:off]
    n, crc = struct.unpack_from("<QI", raw, off)
    payload = raw[off + 12:]
    if len(payload) != 8 * n:
        raise ModelFileError(f"expected {n} parameters, payload holds {len(payload) / 8:g}")
    if zlib.crc32(desc + payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch")
    try:
        info = json.loads(desc)
        sizes = [int(s) for s in info["sizes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"bad architecture descriptor: {exc}") from exc
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, pos = [], 0
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        params.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        params.append(flat[pos:pos + fan_out])
        pos += fan_out
    if pos != n:
        raise ModelFileError("descriptor does not match parameter count")
    net = Network([AffineLayer(W, b) for W, b in pairs(params)], info.get("metadata", {}))
    return net
