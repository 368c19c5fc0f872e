"""tanh MLPs on top of :mod:`nhode.ad`, including the expanded input gradient."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import ad

PARAM_MAGIC = b"NHODE001"


@dataclass
class MlpParams:
    """Weights are stored ``(fan_in, fan_out)``; hidden layers use tanh, the last is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan_in {w.shape[0]} != previous fan_out")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_size(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, widths, rng: np.random.Generator) -> MlpParams:
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, widths) -> MlpParams:
        return cls(
            [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
            [np.zeros(b) for b in widths[1:]],
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameters in container order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> MlpParams:
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return cls(arrays[0::2], arrays[1::2])

    def copy(self) -> MlpParams:
        return MlpParams.from_arrays(self.arrays())

    def bind(self, tape: ad.Tape, trainable: bool = True) -> BoundMlp:
        make = tape.variable if trainable else tape.constant
        return BoundMlp(
            [make(w) for w in self.weights],
            [make(b) for b in self.biases],
        )


def mlp_widths(in_size: int, out_size: int, width: int, depth: int) -> list[int]:
    """Layer widths for ``depth`` tanh hidden layers of size ``width``."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return [in_size] + [width] * depth + [out_size]


@dataclass
class BoundMlp:
    weights: list[ad.Node]
    biases: list[ad.Node]

    def nodes(self) -> list[ad.Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def grads(self) -> list[np.ndarray]:
        return [n.grad for n in self.nodes()]


def _hidden_activations(net: BoundMlp, z: ad.Node) -> list[ad.Node]:
    hs = []
    h = z
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = ad.tanh(ad.affine(h, w, b))
        hs.append(h)
    return hs


def mlp_graph(net: BoundMlp, z: ad.Node) -> ad.Node:
    hs = _hidden_activations(net, z)
    h = hs[-1] if hs else z
    return ad.affine(h, net.weights[-1], net.biases[-1])


def mlp_input_gradient_graph(net: BoundMlp, z: ad.Node) -> ad.Node:
    """Graph for the input gradient of a scalar-output MLP, shape ``(batch, in)``.

    The layer-Jacobian chain ``W1 D1 W2 D2 ... wL`` (transposed, with
    ``D_i = diag(1 - tanh(a_i)**2)``) is spelled out as ordinary graph ops, so
    a later backward pass yields second derivatives with respect to the weights.
    """
    if net.weights[-1].value.shape[1] != 1:
        raise ad.GraphError("input gradient needs a scalar-output network")
    tape = z.tape
    hs = _hidden_activations(net, z)
    ones = tape.constant(np.ones((z.value.shape[0], 1)))
    g = ad.matmul(ones, net.weights[-1], transpose_b=True)
    for w, h in zip(reversed(net.weights[:-1]), reversed(hs)):
        g = ad.matmul(ad.mul(g, ad.tanh_deriv(h)), w, transpose_b=True)
    return g


def mlp_forward(params: MlpParams, z: np.ndarray) -> np.ndarray:
    h = np.asarray(z, dtype=np.float64)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
    return h @ params.weights[-1] + params.biases[-1]


def mlp_input_gradient(params: MlpParams, z: np.ndarray) -> np.ndarray:
    """Numeric input gradient; same arithmetic as :func:`mlp_input_gradient_graph`."""
    tape = ad.Tape(record=False)
    z = np.atleast_2d(z)
    return mlp_input_gradient_graph(params.bind(tape, trainable=False), tape.constant(z)).value


def params_to_bytes(params: MlpParams) -> bytes:
    """Flat little-endian container: magic, layer count, (fan_in, fan_out) per layer, then W, b per layer."""
    out = [PARAM_MAGIC, struct.pack("<I", len(params.weights))]
    for w in params.weights:
        out.append(struct.pack("<II", *w.shape))
    for w, b in zip(params.weights, params.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(buf: bytes, offset: int = 0) -> tuple[MlpParams, int]:
    """Parse one container starting at ``offset``; returns the params and the end offset."""
    if buf[offset:offset + 8] != PARAM_MAGIC:
        raise ValueError("not an NHODE001 parameter container")
    pos = offset + 8
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", buf, pos))
        pos += 8
    weights, biases = [], []
    for fan_in, fan_out in dims:
        w = np.frombuffer(buf, dtype="<f8", count=fan_in * fan_out, offset=pos).reshape(fan_in, fan_out)
        pos += 8 * fan_in * fan_out
        b = np.frombuffer(buf, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpParams(weights, biases), pos
