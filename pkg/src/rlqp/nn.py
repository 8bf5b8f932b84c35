"""Small dense MLPs in numpy: forward, reverse-mode gradients, Adam, I/O."""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import List, Tuple

import numpy as np

MAGIC = b"RLQPNET1"

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclasses.dataclass(frozen=True)
class MlpSpec:
    input_width: int
    output_width: int
    hidden: Tuple[int, ...] = (48, 48, 48)
    hidden_activation: str = "relu"
    output_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_width, self.output_width) + self.hidden
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.hidden_activation not in ACTIVATIONS or self.output_activation not in ACTIVATIONS:
            raise ValueError("unknown activation")

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.input_width,) + self.hidden + (self.output_width,)

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == len(self.hidden) else self.hidden_activation


@dataclasses.dataclass
class MlpParams:
    """Weights are (fan_out, fan_in) row-major; one bias per output unit."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def check(self, spec: MlpSpec) -> None:
        widths = spec.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("layer count does not match spec")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[k + 1], widths[k]) or b.shape != (widths[k + 1],):
                raise ValueError(f"layer {k} has shape {w.shape}/{b.shape}, spec wants "
                                 f"{(widths[k + 1], widths[k])}")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    widths = spec.widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


@dataclasses.dataclass
class Tape:
    inputs: List[np.ndarray]  # input to each layer, (B, fan_in)
    pre: List[np.ndarray]     # pre-activations, (B, fan_out)
    outputs: List[np.ndarray]
    squeeze: bool
    spec: MlpSpec


def forward(params: MlpParams, spec: MlpSpec, x) -> Tuple[np.ndarray, Tape]:
    """Evaluate the network on one input (1-D) or a batch (2-D, one row per sample)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.input_width:
        raise ValueError(f"input shape {x.shape} does not match input width {spec.input_width}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite network input")
    inputs, pre, outs = [], [], []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        h = _act(spec.activation(k), z)
        pre.append(z)
        outs.append(h)
    y = h[0] if squeeze else h
    return y, Tape(inputs, pre, outs, squeeze, spec)


def forward_rows(params: MlpParams, spec: MlpSpec, x) -> np.ndarray:
    """Row-at-a-time evaluation.

    Each row goes through identical matrix-vector products, so the output for
    a row never depends on its position in the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ValueError(f"input shape {x.shape} does not match input width {spec.input_width}")
    out = np.empty((x.shape[0], spec.output_width))
    for r in range(x.shape[0]):
        h = x[r]
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = _act(spec.activation(k), np.dot(w, h) + b)
        out[r] = h
    return out


def backward(params: MlpParams, tape: Tape, output_grad) -> Tuple[MlpParams, np.ndarray]:
    """Gradients of sum(output * output_grad) w.r.t. parameters and input.

    Batch gradients are summed over samples.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ValueError("output gradient does not match tape")
    spec = tape.spec
    gw, gb = [None] * len(params.weights), [None] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        dz = g * _act_grad(spec.activation(k), tape.pre[k], tape.outputs[k])
        gw[k] = dz.T @ tape.inputs[k]
        gb[k] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    return MlpParams(gw, gb), (g[0] if tape.squeeze else g)


@dataclasses.dataclass
class AdamState:
    lr: float
    m: MlpParams
    v: MlpParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float) -> "AdamState":
        return cls(lr, params.zeros_like(), params.zeros_like())


def adam_step(params: MlpParams, grads: MlpParams, adam: AdamState) -> MlpParams:
    """One bias-corrected Adam descent step, applied in place."""
    adam.step += 1
    c1 = 1.0 - adam.beta1 ** adam.step
    c2 = 1.0 - adam.beta2 ** adam.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), adam.m.arrays(), adam.v.arrays()):
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * g * g
        p -= adam.lr * (m / c1) / (np.sqrt(v / c2) + adam.eps)
    return params


def polyak_update(target: MlpParams, online: MlpParams, polyak: float) -> MlpParams:
    """target <- polyak * target + (1 - polyak) * online, in place."""
    if not 0.0 <= polyak < 1.0:
        raise ValueError("polyak must lie in [0, 1)")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= polyak
        t += (1.0 - polyak) * o
    return target


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------

def save_weights(params: MlpParams, spec: MlpSpec, path) -> None:
    """Little-endian: magic, u32 header, float64 parameters (W row-major, then b)."""
    params.check(spec)
    header = [spec.input_width, spec.output_width, len(spec.hidden), *spec.hidden,
              ACTIVATIONS.index(spec.hidden_activation),
              ACTIVATIONS.index(spec.output_activation)]
    blob = bytearray(MAGIC)
    blob += struct.pack(f"<{len(header)}I", *header)
    for w, b in zip(params.weights, params.biases):
        blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_weights(path, expect: MlpSpec = None) -> Tuple[MlpParams, MlpSpec]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a weight file")
    off = 8
    try:
        inp, outw, nh = struct.unpack_from("<3I", data, off)
        off += 12
        hidden = struct.unpack_from(f"<{nh}I", data, off)
        off += 4 * nh
        ha, oa = struct.unpack_from("<2I", data, off)
        off += 8
        spec = MlpSpec(inp, outw, tuple(hidden), ACTIVATIONS[ha], ACTIVATIONS[oa])
    except (struct.error, IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header") from exc
    if expect is not None and expect != spec:
        raise ValueError(f"{path}: network spec {spec} does not match expected {expect}")
    weights, biases = [], []
    widths = spec.widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        for shape in ((fan_out, fan_in), (fan_out,)):
            count = int(np.prod(shape))
            if off + 8 * count > len(data):
                raise ValueError(f"{path}: truncated parameter block")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
            off += 8 * count
            (weights if len(shape) == 2 else biases).append(arr.reshape(shape))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    params = MlpParams(weights, biases)
    if not all(np.all(np.isfinite(a)) for a in params.arrays()):
        raise ValueError(f"{path}: non-finite parameters")
    return params, spec


def param_vector(params: MlpParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def num_params(spec: MlpSpec) -> int:
    w = spec.widths
    return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

