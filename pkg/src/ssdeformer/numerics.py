"""Small dense MLP toolkit: explicit-tape backprop, Adam and finite-difference checks.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
Sine layers compute ``sin(omega * (x @ W + b))``.
"""

from __future__ import annotations

import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SINE = "sine"
RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (SINE, RELU, IDENTITY)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"SSDF"
CHECKPOINT_VERSION = 1

MATMUL_ROW_BLOCK = 8

# Bumped whenever parameters are modified in place; tapes recorded before a bump are stale.
_generation = itertools.count(1)
_current_generation = 0


def mark_params_updated() -> int:
    global _current_generation
    _current_generation = next(_generation)
    return _current_generation


class StaleTapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY
    omega: float = 1.0

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Tape:
    """Activation cache from one :func:`mlp_forward` call."""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    weight_ids: Tuple[int, ...]
    shapes: Tuple[Tuple[int, int], ...]
    generation: int


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # BLAS picks different kernels (gemv, narrow-output tails) depending on the
    # row count, and they round differently. Padding rows to a multiple of 8
    # keeps every row on the same path, so batched and single evaluation agree bitwise.
    m = x.shape[0]
    pad = (-m) % MATMUL_ROW_BLOCK
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]), dtype=x.dtype)])
        return (x @ w)[:m]
    return x @ w


def init_layer(
    fan_in: int,
    fan_out: int,
    activation: str,
    rng: np.random.Generator,
    *,
    omega: float = 30.0,
    first: bool = False,
    scale: Optional[float] = None,
    dtype=np.float32,
) -> Layer:
    """Create a layer with the initialisation conventional for its activation.

    Sine layers follow the periodic-network scheme: the first layer draws from
    ``U(-1/fan_in, 1/fan_in)`` and later layers from
    ``U(-sqrt(6/fan_in)/omega, sqrt(6/fan_in)/omega)``. ReLU layers use He-uniform.
    ``scale`` overrides the uniform bound for any activation.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if scale is not None:
        bound = scale
    elif activation == SINE and first:
        bound = 1.0 / fan_in
    elif activation == RELU:
        bound = math.sqrt(6.0 / fan_in)
    else:
        bound = math.sqrt(6.0 / fan_in) / omega
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    bias_bound = 1.0 / math.sqrt(fan_in)
    if activation == SINE:
        bias_bound = bias_bound / omega
    bias = rng.uniform(-bias_bound, bias_bound, size=fan_out).astype(dtype)
    return Layer(weight, bias, activation, omega if activation == SINE else 1.0)


def _check_chain(layers: Sequence[Layer], in_width: int) -> None:
    width = in_width
    for i, layer in enumerate(layers):
        if layer.activation not in ACTIVATIONS:
            raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
            raise ValueError(f"layer {i}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree")
        if layer.weight.shape[0] != width:
            raise ValueError(f"layer {i}: expects input width {layer.weight.shape[0]}, got {width}")
        width = layer.weight.shape[1]


def mlp_forward(layers: Sequence[Layer], x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    if x.ndim != 2:
        raise ValueError(f"input must be (batch, width), got shape {x.shape}")
    _check_chain(layers, x.shape[1])
    inputs, pre = [], []
    h = x
    for layer in layers:
        inputs.append(h)
        y = matmul(h, layer.weight) + layer.bias
        pre.append(y)
        if layer.activation == SINE:
            h = np.sin(layer.omega * y)
        elif layer.activation == RELU:
            h = np.maximum(y, 0)
        else:
            h = y
    tape = Tape(
        inputs,
        pre,
        tuple(id(layer.weight) for layer in layers),
        tuple(layer.weight.shape for layer in layers),
        _current_generation,
    )
    return h, tape


def mlp_backward(
    layers: Sequence[Layer], tape: Tape, upstream: np.ndarray
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate ``upstream`` (dL/doutput) through a recorded forward pass.

    Returns ``[(dW, db), ...]`` in layer order and dL/dinput.
    """
    if len(layers) != len(tape.pre):
        raise StaleTapeError(f"tape has {len(tape.pre)} layers, network has {len(layers)}")
    for i, layer in enumerate(layers):
        if id(layer.weight) != tape.weight_ids[i] or layer.weight.shape != tape.shapes[i]:
            raise StaleTapeError(f"layer {i}: tape was recorded on a different network")
    if tape.generation != _current_generation:
        raise StaleTapeError("parameters changed since the forward pass")
    if upstream.shape != tape.pre[-1].shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {tape.pre[-1].shape}")

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    g = upstream
    for i in range(len(layers) - 1, -1, -1):
        layer, y = layers[i], tape.pre[i]
        if layer.activation == SINE:
            g = g * (layer.omega * np.cos(layer.omega * y))
        elif layer.activation == RELU:
            g = g * (y > 0)
        grads[i] = (tape.inputs[i].T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return grads, g


# --------------------------------------------------------------------------- Adam


@dataclass
class ParamGroup:
    name: str
    params: Dict[str, np.ndarray]
    learning_rate: float
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"group {self.name}: learning rate must be non-negative")
        for key, p in self.params.items():
            self.m.setdefault(key, np.zeros_like(p))
            self.v.setdefault(key, np.zeros_like(p))


def adam_step(group: ParamGroup, gradients: Mapping[str, np.ndarray]) -> ParamGroup:
    """Bias-corrected Adam update applied in place to ``group.params``."""
    for key, p in group.params.items():
        g = gradients[key]
        if g.shape != p.shape:
            raise ValueError(f"{group.name}/{key}: gradient shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{group.name}/{key}: non-finite gradient")
    group.step += 1
    t = group.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for key, p in group.params.items():
        g = gradients[key]
        m, v = group.m[key], group.v[key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = group.learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p -= update.astype(p.dtype, copy=False)
    mark_params_updated()
    return group


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float
    noise_floor: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> Tuple[str, float]:
        key = max(self.errors, key=self.errors.get)
        return key, self.errors[key]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(
    closure: Callable[[], Tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-5,
    h: float = 1e-6,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure()`` must return ``(loss, grads)`` evaluated at the current values of
    ``params`` (which are perturbed in place and restored). A central difference
    carries about ``eps * |L| / h`` of rounding noise, so entries too small for that
    noise to stay within ``tolerance`` are compared against the noise floor
    ``10 * eps * |L| / (h * tolerance)`` rather than relatively.
    """
    for key, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {key} is {p.dtype}")
    loss0, analytic = closure()
    if not np.isfinite(loss0):
        raise NonFiniteError(f"closure returned non-finite loss {loss0!r}")
    noise_floor = 10.0 * np.finfo(np.float64).eps * max(abs(loss0), 1.0) / (h * tolerance)
    errors = {}
    for key, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            mark_params_updated()
            lp, _ = closure()
            flat[i] = old - h
            mark_params_updated()
            lm, _ = closure()
            flat[i] = old
            mark_params_updated()
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"non-finite loss while perturbing {key}[{i}] = {old!r}")
            numeric[j] = (lp - lm) / (2.0 * h)
        errors[key] = relative_error(np.asarray(analytic[key]).reshape(-1)[idx], numeric, noise_floor)
    return GradCheckReport(errors, tolerance, noise_floor)


# --------------------------------------------------------------------------- checkpoint


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as little-endian float32 in the SSDF container."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SSDF checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out


def layer_tensors(prefix: str, layers: Iterable[Layer]) -> Dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}.{i}.weight"] = layer.weight
        out[f"{prefix}.{i}.bias"] = layer.bias
    return out
