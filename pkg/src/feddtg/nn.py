"""Minimal dense network engine: MLP forward/backward, losses and optimizers.

Everything runs in float64 numpy. Parameters of a network live in one flat
``ParamVector`` so that they can be averaged, transmitted and checkpointed as
a single array.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import DimensionError, LayoutError, ParameterError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
HEADS = ("logits", "probability")

# Probabilities are clamped into [EPS, 1 - EPS] before taking logarithms.
EPS = 1e-7

# When set, tensors entering the engine are checked for NaN/Inf.
CHECKED = True


def set_checked(flag: bool) -> None:
    global CHECKED
    CHECKED = bool(flag)


def as_tensor(x, name: str = "tensor", ndim: int = 2) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} rank", ndim, arr.ndim)
    if CHECKED and arr.size and not np.isfinite(arr).all():
        raise ParameterError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class Layer:
    n_in: int
    n_out: int
    activation: str = "identity"

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ParameterError(f"layer widths must be positive, got {self.n_in}x{self.n_out}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.n_in * self.n_out + self.n_out


@dataclass(frozen=True)
class LayerSlot:
    """Where one layer's weights and bias sit inside the flat vector."""

    offset: int
    rows: int
    cols: int
    bias_offset: int


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    head: str = "logits"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ParameterError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionError("consecutive layer widths", a.n_out, b.n_in)
        if self.head not in HEADS:
            raise ParameterError(f"unknown output head {self.head!r}")
        if self.head == "probability":
            last = self.layers[-1]
            if last.n_out != 1 or last.activation != "sigmoid":
                raise ParameterError("a probability head needs a single sigmoid output")

    @classmethod
    def mlp(
        cls,
        widths: Sequence[int],
        hidden: str = "relu",
        output: str = "identity",
        head: str = "logits",
    ) -> "NetworkSpec":
        """Build a fully connected spec from ``[n_in, h1, ..., n_out]``."""
        if len(widths) < 2:
            raise ParameterError("mlp needs at least input and output widths")
        acts = [hidden] * (len(widths) - 2) + [output]
        layers = [Layer(a, b, act) for a, b, act in zip(widths, widths[1:], acts)]
        return cls(tuple(layers), head)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def layout(self) -> tuple[LayerSlot, ...]:
        slots = []
        offset = 0
        for layer in self.layers:
            bias_offset = offset + layer.n_in * layer.n_out
            slots.append(LayerSlot(offset, layer.n_in, layer.n_out, bias_offset))
            offset = bias_offset + layer.n_out
        return tuple(slots)

    def to_dict(self) -> dict:
        return {
            "layers": [[l.n_in, l.n_out, l.activation] for l in self.layers],
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(Layer(int(a), int(b), str(act)) for a, b, act in d["layers"]), d["head"])


class ParamVector:
    """Flat float64 weights of one network, tagged with the spec they belong to.

    Weight matrices are stored row-major with shape ``(n_in, n_out)`` followed
    by the bias, layer after layer.
    """

    __slots__ = ("spec", "values")

    def __init__(self, spec: NetworkSpec, values=None):
        self.spec = spec
        if values is None:
            values = np.zeros(spec.n_params)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != spec.n_params:
            raise LayoutError(
                f"parameter vector of length {values.size} does not match spec with {spec.n_params} parameters"
            )
        if CHECKED and not np.isfinite(values).all():
            raise ParameterError("parameter vector contains NaN or Inf")
        self.values = values

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, layers={len(self.spec.layers)})"

    def weights(self, i: int) -> np.ndarray:
        slot = self.spec.layout[i]
        return self.values[slot.offset : slot.bias_offset].reshape(slot.rows, slot.cols)

    def bias(self, i: int) -> np.ndarray:
        slot = self.spec.layout[i]
        return self.values[slot.bias_offset : slot.bias_offset + slot.cols]

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.spec, values)

    def check_layout(self, other: "ParamVector") -> None:
        if self.spec != other.spec:
            raise LayoutError("parameter layouts differ")


# Gradients share ParamVector's layout exactly.
Gradients = ParamVector


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    values = np.zeros(spec.n_params)
    for slot in spec.layout:
        limit = np.sqrt(6.0 / (slot.rows + slot.cols))
        n = slot.rows * slot.cols
        values[slot.offset : slot.offset + n] = rng.uniform(-limit, limit, size=n)
    return ParamVector(spec, values)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


_FORWARD = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "identity": lambda z: z,
}


def _act_grad(activation: str, z: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    if activation == "identity":
        return g
    if activation == "relu":
        return g * (z > 0.0)
    if activation == "tanh":
        return g * (1.0 - h * h)
    return g * h * (1.0 - h)


@dataclass
class Trace:
    """Intermediate values of one forward pass, kept for the backward pass."""

    params: ParamVector
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    output: np.ndarray | None = None


def _check_input(spec: NetworkSpec, params: ParamVector, x) -> np.ndarray:
    if params.spec != spec:
        raise LayoutError("parameters do not belong to this network spec")
    x = as_tensor(x, "network input")
    if x.shape[1] != spec.n_in:
        raise DimensionError("network input width", spec.n_in, x.shape[1])
    return x


def forward_trace(spec: NetworkSpec, params: ParamVector, x) -> Trace:
    x = _check_input(spec, params, x)
    trace = Trace(params)
    h = x
    for i, layer in enumerate(spec.layers):
        z = h @ params.weights(i) + params.bias(i)
        trace.inputs.append(h)
        trace.pre.append(z)
        h = _FORWARD[layer.activation](z)
    trace.output = h
    return trace


def forward(spec: NetworkSpec, params: ParamVector, x) -> np.ndarray:
    """Evaluate the network on a ``(batch, n_in)`` input."""
    return forward_trace(spec, params, x).output


def backward_trace(
    trace: Trace, upstream, need_params: bool = True, need_input: bool = False
) -> tuple[Gradients | None, np.ndarray | None]:
    """Vector-Jacobian product through a recorded forward pass."""
    spec = trace.params.spec
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != trace.output.shape:
        raise DimensionError("upstream gradient shape", trace.output.shape, g.shape)
    grads = np.zeros(spec.n_params) if need_params else None
    layout = spec.layout
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        h_out = trace.output if i == len(spec.layers) - 1 else trace.inputs[i + 1]
        delta = _act_grad(layer.activation, trace.pre[i], h_out, g)
        if need_params:
            slot = layout[i]
            grads[slot.offset : slot.bias_offset] = (trace.inputs[i].T @ delta).ravel()
            grads[slot.bias_offset : slot.bias_offset + slot.cols] = delta.sum(axis=0)
        if i > 0 or need_input:
            g = delta @ trace.params.weights(i).T
    out_params = ParamVector(spec, grads) if need_params else None
    return out_params, (g if need_input else None)


def backward(spec: NetworkSpec, params: ParamVector, x, upstream_grad) -> Gradients:
    """Gradient of ``sum(upstream_grad * forward(x))`` with respect to the parameters."""
    trace = forward_trace(spec, params, x)
    upstream_grad = as_tensor(upstream_grad, "upstream gradient")
    grads, _ = backward_trace(trace, upstream_grad)
    return grads


def input_gradient(spec: NetworkSpec, params: ParamVector, x, upstream_grad) -> np.ndarray:
    trace = forward_trace(spec, params, x)
    _, dx = backward_trace(trace, as_tensor(upstream_grad, "upstream gradient"), need_params=False, need_input=True)
    return dx


# ---------------------------------------------------------------- losses


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    _check_temperature(temperature)
    z = as_tensor(logits, "logits") / temperature
    z = z - z.max(axis=1, keepdims=True) if z.size else z
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    _check_temperature(temperature)
    z = as_tensor(logits, "logits") / temperature
    if not z.size:
        return z
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _target_rows(target, batch: int, n: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 1:
        if t.shape[0] != batch:
            raise DimensionError("target batch", batch, t.shape[0])
        if not np.issubdtype(t.dtype, np.integer):
            if t.size and not np.all(t == np.round(t)):
                raise ParameterError("class-index targets must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= n):
            raise ParameterError(f"target class index out of range [0, {n})")
        rows = np.zeros((batch, n))
        rows[np.arange(batch), t] = 1.0
        return rows
    t = as_tensor(t, "target distribution")
    if t.shape != (batch, n):
        raise DimensionError("target distribution shape", (batch, n), t.shape)
    return t


def cross_entropy(logits, target) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient with respect to the logits.

    ``target`` is either a vector of class indices or a matrix of target
    distributions (one row per sample).
    """
    logits = as_tensor(logits, "logits")
    batch, n = logits.shape
    rows = _target_rows(target, batch, n)
    if batch == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    loss = float(-(rows * logp).sum() / batch)
    p = np.exp(logp)
    grad = (p * rows.sum(axis=1, keepdims=True) - rows) / batch
    return loss, grad


def kl_divergence(student_logits, teacher_probs, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean KL(teacher || softmax(student / T)) and its gradient w.r.t. the student logits."""
    logits = as_tensor(student_logits, "student logits")
    q = as_tensor(teacher_probs, "teacher probabilities")
    if q.shape != logits.shape:
        raise DimensionError("teacher shape", logits.shape, q.shape)
    if q.size and (q.min() < 0 or np.abs(q.sum(axis=1) - 1.0).max() > 1e-6):
        raise ParameterError("teacher rows must be probability vectors (sum 1 within 1e-6)")
    batch = logits.shape[0]
    if batch == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits, temperature)
    pos = q > 0
    logq = np.zeros_like(q)
    logq[pos] = np.log(q[pos])
    loss = float((q * (logq - logp)).sum() / batch)
    grad = (softmax(logits, temperature) - q) / (temperature * batch)
    return loss, grad


def binary_log_loss(prob, is_real) -> tuple[float, np.ndarray]:
    """Discriminator loss ``-(mean_real log p + mean_fake log(1 - p))``.

    Returns the loss and its gradient with respect to ``prob``. Probabilities
    are clamped to ``[EPS, 1 - EPS]`` first.
    """
    p = as_tensor(prob, "probabilities")
    real = np.asarray(is_real, dtype=bool).reshape(p.shape)
    fake = ~real
    n_real = int(real.sum())
    n_fake = int(fake.sum())
    pc = np.clip(p, EPS, 1.0 - EPS)
    loss = 0.0
    grad = np.zeros_like(p)
    if n_real:
        loss -= float(np.log(pc[real]).sum() / n_real)
        grad[real] = -1.0 / (n_real * pc[real])
    if n_fake:
        loss -= float(np.log1p(-pc[fake]).sum() / n_fake)
        grad[fake] = 1.0 / (n_fake * (1.0 - pc[fake]))
    return loss, grad


# ------------------------------------------------------------- optimizers

RULES = ("sgd", "adam")


@dataclass
class OptimizerState:
    rule: str
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ParameterError(f"unknown optimizer rule {self.rule!r}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")

    def copy(self) -> "OptimizerState":
        return replace(
            self,
            m=None if self.m is None else self.m.copy(),
            v=None if self.v is None else self.v.copy(),
        )


def make_optimizer(
    rule: str, lr: float, n_params: int, beta1: float = 0.9, beta2: float = 0.999
) -> OptimizerState:
    if rule == "adam":
        return OptimizerState(rule, lr, 0, beta1, beta2, 1e-8, np.zeros(n_params), np.zeros(n_params))
    return OptimizerState(rule, lr, 0, beta1, beta2)


def optimizer_step(
    params: ParamVector, grads: Gradients, state: OptimizerState
) -> tuple[ParamVector, OptimizerState]:
    """Apply one update; inputs are left untouched."""
    params.check_layout(grads)
    g = grads.values
    t = state.step + 1
    if state.rule == "sgd":
        return params.with_values(params.values - state.lr * g), replace(state, step=t)
    if state.m is None or state.m.shape != g.shape or state.v.shape != g.shape:
        raise LayoutError("optimizer accumulators do not match the parameter vector")
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new), replace(state, step=t, m=m, v=v)
