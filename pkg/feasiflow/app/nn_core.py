"""
Dense-network numerical core.

Multi-layer perceptrons in float64 with a tape-based reverse pass and the Adam update.
Only the fixed MLP topology is differentiated: net_forward records every layer input and
pre-activation on a GradientTape, net_backward replays it in reverse.

Two product kernels are available:

- exact (default): broadcast multiply followed by a fixed-order reduction. A row's result
  never depends on the other rows in the batch, so scoring one sample or a whole file gives
  bit-identical numbers.
- BLAS (`exact=False`): plain `@`, much faster for training batches.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from feasiflow.app.errors import DomainError, ShapeError, TapeError, TrainingError

DTYPE = np.float64

# Max temporary size (elements) for one chunk of the exact kernel.
_EXACT_CHUNK_ELEMS = 1 << 21


class Activation(str, Enum):
    LINEAR = "linear"
    TANH = "tanh"
    SIGMOID = "sigmoid"


# ============================================================================
# PRODUCT KERNELS
# ============================================================================

def _chunk_rows(out_dim: int, in_dim: int) -> int:
    return max(1, _EXACT_CHUNK_ELEMS // max(1, out_dim * in_dim))


def matmul_wt(x: np.ndarray, weight: np.ndarray, exact: bool = True) -> np.ndarray:
    """x (n, in) times weight.T (in, out) -> (n, out)."""
    if not exact:
        return x @ weight.T
    n = x.shape[0]
    out_dim, in_dim = weight.shape
    out = np.empty((n, out_dim), dtype=DTYPE)
    step = _chunk_rows(out_dim, in_dim)
    for start in range(0, n, step):
        block = x[start:start + step]
        np.sum(block[:, None, :] * weight[None, :, :], axis=-1, out=out[start:start + step])
    return out


def matmul_w(dz: np.ndarray, weight: np.ndarray, exact: bool = True) -> np.ndarray:
    """dz (n, out) times weight (out, in) -> (n, in)."""
    if not exact:
        return dz @ weight
    n = dz.shape[0]
    out_dim, in_dim = weight.shape
    out = np.empty((n, in_dim), dtype=DTYPE)
    step = _chunk_rows(out_dim, in_dim)
    for start in range(0, n, step):
        block = dz[start:start + step]
        np.sum(block[:, :, None] * weight[None, :, :], axis=1, out=out[start:start + step])
    return out


def outer_sum(dz: np.ndarray, x: np.ndarray, exact: bool = True) -> np.ndarray:
    """Sum over rows of dz[n]^T x[n] -> (out, in)."""
    if not exact:
        return dz.T @ x
    n = dz.shape[0]
    out_dim, in_dim = dz.shape[1], x.shape[1]
    total = np.zeros((out_dim, in_dim), dtype=DTYPE)
    step = _chunk_rows(out_dim, in_dim)
    for start in range(0, n, step):
        block = dz[start:start + step, :, None] * x[start:start + step, None, :]
        total += np.sum(block, axis=0)
    return total


# ============================================================================
# DENSE NETWORK
# ============================================================================

def _activate(pre: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(pre)
    if activation is Activation.SIGMOID:
        return expit(pre)
    return pre


def _activation_grad(post: np.ndarray, activation: Activation) -> Optional[np.ndarray]:
    if activation is Activation.TANH:
        return 1.0 - post * post
    if activation is Activation.SIGMOID:
        return post * (1.0 - post)
    return None


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not agree"
            )


@dataclass(eq=False)
class DenseNet:
    layers: List[DenseLayer]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for k in range(len(self.layers) - 1):
            out_k = self.layers[k].weight.shape[0]
            in_next = self.layers[k + 1].weight.shape[1]
            if out_k != in_next:
                raise ShapeError(f"layer {k} outputs {out_k} but layer {k + 1} expects {in_next}")
        for layer in self.layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise DomainError("DenseNet weights must be finite")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenseNet":
        return DenseNet(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def __call__(self, x: np.ndarray, exact: bool = True) -> np.ndarray:
        return net_forward(self, x, exact=exact)[0]


@dataclass
class GradientTape:
    net_id: int
    version: int
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    was_vector: bool
    exact: bool


def init_dense_net(
    in_dim: int,
    hidden: int,
    depth: int,
    out_dim: int,
    rng: np.random.Generator,
    zero_last: bool = False,
    hidden_activation: Activation = Activation.TANH,
    output_activation: Activation = Activation.LINEAR,
) -> DenseNet:
    """
    Build a `depth`-layer MLP (depth counts dense layers, so depth-1 hidden layers).

    Weights are Glorot-uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero. With
    `zero_last` the final layer is all zeros so the net outputs exactly 0.
    """
    if depth < 1:
        raise ShapeError(f"depth must be >= 1, got {depth}")
    dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
    layers = []
    for k in range(depth):
        fan_in, fan_out = dims[k], dims[k + 1]
        last = k == depth - 1
        if last and zero_last:
            weight = np.zeros((fan_out, fan_in), dtype=DTYPE)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(
            weight=weight,
            bias=np.zeros(fan_out, dtype=DTYPE),
            activation=output_activation if last else hidden_activation,
        ))
    return DenseNet(layers)


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def net_forward(net: DenseNet, x: np.ndarray, exact: bool = True) -> Tuple[np.ndarray, GradientTape]:
    """Evaluate `net` on a vector (in,) or a batch (n, in); returns output and tape."""
    x = np.asarray(x, dtype=DTYPE)
    was_vector = x.ndim == 1
    batch = x[None, :] if was_vector else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"net expects input dim {net.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(batch)):
        raise DomainError("net input contains non-finite values")

    inputs, outputs, pres = [], [], []
    h = batch
    for layer in net.layers:
        inputs.append(h)
        pre = matmul_wt(h, layer.weight, exact) + layer.bias
        h = _activate(pre, layer.activation)
        pres.append(pre)
        outputs.append(h)

    tape = GradientTape(
        net_id=id(net),
        version=net.version,
        inputs=inputs,
        outputs=outputs,
        pre_activations=pres,
        was_vector=was_vector,
        exact=exact,
    )
    return (h[0] if was_vector else h), tape


def net_backward(
    net: DenseNet, tape: Optional[GradientTape], dy: np.ndarray
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Reverse pass of y^T dy. Returns dx (shaped like the forward input) and parameter
    gradients in `net.parameters()` order, summed over the batch.
    """
    if tape is None:
        raise TapeError("net_backward needs the tape from net_forward")
    if tape.net_id != id(net) or tape.version != net.version:
        raise TapeError("tape is stale: it was recorded on another net or before a parameter update")

    dy = np.asarray(dy, dtype=DTYPE)
    g = dy[None, :] if tape.was_vector else dy
    expected = tape.outputs[-1].shape
    if g.shape != expected:
        raise ShapeError(f"cotangent shape {dy.shape} does not match net output {expected}")

    grads: List[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        local = _activation_grad(tape.outputs[k], layer.activation)
        dz = g if local is None else g * local
        grads[2 * k] = outer_sum(dz, tape.inputs[k], tape.exact)
        grads[2 * k + 1] = np.sum(dz, axis=0)
        g = matmul_w(dz, layer.weight, tape.exact)

    return (g[0] if tape.was_vector else g), grads


# ============================================================================
# FLAT PARAMETER VIEWS
# ============================================================================

def flatten_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate([np.ravel(a) for a in arrays]).astype(DTYPE, copy=False)


def flatten_params(nets: Sequence[DenseNet]) -> np.ndarray:
    return flatten_arrays([p for net in nets for p in net.parameters()])


def assign_flat(nets: Sequence[DenseNet], vector: np.ndarray) -> None:
    """Write `vector` into the nets' parameters in order; bumps each net's version."""
    vector = np.asarray(vector, dtype=DTYPE)
    expected = sum(net.num_parameters() for net in nets)
    if vector.shape != (expected,):
        raise ShapeError(f"flat parameter vector has shape {vector.shape}, expected ({expected},)")
    offset = 0
    for net in nets:
        for param in net.parameters():
            size = param.size
            param[...] = vector[offset:offset + size].reshape(param.shape)
            offset += size
        net.version += 1


# ============================================================================
# ADAM
# ============================================================================

@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            step=0,
            m=np.zeros(size, dtype=DTYPE),
            v=np.zeros(size, dtype=DTYPE),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    **context,
) -> Tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update; pure (inputs are not modified).

    Extra keyword arguments (epoch, step, sample, ...) are attached to the TrainingError
    raised on non-finite gradients.
    """
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError(
            f"adam shapes disagree: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if state.step < 0:
        raise TrainingError(f"adam step counter must be >= 0, got {state.step}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise TrainingError("non-finite gradient", parameter=int(bad[0]), **context)

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=t, m=m, v=v)
