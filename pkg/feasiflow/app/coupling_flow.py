"""
Affine coupling layers and the Real-NVP flow stack.

Direction convention: the flow maps latent z to data a (sampling direction, `forward`).
Density evaluation runs the inverse through the stack in reverse layer order:

    log q(a) = log p(z) + sum_k log|det d f_k^-1|,    z = f^-1(a)

A coupling layer passes the mask==True coordinates (part A) through unchanged and
transforms part B with a clamped scale s~ = c * tanh(s_raw / c) and a shift t, both
computed from part A by separate conditioner nets.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from feasiflow.app.base_dist import (
    BaseDistribution,
    BaseKind,
    GaussianBase,
    build_resampling_base,
)
from feasiflow.app.errors import DensityError, DomainError, ShapeError, TrainingError
from feasiflow.app.nn_core import (
    DTYPE,
    DenseNet,
    assign_flat,
    flatten_arrays,
    flatten_params,
    init_dense_net,
    net_backward,
    net_forward,
)

DEFAULT_SCALE_CLAMP = 3.0


# ============================================================================
# COUPLING LAYER
# ============================================================================

def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """First ceil(dim/2) coordinates pass through on even layers, the rest on odd ones."""
    if dim < 2:
        raise ShapeError(f"coupling flows need dimension >= 2, got {dim}")
    mask = np.zeros(dim, dtype=bool)
    mask[: (dim + 1) // 2] = True
    return mask if parity % 2 == 0 else ~mask


@dataclass(eq=False)
class CouplingLayer:
    mask: np.ndarray
    s_net: DenseNet
    t_net: DenseNet
    scale_clamp: float = DEFAULT_SCALE_CLAMP

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 1 or self.mask.all() or not self.mask.any():
            raise ShapeError("coupling mask needs at least one pass-through and one transformed coordinate")
        n_a, n_b = int(self.mask.sum()), int((~self.mask).sum())
        for name, net in (("s_net", self.s_net), ("t_net", self.t_net)):
            if net.input_dim != n_a or net.output_dim != n_b:
                raise ShapeError(
                    f"{name} maps {net.input_dim} -> {net.output_dim}, mask needs {n_a} -> {n_b}"
                )
        if not self.scale_clamp > 0:
            raise ShapeError(f"scale_clamp must be positive, got {self.scale_clamp}")
        self.pass_idx = np.flatnonzero(self.mask)
        self.trans_idx = np.flatnonzero(~self.mask)

    @property
    def dim(self) -> int:
        return self.mask.size

    def nets(self) -> List[DenseNet]:
        return [self.s_net, self.t_net]


def _as_batch(x: np.ndarray, dim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    was_vector = x.ndim == 1
    batch = x[None, :] if was_vector else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"expected vectors of length {dim}, got shape {x.shape}")
    return batch, was_vector


def _check_finite(values: np.ndarray, logdet: np.ndarray, layer_index: Optional[int]) -> None:
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(logdet))):
        raise DensityError("non-finite value inside coupling layer", layer=layer_index)


def _conditioners(layer: CouplingLayer, part_a: np.ndarray, exact: bool):
    s_raw, s_tape = net_forward(layer.s_net, part_a, exact=exact)
    shift, t_tape = net_forward(layer.t_net, part_a, exact=exact)
    squashed = np.tanh(s_raw / layer.scale_clamp)
    return layer.scale_clamp * squashed, shift, squashed, s_tape, t_tape


def coupling_inverse(
    layer: CouplingLayer, y: np.ndarray, layer_index: Optional[int] = None, exact: bool = True
) -> Tuple[np.ndarray, Union[float, np.ndarray]]:
    """x_A = y_A, x_B = (y_B - t(y_A)) * exp(-s~(y_A)), logdet = -sum s~."""
    batch, was_vector = _as_batch(y, layer.dim)
    scale, shift, _, _, _ = _conditioners(layer, batch[:, layer.pass_idx], exact)
    x = batch.copy()
    x[:, layer.trans_idx] = (batch[:, layer.trans_idx] - shift) * np.exp(-scale)
    logdet = -np.sum(scale, axis=1)
    _check_finite(x, logdet, layer_index)
    return (x[0], float(logdet[0])) if was_vector else (x, logdet)


def coupling_forward(
    layer: CouplingLayer, x: np.ndarray, layer_index: Optional[int] = None, exact: bool = True
) -> Tuple[np.ndarray, Union[float, np.ndarray]]:
    """y_A = x_A, y_B = x_B * exp(s~(x_A)) + t(x_A), logdet = +sum s~."""
    batch, was_vector = _as_batch(x, layer.dim)
    scale, shift, _, _, _ = _conditioners(layer, batch[:, layer.pass_idx], exact)
    y = batch.copy()
    y[:, layer.trans_idx] = batch[:, layer.trans_idx] * np.exp(scale) + shift
    logdet = np.sum(scale, axis=1)
    _check_finite(y, logdet, layer_index)
    return (y[0], float(logdet[0])) if was_vector else (y, logdet)


# ============================================================================
# FLOW MODEL
# ============================================================================

@dataclass
class LogDensityResult:
    total: float
    base_term: float
    logdet_term: float
    latent: np.ndarray


@dataclass
class LogDensityBatch:
    total: np.ndarray
    base_term: np.ndarray
    logdet_term: np.ndarray
    latent: np.ndarray

    def row(self, i: int) -> LogDensityResult:
        return LogDensityResult(
            total=float(self.total[i]),
            base_term=float(self.base_term[i]),
            logdet_term=float(self.logdet_term[i]),
            latent=self.latent[i].copy(),
        )


@dataclass(eq=False)
class FlowModel:
    dim: int
    layers: List[CouplingLayer]
    base: BaseDistribution

    def __post_init__(self):
        for k, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise ShapeError(f"layer {k} mask has length {layer.dim}, model dim is {self.dim}")
        for k in range(len(self.layers) - 1):
            covered = (~self.layers[k].mask) | (~self.layers[k + 1].mask)
            if not covered.all():
                raise ShapeError(f"layers {k} and {k + 1} leave some coordinates untransformed")
        if self.base.dim != self.dim:
            raise ShapeError(f"base distribution has dim {self.base.dim}, model dim is {self.dim}")

    @property
    def base_kind(self) -> BaseKind:
        return self.base.kind

    def nets(self) -> List[DenseNet]:
        nets: List[DenseNet] = []
        for layer in self.layers:
            nets.extend(layer.nets())
        nets.extend(self.base.nets())
        return nets

    def num_parameters(self) -> int:
        return sum(net.num_parameters() for net in self.nets())

    def get_flat_params(self) -> np.ndarray:
        return flatten_params(self.nets())

    def set_flat_params(self, vector: np.ndarray) -> None:
        assign_flat(self.nets(), vector)


def build_flow(
    dim: int,
    num_layers: int,
    width: int = 94,
    depth: int = 4,
    scale_clamp: float = DEFAULT_SCALE_CLAMP,
    base_kind: BaseKind = BaseKind.GAUSSIAN,
    seed: int = 0,
    accept_width: int = 94,
    accept_depth: int = 2,
    truncation: int = 100,
    ema_decay: float = 0.95,
) -> FlowModel:
    """
    Alternating half-masks; each conditioner has `depth` dense layers with `width` hidden
    units, tanh hidden activations and a zero-initialized output layer, so every coupling
    layer starts as the identity map.
    """
    if num_layers < 1:
        raise ShapeError(f"num_layers must be >= 1, got {num_layers}")
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(num_layers):
        mask = alternating_mask(dim, k)
        n_a, n_b = int(mask.sum()), int((~mask).sum())
        s_net = init_dense_net(n_a, width, depth, n_b, rng, zero_last=True)
        t_net = init_dense_net(n_a, width, depth, n_b, rng, zero_last=True)
        layers.append(CouplingLayer(mask, s_net, t_net, scale_clamp))

    base_kind = BaseKind(base_kind)
    if base_kind is BaseKind.RESAMPLING:
        base: BaseDistribution = build_resampling_base(
            dim, rng, width=accept_width, hidden_layers=accept_depth,
            truncation=truncation, ema_decay=ema_decay,
        )
    else:
        base = GaussianBase(dim)
    return FlowModel(dim=dim, layers=layers, base=base)


def _check_input(model: FlowModel, a: np.ndarray) -> Tuple[np.ndarray, bool]:
    batch, was_vector = _as_batch(a, model.dim)
    if not np.all(np.isfinite(batch)):
        raise DomainError("flow input contains non-finite values")
    return batch, was_vector


def flow_inverse(model: FlowModel, a: np.ndarray, exact: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Data -> latent for a batch; returns (z, accumulated inverse log-det per row)."""
    z, _ = _check_input(model, a)
    logdet = np.zeros(z.shape[0], dtype=DTYPE)
    for k in range(len(model.layers) - 1, -1, -1):
        z, ld = coupling_inverse(model.layers[k], z, layer_index=k, exact=exact)
        logdet = logdet + ld
    return z, logdet


def flow_forward(model: FlowModel, z: np.ndarray, exact: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Latent -> data for a batch; returns (x, accumulated forward log-det per row)."""
    x, _ = _check_input(model, z)
    logdet = np.zeros(x.shape[0], dtype=DTYPE)
    for k, layer in enumerate(model.layers):
        x, ld = coupling_forward(layer, x, layer_index=k, exact=exact)
        logdet = logdet + ld
    return x, logdet


def flow_log_prob_batch(model: FlowModel, a: np.ndarray, exact: bool = True) -> LogDensityBatch:
    z, logdet = flow_inverse(model, a, exact=exact)
    base_term = np.asarray(model.base.log_prob(z, exact=exact), dtype=DTYPE)
    return LogDensityBatch(total=base_term + logdet, base_term=base_term, logdet_term=logdet, latent=z)


def flow_log_prob(model: FlowModel, a: np.ndarray) -> LogDensityResult:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 1:
        raise ShapeError(f"flow_log_prob takes one vector, got shape {a.shape}")
    return flow_log_prob_batch(model, a[None, :]).row(0)


def flow_sample(model: FlowModel, n: int, seed: int, exact: bool = True) -> np.ndarray:
    z = model.base.sample(n, seed, exact=exact)
    return flow_forward(model, z, exact=exact)[0]


# ============================================================================
# MLE GRADIENT
# ============================================================================

@dataclass
class FlowGradient:
    loss: float             # mean negative log-likelihood
    grads: np.ndarray       # flat, in FlowModel.get_flat_params() order
    log_prob: np.ndarray    # per-sample log q(a)


def flow_log_prob_grad(
    model: FlowModel,
    batch: np.ndarray,
    exact: bool = True,
    batch_index: Optional[int] = None,
) -> FlowGradient:
    """Exact reverse-mode gradient of L = -(1/B) sum_i log q(a_i) w.r.t. all parameters."""
    y, _ = _check_input(model, batch)
    n = y.shape[0]
    if n == 0:
        raise ShapeError("gradient batch is empty")

    caches = [None] * len(model.layers)
    logdet = np.zeros(n, dtype=DTYPE)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        part_a = y[:, layer.pass_idx]
        scale, shift, squashed, s_tape, t_tape = _conditioners(layer, part_a, exact)
        x = y.copy()
        x_b = (y[:, layer.trans_idx] - shift) * np.exp(-scale)
        x[:, layer.trans_idx] = x_b
        logdet = logdet - np.sum(scale, axis=1)
        caches[k] = (scale, squashed, x_b, s_tape, t_tape)
        y = x

    cotangent = np.full(n, -1.0 / n, dtype=DTYPE)
    base_term, g, base_grads = model.base.log_prob_backward(y, cotangent, exact=exact)
    log_prob = base_term + logdet
    bad = np.flatnonzero(~np.isfinite(log_prob))
    if bad.size:
        raise TrainingError("non-finite log-likelihood in batch", batch=batch_index, sample=int(bad[0]))

    layer_grads: List[List[np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    for k, layer in enumerate(model.layers):
        scale, squashed, x_b, s_tape, t_tape = caches[k]
        g_xb = g[:, layer.trans_idx]
        g_yb = g_xb * np.exp(-scale)
        g_scale = -g_xb * x_b - cotangent[:, None]
        g_sraw = g_scale * (1.0 - squashed * squashed)
        dya_s, grads_s = net_backward(layer.s_net, s_tape, g_sraw)
        dya_t, grads_t = net_backward(layer.t_net, t_tape, -g_yb)
        g_y = np.empty_like(g)
        g_y[:, layer.pass_idx] = g[:, layer.pass_idx] + dya_s + dya_t
        g_y[:, layer.trans_idx] = g_yb
        layer_grads[k] = grads_s + grads_t
        g = g_y

    flat = flatten_arrays([gr for grads in layer_grads for gr in grads] + list(base_grads))
    return FlowGradient(loss=float(-np.mean(log_prob)), grads=flat, log_prob=log_prob)
