"""
Base distributions p(z) at the latent end of the flow.

GaussianBase is the isotropic standard normal. ResamplingBase reshapes it with a learned
acceptance function a(z) in (0, 1) through truncated rejection sampling: up to T Gaussian
proposals are drawn, each accepted with probability a(z), and the T-th is accepted
unconditionally. Its normalized density is

    p_T(z) = [ (1 - eps_T) / Z * a(z) + eps_T ] * N(z; 0, I),    eps_T = (1 - Z)^(T - 1)

where Z = E_N[a] is tracked by an exponential moving Monte-Carlo average (Z_ema). Z is a
constant inside a gradient step.
"""

from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, List, Optional, Tuple, Union

import numpy as np

from feasiflow.app.errors import BaseStateError, ShapeError
from feasiflow.app.nn_core import (
    DTYPE,
    Activation,
    DenseNet,
    init_dense_net,
    net_backward,
    net_forward,
)

LOG_2PI = float(np.log(2.0 * np.pi))
Z_FLOOR = 1e-6


class BaseKind(str, Enum):
    GAUSSIAN = "gaussian"
    RESAMPLING = "resampling"


def _as_batch(z: np.ndarray, dim: int) -> Tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=DTYPE)
    was_vector = z.ndim == 1
    batch = z[None, :] if was_vector else z
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"base distribution expects dimension {dim}, got shape {z.shape}")
    return batch, was_vector


# ============================================================================
# GAUSSIAN
# ============================================================================

def gaussian_log_prob(z: np.ndarray) -> Union[float, np.ndarray]:
    """-(h/2) ln(2 pi) - |z|^2 / 2 for a vector (float) or a batch of rows (array)."""
    z = np.asarray(z, dtype=DTYPE)
    h = z.shape[-1]
    value = -0.5 * h * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)
    return float(value) if z.ndim == 1 else value


def gaussian_sample(h: int, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ShapeError(f"sample count must be >= 1, got {n}")
    return np.random.default_rng(seed).standard_normal((n, h))


@dataclass(eq=False)
class GaussianBase:
    dim: int
    kind: ClassVar[BaseKind] = BaseKind.GAUSSIAN

    def nets(self) -> List[DenseNet]:
        return []

    def log_prob(self, z: np.ndarray, exact: bool = True) -> np.ndarray:
        batch, _ = _as_batch(z, self.dim)
        return gaussian_log_prob(batch)

    def log_prob_backward(
        self, z: np.ndarray, cotangent: np.ndarray, exact: bool = True
    ) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        batch, _ = _as_batch(z, self.dim)
        return gaussian_log_prob(batch), -batch * cotangent[:, None], []

    def sample(self, n: int, seed: int, exact: bool = True) -> np.ndarray:
        return gaussian_sample(self.dim, n, seed)


# ============================================================================
# RESAMPLING
# ============================================================================

@dataclass(eq=False)
class ResamplingBase:
    dim: int
    accept_net: DenseNet
    truncation: int = 100
    z_ema: float = 1.0
    ema_decay: float = 0.95
    kind: ClassVar[BaseKind] = BaseKind.RESAMPLING

    def __post_init__(self):
        if self.accept_net.input_dim != self.dim or self.accept_net.output_dim != 1:
            raise ShapeError(
                f"accept_net must map {self.dim} -> 1, got "
                f"{self.accept_net.input_dim} -> {self.accept_net.output_dim}"
            )
        if self.accept_net.layers[-1].activation is not Activation.SIGMOID:
            raise ShapeError("accept_net must end in a sigmoid so a(z) lies in (0, 1)")
        if self.truncation < 1:
            raise BaseStateError(f"truncation T must be >= 1, got {self.truncation}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise BaseStateError(f"ema_decay must lie in [0, 1], got {self.ema_decay}")

    def nets(self) -> List[DenseNet]:
        return [self.accept_net]

    def _mixing(self) -> Tuple[float, float]:
        """(scale on a(z), constant floor eps_T) of the density bracket."""
        z_norm = self.z_ema
        if not z_norm > 0.0:
            raise BaseStateError(f"Z_ema must be > 0 before evaluating the density, got {z_norm}")
        eps = (1.0 - z_norm) ** (self.truncation - 1)
        return (1.0 - eps) / z_norm, eps

    def acceptance(self, z: np.ndarray, exact: bool = True) -> np.ndarray:
        batch, _ = _as_batch(z, self.dim)
        return net_forward(self.accept_net, batch, exact=exact)[0][:, 0]

    def log_prob(self, z: np.ndarray, exact: bool = True) -> np.ndarray:
        return resampling_log_prob(self, z, exact=exact)

    def log_prob_backward(
        self, z: np.ndarray, cotangent: np.ndarray, exact: bool = True
    ) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
        """
        Log density of each row plus the pullback of `cotangent` (one weight per row)
        to z and to the accept_net parameters.
        """
        batch, _ = _as_batch(z, self.dim)
        scale, eps = self._mixing()
        alpha_col, tape = net_forward(self.accept_net, batch, exact=exact)
        alpha = alpha_col[:, 0]
        bracket = scale * alpha + eps
        logp = np.log(bracket) + gaussian_log_prob(batch)

        d_alpha = cotangent * scale / bracket
        dz_accept, param_grads = net_backward(self.accept_net, tape, d_alpha[:, None])
        dz = dz_accept - batch * cotangent[:, None]
        return logp, dz, param_grads

    def sample(self, n: int, seed: int, exact: bool = True) -> np.ndarray:
        return resampling_sample(self, n, seed, exact=exact)


def build_resampling_base(
    dim: int,
    rng: np.random.Generator,
    width: int = 94,
    hidden_layers: int = 2,
    truncation: int = 100,
    ema_decay: float = 0.95,
) -> ResamplingBase:
    accept_net = init_dense_net(
        dim, width, hidden_layers + 1, 1, rng,
        hidden_activation=Activation.TANH,
        output_activation=Activation.SIGMOID,
    )
    return ResamplingBase(dim=dim, accept_net=accept_net, truncation=truncation, ema_decay=ema_decay)


def resampling_log_prob(
    base: ResamplingBase, z: np.ndarray, exact: bool = True
) -> Union[float, np.ndarray]:
    scale, eps = base._mixing()
    batch, was_vector = _as_batch(z, base.dim)
    alpha = base.acceptance(batch, exact=exact)
    logp = np.log(scale * alpha + eps) + gaussian_log_prob(batch)
    return float(logp[0]) if was_vector else logp


def _mean_acceptance(base: ResamplingBase, n_mc: int, seed: int) -> float:
    if n_mc < 1:
        raise BaseStateError(f"n_mc must be >= 1, got {n_mc}")
    proposals = gaussian_sample(base.dim, n_mc, seed)
    return float(np.mean(base.acceptance(proposals, exact=False)))


def resampling_init_Z(base: ResamplingBase, n_mc: int = 4096, seed: int = 0) -> float:
    """Set Z_ema directly to a Monte-Carlo estimate of E[a(z)]."""
    base.z_ema = float(np.clip(_mean_acceptance(base, n_mc, seed), Z_FLOOR, 1.0))
    return base.z_ema


def resampling_update_Z(base: ResamplingBase, n_mc: int = 1024, seed: int = 0) -> float:
    """One EMA step of Z_ema towards the mean acceptance of n_mc fresh Gaussian draws."""
    estimate = _mean_acceptance(base, n_mc, seed)
    updated = base.ema_decay * base.z_ema + (1.0 - base.ema_decay) * estimate
    base.z_ema = float(np.clip(updated, Z_FLOOR, 1.0))
    return base.z_ema


def resampling_sample(
    base: ResamplingBase, n: int, seed: int, exact: bool = True
) -> np.ndarray:
    """
    Truncated rejection sampling, vectorized over the samples still pending.

    Proposals come from default_rng(seed), so when every first proposal is accepted the
    output is exactly gaussian_sample(h, n, seed). Acceptance uniforms use a separate
    stream spawned from the same seed.
    """
    if n < 1:
        raise ShapeError(f"sample count must be >= 1, got {n}")
    proposal_rng = np.random.default_rng(seed)
    accept_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])

    out = np.empty((n, base.dim), dtype=DTYPE)
    pending = np.arange(n)
    for trial in range(1, base.truncation + 1):
        proposals = proposal_rng.standard_normal((pending.size, base.dim))
        if trial == base.truncation:
            out[pending] = proposals
            break
        alpha = base.acceptance(proposals, exact=exact)
        accepted = accept_rng.uniform(size=pending.size) < alpha
        out[pending[accepted]] = proposals[accepted]
        pending = pending[~accepted]
        if pending.size == 0:
            break
    return out


BaseDistribution = Union[GaussianBase, ResamplingBase]


def make_base(kind: BaseKind, dim: int, rng: Optional[np.random.Generator] = None, **kwargs) -> BaseDistribution:
    kind = BaseKind(kind)
    if kind is BaseKind.GAUSSIAN:
        return GaussianBase(dim)
    if rng is None:
        raise BaseStateError("a resampling base needs an rng to initialize its accept_net")
    return build_resampling_base(dim, rng, **kwargs)
