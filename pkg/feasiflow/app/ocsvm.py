"""
One-class SVM baseline (nu formulation, RBF kernel) trained on feasible embeddings only.

Dual problem:

    minimize  1/2 a^T K a   subject to  0 <= a_i <= 1/(nu N),  sum a = 1

solved by two-coordinate updates on the maximal violating pair. The decision function
sum_i a_i k(x, x_i) - rho is higher for more in-distribution inputs, so it plugs into the
same AUROC as the flow scores.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from feasiflow.app.errors import ConfigError, ShapeError, SolverError
from feasiflow.app.parallel import map_row_chunks

logger = logging.getLogger(__name__)

DEFAULT_NU = 0.5
DEFAULT_TOL = 1e-6


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray  # (m, h)
    alphas: np.ndarray           # (m,)
    rho: float
    gamma: float
    nu: float
    n_train: int
    iterations: int = 0
    kkt_gap: float = 0.0

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def default_gamma(train: np.ndarray) -> float:
    """1 / (h * Var(train)) over all entries; 1 / h when the data have no spread."""
    train = np.asarray(train, dtype=np.float64)
    variance = float(np.var(train))
    h = train.shape[1]
    return 1.0 / (h * variance) if variance > 0 else 1.0 / h


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(a, b, "sqeuclidean"))


def ocsvm_dual_objective(kernel: np.ndarray, alphas: np.ndarray) -> float:
    return float(0.5 * alphas @ kernel @ alphas)


def ocsvm_feasibility_residual(alphas: np.ndarray, upper: float) -> float:
    """Largest violation of sum a = 1 and 0 <= a <= upper."""
    return float(max(
        abs(np.sum(alphas) - 1.0),
        max(0.0, -float(np.min(alphas))),
        max(0.0, float(np.max(alphas)) - upper),
    ))


def ocsvm_kkt_residual(kernel: np.ndarray, alphas: np.ndarray, upper: float) -> float:
    """Maximal violating pair gap of the full dual: max over a>0 of (K a)_i minus min over a<upper."""
    grad = kernel @ alphas
    can_grow, can_shrink = alphas < upper, alphas > 0.0
    if not can_grow.any() or not can_shrink.any():
        return 0.0
    return max(0.0, float(np.max(grad[can_shrink]) - np.min(grad[can_grow])))


def _offset(grad: np.ndarray, alphas: np.ndarray, upper: float) -> float:
    free = (alphas > 0.0) & (alphas < upper)
    if free.any():
        return float(np.mean(grad[free]))
    at_upper = alphas >= upper
    at_zero = alphas <= 0.0
    # KKT: grad <= rho where a = upper, grad >= rho where a = 0
    low = float(np.max(grad[at_upper])) if at_upper.any() else None
    high = float(np.min(grad[at_zero])) if at_zero.any() else None
    if low is not None and high is not None:
        return 0.5 * (low + high)
    return low if low is not None else high


def ocsvm_fit(
    train: np.ndarray,
    nu: float = DEFAULT_NU,
    gamma: Optional[float] = None,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> OcSvmModel:
    x = np.asarray(train, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"OC-SVM needs at least 2 training rows, got shape {x.shape}")
    if not 0.0 < nu <= 1.0:
        raise ConfigError(f"nu must lie in (0, 1], got {nu}")
    n = x.shape[0]
    gamma = default_gamma(x) if gamma is None else float(gamma)
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    max_iter = max_iter or max(10_000, 100 * n)

    upper = 1.0 / (nu * n)
    kernel = rbf_kernel(x, x, gamma)
    diag = np.diag(kernel).copy()
    alphas = np.full(n, 1.0 / n)
    grad = kernel @ alphas

    iterations, gap = 0, 0.0
    while True:
        can_grow = alphas < upper
        can_shrink = alphas > 0.0
        if not can_grow.any() or not can_shrink.any():
            gap = 0.0
            break
        grow_idx = np.flatnonzero(can_grow)
        shrink_idx = np.flatnonzero(can_shrink)
        i = grow_idx[np.argmin(grad[grow_idx])]
        j = shrink_idx[np.argmax(grad[shrink_idx])]
        gap = float(grad[j] - grad[i])
        if gap < tol:
            break
        if iterations >= max_iter:
            raise SolverError("OC-SVM dual solver did not converge", residual=gap, iterations=iterations)

        curvature = diag[i] + diag[j] - 2.0 * kernel[i, j]
        if curvature <= 0.0:
            curvature = 1e-12
        room_i, room_j = upper - alphas[i], alphas[j]
        delta = min(gap / curvature, room_i, room_j)
        alphas[i] = upper if delta == room_i else alphas[i] + delta
        alphas[j] = 0.0 if delta == room_j else alphas[j] - delta
        grad += delta * (kernel[:, i] - kernel[:, j])
        iterations += 1

    rho = _offset(grad, alphas, upper)
    support = alphas > 0.0
    logger.info(
        "OC-SVM converged after %d iterations: %d support vectors, max KKT gap %.3g",
        iterations, int(support.sum()), gap,
    )
    return OcSvmModel(
        support_vectors=x[support].copy(),
        alphas=alphas[support].copy(),
        rho=rho,
        gamma=gamma,
        nu=nu,
        n_train=n,
        iterations=iterations,
        kkt_gap=max(gap, 0.0),
    )


def ocsvm_score(model: OcSvmModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim:
        raise ShapeError(f"OC-SVM expects a vector of length {model.dim}, got shape {x.shape}")
    return float(ocsvm_score_batch(model, x[None, :], threads=1)[0])


def ocsvm_score_batch(model: OcSvmModel, x: np.ndarray, threads: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"OC-SVM expects rows of length {model.dim}, got shape {x.shape}")

    def score_chunk(rows: np.ndarray) -> np.ndarray:
        return rbf_kernel(rows, model.support_vectors, model.gamma) @ model.alphas - model.rho

    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate(map_row_chunks(score_chunk, x, threads=threads))
