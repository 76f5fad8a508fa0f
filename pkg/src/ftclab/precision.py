"""Online sensor-precision learning.

Three routes: exact conjugate updates of a Gamma posterior over a scalar
precision, the Wishart analogue for precision matrices, and a point-mass
gradient update with an eigenvalue floor.  A forgetting step lets trust
recover after a fault clears; without it the Gamma rate grows without bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GammaBelief",
    "GammaMoments",
    "WishartBelief",
    "PointPrecision",
    "gamma_update",
    "gamma_moments",
    "gamma_forget",
    "expected_precision",
    "wishart_density",
    "wishart_update",
    "point_update",
    "multivariate_gamma_log",
]


@dataclass(frozen=True)
class GammaBelief:
    """Gamma(shape=alpha, rate=beta) posterior over a scalar precision."""

    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ValueError(
                f"Gamma parameters must be positive, got ({self.alpha}, {self.beta})"
            )


@dataclass(frozen=True)
class GammaMoments:
    mean: float
    mode: float | None
    variance: float


def gamma_update(belief: GammaBelief, y: float, c: float) -> GammaBelief:
    """Conjugate update for one Gaussian sample with known mean c.

    Posterior is Gamma(alpha + 1/2, beta + (y - c)^2 / 2).
    """
    r = y - c
    return GammaBelief(alpha=belief.alpha + 0.5, beta=belief.beta + 0.5 * r * r)


def gamma_moments(belief: GammaBelief) -> GammaMoments:
    """Mean a/b, mode (a-1)/b (None when a <= 1), variance a/b^2."""
    mode = (belief.alpha - 1.0) / belief.beta if belief.alpha > 1.0 else None
    return GammaMoments(
        mean=belief.alpha / belief.beta,
        mode=mode,
        variance=belief.alpha / (belief.beta * belief.beta),
    )


def gamma_forget(
    belief: GammaBelief, lam: float, prior: GammaBelief
) -> GammaBelief:
    """Geometric decay of the belief toward its prior: lam=1 is the identity."""
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"forgetting factor must be in (0, 1], got {lam}")
    return GammaBelief(
        alpha=lam * belief.alpha + (1.0 - lam) * prior.alpha,
        beta=lam * belief.beta + (1.0 - lam) * prior.beta,
    )


def expected_precision(belief: GammaBelief) -> float:
    """E[omega] = a/b, the sensor weight handed to the controller."""
    return belief.alpha / belief.beta


@dataclass(frozen=True)
class WishartBelief:
    """Wishart(dof=n, scale=V) posterior over a p x p precision matrix."""

    dof: float
    scale: np.ndarray

    def __post_init__(self) -> None:
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "scale", scale)
        p = scale.shape[0]
        if scale.shape != (p, p):
            raise ValueError(f"scale must be square, got shape {scale.shape}")
        if not np.allclose(scale, scale.T):
            raise ValueError("scale must be symmetric")
        if np.any(np.linalg.eigvalsh(scale) <= 0.0):
            raise ValueError("scale must be positive definite")
        if self.dof < p:
            raise ValueError(f"dof must be >= matrix size, got {self.dof} < {p}")

    @property
    def p(self) -> int:
        return self.scale.shape[0]


def multivariate_gamma_log(a: float, k: int) -> float:
    """log Gamma_k(a) via the product formula."""
    if k < 1:
        raise ValueError(f"dimension must be >= 1, got {k}")
    out = 0.25 * k * (k - 1) * math.log(math.pi)
    for j in range(1, k + 1):
        out += math.lgamma(a - 0.5 * (j - 1))
    return out


def wishart_density(x: np.ndarray, belief: WishartBelief) -> float:
    """Wishart density at the SPD matrix x.

    p(x) = |x|^((n-k-1)/2) exp(-tr(V^-1 x)/2) / (2^(nk/2) |V|^(n/2) Gamma_k(n/2)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = belief.p
    if x.shape != (k, k):
        raise ValueError(f"x must be {k}x{k}, got shape {x.shape}")
    if not np.allclose(x, x.T) or np.any(np.linalg.eigvalsh(x) <= 0.0):
        raise ValueError("x must be symmetric positive definite")
    n = belief.dof
    sign_x, logdet_x = np.linalg.slogdet(x)
    sign_v, logdet_v = np.linalg.slogdet(belief.scale)
    trace_term = float(np.trace(np.linalg.solve(belief.scale, x)))
    log_p = (
        0.5 * (n - k - 1) * logdet_x
        - 0.5 * trace_term
        - 0.5 * n * k * math.log(2.0)
        - 0.5 * n * logdet_v
        - multivariate_gamma_log(0.5 * n, k)
    )
    return math.exp(log_p)


def wishart_update(
    belief: WishartBelief, y: np.ndarray, c: np.ndarray
) -> WishartBelief:
    """Conjugate update for one Gaussian sample with known mean vector c.

    dof increments by 1 and the scale updates through
    V'^-1 = V^-1 + (y - c)(y - c)^T, applied via Sherman-Morrison.
    """
    r = np.atleast_1d(np.asarray(y, dtype=float)) - np.atleast_1d(
        np.asarray(c, dtype=float)
    )
    v = belief.scale
    vr = v @ r
    denom = 1.0 + float(r @ vr)
    v_new = v - np.outer(vr, vr) / denom
    v_new = 0.5 * (v_new + v_new.T)
    return WishartBelief(dof=belief.dof + 1.0, scale=v_new)


@dataclass(frozen=True)
class PointPrecision:
    """Point estimate of a precision matrix with a learning rate and SPD floor."""

    value: np.ndarray
    learning_rate: float
    floor: float = 1e-4

    def __post_init__(self) -> None:
        value = np.atleast_2d(np.asarray(self.value, dtype=float))
        object.__setattr__(self, "value", value)
        if self.floor <= 0.0:
            raise ValueError(f"floor must be positive, got {self.floor}")
        if not np.allclose(value, value.T):
            raise ValueError("precision must be symmetric")
        if np.any(np.linalg.eigvalsh(value) < self.floor - 1e-12):
            raise ValueError("precision eigenvalues must sit at or above the floor")


def point_update(pp: PointPrecision, residual: np.ndarray) -> PointPrecision:
    """One gradient step of the Gaussian-term objective on the precision.

    The gradient of 1/2 (e^T P e - ln|P|) in P is 1/2 (e e^T - P^-1); the
    update P <- P - k/2 (e e^T - P^-1) is followed by an eigenvalue-floor
    projection that keeps the result SPD.
    """
    e = np.atleast_1d(np.asarray(residual, dtype=float))
    p = pp.value
    grad = 0.5 * (np.outer(e, e) - np.linalg.inv(p))
    p_new = p - pp.learning_rate * grad
    p_new = 0.5 * (p_new + p_new.T)
    eigvals, eigvecs = np.linalg.eigh(p_new)
    if np.any(eigvals < pp.floor):
        eigvals = np.maximum(eigvals, pp.floor)
        p_new = (eigvecs * eigvals) @ eigvecs.T
        p_new = 0.5 * (p_new + p_new.T)
    return PointPrecision(value=p_new, learning_rate=pp.learning_rate, floor=pp.floor)
