"""Bayesian control laws.

Two controllers share the generative-model machinery here:

* an active-inference controller that descends a variational free energy over
  posterior state/action means, fusing multiple sensor modalities through
  precision-weighted prediction errors, and
* a Bayesian controller that estimates state and action jointly by minimizing
  the negative log-likelihood of a one-step generative model with a goal
  prior over the next state.

Both expose analytic gradients so they can be checked against finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ControllerBelief",
    "PrecisionSet",
    "Constant",
    "Ramp",
    "Sinusoid",
    "GoalSpec",
    "eval_goal",
    "SensorChannel",
    "linear_channel",
    "identity_channel",
    "TransitionModel",
    "linear_transition",
    "p_control",
    "uaic_free_energy",
    "uaic_step",
    "UaicStepResult",
    "BCCovariances",
    "bc_nll",
    "bc_step",
    "BCStepResult",
    "OptimizerSettings",
]


def _as_matrix(m: np.ndarray | float) -> np.ndarray:
    return np.atleast_2d(np.asarray(m, dtype=float))


def _check_spd(name: str, m: np.ndarray) -> np.ndarray:
    m = _as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be positive definite") from exc
    return m


@dataclass
class ControllerBelief:
    """Posterior means carried between controller steps.

    mu_x / mu_u are the state and action means, x_pred the random-walk
    prediction of the state, x_next the next-state decision variable used by
    the Bayesian controller.
    """

    mu_x: np.ndarray
    mu_u: np.ndarray
    x_pred: np.ndarray
    x_next: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.mu_x = np.atleast_1d(np.asarray(self.mu_x, dtype=float))
        self.mu_u = np.atleast_1d(np.asarray(self.mu_u, dtype=float))
        self.x_pred = np.atleast_1d(np.asarray(self.x_pred, dtype=float))
        if self.x_next is not None:
            self.x_next = np.atleast_1d(np.asarray(self.x_next, dtype=float))


@dataclass(frozen=True)
class PrecisionSet:
    """Precision matrices weighting each term of the free energy."""

    p_y: tuple[np.ndarray, ...]
    p_x: np.ndarray
    p_u: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "p_y",
            tuple(_check_spd(f"p_y[{i}]", p) for i, p in enumerate(self.p_y)),
        )
        object.__setattr__(self, "p_x", _check_spd("p_x", self.p_x))
        object.__setattr__(self, "p_u", _check_spd("p_u", self.p_u))

    def log_det_total(self) -> float:
        """ln|P_u P_y(1) ... P_y(m) P_x| as a sum of log-determinants."""
        total = float(np.linalg.slogdet(self.p_u)[1])
        total += float(np.linalg.slogdet(self.p_x)[1])
        for p in self.p_y:
            total += float(np.linalg.slogdet(p)[1])
        return total


@dataclass(frozen=True)
class Constant:
    value: np.ndarray | float


@dataclass(frozen=True)
class Ramp:
    slope: float
    intercept: float


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float
    frequency: float
    phase: float = 0.0


GoalSpec = Constant | Ramp | Sinusoid


def eval_goal(goal: GoalSpec, t: float) -> np.ndarray:
    """Target value at time t for a constant, ramp, or sinusoid trajectory."""
    if isinstance(goal, Constant):
        return np.atleast_1d(np.asarray(goal.value, dtype=float))
    if isinstance(goal, Ramp):
        return np.atleast_1d(goal.intercept + goal.slope * t)
    if isinstance(goal, Sinusoid):
        return np.atleast_1d(
            goal.amplitude * math.sin(2.0 * math.pi * goal.frequency * t + goal.phase)
        )
    raise TypeError(f"not a goal trajectory: {goal!r}")


@dataclass(frozen=True)
class SensorChannel:
    """Observation model for one sensor modality: y = g(x) + noise.

    `linear` marks channels whose Jacobian is constant, letting optimizers
    hoist curvature assembly out of their iteration loops.
    """

    name: str
    g: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    linear: bool = False


def linear_channel(name: str, h: np.ndarray) -> SensorChannel:
    h = np.atleast_2d(np.asarray(h, dtype=float))
    return SensorChannel(name=name, g=lambda x: h @ x, jacobian=lambda x: h, linear=True)


def identity_channel(name: str, dim: int) -> SensorChannel:
    return linear_channel(name, np.eye(dim))


def p_control(mu_x: np.ndarray, mu_d: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Proportional steering action gain @ (mu_d - mu_x)."""
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    return gain @ (np.atleast_1d(mu_d) - np.atleast_1d(mu_x))


def uaic_free_energy(
    belief: ControllerBelief,
    observations: Sequence[np.ndarray],
    channels: Sequence[SensorChannel],
    precisions: PrecisionSet,
    mu_d: np.ndarray,
    gain: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Free energy and its analytic gradients w.r.t. (mu_x, mu_u).

    F = 1/2 (sum_i e_i^T P_i e_i + e_x^T P_x e_x + e_u^T P_u e_u
             - ln|P_u P_y(1)...P_y(m) P_x|)
    with e_i = y_i - g_i(mu_x), e_x = mu_x - x_pred and
    e_u = mu_u - gain (mu_d - mu_x).
    """
    if len(observations) != len(channels):
        raise ValueError("one observation per sensor channel is required")
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    mu_x = belief.mu_x
    quad = 0.0
    grad_x = np.zeros_like(mu_x)
    for y, channel, p in zip(observations, channels, precisions.p_y):
        e = np.atleast_1d(np.asarray(y, dtype=float)) - channel.g(mu_x)
        pe = p @ e
        quad += float(e @ pe)
        grad_x -= channel.jacobian(mu_x).T @ pe
    e_x = mu_x - belief.x_pred
    pe_x = precisions.p_x @ e_x
    quad += float(e_x @ pe_x)
    grad_x += pe_x
    e_u = belief.mu_u - p_control(mu_x, mu_d, gain)
    pe_u = precisions.p_u @ e_u
    quad += float(e_u @ pe_u)
    grad_x += gain.T @ pe_u
    grad_u = pe_u
    f_value = 0.5 * (quad - precisions.log_det_total())
    return f_value, grad_x, grad_u


@dataclass(frozen=True)
class UaicStepResult:
    belief: ControllerBelief
    u: np.ndarray
    f_value: float


def uaic_step(
    belief: ControllerBelief,
    observations: Sequence[np.ndarray],
    channels: Sequence[SensorChannel],
    precisions: PrecisionSet,
    mu_d: np.ndarray,
    gain: np.ndarray,
    kappa_x: float,
    kappa_u: float,
    n_updates: int = 1,
) -> UaicStepResult:
    """Descend the free energy: k gradient updates of (mu_x, mu_u).

    The state prediction follows a random walk (x_pred <- previous mu_x)
    before the updates; the applied control is the updated mu_u.
    """
    if kappa_x <= 0.0 or kappa_u <= 0.0:
        raise ValueError("step sizes must be positive")
    if n_updates < 1:
        raise ValueError(f"n_updates must be >= 1, got {n_updates}")
    mu_x = belief.mu_x.copy()
    mu_u = belief.mu_u.copy()
    x_pred = belief.mu_x.copy()
    working = ControllerBelief(mu_x=mu_x, mu_u=mu_u, x_pred=x_pred)
    f_value = math.nan
    for _ in range(n_updates):
        f_value, grad_x, grad_u = uaic_free_energy(
            working, observations, channels, precisions, mu_d, gain
        )
        working.mu_x = working.mu_x - kappa_x * grad_x
        working.mu_u = working.mu_u - kappa_u * grad_u
    return UaicStepResult(belief=working, u=working.mu_u.copy(), f_value=f_value)


class DivergenceGuard:
    """Flags free-energy blow-up: a 10x rise over the recent window."""

    def __init__(self, window: int = 50) -> None:
        if window < 2:
            raise ValueError("window must be >= 2")
        self._window = window
        self._values: list[float] = []

    def update(self, f_value: float) -> bool:
        """Record a value; True signals instability."""
        if not math.isfinite(f_value):
            return True
        self._values.append(f_value)
        if len(self._values) > self._window:
            self._values.pop(0)
        if len(self._values) < self._window:
            return False
        low = min(self._values)
        return f_value - low > 10.0 * (abs(low) + 1e-6)


@dataclass(frozen=True)
class TransitionModel:
    """State transition x' = f(x, u) with Jacobians in x and u."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    linear: bool = False


def linear_transition(a: np.ndarray, b: np.ndarray) -> TransitionModel:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return TransitionModel(
        f=lambda x, u: a @ x + b @ u,
        jac_x=lambda x, u: a,
        jac_u=lambda x, u: b,
        linear=True,
    )


@dataclass(frozen=True)
class BCCovariances:
    """Covariances of the Bayesian controller's generative model.

    sigma_goal=None drops the goal-prior term entirely (pure filtering).
    """

    sigma_f: np.ndarray
    sigma_g: tuple[np.ndarray, ...]
    sigma_1: np.ndarray
    sigma_goal: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma_f", _check_spd("sigma_f", self.sigma_f))
        object.__setattr__(
            self,
            "sigma_g",
            tuple(_check_spd(f"sigma_g[{i}]", s) for i, s in enumerate(self.sigma_g)),
        )
        object.__setattr__(self, "sigma_1", _check_spd("sigma_1", self.sigma_1))
        if self.sigma_goal is not None:
            object.__setattr__(
                self, "sigma_goal", _check_spd("sigma_goal", self.sigma_goal)
            )


class _Precisions:
    """Inverted covariances of the generative model, computed once."""

    def __init__(self, covariances: BCCovariances) -> None:
        self.prec_f = np.linalg.inv(covariances.sigma_f)
        self.prec_g = tuple(np.linalg.inv(s) for s in covariances.sigma_g)
        self.prec_1 = np.linalg.inv(covariances.sigma_1)
        self.prec_goal = (
            None
            if covariances.sigma_goal is None
            else np.linalg.inv(covariances.sigma_goal)
        )
        # The ln Sigma^-1 additions of the norm convention, constant in the
        # optimization variables.
        self.log_det = -float(np.linalg.slogdet(covariances.sigma_f)[1])
        self.log_det -= float(np.linalg.slogdet(covariances.sigma_1)[1])
        for s in covariances.sigma_g:
            self.log_det -= float(np.linalg.slogdet(s)[1])
        if covariances.sigma_goal is not None:
            self.log_det -= float(np.linalg.slogdet(covariances.sigma_goal)[1])


def _nll_core(
    x_t: np.ndarray,
    x_next: np.ndarray,
    u: np.ndarray,
    observations: Sequence[np.ndarray],
    x_pred: np.ndarray,
    x_goal: np.ndarray,
    transition: TransitionModel,
    channels: Sequence[SensorChannel],
    precs: _Precisions,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    value = precs.log_det
    grad_x = np.zeros_like(x_t)
    grad_next = np.zeros_like(x_next)
    grad_u = np.zeros_like(u)

    r_f = x_next - transition.f(x_t, u)
    p_rf = precs.prec_f @ r_f
    value += float(r_f @ p_rf)
    grad_next += 2.0 * p_rf
    grad_x -= 2.0 * transition.jac_x(x_t, u).T @ p_rf
    grad_u -= 2.0 * transition.jac_u(x_t, u).T @ p_rf

    for y, channel, prec_g in zip(observations, channels, precs.prec_g):
        r_g = np.atleast_1d(np.asarray(y, dtype=float)) - channel.g(x_t)
        p_rg = prec_g @ r_g
        value += float(r_g @ p_rg)
        grad_x -= 2.0 * channel.jacobian(x_t).T @ p_rg

    if precs.prec_goal is not None:
        r_goal = x_next - x_goal
        p_rgoal = precs.prec_goal @ r_goal
        value += float(r_goal @ p_rgoal)
        grad_next += 2.0 * p_rgoal

    r_1 = x_t - x_pred
    p_r1 = precs.prec_1 @ r_1
    value += float(r_1 @ p_r1)
    grad_x += 2.0 * p_r1

    return value, grad_x, grad_next, grad_u


def bc_nll(
    x_t: np.ndarray,
    x_next: np.ndarray,
    u: np.ndarray,
    observations: Sequence[np.ndarray],
    x_pred: np.ndarray,
    x_goal: np.ndarray,
    transition: TransitionModel,
    channels: Sequence[SensorChannel],
    covariances: BCCovariances,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Negative log-likelihood of the one-step generative model.

    -L = ||x_next - f(x_t, u)||^2_{Sigma_f} + sum_i ||y_i - g_i(x_t)||^2_{Sigma_g,i}
         + ||x_next - x_goal||^2_{Sigma_goal} + ||x_t - x_pred||^2_{Sigma_1}
    with ||a - b||^2_Sigma = (a-b)^T Sigma^-1 (a-b) + ln Sigma^-1.
    Returns (value, d/dx_t, d/dx_next, d/du).
    """
    if len(observations) != len(channels):
        raise ValueError("one observation per sensor channel is required")
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x_pred = np.atleast_1d(np.asarray(x_pred, dtype=float))
    x_goal = np.atleast_1d(np.asarray(x_goal, dtype=float))
    return _nll_core(
        x_t, x_next, u, observations, x_pred, x_goal, transition, channels,
        _Precisions(covariances),
    )


@dataclass(frozen=True)
class OptimizerSettings:
    """Inner-optimization budget for the Bayesian controller.

    Each iteration takes a damped Gauss-Newton step (step_size 1.0 is the
    full step, exact for linear-Gaussian models); descent stops when the
    objective changes by less than tol.
    """

    iterations: int = 50
    step_size: float = 1.0
    tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must lie in (0, 1]")
        if self.tol < 0.0:
            raise ValueError("tol must be >= 0")


@dataclass(frozen=True)
class BCStepResult:
    estimate: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    belief: ControllerBelief
    f_value: float
    converged: bool
    iterations: int


def bc_step(
    belief: ControllerBelief,
    observations: Sequence[np.ndarray],
    x_goal: np.ndarray,
    transition: TransitionModel,
    channels: Sequence[SensorChannel],
    covariances: BCCovariances,
    settings: OptimizerSettings = OptimizerSettings(),
) -> BCStepResult:
    """Jointly minimize the NLL over (x_t, x_next, u) with Gauss-Newton steps.

    Fixed-step gradient descent is hopeless on this objective: the input
    gain dt/m leaves the action curvature ~1e7 times below the state
    curvature, and the transition/goal trade-off forms a near-flat valley.
    Each iteration therefore solves the local quadratic model (exact for
    linear-Gaussian models); a tiny relative Tikhonov term handles the
    singular valley when the goal prior is absent.  Exhausting the budget
    before the objective change drops below tol is reported as
    non-convergence; the last iterate is still returned.
    """
    x = belief.mu_x.copy()
    u = belief.mu_u.copy()
    x_next = belief.x_next.copy() if belief.x_next is not None else x.copy()
    x_pred = belief.x_pred
    x_goal = np.atleast_1d(np.asarray(x_goal, dtype=float))
    observations = [np.atleast_1d(np.asarray(y, dtype=float)) for y in observations]
    precs = _Precisions(covariances)

    d = len(x)
    m = len(u)
    n_z = 2 * d + m
    sl_x = slice(0, d)
    sl_next = slice(d, 2 * d)
    sl_u = slice(2 * d, n_z)

    value = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, settings.iterations + 1):
        new_value, grad_x, grad_next, grad_u = _nll_core(
            x, x_next, u, observations, x_pred, x_goal, transition, channels, precs
        )
        if abs(value - new_value) < settings.tol:
            value = new_value
            converged = True
            break
        value = new_value

        jf_x = transition.jac_x(x, u)
        jf_u = transition.jac_u(x, u)
        pf_jx = precs.prec_f @ jf_x
        pf_ju = precs.prec_f @ jf_u
        h = np.zeros((n_z, n_z))
        h_xx = jf_x.T @ pf_jx + precs.prec_1
        for channel, prec_g in zip(channels, precs.prec_g):
            jg = channel.jacobian(x)
            h_xx = h_xx + jg.T @ prec_g @ jg
        h[sl_x, sl_x] = h_xx
        h[sl_next, sl_next] = precs.prec_f + (
            precs.prec_goal if precs.prec_goal is not None else 0.0
        )
        h[sl_u, sl_u] = jf_u.T @ pf_ju
        h[sl_x, sl_next] = -pf_jx.T
        h[sl_next, sl_x] = -pf_jx
        h[sl_x, sl_u] = jf_x.T @ pf_ju
        h[sl_u, sl_x] = h[sl_x, sl_u].T
        h[sl_next, sl_u] = -pf_ju
        h[sl_u, sl_next] = -pf_ju.T
        h *= 2.0

        grad = np.concatenate([grad_x, grad_next, grad_u])
        ridge = 1e-10 * max(float(np.max(np.diag(h))), 1.0)
        delta = np.linalg.solve(h + ridge * np.eye(n_z), -grad)
        x = x + settings.step_size * delta[sl_x]
        x_next = x_next + settings.step_size * delta[sl_next]
        u = u + settings.step_size * delta[sl_u]

    new_belief = ControllerBelief(mu_x=x, mu_u=u, x_pred=x.copy(), x_next=x_next)
    return BCStepResult(
        estimate=x,
        u=u,
        x_next=x_next,
        belief=new_belief,
        f_value=value,
        converged=converged,
        iterations=iterations,
    )
