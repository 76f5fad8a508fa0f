"""Discrete-time simulated plants with noisy sensor models.

Two systems are provided: a vehicle cruise-control plant (scalar velocity
state, redundant velocity sensors) and a 2-DOF manipulator (damped
double-integrator joints observed by position/velocity encoders and a
barrel-distorted camera).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "CruiseConfig",
    "ManipulatorConfig",
    "ManipulatorSensor",
    "PlantState",
    "Observation",
    "step_cruise",
    "observe_cruise",
    "step_manipulator",
    "observe_manipulator",
    "barrel_distort",
]


@dataclass(frozen=True)
class CruiseConfig:
    """Vehicle cruise-control parameters.

    Defaults are the benchmark values: drag 5 N*s/m, mass 100 kg, dt 0.02 s,
    process-noise variance 0.001 m^2/s^2 and per-sensor observation-noise
    variance 1.0 m^2/s^2.
    """

    drag_b: float = 5.0
    mass_m: float = 100.0
    dt: float = 0.02
    process_noise_var: float = 0.001
    obs_noise_var: float = 1.0
    n_sensors: int = 2

    def __post_init__(self) -> None:
        if self.mass_m <= 0.0:
            raise ValueError(f"mass_m must be positive, got {self.mass_m}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.process_noise_var < 0.0 or self.obs_noise_var < 0.0:
            raise ValueError("noise variances must be non-negative")
        if self.n_sensors < 1:
            raise ValueError(f"n_sensors must be >= 1, got {self.n_sensors}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(
                f"unstable discretization: 1 - b/m*dt = {self.decay} not in (0, 1)"
            )

    @property
    def decay(self) -> float:
        """State transition coefficient 1 - (b/m)*dt."""
        return 1.0 - self.drag_b / self.mass_m * self.dt

    @property
    def input_gain(self) -> float:
        """Control coefficient dt/m."""
        return self.dt / self.mass_m


class ManipulatorSensor(str, Enum):
    POS_ENCODER = "pos_encoder"
    VEL_ENCODER = "vel_encoder"
    CAMERA = "camera"


@dataclass(frozen=True)
class ManipulatorConfig:
    """2-DOF manipulator parameters.

    Encoder noise sigmas default to 0.001 (rad, rad/s), the camera to 0.01 rad
    with barrel-distortion coefficients (K1, K2, K3) = (-1.5e-3, 5e-6, 0).
    Joints are decoupled unit-inertia double integrators with configurable
    viscous damping.
    """

    n_joints: int = 2
    encoder_pos_sigma: float = 0.001
    encoder_vel_sigma: float = 0.001
    camera_sigma: float = 0.01
    distortion: tuple[float, float, float] = (-1.5e-3, 5e-6, 0.0)
    joint_damping: float = 1.0
    dt: float = 0.02
    process_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.n_joints < 1:
            raise ValueError(f"n_joints must be >= 1, got {self.n_joints}")
        for name in ("encoder_pos_sigma", "encoder_vel_sigma", "camera_sigma",
                     "process_noise_sigma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class PlantState:
    """Plant state vector at time t.

    Cruise: x = [velocity m/s]. Manipulator: x = [q1, q2, qd1, qd2]
    (rad, rad/s).
    """

    x: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if not np.all(np.isfinite(self.x)):
            raise ValueError("plant state must be finite")


@dataclass(frozen=True)
class Observation:
    """A single sensor reading at time t."""

    sensor_id: int
    value: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "value", np.atleast_1d(np.asarray(self.value, dtype=float))
        )
        if not np.all(np.isfinite(self.value)):
            raise ValueError("observation must be finite")


def step_cruise(
    state: PlantState,
    u: float,
    cfg: CruiseConfig,
    noise: np.random.Generator | None = None,
) -> PlantState:
    """Advance the cruise plant one step: x' = (1 - b/m dt) x + dt/m u + q."""
    q = 0.0
    if noise is not None and cfg.process_noise_var > 0.0:
        q = noise.normal(0.0, np.sqrt(cfg.process_noise_var))
    x_next = cfg.decay * state.x + cfg.input_gain * float(u) + q
    return PlantState(x=x_next, t=state.t + cfg.dt)


def observe_cruise(
    state: PlantState,
    sensor_id: int,
    cfg: CruiseConfig,
    noise: np.random.Generator | None = None,
) -> Observation:
    """Read redundant velocity sensor `sensor_id`: y = x + eta."""
    if not 0 <= sensor_id < cfg.n_sensors:
        raise ValueError(
            f"unknown sensor_id {sensor_id} (plant has {cfg.n_sensors} sensors)"
        )
    value = state.x.copy()
    if noise is not None and cfg.obs_noise_var > 0.0:
        value = value + noise.normal(0.0, np.sqrt(cfg.obs_noise_var), size=value.shape)
    return Observation(sensor_id=sensor_id, value=value, t=state.t)


def step_manipulator(
    state: PlantState,
    u: np.ndarray,
    cfg: ManipulatorConfig,
    noise: np.random.Generator | None = None,
) -> PlantState:
    """One explicit-Euler step of the damped double-integrator joints.

    Per joint: qdd = u - damping * qd; position integrates the pre-update
    velocity.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (cfg.n_joints,):
        raise ValueError(f"expected {cfg.n_joints} joint torques, got shape {u.shape}")
    n = cfg.n_joints
    q = state.x[:n]
    qd = state.x[n:]
    q_next = q + qd * cfg.dt
    qd_next = qd + (u - cfg.joint_damping * qd) * cfg.dt
    if noise is not None and cfg.process_noise_sigma > 0.0:
        qd_next = qd_next + noise.normal(0.0, cfg.process_noise_sigma, size=n) * cfg.dt
    return PlantState(x=np.concatenate([q_next, qd_next]), t=state.t + cfg.dt)


def barrel_distort(
    v: np.ndarray, k1: float, k2: float, k3: float
) -> np.ndarray:
    """Radial barrel distortion: v * (1 + K1 r^2 + K2 r^4 + K3 r^6), r = ||v||."""
    v = np.asarray(v, dtype=float)
    r2 = float(v @ v)
    return v * (1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2)


def barrel_distort_jacobian(
    v: np.ndarray, k1: float, k2: float, k3: float
) -> np.ndarray:
    """Jacobian of `barrel_distort` with respect to v."""
    v = np.asarray(v, dtype=float)
    r2 = float(v @ v)
    scale = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    dscale_dr2 = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2
    return scale * np.eye(len(v)) + 2.0 * dscale_dr2 * np.outer(v, v)


_MANIP_SENSOR_IDS = {
    ManipulatorSensor.POS_ENCODER: 0,
    ManipulatorSensor.VEL_ENCODER: 1,
    ManipulatorSensor.CAMERA: 2,
}


def observe_manipulator(
    state: PlantState,
    sensor_kind: ManipulatorSensor | str,
    cfg: ManipulatorConfig,
    noise: np.random.Generator | None = None,
) -> Observation:
    """Read one manipulator sensor.

    pos_encoder -> q + eta_q; vel_encoder -> qd + eta_qd;
    camera -> barrel_distort(q) + eta_v.
    """
    kind = ManipulatorSensor(sensor_kind)
    n = cfg.n_joints
    if kind is ManipulatorSensor.POS_ENCODER:
        value, sigma = state.x[:n].copy(), cfg.encoder_pos_sigma
    elif kind is ManipulatorSensor.VEL_ENCODER:
        value, sigma = state.x[n:].copy(), cfg.encoder_vel_sigma
    else:
        value = barrel_distort(state.x[:n], *cfg.distortion)
        sigma = cfg.camera_sigma
    if noise is not None and sigma > 0.0:
        value = value + noise.normal(0.0, sigma, size=n)
    return Observation(sensor_id=_MANIP_SENSOR_IDS[kind], value=value, t=state.t)
