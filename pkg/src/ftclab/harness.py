"""Scenario orchestration: closed-loop runs, ensembles, merit tables, corpora.

A scenario pairs a plant with a fault-tolerance technique, a fault kind, and
a reference trajectory.  The cruise plant runs the Bayesian controller with
two redundant velocity sensors; the manipulator runs the active-inference
controller with position/velocity encoders and a camera.  Everything is
deterministic given (config, master seed): every random draw comes from a
stream keyed by (purpose, run index, channel).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import controllers, detection, faults, plants, precision
from .controllers import (
    BCCovariances,
    Constant,
    ControllerBelief,
    GoalSpec,
    OptimizerSettings,
    PrecisionSet,
    Ramp,
    SensorChannel,
    Sinusoid,
    eval_goal,
    identity_channel,
    linear_channel,
    linear_transition,
)
from .detection import EfFdiTracker, ResidualRecord, Threshold, ser_residual
from .faults import FaultEvent, FaultSchedule, Freeze, Drift, Injection
from .plants import (
    CruiseConfig,
    ManipulatorConfig,
    Observation,
    PlantState,
    barrel_distort,
    barrel_distort_jacobian,
)
from .precision import GammaBelief, expected_precision, gamma_forget, gamma_update
from .stats import welch_t_test

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "FaultSettings",
    "GoalSettings",
    "ControllerSettings",
    "LearningSettings",
    "DetectionSettings",
    "ManipulatorScenario",
    "RunMetrics",
    "RunResult",
    "EnsembleResult",
    "ScenarioThresholds",
    "MeritTable",
    "Corpus",
    "ResidualEvaluation",
    "FT_TECHNIQUES",
    "MERIT_TECHNIQUES",
    "calibrate_thresholds",
    "run_scenario",
    "run_ensemble",
    "merit_scenarios",
    "run_merit",
    "merit_table",
    "generate_corpus",
    "evaluate_residuals",
]

FT_TECHNIQUES = ("noft", "ef-fdi", "ser-ft", "pl-implicit", "pl-explicit")
MERIT_TECHNIQUES = ("ef-fdi", "noft", "pl-implicit", "ser-ft")
FAULT_KINDS = ("none", "freeze", "drift", "injection", "poisson")
TRAJECTORIES = ("constant", "ramp", "sinusoid")

_DIVERGENCE_LIMIT = 1e9


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario configuration."""


@dataclass(frozen=True)
class FaultSettings:
    """Fault magnitudes and timing.

    `start`/`duration` control fixed-fault scenarios (None picks a
    plant-appropriate default); mttf/mttr parameterize Poisson schedules.
    """

    injection_offset: float = 5.0
    drift_rate: float = 2.0
    start: float | None = None
    duration: float | None = None
    mttf: float = 2.8
    mttr: float = 0.4


@dataclass(frozen=True)
class GoalSettings:
    """Reference-trajectory parameters for the cruise plant."""

    constant: float = 10.0
    ramp_slope: float = 0.5
    ramp_intercept: float = 5.0
    sin_amplitude: float = 5.0
    sin_frequency: float = 0.05
    sin_phase: float = 0.0


@dataclass(frozen=True)
class ControllerSettings:
    """Hyperparameters of both controllers.

    sigma_goal sets control aggressiveness; sigma_1 the prediction-prior
    variance.  prediction picks how x_pred advances between steps: "model"
    feeds the estimate through the known transition (the Kalman predict
    step), "random-walk" keeps the previous estimate.  The model prediction
    is what keeps a constant-offset fault identifiable on redundant sensors:
    with a random walk the control loop redistributes the offset evenly and
    the faulty sensor cannot be told from the healthy one.
    kappa_x/kappa_u are the free-energy step sizes of the active-inference
    controller (sized for the manipulator's precision scale).
    """

    sigma_goal: float = 0.1
    sigma_1: float = 0.05
    prediction: str = "model"
    optimizer: OptimizerSettings = OptimizerSettings()
    gain: float = 1.0
    kappa_x: float = 2.5e-5
    kappa_u: float = 0.5
    p_u: float = 1.0
    uaic_updates: int = 1

    def __post_init__(self) -> None:
        if self.prediction not in ("model", "random-walk"):
            raise ValueError(f"unknown prediction mode {self.prediction!r}")


@dataclass(frozen=True)
class LearningSettings:
    """Precision-learning knobs shared by both plants.

    Gamma priors default to (2, 2) for the cruise sensors; the manipulator
    derives per-channel priors from its nominal sensor precisions (capped at
    nominal_cap so one modality cannot drown out the rest).  The learned
    expected precision is clamped to [trust_floor, trust_cap] times the
    nominal precision before it reaches the controller: the cap matters
    because a frozen sensor emits a noise-free constant, and uncapped
    precision learning would conclude it is the most trustworthy sensor on
    the vehicle.
    """

    prior_alpha: float = 2.0
    prior_beta: float = 2.0
    forgetting: float = 0.995
    trust_floor: float = 1e-6
    trust_cap: float = 1.0
    nominal_cap: float = 1.2e4


@dataclass(frozen=True)
class DetectionSettings:
    confidence: float = 0.997
    ef_hold_time: float = 0.4
    exclusion_precision: float = 1e-8
    # Residuals from the controller's lock-on transient are excluded from
    # threshold learning and corpora so thresholds stay sensitive.
    calibration_warmup: float = 1.0


@dataclass(frozen=True)
class ManipulatorScenario:
    """Targets for the reach task: target_1 until switch_time, then target_2."""

    target_1: tuple[float, float] = (1.0, 0.5)
    target_2: tuple[float, float] = (-0.5, 1.0)
    switch_time: float = 7.5


@dataclass(frozen=True)
class ScenarioConfig:
    plant: str = "cruise"
    ft: str = "pl-implicit"
    fault: str = "injection"
    trajectory: str = "constant"
    horizon: float = 15.0
    seed: int = 0
    runs: int = 20
    cruise: CruiseConfig = field(default_factory=CruiseConfig)
    manipulator: ManipulatorConfig = field(default_factory=ManipulatorConfig)
    task: ManipulatorScenario = field(default_factory=ManipulatorScenario)
    faults: FaultSettings = field(default_factory=FaultSettings)
    goals: GoalSettings = field(default_factory=GoalSettings)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    learning: LearningSettings = field(default_factory=LearningSettings)
    detection: DetectionSettings = field(default_factory=DetectionSettings)

    def __post_init__(self) -> None:
        if self.plant not in ("cruise", "manipulator"):
            raise ConfigError(f"unknown plant {self.plant!r}")
        if self.ft not in FT_TECHNIQUES:
            raise ConfigError(f"unknown ft technique {self.ft!r}")
        if self.fault not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.fault!r}")
        if self.trajectory not in TRAJECTORIES:
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.horizon <= 0.0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.runs < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.runs}")
        if self.plant == "manipulator" and self.fault == "poisson":
            raise ConfigError("poisson fault schedules run on the cruise plant")

    @property
    def dt(self) -> float:
        return self.cruise.dt if self.plant == "cruise" else self.manipulator.dt

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def fault_window(self) -> tuple[float, float]:
        """Resolved (start, duration) for fixed-fault scenarios."""
        if self.plant == "cruise":
            start = 6.0 if self.faults.start is None else self.faults.start
            duration = 4.0 if self.faults.duration is None else self.faults.duration
        else:
            start = 8.0 if self.faults.start is None else self.faults.start
            default_duration = max(self.horizon - start, 1e-6)
            duration = (
                default_duration if self.faults.duration is None else self.faults.duration
            )
        return start, duration

    def to_dict(self) -> dict:
        return _dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return _dataclass_from_dict(cls, d, "config")


def _dataclass_to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _dataclass_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _dataclass_from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name in known:
        if name not in d:
            continue
        v = d[name]
        if name in _NESTED_TYPES:
            kwargs[name] = _dataclass_from_dict(_NESTED_TYPES[name], v, f"{path}.{name}")
        elif isinstance(v, list):
            kwargs[name] = tuple(v)
        else:
            kwargs[name] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_NESTED_TYPES = {
    "cruise": CruiseConfig,
    "manipulator": ManipulatorConfig,
    "task": ManipulatorScenario,
    "faults": FaultSettings,
    "goals": GoalSettings,
    "controller": ControllerSettings,
    "learning": LearningSettings,
    "detection": DetectionSettings,
    "optimizer": OptimizerSettings,
}

# Stream registry: (purpose, run, channel). Purpose 0 is threshold
# calibration, 1 is a scenario run; channels 0/1 are process noise and the
# fault schedule, 10+i the per-sensor observation noise.
_PURPOSE_CALIBRATION = 0
_PURPOSE_RUN = 1


def _rng(seed: int, purpose: int, run_index: int, channel: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(purpose, run_index, channel))
    return np.random.Generator(np.random.PCG64(ss))


def _goal_spec(cfg: ScenarioConfig) -> GoalSpec:
    g = cfg.goals
    if cfg.trajectory == "constant":
        return Constant(g.constant)
    if cfg.trajectory == "ramp":
        return Ramp(slope=g.ramp_slope, intercept=g.ramp_intercept)
    return Sinusoid(amplitude=g.sin_amplitude, frequency=g.sin_frequency,
                    phase=g.sin_phase)


@dataclass
class RunMetrics:
    """Per-run summary statistics."""

    mse_belief: float
    mse_belief_components: np.ndarray
    mae_series: np.ndarray
    rmse_tracking: float
    diverged: bool


@dataclass
class RunResult:
    metrics: RunMetrics
    timeseries: list[tuple]
    residuals: list[ResidualRecord]
    belief_log: list[tuple]
    faulty_components: tuple[int, ...]
    n_fault_events: int


@dataclass
class EnsembleResult:
    runs: list[RunResult]
    mean_rmse: float
    std_rmse: float
    mean_mse_belief: float
    ensemble_mae: np.ndarray
    any_diverged: bool


@dataclass(frozen=True)
class ScenarioThresholds:
    ser: dict[str, Threshold]
    ef: dict[str, Threshold]


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def _fixed_schedule(cfg: ScenarioConfig, rng: np.random.Generator) -> FaultSchedule:
    """Single-event schedule on sensor 0 with a random magnitude sign."""
    start, duration = cfg.fault_window()
    sign = 1.0 if rng.random() < 0.5 else -1.0
    kind: faults.FaultKind
    if cfg.fault == "freeze":
        kind = Freeze()
    elif cfg.fault == "drift":
        kind = Drift(rate=sign * cfg.faults.drift_rate)
    else:
        kind = Injection(offset=sign * cfg.faults.injection_offset)
    event = FaultEvent(sensor_id=0, kind=kind, start=start, duration=duration)
    return FaultSchedule(events=(event,), horizon=cfg.horizon)


def _build_schedule(
    cfg: ScenarioConfig, rng: np.random.Generator, n_sensors: int
) -> FaultSchedule:
    if cfg.fault == "none":
        return FaultSchedule(events=(), horizon=cfg.horizon)
    if cfg.fault == "poisson":
        return faults.generate_schedule(
            mttf=cfg.faults.mttf,
            mttr=cfg.faults.mttr,
            horizon=cfg.horizon,
            n_sensors=n_sensors,
            rng=rng,
            drift_rate=cfg.faults.drift_rate,
            injection_offset=cfg.faults.injection_offset,
        )
    return _fixed_schedule(cfg, rng)


# --------------------------------------------------------------------------
# Cruise plant: Bayesian controller with two redundant velocity sensors.
# --------------------------------------------------------------------------


class _CruiseRun:
    def __init__(
        self,
        cfg: ScenarioConfig,
        run_index: int,
        purpose: int,
        thresholds: ScenarioThresholds | None,
        override_fault: str | None = None,
        override_ft: str | None = None,
    ) -> None:
        self.cfg = cfg
        self.plant_cfg = cfg.cruise
        self.ft = override_ft or cfg.ft
        self.fault = override_fault if override_fault is not None else cfg.fault
        self.thresholds = thresholds
        n = self.plant_cfg.n_sensors
        self.process_rng = _rng(cfg.seed, purpose, run_index, 0)
        self.schedule_rng = _rng(cfg.seed, purpose, run_index, 1)
        self.sensor_rngs = [_rng(cfg.seed, purpose, run_index, 10 + i) for i in range(n)]
        run_cfg = cfg if self.fault == cfg.fault else replace(cfg, fault=self.fault)
        self.schedule = _build_schedule(run_cfg, self.schedule_rng, n)
        self.goal = _goal_spec(cfg)
        self.transition = linear_transition(
            np.array([[self.plant_cfg.decay]]), np.array([[self.plant_cfg.input_gain]])
        )
        self.channels = [identity_channel(f"sensor_{i}", 1) for i in range(n)]
        self.sigma_f = np.array([[max(self.plant_cfg.process_noise_var, 1e-8)]])
        self.sigma_1 = np.array([[cfg.controller.sigma_1]])
        self.sigma_goal = np.array([[cfg.controller.sigma_goal]])
        self.base_precision = 1.0 / max(self.plant_cfg.obs_noise_var, 1e-8)
        prior = GammaBelief(cfg.learning.prior_alpha, cfg.learning.prior_beta)
        self.prior = prior
        self.beliefs = [prior] * n
        self.ef_trackers = [EfFdiTracker() for _ in range(n)]
        self.hold_until = [-math.inf] * n
        self.last_healthy: list[Observation | None] = [None] * n

    def _exclusions(self) -> list[bool]:
        """Threshold exclusions, never silencing the whole sensor suite.

        If every sensor is flagged the least-suspicious one (smallest
        residual-to-threshold ratio) stays admitted, otherwise the estimator
        free-runs and can never re-acquire.
        """
        flags = list(self.ef_excluded if self.ft == "ef-fdi" else self.ser_flags)
        if all(flags):
            scores = self.last_ef if self.ft == "ef-fdi" else self.last_sers
            flags[int(np.argmin(scores))] = False
        return flags

    def sensor_precision(self, i: int, excluded: Sequence[bool]) -> float:
        """Precision fed to the controller, from last step's detections/beliefs."""
        lrn = self.cfg.learning
        if self.ft == "noft":
            return self.base_precision
        if self.ft in ("ser-ft", "ef-fdi"):
            return (
                self.cfg.detection.exclusion_precision
                if excluded[i]
                else self.base_precision
            )
        return _clamp(
            expected_precision(self.beliefs[i]),
            lrn.trust_floor * self.base_precision,
            lrn.trust_cap * self.base_precision,
        )

    def run(self) -> RunResult:
        cfg = self.cfg
        dt = self.plant_cfg.dt
        n = self.plant_cfg.n_sensors
        lrn = cfg.learning
        # The vehicle starts on-reference (already cruising); the benchmark
        # studies fault response, not cold-start acquisition.
        x0 = eval_goal(self.goal, 0.0).copy()
        state = PlantState(x=x0, t=0.0)
        belief = ControllerBelief(
            mu_x=x0.copy(), mu_u=np.zeros(1), x_pred=x0.copy(), x_next=x0.copy()
        )
        self.ser_flags = [False] * n
        self.ef_excluded = [False] * n
        self.last_sers = [0.0] * n
        self.last_ef = [0.0] * n
        detection_warmup = max(cfg.detection.calibration_warmup, 3 * dt)
        timeseries: list[tuple] = []
        residuals: list[ResidualRecord] = []
        belief_log: list[tuple] = []
        sq_belief_err = 0.0
        mae: list[float] = []
        sq_track = 0.0
        diverged = False
        steps_done = 0

        for k in range(cfg.n_steps):
            t = k * dt
            ref = eval_goal(self.goal, t)
            x_hat = belief.x_pred.copy()
            detecting = self.thresholds is not None and t >= detection_warmup
            ys: list[np.ndarray] = []
            efs: list[tuple[float, float]] = []
            labels: list[int] = []
            for i in range(n):
                y_true = plants.observe_cruise(state, i, self.plant_cfg, self.sensor_rngs[i])
                event = self.schedule.active_event(i, t)
                y = faults.corrupt(y_true, event, self.last_healthy[i], t)
                if event is None:
                    self.last_healthy[i] = y_true
                ys.append(y.value)
                ef = self.ef_trackers[i].update(y.value)
                efs.append(ef if ef is not None else (0.0, 0.0))
                labels.append(0 if event is None else 1)
                self.last_ef[i] = efs[i][1]
                # EF statistics need no state estimate, so the hold-out can
                # start on the same step.
                if detecting and detection.detect(efs[i][1], self.thresholds.ef["sensor"]):
                    self.hold_until[i] = t + cfg.detection.ef_hold_time
                self.ef_excluded[i] = t < self.hold_until[i]

            excluded = self._exclusions()
            covs = BCCovariances(
                sigma_f=self.sigma_f,
                sigma_g=tuple(
                    np.array([[1.0 / self.sensor_precision(i, excluded)]])
                    for i in range(n)
                ),
                sigma_1=self.sigma_1,
                sigma_goal=self.sigma_goal,
            )
            result = controllers.bc_step(
                belief, ys, ref, self.transition, self.channels, covs,
                cfg.controller.optimizer,
            )
            belief = result.belief
            u = result.u
            if cfg.controller.prediction == "model":
                belief.x_pred = self.transition.f(result.estimate, u)

            # The detector residual compares y against the fresh posterior
            # mean (||y - x_hat|| = ||y - mu_x||); the conjugate update's
            # known mean is the model prediction, which is independent of
            # this step's observations, so a faulty sensor's full offset
            # lands in its own residual instead of being shared by fusion.
            estimate = result.estimate
            for i in range(n):
                ser = ser_residual(ys[i], estimate)
                self.last_sers[i] = ser
                if detecting:
                    self.ser_flags[i] = detection.detect(
                        ser, self.thresholds.ser["sensor"]
                    )
                do_update = self.ft != "pl-explicit" or self.ser_flags[i]
                # Gamma beliefs stay live under every technique so the beta
                # residual is always logged; only PL techniques feed them
                # back into the controller.
                if do_update:
                    self.beliefs[i] = gamma_update(
                        self.beliefs[i], float(ys[i][0]), float(x_hat[0])
                    )
                self.beliefs[i] = gamma_forget(self.beliefs[i], lrn.forgetting, self.prior)
                residuals.append(
                    ResidualRecord(
                        t=t,
                        sensor_id=i,
                        ser=ser,
                        ef_r=efs[i][0],
                        ef_big_r=efs[i][1],
                        beta=self.beliefs[i].beta,
                        fault_truth=labels[i],
                    )
                )
                belief_log.append(
                    (t, i, 0, self.beliefs[i].alpha, self.beliefs[i].beta,
                     expected_precision(self.beliefs[i]))
                )

            x_true = float(state.x[0])
            x_est = float(estimate[0])
            fault_active = any(labels)
            timeseries.append((t, state.x.copy(), estimate.copy(), ref.copy(),
                               u.copy(), int(fault_active)))
            err_belief = x_est - x_true
            sq_belief_err += err_belief * err_belief
            track_err = abs(x_true - float(ref[0]))
            mae.append(track_err)
            sq_track += track_err * track_err
            steps_done = k + 1
            if not (np.all(np.isfinite(estimate)) and np.all(np.isfinite(u))
                    and abs(x_est) < _DIVERGENCE_LIMIT):
                diverged = True
                break
            state = plants.step_cruise(state, float(u[0]), self.plant_cfg, self.process_rng)

        n_steps = max(steps_done, 1)
        metrics = RunMetrics(
            mse_belief=sq_belief_err / n_steps,
            mse_belief_components=np.array([sq_belief_err / n_steps]),
            mae_series=np.array(mae),
            rmse_tracking=math.sqrt(sq_track / n_steps),
            diverged=diverged,
        )
        faulty = tuple(sorted({e.sensor_id for e in self.schedule.events}))
        return RunResult(
            metrics=metrics,
            timeseries=timeseries,
            residuals=residuals,
            belief_log=belief_log,
            faulty_components=faulty,
            n_fault_events=len(self.schedule.events),
        )


# --------------------------------------------------------------------------
# Manipulator: active-inference controller with elementwise precision learning.
# --------------------------------------------------------------------------

_MANIP_CHANNEL_KEYS = ("pos", "vel", "cam")


class _ManipulatorRun:
    def __init__(
        self,
        cfg: ScenarioConfig,
        run_index: int,
        purpose: int,
        thresholds: ScenarioThresholds | None,
        override_fault: str | None = None,
        override_ft: str | None = None,
    ) -> None:
        self.cfg = cfg
        self.plant_cfg = cfg.manipulator
        self.ft = override_ft or cfg.ft
        self.fault = override_fault if override_fault is not None else cfg.fault
        self.thresholds = thresholds
        nj = self.plant_cfg.n_joints
        self.nj = nj
        self.process_rng = _rng(cfg.seed, purpose, run_index, 0)
        self.schedule_rng = _rng(cfg.seed, purpose, run_index, 1)
        self.sensor_rngs = {
            "pos": _rng(cfg.seed, purpose, run_index, 10),
            "vel": _rng(cfg.seed, purpose, run_index, 11),
            "cam": _rng(cfg.seed, purpose, run_index, 12),
        }
        run_cfg = cfg if self.fault == cfg.fault else replace(cfg, fault=self.fault)
        # The fault surface is joint 1 of the position encoder (sensor id 0
        # in the schedule); the runner applies it to that component only.
        self.schedule = _build_schedule(run_cfg, self.schedule_rng, n_sensors=1)
        k1, k2, k3 = self.plant_cfg.distortion
        h_pos = np.hstack([np.eye(nj), np.zeros((nj, nj))])
        h_vel = np.hstack([np.zeros((nj, nj)), np.eye(nj)])
        self.channels = [
            linear_channel("pos", h_pos),
            linear_channel("vel", h_vel),
            SensorChannel(
                name="cam",
                g=lambda x: barrel_distort(x[:nj], k1, k2, k3),
                jacobian=lambda x: np.hstack(
                    [barrel_distort_jacobian(x[:nj], k1, k2, k3), np.zeros((nj, nj))]
                ),
            ),
        ]
        self.gain = np.hstack(
            [cfg.controller.gain * np.eye(nj), cfg.controller.gain * np.eye(nj)]
        )
        self.p_x = np.eye(2 * nj) / cfg.controller.sigma_1
        self.p_u = np.eye(nj) * cfg.controller.p_u
        lrn = cfg.learning
        sigmas = {
            "pos": self.plant_cfg.encoder_pos_sigma,
            "vel": self.plant_cfg.encoder_vel_sigma,
            "cam": self.plant_cfg.camera_sigma,
        }
        # Per-channel priors anchor each component's expected precision at
        # the nominal sensor precision, capped so no modality drowns out
        # the others.
        self.priors: dict[str, GammaBelief] = {}
        self.beliefs: dict[str, list[GammaBelief]] = {}
        self.nominal: dict[str, float] = {}
        for key, sigma in sigmas.items():
            nominal = min(1.0 / max(sigma * sigma, 1e-12), lrn.nominal_cap)
            self.nominal[key] = nominal
            prior = GammaBelief(lrn.prior_alpha, lrn.prior_alpha / nominal)
            self.priors[key] = prior
            self.beliefs[key] = [prior] * nj
        self.ef_trackers = {key: EfFdiTracker() for key in _MANIP_CHANNEL_KEYS}
        self.hold_until = {key: -math.inf for key in _MANIP_CHANNEL_KEYS}
        self.last_healthy_pos: Observation | None = None
        self.guard = controllers.DivergenceGuard()

    def _target(self, t: float) -> np.ndarray:
        task = self.cfg.task
        target = task.target_1 if t < task.switch_time else task.target_2
        return np.asarray(target, dtype=float)

    def _exclusions(self) -> dict[str, bool]:
        """Threshold exclusions, keeping the least-suspicious channel admitted."""
        flags = dict(self.ef_excluded if self.ft == "ef-fdi" else self.ser_flags)
        if all(flags.values()):
            ratios = {
                key: self.last_ratio.get(key, math.inf) for key in _MANIP_CHANNEL_KEYS
            }
            flags[min(ratios, key=ratios.get)] = False
        return flags

    def channel_precisions(self) -> list[np.ndarray]:
        """Per-channel precision matrices from last step's detections/beliefs."""
        lrn = self.cfg.learning
        excluded = self._exclusions() if self.ft in ("ser-ft", "ef-fdi") else {}
        out = []
        for key in _MANIP_CHANNEL_KEYS:
            nominal = self.nominal[key]
            if self.ft in ("noft", "ser-ft", "ef-fdi"):
                diag = np.full(self.nj, nominal)
                if self.ft in ("ser-ft", "ef-fdi") and excluded[key]:
                    diag = np.full(self.nj, self.cfg.detection.exclusion_precision)
            else:
                diag = np.array(
                    [
                        _clamp(
                            expected_precision(b),
                            lrn.trust_floor * nominal,
                            lrn.trust_cap * nominal,
                        )
                        for b in self.beliefs[key]
                    ]
                )
            out.append(np.diag(diag))
        return out

    def run(self) -> RunResult:
        cfg = self.cfg
        dt = self.plant_cfg.dt
        nj = self.nj
        lrn = cfg.learning
        state = PlantState(x=np.zeros(2 * nj), t=0.0)
        belief = ControllerBelief(
            mu_x=np.zeros(2 * nj), mu_u=np.zeros(nj), x_pred=np.zeros(2 * nj)
        )
        self.ser_flags = {key: False for key in _MANIP_CHANNEL_KEYS}
        self.ef_excluded = {key: False for key in _MANIP_CHANNEL_KEYS}
        self.last_ratio = {key: 0.0 for key in _MANIP_CHANNEL_KEYS}
        detection_warmup = max(cfg.detection.calibration_warmup, 3 * dt)
        timeseries: list[tuple] = []
        residuals: list[ResidualRecord] = []
        belief_log: list[tuple] = []
        sq_belief = np.zeros(nj)
        mae: list[float] = []
        sq_track = 0.0
        diverged = False
        steps_done = 0

        for k in range(cfg.n_steps):
            t = k * dt
            target = self._target(t)
            mu_d = np.concatenate([target, np.zeros(nj)])
            obs: dict[str, Observation] = {
                "pos": plants.observe_manipulator(
                    state, plants.ManipulatorSensor.POS_ENCODER, self.plant_cfg,
                    self.sensor_rngs["pos"],
                ),
                "vel": plants.observe_manipulator(
                    state, plants.ManipulatorSensor.VEL_ENCODER, self.plant_cfg,
                    self.sensor_rngs["vel"],
                ),
                "cam": plants.observe_manipulator(
                    state, plants.ManipulatorSensor.CAMERA, self.plant_cfg,
                    self.sensor_rngs["cam"],
                ),
            }
            event = self.schedule.active_event(0, t)
            if event is not None and self.last_healthy_pos is not None:
                slice_true = Observation(0, obs["pos"].value[0:1], t=t)
                slice_healthy = Observation(0, self.last_healthy_pos.value[0:1], t=t)
                corrupted = faults.corrupt(slice_true, event, slice_healthy, t)
                patched = obs["pos"].value.copy()
                patched[0] = corrupted.value[0]
                obs["pos"] = Observation(0, patched, t=t)
            if event is None:
                self.last_healthy_pos = obs["pos"]

            detecting = self.thresholds is not None and t >= detection_warmup
            efs: dict[str, tuple[float, float]] = {}
            for key in _MANIP_CHANNEL_KEYS:
                ef = self.ef_trackers[key].update(obs[key].value)
                efs[key] = ef if ef is not None else (0.0, 0.0)
                if detecting and detection.detect(efs[key][1], self.thresholds.ef[key]):
                    self.hold_until[key] = t + cfg.detection.ef_hold_time
                self.ef_excluded[key] = t < self.hold_until[key]
                if self.ft == "ef-fdi" and self.thresholds is not None:
                    self.last_ratio[key] = efs[key][1] / (
                        self.thresholds.ef[key].value + 1e-300
                    )

            precisions = PrecisionSet(
                p_y=tuple(self.channel_precisions()),
                p_x=self.p_x,
                p_u=self.p_u,
            )
            step = controllers.uaic_step(
                belief,
                [obs[key].value for key in _MANIP_CHANNEL_KEYS],
                self.channels,
                precisions,
                mu_d,
                self.gain,
                kappa_x=cfg.controller.kappa_x,
                kappa_u=cfg.controller.kappa_u,
                n_updates=cfg.controller.uaic_updates,
            )
            belief = step.belief
            u = step.u
            unstable = self.guard.update(step.f_value)

            # Residuals and precision learning against the fresh belief.
            for idx, key in enumerate(_MANIP_CHANNEL_KEYS):
                predicted = np.atleast_1d(self.channels[idx].g(belief.mu_x))
                ser = ser_residual(obs[key].value, predicted)
                if detecting:
                    self.ser_flags[key] = detection.detect(ser, self.thresholds.ser[key])
                    if self.ft == "ser-ft":
                        self.last_ratio[key] = ser / (
                            self.thresholds.ser[key].value + 1e-300
                        )
                do_update = self.ft != "pl-explicit" or self.ser_flags[key]
                updated = []
                for j in range(nj):
                    b = self.beliefs[key][j]
                    if do_update:
                        b = gamma_update(b, float(obs[key].value[j]), float(predicted[j]))
                    updated.append(gamma_forget(b, lrn.forgetting, self.priors[key]))
                self.beliefs[key] = updated

                label = 1 if (key == "pos" and event is not None) else 0
                residuals.append(
                    ResidualRecord(
                        t=t,
                        sensor_id=idx,
                        ser=ser,
                        ef_r=efs[key][0],
                        ef_big_r=efs[key][1],
                        beta=max(b.beta for b in self.beliefs[key]),
                        fault_truth=label,
                    )
                )
                for j in range(nj):
                    b = self.beliefs[key][j]
                    belief_log.append((t, idx, j, b.alpha, b.beta, expected_precision(b)))

            q_true = state.x[:nj]
            q_est = belief.mu_x[:nj]
            fault_active = event is not None
            timeseries.append((t, state.x.copy(), belief.mu_x.copy(),
                               target.copy(), u.copy(), int(fault_active)))
            sq_belief += (q_est - q_true) ** 2
            track = float(np.mean(np.abs(q_true - target)))
            mae.append(track)
            sq_track += float(np.mean((q_true - target) ** 2))
            steps_done = k + 1
            if unstable or not (
                np.all(np.isfinite(belief.mu_x))
                and np.all(np.isfinite(u))
                and np.max(np.abs(belief.mu_x)) < _DIVERGENCE_LIMIT
                and np.max(np.abs(state.x)) < _DIVERGENCE_LIMIT
            ):
                diverged = True
                break
            state = plants.step_manipulator(state, u, self.plant_cfg, self.process_rng)

        n_steps = max(steps_done, 1)
        per_joint = sq_belief / n_steps
        faulty = (0,) if self.schedule.events else ()
        metrics = RunMetrics(
            mse_belief=float(np.mean(per_joint)),
            mse_belief_components=per_joint,
            mae_series=np.array(mae),
            rmse_tracking=math.sqrt(sq_track / n_steps),
            diverged=diverged,
        )
        return RunResult(
            metrics=metrics,
            timeseries=timeseries,
            residuals=residuals,
            belief_log=belief_log,
            faulty_components=faulty,
            n_fault_events=len(self.schedule.events),
        )


def _make_run(
    cfg: ScenarioConfig,
    run_index: int,
    purpose: int,
    thresholds: ScenarioThresholds | None,
    override_fault: str | None = None,
    override_ft: str | None = None,
):
    runner_cls = _CruiseRun if cfg.plant == "cruise" else _ManipulatorRun
    return runner_cls(cfg, run_index, purpose, thresholds, override_fault, override_ft)


def calibrate_thresholds(cfg: ScenarioConfig) -> ScenarioThresholds:
    """Learn SER/EF thresholds from a healthy offline run of the scenario."""
    runner = _make_run(
        cfg, run_index=0, purpose=_PURPOSE_CALIBRATION, thresholds=None,
        override_fault="none", override_ft="noft",
    )
    result = runner.run()
    if cfg.plant == "cruise":
        keys = {"sensor": list(range(cfg.cruise.n_sensors))}
    else:
        keys = {key: [idx] for idx, key in enumerate(_MANIP_CHANNEL_KEYS)}
    ser: dict[str, Threshold] = {}
    ef: dict[str, Threshold] = {}
    confidence = cfg.detection.confidence
    warmup = max(cfg.detection.calibration_warmup, 3 * cfg.dt)
    for key, sensor_ids in keys.items():
        usable = [r for r in result.residuals if r.sensor_id in sensor_ids and r.t >= warmup]
        ser[key] = detection.learn_threshold([r.ser for r in usable], confidence)
        ef[key] = detection.learn_threshold([r.ef_big_r for r in usable], confidence)
    return ScenarioThresholds(ser=ser, ef=ef)


def _needs_thresholds(ft: str) -> bool:
    return ft in ("ser-ft", "ef-fdi", "pl-explicit")


def run_scenario(
    cfg: ScenarioConfig,
    run_index: int = 0,
    thresholds: ScenarioThresholds | None = None,
) -> RunResult:
    """One closed-loop run of the configured scenario."""
    if thresholds is None and _needs_thresholds(cfg.ft):
        thresholds = calibrate_thresholds(cfg)
    runner = _make_run(cfg, run_index, _PURPOSE_RUN, thresholds)
    return runner.run()


def run_ensemble(cfg: ScenarioConfig, n: int | None = None) -> EnsembleResult:
    """Independent runs with per-run random streams, plus aggregates."""
    n = cfg.runs if n is None else n
    if n < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {n}")
    thresholds = calibrate_thresholds(cfg) if _needs_thresholds(cfg.ft) else None
    runs = [run_scenario(cfg, run_index=i, thresholds=thresholds) for i in range(n)]
    rmses = [r.metrics.rmse_tracking for r in runs]
    length = min(len(r.metrics.mae_series) for r in runs)
    stacked = np.stack([r.metrics.mae_series[:length] for r in runs])
    mean_rmse = float(np.mean(rmses))
    std_rmse = float(np.std(rmses, ddof=1)) if n > 1 else 0.0
    return EnsembleResult(
        runs=runs,
        mean_rmse=mean_rmse,
        std_rmse=std_rmse,
        mean_mse_belief=float(np.mean([r.metrics.mse_belief for r in runs])),
        ensemble_mae=stacked.mean(axis=0),
        any_diverged=any(r.metrics.diverged for r in runs),
    )


@dataclass(frozen=True)
class MeritTable:
    """Signed significant-win counts between techniques across scenarios."""

    techniques: tuple[str, ...]
    pairwise: np.ndarray
    total_merit: dict[str, int]
    n_scenarios: int

    def __post_init__(self) -> None:
        p = np.asarray(self.pairwise, dtype=int)
        object.__setattr__(self, "pairwise", p)
        m = len(self.techniques)
        if p.shape != (m, m):
            raise ValueError(f"pairwise must be {m}x{m}")
        if np.any(np.diag(p) != 0):
            raise ValueError("pairwise diagonal must be zero")
        if np.any(p != -p.T):
            raise ValueError("pairwise matrix must be antisymmetric")
        if np.any(np.abs(p) > self.n_scenarios):
            raise ValueError("cells cannot exceed the scenario count")


def merit_scenarios() -> list[tuple[str, str]]:
    """The 9 (fault kind, trajectory) combinations of the cruise benchmark."""
    return [(f, tr) for f in ("freeze", "drift", "injection") for tr in TRAJECTORIES]


def merit_table(
    samples: dict[str, dict[tuple[str, str], list[float]]],
    alpha: float = 0.05,
    techniques: Sequence[str] = MERIT_TECHNIQUES,
) -> MeritTable:
    """Pairwise significant-win counts: +1 per scenario where the column
    technique's tracking error is significantly lower than the row's."""
    scenario_keys: set[tuple[str, str]] | None = None
    for tech in techniques:
        if tech not in samples:
            raise ValueError(f"missing results for technique {tech!r}")
        keys = set(samples[tech])
        if scenario_keys is None:
            scenario_keys = keys
        elif keys != scenario_keys:
            raise ValueError("techniques cover different scenario sets")
    assert scenario_keys is not None
    m = len(techniques)
    pairwise = np.zeros((m, m), dtype=int)
    for row_i, row_tech in enumerate(techniques):
        for col_i, col_tech in enumerate(techniques):
            if col_i <= row_i:
                continue
            cell = 0
            for key in sorted(scenario_keys):
                res = welch_t_test(samples[row_tech][key], samples[col_tech][key], alpha)
                if res.significant:
                    # Positive t means the row technique tracked worse
                    # (higher error), a win for the column technique.
                    cell += 1 if res.t > 0 else -1
            pairwise[row_i, col_i] = cell
            pairwise[col_i, row_i] = -cell
    totals = {
        tech: int(pairwise[:, i].sum()) for i, tech in enumerate(techniques)
    }
    return MeritTable(
        techniques=tuple(techniques),
        pairwise=pairwise,
        total_merit=totals,
        n_scenarios=len(scenario_keys),
    )


def run_merit(
    cfg: ScenarioConfig,
    techniques: Sequence[str] = MERIT_TECHNIQUES,
    alpha: float = 0.05,
) -> tuple[MeritTable, dict[str, dict[tuple[str, str], list[float]]], bool]:
    """Run the full scenario x technique grid and build the merit table."""
    samples: dict[str, dict[tuple[str, str], list[float]]] = {}
    any_diverged = False
    for tech in techniques:
        samples[tech] = {}
        for fault_kind, trajectory in merit_scenarios():
            scen_cfg = replace(cfg, plant="cruise", ft=tech, fault=fault_kind,
                               trajectory=trajectory)
            ens = run_ensemble(scen_cfg)
            any_diverged = any_diverged or ens.any_diverged
            samples[tech][(fault_kind, trajectory)] = [
                r.metrics.rmse_tracking for r in ens.runs
            ]
    return merit_table(samples, alpha, techniques), samples, any_diverged


# --------------------------------------------------------------------------
# Residual corpus generation and evaluation.
# --------------------------------------------------------------------------


@dataclass
class Corpus:
    """Residual records over many Poisson-fault cruise runs.

    Timestamps are global (run r is offset by r * horizon) so an 80/20 split
    at `split_t` separates time-contiguous blocks.
    """

    records: list[ResidualRecord]
    split_t: float
    n_fault_events: int
    n_steps: int
    any_diverged: bool

    def train_test(self) -> tuple[list[ResidualRecord], list[ResidualRecord]]:
        train = [r for r in self.records if r.t < self.split_t]
        test = [r for r in self.records if r.t >= self.split_t]
        return train, test


def default_corpus_config(seed: int = 0) -> ScenarioConfig:
    """Desk-scale corpus profile: 20 cruise runs x 32 s at dt=0.02 (32k steps)."""
    return ScenarioConfig(
        plant="cruise",
        ft="pl-implicit",
        fault="poisson",
        trajectory="constant",
        horizon=32.0,
        seed=seed,
        runs=20,
    )


def generate_corpus(cfg: ScenarioConfig) -> Corpus:
    """Run Poisson-fault cruise scenarios under PL and collect residuals.

    The reference trajectory cycles through constant/ramp/sinusoid across
    runs so every fault kind is exercised against every trajectory shape.
    """
    if cfg.plant != "cruise":
        raise ConfigError("residual corpora are generated on the cruise plant")
    cfg = replace(cfg, fault="poisson", ft="pl-implicit")
    records: list[ResidualRecord] = []
    n_faults = 0
    any_diverged = False
    warmup = max(cfg.detection.calibration_warmup, 3 * cfg.dt)
    for run_index in range(cfg.runs):
        run_cfg = replace(cfg, trajectory=TRAJECTORIES[run_index % len(TRAJECTORIES)])
        result = run_scenario(run_cfg, run_index=run_index)
        offset = run_index * cfg.horizon
        for rec in result.residuals:
            # Drop EF warm-up and controller lock-on rows.
            if rec.t < warmup:
                continue
            records.append(dataclasses.replace(rec, t=rec.t + offset))
        n_faults += result.n_fault_events
        any_diverged = any_diverged or result.metrics.diverged
    total_t = cfg.runs * cfg.horizon
    return Corpus(
        records=records,
        split_t=0.8 * total_t,
        n_fault_events=n_faults,
        n_steps=cfg.runs * cfg.n_steps,
        any_diverged=any_diverged,
    )


@dataclass
class ResidualEvaluation:
    auc_ser: float
    auc_beta: float
    roc_ser: detection.RocResult
    roc_beta: detection.RocResult
    model_ser: detection.LogisticModel
    model_beta: detection.LogisticModel


def _fit_and_score(
    train: Sequence[ResidualRecord],
    test: Sequence[ResidualRecord],
    feature: str,
) -> tuple[float, detection.RocResult, detection.LogisticModel]:
    getter = {"ser": lambda r: r.ser, "beta": lambda r: r.beta}[feature]
    model = detection.fit_logistic(
        [getter(r) for r in train], [r.fault_truth for r in train]
    )
    scores = detection.predict_prob(model, np.array([getter(r) for r in test]))
    roc = detection.roc_auc(scores, [r.fault_truth for r in test])
    return roc.auc, roc, model


def evaluate_residuals(corpus: Corpus) -> ResidualEvaluation:
    """Fit one logistic model per residual type on the training block and
    report test-set ROC/AUC."""
    train, test = corpus.train_test()
    if not train or not test:
        raise ValueError("corpus must contain both train and test blocks")
    auc_ser, roc_ser, model_ser = _fit_and_score(train, test, "ser")
    auc_beta, roc_beta, model_beta = _fit_and_score(train, test, "beta")
    return ResidualEvaluation(
        auc_ser=auc_ser,
        auc_beta=auc_beta,
        roc_ser=roc_ser,
        roc_beta=roc_beta,
        model_ser=model_ser,
        model_beta=model_beta,
    )
