"""Sensor-fault modeling and Poisson fault-schedule generation.

Faults are freezes (hold last healthy reading), linear drifts, or constant
injections.  Schedules alternate exponential healthy gaps (mean = MTTF) and
fault durations (mean = MTTR) independently per sensor, so fault onsets are
Poisson-distributed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .plants import Observation

__all__ = [
    "Freeze",
    "Drift",
    "Injection",
    "FaultKind",
    "FaultEvent",
    "FaultSchedule",
    "generate_schedule",
    "corrupt",
    "truth_labels",
]


@dataclass(frozen=True)
class Freeze:
    """Sensor output holds the last pre-fault reading."""


@dataclass(frozen=True)
class Drift:
    """Sensor output ramps away linearly at `rate` units/s from fault onset."""

    rate: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.rate):
            raise ValueError(f"drift rate must be finite, got {self.rate}")


@dataclass(frozen=True)
class Injection:
    """Sensor output is shifted by a constant `offset` in sensor units."""

    offset: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.offset):
            raise ValueError(f"injection offset must be finite, got {self.offset}")


FaultKind = Freeze | Drift | Injection

_KIND_NAMES = {Freeze: "freeze", Drift: "drift", Injection: "injection"}


def _kind_to_dict(kind: FaultKind) -> dict:
    d: dict = {"kind": _KIND_NAMES[type(kind)]}
    if isinstance(kind, Drift):
        d["rate"] = kind.rate
    elif isinstance(kind, Injection):
        d["offset"] = kind.offset
    return d


def _kind_from_dict(d: dict) -> FaultKind:
    name = d["kind"]
    if name == "freeze":
        return Freeze()
    if name == "drift":
        return Drift(rate=float(d["rate"]))
    if name == "injection":
        return Injection(offset=float(d["offset"]))
    raise ValueError(f"unknown fault kind {name!r}")


@dataclass(frozen=True)
class FaultEvent:
    """One fault on one sensor over the half-open window [start, start+duration)."""

    sensor_id: int
    kind: FaultKind
    start: float
    duration: float

    def __post_init__(self) -> None:
        if self.start < 0.0:
            raise ValueError(f"start must be >= 0, got {self.start}")
        if self.duration <= 0.0:
            raise ValueError(f"duration must be positive, got {self.duration}")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class FaultSchedule:
    """Per-sensor non-overlapping fault events over [0, horizon), sorted by start."""

    events: tuple[FaultEvent, ...]
    horizon: float

    def __post_init__(self) -> None:
        events = tuple(sorted(self.events, key=lambda e: (e.start, e.sensor_id)))
        object.__setattr__(self, "events", events)
        last_end: dict[int, float] = {}
        for event in events:
            if event.start < last_end.get(event.sensor_id, 0.0):
                raise ValueError(
                    f"overlapping events on sensor {event.sensor_id} at t={event.start}"
                )
            last_end[event.sensor_id] = event.end

    def active_event(self, sensor_id: int, t: float) -> FaultEvent | None:
        """The event covering time t on the given sensor, if any."""
        for event in self.events:
            if event.sensor_id != sensor_id:
                continue
            if event.start > t:
                break
            if event.active(t):
                return event
        return None

    def for_sensor(self, sensor_id: int) -> tuple[FaultEvent, ...]:
        return tuple(e for e in self.events if e.sensor_id == sensor_id)

    def to_json(self) -> str:
        payload = {
            "horizon": self.horizon,
            "events": [
                {
                    "sensor_id": e.sensor_id,
                    "start": e.start,
                    "duration": e.duration,
                    **_kind_to_dict(e.kind),
                }
                for e in self.events
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FaultSchedule":
        payload = json.loads(text)
        events = tuple(
            FaultEvent(
                sensor_id=int(e["sensor_id"]),
                kind=_kind_from_dict(e),
                start=float(e["start"]),
                duration=float(e["duration"]),
            )
            for e in payload["events"]
        )
        return cls(events=events, horizon=float(payload["horizon"]))


def generate_schedule(
    mttf: float,
    mttr: float,
    horizon: float,
    n_sensors: int,
    rng: np.random.Generator,
    drift_rate: float = 2.0,
    injection_offset: float = 5.0,
) -> FaultSchedule:
    """Draw a fault schedule with exponential gaps and durations.

    Per sensor, healthy gaps are Exp(mean=mttf) and fault durations
    Exp(mean=mttr); sensors are independent, so simultaneous faults on
    distinct sensors can occur.  Each fault's kind is drawn uniformly from
    the three kinds; drift/injection magnitudes use the given values with a
    uniformly random sign.
    """
    if mttf <= 0.0 or mttr <= 0.0:
        raise ValueError("mttf and mttr must be positive")
    if horizon < 0.0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    events: list[FaultEvent] = []
    for sensor_id in range(n_sensors):
        t = 0.0
        while True:
            t += rng.exponential(mttf)
            if t >= horizon:
                break
            duration = rng.exponential(mttr)
            kind_idx = int(rng.integers(3))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            kind: FaultKind
            if kind_idx == 0:
                kind = Freeze()
            elif kind_idx == 1:
                kind = Drift(rate=sign * drift_rate)
            else:
                kind = Injection(offset=sign * injection_offset)
            events.append(
                FaultEvent(sensor_id=sensor_id, kind=kind, start=t, duration=duration)
            )
            t += duration
    return FaultSchedule(events=tuple(events), horizon=horizon)


def corrupt(
    y_true: Observation,
    event: FaultEvent | None,
    last_healthy: Observation | None,
    t: float,
) -> Observation:
    """Apply a fault to a true observation.

    Freeze replays the last healthy reading, Drift adds rate*(t - start),
    Injection adds a constant offset; with no event the observation passes
    through unchanged.
    """
    if event is None:
        return y_true
    if isinstance(event.kind, Freeze):
        if last_healthy is None:
            raise ValueError("freeze fault needs a last healthy observation")
        return Observation(
            sensor_id=y_true.sensor_id, value=last_healthy.value.copy(), t=y_true.t
        )
    if isinstance(event.kind, Drift):
        return Observation(
            sensor_id=y_true.sensor_id,
            value=y_true.value + event.kind.rate * (t - event.start),
            t=y_true.t,
        )
    return Observation(
        sensor_id=y_true.sensor_id, value=y_true.value + event.kind.offset, t=y_true.t
    )


def truth_labels(
    schedule: FaultSchedule, sensor_id: int, times: Sequence[float]
) -> list[int]:
    """Binary ground-truth fault labels for a sensor at sorted query times."""
    events = schedule.for_sensor(sensor_id)
    labels: list[int] = []
    idx = 0
    for t in times:
        while idx < len(events) and events[idx].end <= t:
            idx += 1
        labels.append(1 if idx < len(events) and events[idx].active(t) else 0)
    return labels
